//! Wengert tape over tensor-valued nodes.
//!
//! Nodes are appended in evaluation order, so a node's inputs always have
//! smaller ids and a single reverse pass over the node list is a valid
//! topological sweep.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, gemm_nt_acc, gemm_tn_acc, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, T),
    Softmax(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Vec<T>, rstd: Vec<T> },
    Relu(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows { a: NodeId, start: usize },
    SliceCols { a: NodeId, start: usize },
    Mean(NodeId),
    Sum(NodeId),
    Square(NodeId),
    /// Elementwise product with a constant mask (dropout).
    Mask { a: NodeId, mask: Vec<T> },
    /// Scalar function of one input with a precomputed local gradient.
    ScalarFn { input: NodeId, grad: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar w.r.t. every variable leaf reached by the sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a variable leaf, `None` if the loss does not depend on it.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Leaf that receives a gradient (parameters, or inputs under test).
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let out = tensor::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.linear(a, b, None)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", format!("{:?} + {:?}", va.shape(), vb.shape())));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let out = self.value(a).map(|v| v * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, -T::one());
        self.add(a, nb)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let out = tensor::softmax_rows(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: T) -> Result<NodeId> {
        let vx = self.value(x);
        let (n, d) = vx.dims2("layer_norm")?;
        let (vg, vb) = (self.value(gain), self.value(bias));
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(Error::shape("layer_norm", format!("gain/bias for width {d}")));
        }
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            let row = vx.row(i);
            let (mean, r) = tensor::row_moments(row, eps);
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let out = Tensor::matrix(n, d, out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|v| v.max(T::zero()));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let (_, c) = self.value(*first).dims2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            let (r, pc) = v.dims2("concat_rows")?;
            if pc != c {
                return Err(Error::shape("concat_rows", format!("width {pc} vs {c}")));
            }
            rows += r;
            data.extend_from_slice(v.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(rows, c, data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let (r, _) = self.value(*first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2("concat_cols")?;
            if pr != r {
                return Err(Error::shape("concat_cols", format!("height {pr} vs {r}")));
            }
            widths.push(pc);
        }
        let c: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(r, c, data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = self.value(a);
        let (r, c) = v.dims2("slice_rows")?;
        if start >= end || end > r {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {r} rows")));
        }
        let out = Tensor::matrix(end - start, c, v.data()[start * c..end * c].to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceRows { a, start }, rg))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = self.value(a);
        let (r, c) = v.dims2("slice_cols")?;
        if start >= end || end > c {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {c} cols")));
        }
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&v.row(i)[start..end]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(r, end - start, data)?, Op::SliceCols { a, start }, rg))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let m = v.data().iter().copied().sum::<T>() / T::of(v.len() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|v| v * v);
        let rg = self.rg(a);
        self.push(out, Op::Square(a), rg)
    }

    /// Multiplies elementwise by a fixed mask; used for dropout.
    pub fn mask(&mut self, a: NodeId, mask: Vec<T>) -> Result<NodeId> {
        let v = self.value(a);
        if mask.len() != v.len() {
            return Err(Error::shape("mask", format!("{} mask values for {} elements", mask.len(), v.len())));
        }
        let data = v.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Mask { a, mask }, rg))
    }

    /// Records a scalar `value = f(input)` whose gradient `grad = ∂f/∂input`
    /// was computed outside the tape.
    pub fn scalar_fn(&mut self, input: NodeId, value: T, grad: Vec<T>) -> Result<NodeId> {
        if grad.len() != self.value(input).len() {
            return Err(Error::shape("scalar_fn", "gradient length differs from input"));
        }
        let rg = self.rg(input);
        Ok(self.push(Tensor::scalar(value), Op::ScalarFn { input, grad }, rg))
    }

    /// Multi-step composite: `softmax(Q·Kᵀ/√d + mask)·V`. Returns the output
    /// node and the attention-weight node.
    pub fn scaled_dot_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        mask: Option<NodeId>,
    ) -> Result<(NodeId, NodeId)> {
        let (_, d) = self.value(q).dims2("attention")?;
        if d == 0 {
            return Err(Error::shape("attention", "zero head width"));
        }
        let kt = self.transpose(k)?;
        let logits = self.matmul(q, kt)?;
        let mut logits = self.scale(logits, T::one() / T::of(d as f64).sqrt());
        if let Some(m) = mask {
            logits = self.add(logits, m)?;
        }
        let weights = self.softmax_rows(logits)?;
        let out = self.matmul(weights, v)?;
        Ok((out, weights))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !(matches!(n.op, Op::Leaf) && n.requires_grad) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let vx = self.value(*x);
                let vw = self.value(*w);
                let (n, k) = vx.dims2("linear")?;
                let (_, m) = vw.dims2("linear")?;
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); n * k];
                    gemm_nt_acc(gd, vw.data(), &mut dx, n, m, k);
                    self.accumulate(grads, *x, dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); k * m];
                    gemm_tn_acc(vx.data(), gd, &mut dw, n, k, m);
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let mut db = vec![T::zero(); m];
                    for row in gd.chunks(m) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, b, db);
                }
            }
            Op::Transpose(a) => {
                let t = g.transpose()?;
                self.accumulate(grads, *a, t.into_data());
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, gd.to_vec());
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, gd.to_vec());
                }
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, gd.iter().map(|&v| v * *s).collect());
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let (_, m) = y.dims2("softmax_rows")?;
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.data().chunks(m).zip(gd.chunks(m)).zip(dx.chunks_mut(m)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let vg = self.value(*gain).data();
                let d = vg.len();
                let nf = T::of(d as f64);
                if self.rg(*gain) {
                    let mut dg = vec![T::zero(); d];
                    for (gr, hr) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                }
                if self.rg(*bias) {
                    let mut db = vec![T::zero(); d];
                    for gr in gd.chunks(d) {
                        for j in 0..d {
                            db[j] += gr[j];
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); gd.len()];
                    for (i, (gr, hr)) in gd.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * vg[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        for j in 0..d {
                            let dh = gr[j] * vg[j];
                            dx[i * d + j] = rstd[i] * (dh - s1 / nf - hr[j] * s2 / nf);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Relu(a) => {
                let vx = self.value(*a).data();
                let dx = gd.iter().zip(vx).map(|(&g, &x)| if x > T::zero() { g } else { T::zero() }).collect();
                self.accumulate(grads, *a, dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.rg(p) {
                        self.accumulate(grads, p, gd[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, c) = node.value.dims2("concat_cols")?;
                let mut col = 0;
                for &p in parts {
                    let (_, pc) = self.value(p).dims2("concat_cols")?;
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(r * pc);
                        for i in 0..r {
                            dp.extend_from_slice(&gd[i * c + col..i * c + col + pc]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    col += pc;
                }
            }
            Op::SliceRows { a, start } => {
                let (_, c) = node.value.dims2("slice_rows")?;
                let mut da = vec![T::zero(); self.value(*a).len()];
                da[start * c..start * c + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *a, da);
            }
            Op::SliceCols { a, start } => {
                let (r, w) = node.value.dims2("slice_cols")?;
                let (_, c) = self.value(*a).dims2("slice_cols")?;
                let mut da = vec![T::zero(); r * c];
                for i in 0..r {
                    da[i * c + start..i * c + start + w].copy_from_slice(&gd[i * w..(i + 1) * w]);
                }
                self.accumulate(grads, *a, da);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let v = gd[0] / T::of(n as f64);
                self.accumulate(grads, *a, vec![v; n]);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![gd[0]; n]);
            }
            Op::Square(a) => {
                let vx = self.value(*a).data();
                let two = T::of(2.0);
                self.accumulate(grads, *a, gd.iter().zip(vx).map(|(&g, &x)| two * x * g).collect());
            }
            Op::Mask { a, mask } => {
                self.accumulate(grads, *a, gd.iter().zip(mask).map(|(&g, &m)| g * m).collect());
            }
            Op::ScalarFn { input, grad } => {
                let s = gd[0];
                self.accumulate(grads, *input, grad.iter().map(|&v| v * s).collect());
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Vec<T>) {
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta) {
                    *e += d;
                }
            }
            slot @ None => {
                let shape = self.value(id).shape().to_vec();
                *slot = Some(Tensor::new(shape, delta).expect("gradient matches node shape"));
            }
        }
    }
}
