//! Dual-attention regressor.
//!
//! Each sEMG channel's envelope window is cut into patches and encoded by a
//! stack of pre-norm self-attention blocks shared across channels. The first
//! block attends within a local band of neighbouring patches, later blocks
//! attend globally. The token sets of all channels form a memory that learned
//! output queries read through cross-attention blocks; a linear head maps each
//! query to one deformation sample.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, NodeId, Tape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub channels: usize,
    pub tokens: usize,
    pub patch_len: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff: usize,
    pub n_self: usize,
    pub n_cross: usize,
    pub t_out: usize,
    pub dropout: f64,
    /// Half-width of the banded first encoder layer, in tokens.
    pub local_band: usize,
    /// `false` replaces cross-attention fusion by mean pooling and a linear head.
    pub cross_attention: bool,
    pub ln_eps: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            tokens: 20,
            patch_len: 5,
            d_model: 64,
            heads: 4,
            ff: 128,
            n_self: 2,
            n_cross: 2,
            t_out: 20,
            dropout: 0.1,
            local_band: 2,
            cross_attention: true,
            ln_eps: 1e-5,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Param(m));
        if self.channels == 0 || self.tokens == 0 || self.patch_len == 0 || self.t_out == 0 {
            return bad("channels, tokens, patch_len and t_out must be positive".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Checks the window geometry against this architecture.
    pub fn check_window(&self, feature_len: usize, target_len: usize) -> Result<()> {
        if self.tokens * self.patch_len != feature_len {
            return Err(Error::shape(
                "model",
                format!("{} tokens × {} ≠ feature length {feature_len}", self.tokens, self.patch_len),
            ));
        }
        if self.t_out != target_len {
            return Err(Error::shape("model", format!("t_out {} ≠ target length {target_len}", self.t_out)));
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.tokens * self.patch_len
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Glorot,
    Zeros,
    Ones,
    Normal,
}

fn block_specs(prefix: &str, d: usize, ff: usize, out: &mut Vec<(String, Vec<usize>, Init)>) {
    let mut push = |n: &str, s: Vec<usize>, i| out.push((format!("{prefix}.{n}"), s, i));
    push("ln1.g", vec![d], Init::Ones);
    push("ln1.b", vec![d], Init::Zeros);
    for p in ["q", "k", "v", "o"] {
        push(&format!("w{p}"), vec![d, d], Init::Glorot);
        push(&format!("b{p}"), vec![d], Init::Zeros);
    }
    push("ln2.g", vec![d], Init::Ones);
    push("ln2.b", vec![d], Init::Zeros);
    push("ff1.w", vec![d, ff], Init::Glorot);
    push("ff1.b", vec![ff], Init::Zeros);
    push("ff2.w", vec![ff, d], Init::Glorot);
    push("ff2.b", vec![d], Init::Zeros);
}

/// Every parameter tensor in storage order with its shape and initializer.
fn param_specs(cfg: &ArchConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let mut s = vec![
        ("patch.w".to_string(), vec![cfg.patch_len, d], Init::Glorot),
        ("patch.b".to_string(), vec![d], Init::Zeros),
        ("chan_emb".to_string(), vec![cfg.channels, d], Init::Normal),
    ];
    for l in 0..cfg.n_self {
        block_specs(&format!("enc.{l}"), d, cfg.ff, &mut s);
    }
    s.push(("enc.ln_f.g".into(), vec![d], Init::Ones));
    s.push(("enc.ln_f.b".into(), vec![d], Init::Zeros));
    if cfg.cross_attention {
        s.push(("queries".into(), vec![cfg.t_out, d], Init::Normal));
        for l in 0..cfg.n_cross {
            block_specs(&format!("cross.{l}"), d, cfg.ff, &mut s);
        }
        s.push(("head.ln.g".into(), vec![d], Init::Ones));
        s.push(("head.ln.b".into(), vec![d], Init::Zeros));
        s.push(("head.w".into(), vec![d, 1], Init::Glorot));
        s.push(("head.b".into(), vec![1], Init::Zeros));
    } else {
        s.push(("pool.w".into(), vec![d, cfg.t_out], Init::Glorot));
        s.push(("pool.b".into(), vec![cfg.t_out], Init::Zeros));
    }
    s
}

/// Named parameter tensors in a fixed order, tied to their architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters<T> {
    pub config: ArchConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ModelParameters<T> {
    /// Glorot-uniform projections, zero biases, unit gains, N(0, 0.02)
    /// queries and channel embeddings.
    pub fn init(config: &ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let named = param_specs(config)
            .into_iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let data: Vec<T> = match init {
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                    Init::Normal => (0..n).map(|_| T::of(normal.sample(&mut rng))).collect(),
                    Init::Glorot => {
                        let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                        (0..n).map(|_| T::of(rng.gen_range(-limit..=limit))).collect()
                    }
                };
                (name, Tensor::new(shape, data).expect("spec shape"))
            })
            .collect();
        Self::from_named(config.clone(), named)
    }

    /// Assembles parameters, checking names and shapes against the architecture.
    pub fn from_named(config: ArchConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != named.len() {
            return Err(Error::shape("parameters", format!("expected {} tensors, got {}", specs.len(), named.len())));
        }
        for ((sn, ss, _), (n, t)) in specs.iter().zip(&named) {
            if sn != n {
                return Err(Error::shape("parameters", format!("expected tensor `{sn}`, found `{n}`")));
            }
            if ss.as_slice() != t.shape() {
                return Err(Error::shape("parameters", format!("tensor `{n}` has shape {:?}, expected {ss:?}", t.shape())));
            }
        }
        let (names, tensors): (Vec<_>, Vec<_>) = named.into_iter().unzip();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Self { config, names, tensors, index })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Encoder parameters (patch embedding, channel embeddings, self-attention stack).
    pub fn is_encoder_param(name: &str) -> bool {
        name.starts_with("patch.") || name == "chan_emb" || name.starts_with("enc.")
    }
}

/// Fixed sinusoidal encodings, `rows × d`.
pub fn sinusoidal<T: Scalar>(rows: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(rows * d);
    for pos in 0..rows {
        for j in 0..d {
            let i = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
            data.push(T::of(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::matrix(rows, d, data).expect("sinusoid shape")
}

/// Additive attention mask: 0 inside `|i − j| ≤ band`, `-inf` outside.
pub fn band_mask<T: Scalar>(n: usize, band: usize) -> Tensor<T> {
    let data = (0..n * n)
        .map(|k| if (k / n).abs_diff(k % n) <= band { T::zero() } else { T::neg_infinity() })
        .collect();
    Tensor::matrix(n, n, data).expect("mask shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active with masks drawn from this seed.
    Train { seed: u64 },
}

/// A forward pass under construction: the tape plus the parameter leaves
/// created on it so far.
pub struct Graph<'a, T> {
    pub tape: Tape<T>,
    params: &'a ModelParameters<T>,
    bindings: Vec<Option<NodeId>>,
    frozen: Vec<bool>,
    rng: Option<ChaCha8Rng>,
    /// Attention-weight nodes in creation order, for inspection.
    pub attention: Vec<NodeId>,
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new(params: &'a ModelParameters<T>, mode: Mode) -> Self {
        let rng = match mode {
            Mode::Train { seed } if params.config.dropout > 0.0 => Some(ChaCha8Rng::seed_from_u64(seed)),
            _ => None,
        };
        Self {
            tape: Tape::new(),
            params,
            bindings: vec![None; params.len()],
            frozen: vec![false; params.len()],
            rng,
            attention: Vec::new(),
        }
    }

    /// Records the selected parameters as constants so they receive no gradient.
    pub fn freeze(mut self, pred: impl Fn(&str) -> bool) -> Self {
        for (f, n) in self.frozen.iter_mut().zip(self.params.names()) {
            *f = pred(n);
        }
        self
    }

    pub fn config(&self) -> &ArchConfig {
        &self.params.config
    }

    /// Leaf for a named parameter, created on first use.
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        let i = self.params.position(name).ok_or_else(|| Error::shape("model", format!("missing tensor `{name}`")))?;
        if let Some(id) = self.bindings[i] {
            return Ok(id);
        }
        let t = self.params.tensors()[i].clone();
        let id = if self.frozen[i] { self.tape.constant(t) } else { self.tape.variable(t) };
        self.bindings[i] = Some(id);
        Ok(id)
    }

    fn dropout(&mut self, x: NodeId) -> Result<NodeId> {
        let p = self.params.config.dropout;
        let Some(rng) = self.rng.as_mut() else { return Ok(x) };
        let n = self.tape.value(x).len();
        let keep = T::of(1.0 / (1.0 - p));
        let mask = (0..n).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep }).collect();
        self.tape.mask(x, mask)
    }

    fn layer_norm(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let g = self.param(&format!("{prefix}.g"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let eps = T::of(self.params.config.ln_eps);
        self.tape.layer_norm(x, g, b, eps)
    }

    fn dense(&mut self, x: NodeId, w: &str, b: &str) -> Result<NodeId> {
        let w = self.param(w)?;
        let b = self.param(b)?;
        self.tape.linear(x, w, Some(b))
    }

    fn multi_head(&mut self, xq: NodeId, xkv: NodeId, mask: Option<NodeId>, prefix: &str) -> Result<NodeId> {
        let q = self.dense(xq, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let k = self.dense(xkv, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
        let v = self.dense(xkv, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
        let heads = self.params.config.heads;
        let dh = self.params.config.d_model / heads;
        let ctx = if heads == 1 {
            let (out, w) = self.tape.scaled_dot_attention(q, k, v, mask)?;
            self.attention.push(w);
            out
        } else {
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let (a, b) = (h * dh, (h + 1) * dh);
                let qh = self.tape.slice_cols(q, a, b)?;
                let kh = self.tape.slice_cols(k, a, b)?;
                let vh = self.tape.slice_cols(v, a, b)?;
                let (out, w) = self.tape.scaled_dot_attention(qh, kh, vh, mask)?;
                self.attention.push(w);
                outs.push(out);
            }
            self.tape.concat_cols(&outs)?
        };
        self.dense(ctx, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
    }

    fn feed_forward(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let h = self.dense(x, &format!("{prefix}.ff1.w"), &format!("{prefix}.ff1.b"))?;
        let h = self.tape.relu(h);
        self.dense(h, &format!("{prefix}.ff2.w"), &format!("{prefix}.ff2.b"))
    }

    /// Pre-norm block: `x + Attn(LN(x), memory)` then `x + FF(LN(x))`.
    /// With `memory = None` the block is self-attention.
    fn block(&mut self, x: NodeId, memory: Option<NodeId>, mask: Option<NodeId>, prefix: &str) -> Result<NodeId> {
        let a = self.layer_norm(x, &format!("{prefix}.ln1"))?;
        let kv = memory.unwrap_or(a);
        let att = self.multi_head(a, kv, mask, prefix)?;
        let att = self.dropout(att)?;
        let x = self.tape.add(x, att)?;
        let f = self.layer_norm(x, &format!("{prefix}.ln2"))?;
        let f = self.feed_forward(f, prefix)?;
        let f = self.dropout(f)?;
        self.tape.add(x, f)
    }

    /// Token embeddings (`tokens × d_model`) for one channel's feature window.
    pub fn encode_channel(&mut self, features: &[T], channel: usize) -> Result<NodeId> {
        let cfg = self.params.config.clone();
        if features.len() != cfg.tokens * cfg.patch_len {
            return Err(Error::shape(
                "encode_channel",
                format!("expected {} features, got {}", cfg.tokens * cfg.patch_len, features.len()),
            ));
        }
        if channel >= cfg.channels {
            return Err(Error::shape("encode_channel", format!("channel {channel} of {}", cfg.channels)));
        }
        let patches = self.tape.constant(Tensor::matrix(cfg.tokens, cfg.patch_len, features.to_vec())?);
        let h = self.dense(patches, "patch.w", "patch.b")?;
        let pos = self.tape.constant(sinusoidal(cfg.tokens, cfg.d_model));
        let h = self.tape.add(h, pos)?;
        let emb = self.param("chan_emb")?;
        let row = self.tape.slice_rows(emb, channel, channel + 1)?;
        let ones = self.tape.constant(Tensor::full(&[cfg.tokens, 1], T::one()));
        let chan = self.tape.matmul(ones, row)?;
        let mut h = self.tape.add(h, chan)?;
        for l in 0..cfg.n_self {
            let mask = (l == 0).then(|| self.tape.constant(band_mask(cfg.tokens, cfg.local_band)));
            h = self.block(h, None, mask, &format!("enc.{l}"))?;
        }
        Ok(h)
    }

    /// Deformation prediction (`t_out` values) from the concatenated channel
    /// tokens. `key_mask[j] = false` hides memory token `j`.
    pub fn fuse_predict(&mut self, memory: NodeId, key_mask: Option<&[bool]>) -> Result<NodeId> {
        let cfg = self.params.config.clone();
        let (n_mem, d) = self.tape.value(memory).dims2("fuse_predict")?;
        if n_mem != cfg.channels * cfg.tokens || d != cfg.d_model {
            return Err(Error::shape(
                "fuse_predict",
                format!("memory {n_mem}×{d}, expected {}×{}", cfg.channels * cfg.tokens, cfg.d_model),
            ));
        }
        if key_mask.is_some_and(|m| m.len() != n_mem || !m.iter().any(|&k| k)) {
            return Err(Error::shape("fuse_predict", "key mask must cover memory and keep one token"));
        }
        let mem = self.layer_norm(memory, "enc.ln_f")?;
        if cfg.cross_attention {
            let qp = self.param("queries")?;
            let qpos = self.tape.constant(sinusoidal(cfg.t_out, d));
            let mut q = self.tape.add(qp, qpos)?;
            let mask = key_mask.map(|m| {
                let row: Vec<T> = m.iter().map(|&k| if k { T::zero() } else { T::neg_infinity() }).collect();
                let data = (0..cfg.t_out).flat_map(|_| row.iter().copied()).collect();
                self.tape.constant(Tensor::matrix(cfg.t_out, n_mem, data).expect("mask shape"))
            });
            for l in 0..cfg.n_cross {
                q = self.block(q, Some(mem), mask, &format!("cross.{l}"))?;
            }
            let q = self.layer_norm(q, "head.ln")?;
            self.dense(q, "head.w", "head.b")
        } else {
            let kept = key_mask.map_or(n_mem, |m| m.iter().filter(|&&k| k).count());
            let w = T::one() / T::of(kept as f64);
            let pool: Vec<T> = (0..n_mem).map(|j| if key_mask.map_or(true, |m| m[j]) { w } else { T::zero() }).collect();
            let pool = self.tape.constant(Tensor::matrix(1, n_mem, pool)?);
            let pooled = self.tape.matmul(pool, mem)?;
            self.dense(pooled, "pool.w", "pool.b")
        }
    }

    /// Full network on a channel-major window.
    pub fn predict(&mut self, features: &[T]) -> Result<NodeId> {
        let cfg = self.params.config.clone();
        if features.len() != cfg.input_len() {
            return Err(Error::shape("forward", format!("expected {} inputs, got {}", cfg.input_len(), features.len())));
        }
        let per = cfg.tokens * cfg.patch_len;
        let mut tokens = Vec::with_capacity(cfg.channels);
        for c in 0..cfg.channels {
            tokens.push(self.encode_channel(&features[c * per..(c + 1) * per], c)?);
        }
        let memory = self.tape.concat_rows(&tokens)?;
        self.fuse_predict(memory, None)
    }

    /// Gradients for every parameter in storage order; unused or frozen
    /// parameters get zeros.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.params
            .tensors()
            .iter()
            .zip(&self.bindings)
            .map(|(t, b)| match b.and_then(|id| grads.wrt(id)) {
                Some(g) => g.clone(),
                None => Tensor::zeros(t.shape()),
            })
            .collect()
    }
}

/// Eval- or train-mode forward on one window; returns the graph and the
/// prediction node.
pub fn forward<'a, T: Scalar>(params: &'a ModelParameters<T>, features: &[T], mode: Mode) -> Result<(Graph<'a, T>, NodeId)> {
    let mut g = Graph::new(params, mode);
    let out = g.predict(features)?;
    Ok((g, out))
}

/// Eval-mode prediction.
pub fn predict<T: Scalar>(params: &ModelParameters<T>, features: &[T]) -> Result<Vec<T>> {
    let (g, out) = forward(params, features, Mode::Eval)?;
    Ok(g.tape.value(out).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(cross: bool) -> ArchConfig {
        ArchConfig { channels: 2, d_model: 8, heads: 2, ff: 16, n_self: 2, n_cross: 1, cross_attention: cross, ..ArchConfig::default() }
    }

    fn features(cfg: &ArchConfig, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..cfg.input_len()).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    /// Independent shape walk of the default architecture.
    fn expected_count(c: &ArchConfig) -> usize {
        let d = c.d_model;
        let block = 2 * d + 4 * (d * d + d) + 2 * d + (d * c.ff + c.ff) + (c.ff * d + d);
        let fusion = if c.cross_attention {
            c.t_out * d + c.n_cross * block + 2 * d + d + 1
        } else {
            d * c.t_out + c.t_out
        };
        (c.patch_len * d + d) + c.channels * d + c.n_self * block + 2 * d + fusion
    }

    #[test]
    fn parameter_count_matches_shape_walk() {
        let cfg = ArchConfig::default();
        let p = ModelParameters::<f64>::init(&cfg, 0).unwrap();
        assert_eq!(p.param_count(), expected_count(&cfg));
        assert_eq!(p.param_count(), 136_129);
        let ab = ArchConfig { cross_attention: false, ..cfg };
        assert_eq!(ModelParameters::<f64>::init(&ab, 0).unwrap().param_count(), expected_count(&ab));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = ArchConfig::default();
        let a = ModelParameters::<f64>::init(&cfg, 42).unwrap();
        assert_eq!(a, ModelParameters::init(&cfg, 42).unwrap());
        assert_ne!(a, ModelParameters::init(&cfg, 43).unwrap());
        for (name, t) in a.iter() {
            let last = name.rsplit('.').next().unwrap();
            if t.rank() == 2 && name != "chan_emb" && name != "queries" {
                let s = t.shape();
                let lim = (6.0 / (s[0] + s[1]) as f64).sqrt();
                assert!(t.data().iter().all(|v| v.abs() <= lim), "{name}");
            }
            if last == "b" || last.starts_with('b') && t.rank() == 1 {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
            if last == "g" {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            }
        }
    }

    #[test]
    fn invalid_head_split_rejected() {
        let cfg = ArchConfig { d_model: 10, heads: 4, ..ArchConfig::default() };
        assert!(ModelParameters::<f64>::init(&cfg, 0).is_err());
    }

    #[test]
    fn band_mask_shape() {
        let m = band_mask::<f64>(5, 2);
        assert_eq!(m.get2(0, 2), 0.0);
        assert_eq!(m.get2(0, 3), f64::NEG_INFINITY);
        assert_eq!(m.get2(4, 1), f64::NEG_INFINITY);
    }

    #[test]
    fn encoder_shape_and_band_zeros() {
        let cfg = tiny(true);
        let p = ModelParameters::<f64>::init(&cfg, 1).unwrap();
        let x = features(&cfg, 2);
        let mut g = Graph::new(&p, Mode::Eval);
        let h = g.encode_channel(&x[..100], 0).unwrap();
        assert_eq!(g.tape.value(h).shape(), &[20, 8]);
        assert!(g.tape.value(h).is_finite());
        // The first heads.len() attention nodes belong to the banded layer.
        for &w in &g.attention[..cfg.heads] {
            let wt = g.tape.value(w);
            for i in 0..20 {
                for j in 0..20 {
                    if (i as usize).abs_diff(j) > 2 {
                        assert_eq!(wt.get2(i, j), 0.0);
                    }
                }
                let s: f64 = wt.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert!(g.encode_channel(&x[..99], 0).is_err());
    }

    #[test]
    fn channel_permutation_equivariance() {
        let cfg = tiny(true);
        let p = ModelParameters::<f64>::init(&cfg, 3).unwrap();
        let x = features(&cfg, 4);
        let mut swapped_x = x[100..].to_vec();
        swapped_x.extend_from_slice(&x[..100]);
        let mut named: Vec<(String, Tensor<f64>)> = p.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let emb = p.get("chan_emb").unwrap();
        let mut rows = emb.row(1).to_vec();
        rows.extend_from_slice(emb.row(0));
        named[p.position("chan_emb").unwrap()].1 = Tensor::matrix(2, 8, rows).unwrap();
        let q = ModelParameters::from_named(cfg.clone(), named).unwrap();

        let mut g1 = Graph::new(&p, Mode::Eval);
        let a0 = g1.encode_channel(&x[..100], 0).unwrap();
        let mut g2 = Graph::new(&q, Mode::Eval);
        let b1 = g2.encode_channel(&swapped_x[100..], 1).unwrap();
        assert_eq!(g1.tape.value(a0).data(), g2.tape.value(b1).data());

        let y1 = predict(&p, &x).unwrap();
        let y2 = predict(&q, &swapped_x).unwrap();
        for (a, b) in y1.iter().zip(&y2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_memory_tokens_give_identical_context() {
        // Softmax over identical keys averages identical values, so every
        // query reads the same context; with queries equal too, outputs match.
        let cfg = ArchConfig { n_cross: 1, ..tiny(true) };
        let p = ModelParameters::<f64>::init(&cfg, 5).unwrap();
        let mut g = Graph::new(&p, Mode::Eval);
        let tok: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        let mem = g.tape.constant(Tensor::matrix(40, 8, tok.repeat(40)).unwrap());
        let _ = g.fuse_predict(mem, None).unwrap();
        let w = *g.attention.last().unwrap();
        let wt = g.tape.value(w);
        assert!(wt.data().iter().all(|&v| (v - 1.0 / 40.0).abs() < 1e-15));
    }

    #[test]
    fn masked_memory_token_gets_zero_gradient() {
        for cross in [true, false] {
            let cfg = tiny(cross);
            let p = ModelParameters::<f64>::init(&cfg, 6).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mem_vals: Vec<f64> = (0..40 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut g = Graph::new(&p, Mode::Eval);
            let mem = g.tape.variable(Tensor::matrix(40, 8, mem_vals).unwrap());
            let mut keep = vec![true; 40];
            keep[13] = false;
            let out = g.fuse_predict(mem, Some(&keep)).unwrap();
            let loss = g.tape.sum(out);
            let grads = g.tape.backward(loss).unwrap();
            let gm = grads.wrt(mem).unwrap();
            assert!(gm.row(13).iter().all(|&v| v == 0.0));
            assert!(gm.row(12).iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn eval_forward_is_pure_and_sane() {
        let cfg = ArchConfig::default();
        let p = ModelParameters::<f64>::init(&cfg, 9).unwrap();
        let x = features(&cfg, 10);
        let a = predict(&p, &x).unwrap();
        assert_eq!(a, predict(&p, &x).unwrap());
        assert_eq!(a.len(), 20);
        assert!(a.iter().all(|v| v.is_finite() && v.abs() < 1e3));
        assert!(predict(&p, &x[1..]).is_err());
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let cfg = tiny(true);
        let p = ModelParameters::<f64>::init(&cfg, 11).unwrap();
        let x = features(&cfg, 12);
        let (g1, o1) = forward(&p, &x, Mode::Train { seed: 1 }).unwrap();
        let (g2, o2) = forward(&p, &x, Mode::Train { seed: 1 }).unwrap();
        let (g3, o3) = forward(&p, &x, Mode::Train { seed: 2 }).unwrap();
        assert_eq!(g1.tape.value(o1), g2.tape.value(o2));
        assert_ne!(g1.tape.value(o1), g3.tape.value(o3));
        assert_ne!(g1.tape.value(o1).data(), predict(&p, &x).unwrap().as_slice());
    }

    #[test]
    fn scaled_query_key_projections_keep_rows_stochastic() {
        let cfg = tiny(true);
        let mut p = ModelParameters::<f64>::init(&cfg, 13).unwrap();
        let names: Vec<String> = p.names().iter().filter(|n| n.ends_with(".wq") || n.ends_with(".wk")).cloned().collect();
        for n in names {
            let i = p.position(&n).unwrap();
            p.tensors_mut()[i].data_mut().iter_mut().for_each(|v| *v *= 2.0);
        }
        let (g, _) = forward(&p, &features(&cfg, 14), Mode::Eval).unwrap();
        for &w in &g.attention {
            let wt = g.tape.value(w);
            let (r, _) = wt.dims2("t").unwrap();
            for i in 0..r {
                assert!((wt.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn from_named_reports_offending_tensor() {
        let p = ModelParameters::<f64>::init(&tiny(true), 0).unwrap();
        let mut named: Vec<_> = p.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        named[0].1 = Tensor::zeros(&[5, 4]);
        let err = ModelParameters::from_named(tiny(true), named).unwrap_err().to_string();
        assert!(err.contains("patch.w"), "{err}");
    }
}
