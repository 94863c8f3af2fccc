//! Losses, Adam, and the training and adaptation loops.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, GradCheckConfig, GradCheckReport};
use crate::error::{Error, Result};
use crate::model::{ArchConfig, Graph, Mode, ModelParameters};
use crate::scalar::Scalar;
use crate::semg::FeatureWindow;
use crate::sim::derive_seed;
use crate::tensor::Tensor;

fn check_lengths(op: &'static str, pred: &[impl Copy], target: &[impl Copy]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::shape(op, format!("prediction {} vs target {}", pred.len(), target.len())));
    }
    Ok(())
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_loss<T: Scalar>(pred: &[T], target: &[T]) -> Result<(T, Vec<T>)> {
    check_lengths("mse_loss", pred, target)?;
    if pred.is_empty() {
        return Err(Error::Empty("mse_loss input"));
    }
    let n = T::of(pred.len() as f64);
    let mut value = T::zero();
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.iter().zip(target) {
        let r = p - t;
        value += r * r;
        grad.push(T::of(2.0) * r / n);
    }
    Ok((value / n, grad))
}

/// Indices of the first maximum and first minimum.
pub fn extrema<T: Scalar>(v: &[T]) -> (usize, usize) {
    let (mut hi, mut lo) = (0, 0);
    for (i, &x) in v.iter().enumerate() {
        if x > v[hi] {
            hi = i;
        }
        if x < v[lo] {
            lo = i;
        }
    }
    (hi, lo)
}

/// `|ex(pred) − ex(target)| + mean((Δpred − Δtarget)²)` with `ex = max − min`
/// and `Δ` the first difference, plus its gradient in `pred`.
pub fn contraction_loss<T: Scalar>(pred: &[T], target: &[T]) -> Result<(T, Vec<T>)> {
    check_lengths("contraction_loss", pred, target)?;
    let n = pred.len();
    if n < 2 {
        return Err(Error::shape("contraction_loss", format!("need at least 2 samples, got {n}")));
    }
    let (ph, pl) = extrema(pred);
    let (th, tl) = extrema(target);
    let gap = (pred[ph] - pred[pl]) - (target[th] - target[tl]);
    let mut grad = vec![T::zero(); n];
    let s = if gap > T::zero() {
        T::one()
    } else if gap < T::zero() {
        -T::one()
    } else {
        T::zero()
    };
    grad[ph] += s;
    grad[pl] -= s;
    let m = T::of((n - 1) as f64);
    let mut diff = T::zero();
    for k in 0..n - 1 {
        let r = (pred[k + 1] - pred[k]) - (target[k + 1] - target[k]);
        diff += r * r;
        let g = T::of(2.0) * r / m;
        grad[k + 1] += g;
        grad[k] -= g;
    }
    Ok((gap.abs() + diff / m, grad))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub mse: f64,
    pub contraction: f64,
}

/// `mse + λ_c · contraction` with each component and the combined gradient.
pub fn total_loss<T: Scalar>(pred: &[T], target: &[T], lambda_c: f64) -> Result<(LossParts, Vec<T>)> {
    let (mse, mut grad) = mse_loss(pred, target)?;
    let mut parts = LossParts { total: mse.as_f64(), mse: mse.as_f64(), contraction: 0.0 };
    if lambda_c != 0.0 {
        let (c, cg) = contraction_loss(pred, target)?;
        let l = T::of(lambda_c);
        for (g, x) in grad.iter_mut().zip(cg) {
            *g += l * x;
        }
        parts.contraction = c.as_f64();
        parts.total = (mse + l * c).as_f64();
    }
    Ok((parts, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub lambda_c: f64,
    pub val_fraction: f64,
    /// Set from the run's master seed rather than read from configuration.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch: 32,
            lr: 1e-3,
            lr_min: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            lambda_c: 0.2,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Param(m.to_string()));
        if self.epochs == 0 || self.batch == 0 {
            return bad("epochs and batch must be at least 1");
        }
        if self.lambda_c < 0.0 || !self.lambda_c.is_finite() {
            return bad("lambda_c must be finite and non-negative");
        }
        if !(self.lr > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return bad("need 0 ≤ lr_min ≤ lr and lr > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("Adam betas must lie in [0, 1) and eps must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if self.clip_norm <= 0.0 {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub fraction: f64,
    pub epochs: usize,
    pub lr: f64,
    pub min_windows: usize,
    pub freeze_encoder: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self { fraction: 0.2, epochs: 10, lr: 1e-4, min_windows: 5, freeze_encoder: false }
    }
}

/// Cosine decay from `lr` to `lr_min` over `total` steps.
pub fn cosine_lr(lr: f64, lr_min: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr;
    }
    let p = step.min(total - 1) as f64 / (total - 1) as f64;
    lr_min + 0.5 * (lr - lr_min) * (1.0 + (std::f64::consts::PI * p).cos())
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.squared_norm().as_f64()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossParts,
    pub val: Option<LossParts>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub params: ModelParameters<T>,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters are held in `params` after training.
    pub best_epoch: Option<usize>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(params: ModelParameters<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { params, m: zeros.clone(), v: zeros, step: 0, epoch: 0, history: Vec::new(), best_epoch: None }
    }
}

/// Clips `grads` to the configured global norm, then applies one
/// bias-corrected Adam update at rate `lr`.
pub fn adam_step<T: Scalar>(state: &mut TrainState<T>, mut grads: Vec<Tensor<T>>, lr: f64, cfg: &TrainConfig) -> Result<()> {
    if grads.len() != state.params.len() {
        return Err(Error::shape("adam_step", format!("{} gradients for {} tensors", grads.len(), state.params.len())));
    }
    for (name, (g, p)) in state.params.names().iter().zip(grads.iter().zip(state.params.tensors())) {
        if g.shape() != p.shape() {
            return Err(Error::shape("adam_step", format!("gradient of `{name}` has shape {:?}", g.shape())));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    clip_global_norm(&mut grads, cfg.clip_norm);
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::one() - T::of(cfg.beta1.powi(t));
    let c2 = T::one() - T::of(cfg.beta2.powi(t));
    let (lr, eps) = (T::of(lr), T::of(cfg.eps));
    for (i, g) in grads.iter().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = state.params.tensors_mut()[i].data_mut();
        for k in 0..p.len() {
            let gk = g.data()[k];
            m[k] = b1 * m[k] + (T::one() - b1) * gk;
            v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            p[k] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

fn to_scalar<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::of(x)).collect()
}

/// Loss and parameter gradients for a single window.
pub fn window_gradients<T: Scalar>(
    params: &ModelParameters<T>,
    window: &FeatureWindow,
    lambda_c: f64,
    mode: Mode,
    frozen: Option<&dyn Fn(&str) -> bool>,
) -> Result<(LossParts, Vec<Tensor<T>>)> {
    let mut g = Graph::new(params, mode);
    if let Some(f) = frozen {
        g = g.freeze(f);
    }
    let out = g.predict(&to_scalar::<T>(&window.features))?;
    let pred = g.tape.value(out).data().to_vec();
    let (parts, grad) = total_loss(&pred, &to_scalar::<T>(&window.target), lambda_c)?;
    let loss = g.tape.scalar_fn(out, T::of(parts.total), grad)?;
    let grads = g.tape.backward(loss)?;
    Ok((parts, g.param_grads(&grads)))
}

/// Eval-mode loss averaged over windows.
pub fn evaluate_loss<T: Scalar>(params: &ModelParameters<T>, windows: &[&FeatureWindow], lambda_c: f64) -> Result<LossParts> {
    let mut acc = LossParts::default();
    for w in windows {
        let pred = crate::model::predict(params, &to_scalar::<T>(&w.features))?;
        let (p, _) = total_loss(&pred, &to_scalar::<T>(&w.target), lambda_c)?;
        acc.total += p.total;
        acc.mse += p.mse;
        acc.contraction += p.contraction;
    }
    let n = windows.len().max(1) as f64;
    Ok(LossParts { total: acc.total / n, mse: acc.mse / n, contraction: acc.contraction / n })
}

/// Subject-stratified split: from each subject a seeded random `fraction`
/// of windows (rounded) goes to validation. Returns `(train, val)` indices.
pub fn stratified_split(windows: &[FeatureWindow], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut subjects: Vec<usize> = windows.iter().map(|w| w.subject).collect();
    subjects.sort_unstable();
    subjects.dedup();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for s in subjects {
        let mut idx: Vec<usize> = (0..windows.len()).filter(|&i| windows[i].subject == s).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[s as u64]));
        idx.shuffle(&mut rng);
        let n_val = ((idx.len() as f64) * fraction).round() as usize;
        let n_val = n_val.min(idx.len().saturating_sub(1));
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Optimizes `state` for `epochs` epochs over `train_idx`. Keeps the
/// parameters of the epoch with the lowest selection loss (validation loss
/// when `val_idx` is non-empty, else the epoch's training loss).
fn run_epochs<T: Scalar>(
    state: &mut TrainState<T>,
    windows: &[FeatureWindow],
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &TrainConfig,
    epochs: usize,
    lr_at: impl Fn(usize) -> f64,
    frozen: Option<&dyn Fn(&str) -> bool>,
) -> Result<()> {
    let mut best: Option<(f64, ModelParameters<T>, usize)> = None;
    let mut order = train_idx.to_vec();
    let mut step_in_run = 0usize;
    for _ in 0..epochs {
        let epoch = state.epoch;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x5eed, epoch as u64]));
        order.shuffle(&mut rng);
        let mut acc = LossParts::default();
        let mut lr = lr_at(step_in_run);
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            lr = lr_at(step_in_run);
            let mut sum: Vec<Tensor<T>> = state.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            for (k, &i) in chunk.iter().enumerate() {
                let mode = Mode::Train { seed: derive_seed(cfg.seed, &[epoch as u64, b as u64, k as u64]) };
                let (parts, grads) = window_gradients(&state.params, &windows[i], cfg.lambda_c, mode, frozen)?;
                acc.total += parts.total;
                acc.mse += parts.mse;
                acc.contraction += parts.contraction;
                for (s, g) in sum.iter_mut().zip(&grads) {
                    s.add_assign(g);
                }
            }
            let inv = T::one() / T::of(chunk.len() as f64);
            for s in sum.iter_mut() {
                s.scale_assign(inv);
            }
            adam_step(state, sum, lr, cfg)?;
            step_in_run += 1;
        }
        let n = order.len() as f64;
        let train = LossParts { total: acc.total / n, mse: acc.mse / n, contraction: acc.contraction / n };
        let val = if val_idx.is_empty() {
            None
        } else {
            let v: Vec<&FeatureWindow> = val_idx.iter().map(|&i| &windows[i]).collect();
            Some(evaluate_loss(&state.params, &v, cfg.lambda_c)?)
        };
        if !train.total.is_finite() {
            return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
        }
        let score = val.map_or(train.total, |v| v.total);
        if best.as_ref().map_or(true, |(s, _, _)| score < *s) {
            best = Some((score, state.params.clone(), epoch));
        }
        state.history.push(EpochRecord { epoch, lr, train, val });
        state.epoch += 1;
    }
    if let Some((_, params, epoch)) = best {
        state.params = params;
        state.best_epoch = Some(epoch);
    }
    Ok(())
}

fn check_windows(windows: &[FeatureWindow], arch: &ArchConfig) -> Result<()> {
    for w in windows {
        if w.features.len() != arch.input_len() || w.target.len() != arch.t_out {
            return Err(Error::shape(
                "train",
                format!(
                    "window (subject {}, stage {}, {} s) has {} features and {} targets",
                    w.subject,
                    w.stage,
                    w.start_s,
                    w.features.len(),
                    w.target.len()
                ),
            ));
        }
    }
    Ok(())
}

/// Trains a freshly initialized model on normalized windows.
pub fn train<T: Scalar>(windows: &[FeatureWindow], cfg: &TrainConfig, arch: &ArchConfig) -> Result<TrainState<T>> {
    cfg.validate()?;
    arch.validate()?;
    if windows.is_empty() {
        return Err(Error::Empty("training split"));
    }
    check_windows(windows, arch)?;
    let params = ModelParameters::init(arch, derive_seed(cfg.seed, &[0x1417]))?;
    let mut state = TrainState::new(params);
    let (train_idx, val_idx) = stratified_split(windows, cfg.val_fraction, derive_seed(cfg.seed, &[0x5a11]));
    let steps = cfg.epochs * train_idx.len().div_ceil(cfg.batch);
    run_epochs(&mut state, windows, &train_idx, &val_idx, cfg, cfg.epochs, |s| cosine_lr(cfg.lr, cfg.lr_min, s, steps), None)?;
    Ok(state)
}

/// Indices (into `windows`) of the adaptation and reserved subsets: the
/// chronologically first `fraction` of windows, ordered by (stage, start).
pub fn adaptation_split(windows: &[FeatureWindow], fraction: f64, min_windows: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if windows.len() < min_windows.max(1) {
        return Err(Error::Param(format!("adaptation needs at least {min_windows} windows, got {}", windows.len())));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Param(format!("adaptation fraction {fraction} outside (0, 1)")));
    }
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.sort_by(|&a, &b| {
        (windows[a].stage, windows[a].start_s)
            .partial_cmp(&(windows[b].stage, windows[b].start_s))
            .expect("finite start times")
    });
    let n = ((windows.len() as f64) * fraction).round().max(1.0) as usize;
    let reserved = order.split_off(n);
    Ok((order, reserved))
}

#[derive(Clone, Debug)]
pub struct Adapted<T> {
    pub state: TrainState<T>,
    pub adapt_idx: Vec<usize>,
    pub reserved_idx: Vec<usize>,
}

/// Fine-tunes `params` on the first `fraction` of a new subject's windows
/// at a constant rate; the remaining windows are left for evaluation.
pub fn domain_adapt<T: Scalar>(
    params: &ModelParameters<T>,
    windows: &[FeatureWindow],
    cfg: &TrainConfig,
    acfg: &AdaptConfig,
) -> Result<Adapted<T>> {
    cfg.validate()?;
    check_windows(windows, &params.config)?;
    let (adapt_idx, reserved_idx) = adaptation_split(windows, acfg.fraction, acfg.min_windows)?;
    let mut state = TrainState::new(params.clone());
    let cfg = TrainConfig { seed: derive_seed(cfg.seed, &[0xada9]), ..cfg.clone() };
    let freeze = |n: &str| ModelParameters::<T>::is_encoder_param(n);
    let frozen: Option<&dyn Fn(&str) -> bool> = if acfg.freeze_encoder { Some(&freeze) } else { None };
    run_epochs(&mut state, windows, &adapt_idx, &[], &cfg, acfg.epochs, |_| acfg.lr, frozen)?;
    Ok(Adapted { state, adapt_idx, reserved_idx })
}

/// Central-difference check of the total-loss gradient on one window.
pub fn check_model_gradients(
    params: &ModelParameters<f64>,
    window: &FeatureWindow,
    lambda_c: f64,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let (_, analytic) = window_gradients(params, window, lambda_c, Mode::Eval, None)?;
    let names: Vec<String> = params.names().to_vec();
    let arch = params.config.clone();
    let mut err = None;
    let report = grad_check(params.tensors(), &analytic, cfg, |ts| {
        let named = names.iter().cloned().zip(ts.iter().cloned()).collect();
        let r = ModelParameters::from_named(arch.clone(), named)
            .and_then(|p| crate::model::predict(&p, &window.features))
            .and_then(|pred| total_loss(&pred, &window.target, lambda_c));
        match r {
            Ok((parts, _)) => parts.total,
            Err(e) => {
                err = Some(e);
                f64::NAN
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect()
    }

    #[test]
    fn mse_closed_forms() {
        assert_eq!(mse_loss(&[1.0, 2.0], &[0.0, 2.0]).unwrap().0, 0.5);
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap().0, 0.0);
        assert!(mse_loss(&[1.0], &[1.0, 2.0]).is_err());
        let (p, t) = (random(20, 1), random(20, 2));
        let mut oracle = 0.0;
        for i in 0..20 {
            oracle += (p[i] - t[i]) * (p[i] - t[i]);
        }
        assert!(close(mse_loss(&p, &t).unwrap().0, oracle / 20.0, 1e-12));
    }

    #[test]
    fn contraction_closed_forms() {
        let t = [10.0, 12.0, 14.0, 12.0, 10.0];
        assert_eq!(contraction_loss(&t, &t).unwrap().0, 0.0);
        let flat = [3.0; 5];
        assert_eq!(contraction_loss(&flat, &t).unwrap().0, 4.0 + 4.0);
        let shifted: Vec<f64> = t.iter().map(|v| v + 1.5).collect();
        assert_eq!(contraction_loss(&shifted, &t).unwrap().0, 0.0);
        assert_eq!(mse_loss(&shifted, &t).unwrap().0, 2.25);
        assert!(contraction_loss(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn loss_gradients_match_differences() {
        let (p, t) = (random(20, 3), random(20, 4));
        for lambda in [0.0, 0.2, 1.0] {
            let (_, g) = total_loss(&p, &t, lambda).unwrap();
            for i in 0..20 {
                let h = 1e-6;
                let mut a = p.clone();
                let mut b = p.clone();
                a[i] += h;
                b[i] -= h;
                let fd = (total_loss(&a, &t, lambda).unwrap().0.total - total_loss(&b, &t, lambda).unwrap().0.total) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-6, "λ={lambda} i={i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn total_is_composition() {
        let (p, t) = (random(20, 5), random(20, 6));
        let (parts, _) = total_loss(&p, &t, 0.2).unwrap();
        let expect = mse_loss(&p, &t).unwrap().0 + 0.2 * contraction_loss(&p, &t).unwrap().0;
        assert!(close(parts.total, expect, 1e-12));
        let (zero, _) = total_loss(&p, &t, 0.0).unwrap();
        assert_eq!(zero.total, mse_loss(&p, &t).unwrap().0);
        assert_eq!(zero.contraction, 0.0);
    }

    fn single_state(value: f64) -> TrainState<f64> {
        let cfg = ArchConfig { channels: 1, d_model: 4, heads: 1, ff: 4, n_self: 1, n_cross: 1, ..ArchConfig::default() };
        let p = ModelParameters::init(&cfg, 0).unwrap();
        let mut s = TrainState::new(p);
        for t in s.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = value);
        }
        s
    }

    #[test]
    fn adam_first_step_magnitude() {
        let mut s = single_state(1.0);
        let grads: Vec<Tensor<f64>> = s.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut g = grads.clone();
        g[0].data_mut()[0] = 0.5;
        adam_step(&mut s, g, 1e-3, &TrainConfig::default()).unwrap();
        let update = s.params.tensors()[0].data()[0] - 1.0;
        assert!((update + 1e-3).abs() < 1e-6, "{update}");
        assert!(s.params.tensors().iter().skip(1).all(|t| t.data().iter().all(|&v| v == 1.0)));
    }

    #[test]
    fn adam_zero_gradient_noop_and_nonfinite_named() {
        let mut s = single_state(0.3);
        let before = s.params.clone();
        let zeros: Vec<Tensor<f64>> = s.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        adam_step(&mut s, zeros.clone(), 1e-3, &TrainConfig::default()).unwrap();
        assert_eq!(s.params, before);
        let mut bad = zeros;
        bad[2].data_mut()[0] = f64::NAN;
        let name = s.params.names()[2].clone();
        let err = adam_step(&mut s, bad, 1e-3, &TrainConfig::default()).unwrap_err().to_string();
        assert!(err.contains(&name), "{err}");
    }

    #[test]
    fn clipping_contract() {
        let mut g = vec![Tensor::vector(vec![6.0, 0.0]), Tensor::vector(vec![0.0, 8.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 10.0);
        let n: f64 = g.iter().map(|t| t.squared_norm()).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        let mut small = vec![Tensor::vector(vec![0.3])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.3]);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1e-3, 1e-5, 0, 100), 1e-3);
        assert!((cosine_lr(1e-3, 1e-5, 99, 100) - 1e-5).abs() < 1e-18);
        let mid = cosine_lr(1e-3, 1e-5, 50, 101);
        assert!((mid - 0.5 * (1e-3 + 1e-5)).abs() < 1e-15);
    }

    fn windows(n: usize, subjects: usize, seed: u64) -> Vec<FeatureWindow> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let amp: f64 = rng.gen_range(0.0..2.0);
                let features = (0..200).map(|k| amp * (1.0 + (k as f64 * 0.1).sin()) + rng.gen_range(-0.1..0.1)).collect();
                let target = (0..20).map(|k| amp * (k as f64 * 0.3).sin()).collect();
                FeatureWindow { subject: i % subjects, stage: 1, start_s: i as f64 * 0.25, features, target }
            })
            .collect()
    }

    fn small_arch() -> ArchConfig {
        ArchConfig { channels: 2, d_model: 8, heads: 2, ff: 16, n_self: 2, n_cross: 1, ..ArchConfig::default() }
    }

    #[test]
    fn split_is_stratified() {
        let w = windows(100, 4, 0);
        let (tr, va) = stratified_split(&w, 0.1, 3);
        assert_eq!(tr.len() + va.len(), 100);
        for s in 0..4 {
            assert_eq!(va.iter().filter(|&&i| w[i].subject == s).count(), 3);
        }
        assert!(tr.iter().all(|i| !va.contains(i)));
    }

    #[test]
    fn training_decreases_loss_and_is_deterministic() {
        let w = windows(64, 2, 1);
        let cfg = TrainConfig { epochs: 2, batch: 8, seed: 9, ..TrainConfig::default() };
        let a = train::<f64>(&w, &cfg, &small_arch()).unwrap();
        assert_eq!(a.history.len(), 2);
        assert!(a.history[1].train.total < a.history[0].train.total, "{:?}", a.history);
        let b = train::<f64>(&w, &cfg, &small_arch()).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
        let c = train::<f64>(&w, &TrainConfig { lambda_c: 0.0, epochs: 1, ..cfg }, &small_arch()).unwrap();
        assert!(c.history.iter().all(|h| h.train.contraction == 0.0));
    }

    #[test]
    fn adaptation_split_contract() {
        let mut w = windows(100, 1, 2);
        w.reverse();
        let (a, r) = adaptation_split(&w, 0.2, 5).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(r.len(), 80);
        let latest = a.iter().map(|&i| w[i].start_s).fold(f64::MIN, f64::max);
        assert!(r.iter().all(|&i| w[i].start_s > latest));
        assert!(adaptation_split(&[], 0.2, 5).is_err());
        assert!(adaptation_split(&w[..4], 0.2, 5).is_err());
    }

    #[test]
    fn frozen_encoder_is_untouched() {
        let w = windows(20, 1, 3);
        let p = ModelParameters::<f64>::init(&small_arch(), 4).unwrap();
        let cfg = TrainConfig { batch: 4, ..TrainConfig::default() };
        let acfg = AdaptConfig { epochs: 1, freeze_encoder: true, ..AdaptConfig::default() };
        let out = domain_adapt(&p, &w, &cfg, &acfg).unwrap();
        for ((n, a), b) in p.iter().zip(out.state.params.tensors()) {
            if ModelParameters::<f64>::is_encoder_param(n) {
                assert_eq!(a, b, "{n}");
            }
        }
        assert_ne!(p.get("head.w"), out.state.params.get("head.w"));
    }

    #[test]
    fn model_gradient_check_small() {
        let arch = ArchConfig { channels: 2, d_model: 8, heads: 1, ff: 16, n_self: 2, n_cross: 2, ..ArchConfig::default() };
        let p = ModelParameters::<f64>::init(&arch, 21).unwrap();
        let w = &windows(1, 1, 5)[0];
        let cfg = GradCheckConfig { max_coords_per_tensor: Some(6), ..GradCheckConfig::default() };
        let r = check_model_gradients(&p, w, 0.2, &cfg).unwrap();
        assert!(r.passed(), "{:?}", r.failures);
    }
}
