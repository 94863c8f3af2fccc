//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tol: f64,
    /// Coordinates sampled per tensor; `None` checks every coordinate.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
    /// Coordinates where both gradients are below this magnitude are
    /// counted as null instead of compared; the relative error of two
    /// rounding-noise values is meaningless.
    pub null_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { h: 1e-5, tol: 1e-4, max_coords_per_tensor: None, seed: 0, null_floor: 1e-9 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradFailure {
    pub tensor: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub null_coords: usize,
    pub tol: f64,
    pub failures: Vec<GradFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares `analytic[i]` against `(f(p+h) − f(p−h)) / 2h` for sampled
/// coordinates of every tensor in `params`.
pub fn grad_check<F>(params: &[Tensor<f64>], analytic: &[Tensor<f64>], cfg: &GradCheckConfig, mut f: F) -> GradCheckReport
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    assert!(cfg.h > 0.0, "finite-difference step must be positive");
    assert_eq!(params.len(), analytic.len(), "one analytic gradient per parameter");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, null_coords: 0, tol: cfg.tol, failures: Vec::new() };
    for ti in 0..params.len() {
        let n = params[ti].len();
        let coords: Vec<usize> = match cfg.max_coords_per_tensor {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = work[ti].data()[c];
            work[ti].data_mut()[c] = orig + cfg.h;
            let fp = f(&work);
            work[ti].data_mut()[c] = orig - cfg.h;
            let fm = f(&work);
            work[ti].data_mut()[c] = orig;
            let numeric = (fp - fm) / (2.0 * cfg.h);
            let a = analytic[ti].data()[c];
            if a.abs() < cfg.null_floor && numeric.abs() < cfg.null_floor {
                report.null_coords += 1;
                continue;
            }
            let e = rel_error(a, numeric);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(e);
            if !(e < cfg.tol) {
                report.failures.push(GradFailure { tensor: ti, coord: c, analytic: a, numeric, rel_error: e });
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn quadratic_at_three() {
        let p = vec![Tensor::scalar(3.0)];
        let analytic = vec![Tensor::scalar(6.0)];
        let r = grad_check(&p, &analytic, &GradCheckConfig { tol: 1e-9, ..Default::default() }, |p| {
            p[0].item() * p[0].item()
        });
        assert!(r.passed(), "{r:?}");
        assert!(r.max_rel_error < 1e-9);
    }

    fn composite(params: &[Tensor<f64>]) -> (f64, Vec<Tensor<f64>>) {
        let mut tape = Tape::new();
        let ids: Vec<_> = params.iter().map(|p| tape.variable(p.clone())).collect();
        let x = tape.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap();
        let h = tape.linear(x, ids[3], Some(ids[4])).unwrap();
        let h = tape.relu(h);
        let (a, _) = tape.scaled_dot_attention(h, h, h, None).unwrap();
        let s = tape.softmax_rows(a).unwrap();
        let top = tape.slice_rows(s, 0, 1).unwrap();
        let left = tape.slice_cols(a, 0, 1).unwrap();
        let lt = tape.transpose(left).unwrap();
        let cat = tape.concat_cols(&[top, lt]).unwrap();
        let cat2 = tape.concat_rows(&[cat, cat]).unwrap();
        let sq = tape.square(cat2);
        let sc = tape.scale(sq, 0.7);
        let loss = tape.mean(sc);
        let g = tape.backward(loss).unwrap();
        let grads = ids.iter().map(|&i| g.wrt(i).unwrap().clone()).collect();
        (tape.value(loss).item(), grads)
    }

    fn composite_params() -> Vec<Tensor<f64>> {
        vec![
            Tensor::matrix(3, 4, vec![0.3, -1.2, 0.8, 2.0, 0.1, 0.4, -0.9, 1.1, -0.5, 0.7, 1.9, -0.2]).unwrap(),
            Tensor::vector(vec![1.1, 0.9, 1.3, 0.7]),
            Tensor::vector(vec![0.1, -0.2, 0.05, 0.3]),
            Tensor::matrix(4, 3, vec![0.2, -0.4, 0.6, 0.9, 0.1, -0.3, -0.7, 0.5, 0.25, 0.35, -0.15, 0.45]).unwrap(),
            Tensor::vector(vec![0.3, 0.2, 0.1]),
        ]
    }

    #[test]
    fn primitive_composite_matches_central_differences() {
        let p = composite_params();
        let (_, analytic) = composite(&p);
        let r = grad_check(&p, &analytic, &GradCheckConfig::default(), |p| composite(p).0);
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let p = composite_params();
        let (_, mut analytic) = composite(&p);
        analytic[3].data_mut()[2] += 0.05;
        let r = grad_check(&p, &analytic, &GradCheckConfig::default(), |p| composite(p).0);
        assert!(!r.passed());
        assert!(r.failures.iter().any(|f| f.tensor == 3 && f.coord == 2));
        let (_, mut zeroed) = composite(&p);
        zeroed[4].data_mut()[0] = 0.0;
        let r = grad_check(&p, &zeroed, &GradCheckConfig::default(), |p| composite(p).0);
        assert!(r.failures.iter().any(|f| f.tensor == 4 && f.coord == 0), "a dropped gradient must not pass as null");
    }
}
