//! Small descriptive statistics used across the pipeline.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

pub fn mean<T: Scalar>(x: &[T]) -> T {
    x.iter().copied().sum::<T>() / T::of(x.len() as f64)
}

/// Population standard deviation.
pub fn pop_std<T: Scalar>(x: &[T]) -> T {
    let m = mean(x);
    (x.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / T::of(x.len() as f64)).sqrt()
}

pub fn pearson<T: Scalar>(x: &[T], y: &[T]) -> T {
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = T::zero();
    let mut sxx = T::zero();
    let mut syy = T::zero();
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

pub fn median<T: Scalar>(x: &[T]) -> T {
    let mut v = x.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / T::of(2.0)
    }
}

/// Mean ± population std of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(x: &[f64]) -> Option<Self> {
        (!x.is_empty()).then(|| Self { mean: mean(x), std: pop_std(x) })
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert_eq!(mean(&[1.0, 2.0, 3.0]), 2.0);
        assert!((pop_std(&[1.0, 2.0, 3.0]) - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(median(&[5.0, 1.0, 3.0]), 3.0);
        assert!((pearson(&[1.0f64, 2.0, 3.0], &[2.0, 4.0, 6.5]) - 0.9986).abs() < 1e-3);
    }

    #[test]
    fn renders_three_decimals() {
        assert_eq!(MeanStd { mean: 0.743, std: 0.740 }.to_string(), "0.743 ± 0.740");
    }
}
