//! Butterworth biquad cascades and zero-phase filtering.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One second-order section, `a0` normalized to 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad<T> {
    pub b: [T; 3],
    pub a: [T; 2],
}

impl<T: Scalar> Biquad<T> {
    fn design(kind: Kind, f0: f64, q: f64, fs: f64) -> Self {
        let w0 = 2.0 * std::f64::consts::PI * f0 / fs;
        let (s, c) = w0.sin_cos();
        let alpha = s / (2.0 * q);
        let a0 = 1.0 + alpha;
        let b = match kind {
            Kind::Low => [(1.0 - c) / 2.0, 1.0 - c, (1.0 - c) / 2.0],
            Kind::High => [(1.0 + c) / 2.0, -(1.0 + c), (1.0 + c) / 2.0],
        };
        Self {
            b: [T::of(b[0] / a0), T::of(b[1] / a0), T::of(b[2] / a0)],
            a: [T::of(-2.0 * c / a0), T::of((1.0 - alpha) / a0)],
        }
    }

    fn dc_gain(&self) -> T {
        (self.b[0] + self.b[1] + self.b[2]) / (T::one() + self.a[0] + self.a[1])
    }
}

#[derive(Clone, Copy, Debug)]
enum Kind {
    Low,
    High,
}

/// Cascade of biquads applied in order.
#[derive(Clone, Debug, PartialEq)]
pub struct Sos<T> {
    pub sections: Vec<Biquad<T>>,
}

/// Pole quality factors of an even-order Butterworth prototype.
fn butterworth_qs(order: usize) -> Vec<f64> {
    (1..=order / 2)
        .map(|k| 1.0 / (2.0 * ((2 * k - 1) as f64 * std::f64::consts::PI / (2 * order) as f64).cos()))
        .collect()
}

impl<T: Scalar> Sos<T> {
    fn butter(kind: Kind, order: usize, fc: f64, fs: f64) -> Result<Self> {
        if order == 0 || order % 2 != 0 {
            return Err(Error::Param(format!("Butterworth order must be even and positive, got {order}")));
        }
        if !(fc > 0.0 && fc < fs / 2.0) {
            return Err(Error::Param(format!("cutoff {fc} Hz outside (0, {}) Hz", fs / 2.0)));
        }
        Ok(Self { sections: butterworth_qs(order).into_iter().map(|q| Biquad::design(kind, fc, q, fs)).collect() })
    }

    pub fn butter_lowpass(order: usize, fc: f64, fs: f64) -> Result<Self> {
        Self::butter(Kind::Low, order, fc, fs)
    }

    pub fn butter_highpass(order: usize, fc: f64, fs: f64) -> Result<Self> {
        Self::butter(Kind::High, order, fc, fs)
    }

    /// High-pass at `lo` cascaded with low-pass at `hi`, each of `order`.
    pub fn butter_bandpass(order: usize, lo: f64, hi: f64, fs: f64) -> Result<Self> {
        if !(0.0 < lo && lo < hi && hi < fs / 2.0) {
            return Err(Error::Param(format!("band {lo}..{hi} Hz invalid for fs {fs} Hz")));
        }
        let mut sos = Self::butter_highpass(order, lo, fs)?;
        sos.sections.extend(Self::butter_lowpass(order, hi, fs)?.sections);
        Ok(sos)
    }

    /// Causal filtering from the given per-section states (transposed direct form II).
    fn run(&self, x: &mut [T], state: &mut [[T; 2]]) {
        for (sec, z) in self.sections.iter().zip(state.iter_mut()) {
            for v in x.iter_mut() {
                let xin = *v;
                let y = sec.b[0] * xin + z[0];
                z[0] = sec.b[1] * xin - sec.a[0] * y + z[1];
                z[1] = sec.b[2] * xin - sec.a[1] * y;
                *v = y;
            }
        }
    }

    /// Section states that hold the cascade at steady state for constant input `x0`.
    fn steady_state(&self, x0: T) -> Vec<[T; 2]> {
        let mut input = x0;
        self.sections
            .iter()
            .map(|s| {
                let y = s.dc_gain() * input;
                let z1 = s.b[2] * input - s.a[1] * y;
                let z0 = s.b[1] * input - s.a[0] * y + z1;
                input = y;
                [z0, z1]
            })
            .collect()
    }

    pub fn filter(&self, x: &[T]) -> Vec<T> {
        let mut out = x.to_vec();
        let mut state = vec![[T::zero(); 2]; self.sections.len()];
        self.run(&mut out, &mut state);
        out
    }

    /// Forward-backward filtering with odd-reflection padding and
    /// steady-state initial conditions; zero phase, squared magnitude.
    pub fn filtfilt(&self, x: &[T]) -> Vec<T> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = (3 * (2 * self.sections.len() + 1)).min(n - 1);
        let two = T::of(2.0);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| two * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| two * x[n - 1] - x[n - 1 - i]));

        let mut state = self.steady_state(ext[0]);
        self.run(&mut ext, &mut state);
        ext.reverse();
        let mut state = self.steady_state(ext[0]);
        self.run(&mut ext, &mut state);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}
