use serde::{Deserialize, Serialize};

/// Muscle thickness (or deformation) in mm sampled at the ultrasound frame rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThicknessTrace {
    pub t_s: Vec<f64>,
    pub mm: Vec<f64>,
}

impl ThicknessTrace {
    /// Uniformly sampled trace starting at `t0`.
    pub fn uniform(t0: f64, rate_hz: f64, mm: Vec<f64>) -> Self {
        let t_s = (0..mm.len()).map(|k| t0 + k as f64 / rate_hz).collect();
        Self { t_s, mm }
    }

    pub fn len(&self) -> usize {
        self.mm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mm.is_empty()
    }

    /// Linear interpolation, clamped at the ends.
    pub fn sample(&self, t: f64) -> f64 {
        let n = self.t_s.len();
        if t <= self.t_s[0] {
            return self.mm[0];
        }
        if t >= self.t_s[n - 1] {
            return self.mm[n - 1];
        }
        let k = self.t_s.partition_point(|&x| x <= t) - 1;
        let (t0, t1) = (self.t_s[k], self.t_s[k + 1]);
        let w = (t - t0) / (t1 - t0);
        self.mm[k] + w * (self.mm[k + 1] - self.mm[k])
    }

    pub fn offset(&self, delta_mm: f64) -> Self {
        Self { t_s: self.t_s.clone(), mm: self.mm.iter().map(|v| v + delta_mm).collect() }
    }
}
