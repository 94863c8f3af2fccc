//! Ground-truth thickness from A-mode RF lines: quadrature envelope, two-peak
//! interface detection with parabolic refinement, per-frame tracking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sim::{RfFrameSequence, SOUND_SPEED};
use crate::stats;
use crate::trace::ThicknessTrace;

/// Interface delays (s) with the amplitude ratio of the weaker to the stronger peak.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EchoPair {
    pub d1: f64,
    pub d2: f64,
    pub confidence: f64,
}

/// Zero-phase moving average of even length `len`: the mean of the two
/// boxcars offset by half a sample, i.e. a `len+1` tap kernel with
/// half-weight ends.
fn centred_moving_average<T: Scalar>(x: &[T], len: usize) -> Vec<T> {
    let n = x.len();
    let half = len / 2;
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(T::zero());
    for &v in x {
        let last = *prefix.last().expect("non-empty");
        prefix.push(last + v);
    }
    let at = |i: isize| if i >= 0 && (i as usize) < n { x[i as usize] } else { T::zero() };
    let inv = T::one() / T::of(len as f64);
    let halfw = T::of(0.5);
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half - 1);
            let hi = (i + half).min(n);
            let inner = prefix[hi] - prefix[lo];
            let ends = at(i as isize - half as isize) + at((i + half) as isize);
            (inner + halfw * ends) * inv
        })
        .collect()
}

/// Quadrature-demodulated envelope. `I` and `Q` are mixed to baseband and
/// smoothed over two carrier periods; the factor 2 restores the amplitude
/// lost by mixing.
pub fn envelope<T: Scalar>(rf: &[T], fc: f64, fs: f64) -> Result<Vec<T>> {
    if !(fs > 2.0 * fc) || fc <= 0.0 {
        return Err(Error::Param(format!("sampling {fs} Hz must exceed twice the carrier {fc} Hz")));
    }
    let w = 2.0 * std::f64::consts::PI * fc / fs;
    let (i_mix, q_mix): (Vec<T>, Vec<T>) = rf
        .iter()
        .enumerate()
        .map(|(n, &v)| {
            let (s, c) = (w * n as f64).sin_cos();
            (v * T::of(c), v * T::of(s))
        })
        .unzip();
    let len = (2.0 * fs / fc).round() as usize;
    let i_f = centred_moving_average(&i_mix, len);
    let q_f = centred_moving_average(&q_mix, len);
    let two = T::of(2.0);
    Ok(i_f.iter().zip(&q_f).map(|(&a, &b)| two * (a * a + b * b).sqrt()).collect())
}

/// Vertex offset of the parabola through three equally spaced samples,
/// relative to the middle one.
pub fn parabolic_offset<T: Scalar>(y0: T, y1: T, y2: T) -> T {
    let denom = y0 - T::of(2.0) * y1 + y2;
    if denom == T::zero() {
        return T::zero();
    }
    (T::of(0.5) * (y0 - y2) / denom).max(T::of(-0.5)).min(T::of(0.5))
}

/// Strongest two local maxima at least `min_separation_s` apart, refined to
/// sub-sample delays and ordered by depth. Equal amplitudes favour the
/// earlier peak.
pub fn detect_interfaces<T: Scalar>(env: &[T], fs: f64, min_separation_s: f64) -> Result<EchoPair> {
    if env.len() < 3 {
        return Err(Error::Detection(format!("envelope of {} samples", env.len())));
    }
    let mut peaks: Vec<usize> = (1..env.len() - 1)
        .filter(|&i| env[i] > env[i - 1] && env[i] >= env[i + 1] && env[i] > T::zero())
        .collect();
    peaks.sort_by(|&a, &b| env[b].partial_cmp(&env[a]).expect("finite envelope").then(a.cmp(&b)));
    let first = *peaks.first().ok_or_else(|| Error::Detection("no local maximum".into()))?;
    let min_sep = (min_separation_s * fs).ceil() as usize;
    let second = peaks
        .iter()
        .copied()
        .find(|&p| p.abs_diff(first) >= min_sep)
        .ok_or_else(|| Error::Detection("no second peak beyond the minimum separation".into()))?;
    let refine = |i: usize| (i as f64 + parabolic_offset(env[i - 1], env[i], env[i + 1]).as_f64()) / fs;
    let (a, b) = if first < second { (first, second) } else { (second, first) };
    Ok(EchoPair { d1: refine(a), d2: refine(b), confidence: (env[second] / env[first]).as_f64() })
}

/// Pulse-echo range: `(d2 − d1)·c/2`, in mm.
pub fn thickness_from_delays(d1: f64, d2: f64, c: f64) -> Result<f64> {
    if d2 < d1 {
        return Err(Error::Contract(format!("echo order: d2 {d2:e} s precedes d1 {d1:e} s")));
    }
    Ok((d2 - d1) * c / 2.0 * 1e3)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackConfig {
    pub min_separation_s: f64,
    pub sound_speed: f64,
    pub median_window: usize,
    /// Hampel threshold in robust standard deviations.
    pub outlier_sigmas: f64,
    pub max_jump_mm: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self { min_separation_s: 3e-6, sound_speed: SOUND_SPEED, median_window: 5, outlier_sigmas: 3.0, max_jump_mm: 3.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackedThickness {
    pub trace: ThicknessTrace,
    /// Frames whose value was held from the previous frame.
    pub flagged: Vec<usize>,
}

fn frame_thickness(line: &[f64], frames: &RfFrameSequence, cfg: &TrackConfig) -> Result<f64> {
    let env = envelope(line, frames.fc, frames.fs)?;
    let pair = detect_interfaces(&env, frames.fs, cfg.min_separation_s)?;
    thickness_from_delays(pair.d1, pair.d2, cfg.sound_speed)
}

/// Window-`w` Hampel filter: a sample is replaced by its window median only
/// when it sits more than `k` robust sigmas from it.
fn hampel(x: &[f64], w: usize, k: f64) -> Vec<f64> {
    let half = w / 2;
    (0..x.len())
        .map(|i| {
            let win = &x[i.saturating_sub(half)..(i + half + 1).min(x.len())];
            let med = stats::median(win);
            let dev: Vec<f64> = win.iter().map(|v| (v - med).abs()).collect();
            let mad = 1.4826 * stats::median(&dev);
            if (x[i] - med).abs() > k * mad { med } else { x[i] }
        })
        .collect()
}

pub fn track_thickness(frames: &RfFrameSequence, cfg: &TrackConfig) -> Result<TrackedThickness> {
    let n = frames.frame_count();
    if n == 0 {
        return Err(Error::EmptyTrace(0));
    }
    let raw: Vec<Option<f64>> = (0..n).map(|k| frame_thickness(frames.frame(k), frames, cfg).ok()).collect();
    let first_valid = raw.iter().flatten().next().copied().ok_or(Error::EmptyTrace(n))?;

    let mut flagged = Vec::new();
    let mut values = Vec::with_capacity(n);
    let mut prev = first_valid;
    for (k, v) in raw.into_iter().enumerate() {
        let accepted = match v {
            Some(v) if (v - prev).abs() <= cfg.max_jump_mm => v,
            _ => {
                flagged.push(k);
                prev
            }
        };
        values.push(accepted);
        prev = accepted;
    }
    let smoothed = hampel(&values, cfg.median_window, cfg.outlier_sigmas);
    Ok(TrackedThickness { trace: ThicknessTrace { t_s: frames.timestamps.clone(), mm: smoothed }, flagged })
}
