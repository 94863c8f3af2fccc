//! Synthetic paired recordings: activation, thickness, multichannel sEMG and
//! A-mode RF frames for a cohort of simulated subjects.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dsp::Sos;
use crate::error::{Error, Result};
use crate::stats;
use crate::trace::ThicknessTrace;

pub const SEMG_FS: f64 = 1000.0;
pub const FRAME_RATE: f64 = 20.0;
pub const RF_FS: f64 = 50e6;
pub const RF_FC: f64 = 5e6;
pub const RF_SAMPLES: usize = 4096;
pub const SOUND_SPEED: f64 = 1540.0;
pub const SKIN_DEPTH_MM: f64 = 5.0;

/// SplitMix64 finalizer; used to derive independent stream seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectProfile {
    pub id: usize,
    /// Rest thickness, mm.
    pub y_rest: f64,
    /// Thickness gain at full activation, mm.
    pub gain: f64,
    /// Activation-to-thickness time constant, s.
    pub tau: f64,
    /// Motion period, s.
    pub period: f64,
    pub duty: f64,
    pub channel_weights: Vec<f64>,
    /// Multiplicative sEMG noise floor as a fraction of peak activation.
    pub noise_floor: f64,
}

impl SubjectProfile {
    pub fn validate(&self) -> Result<()> {
        let ok = self.y_rest > 0.0
            && self.gain > 0.0
            && self.tau > 0.0
            && self.period > 0.0
            && self.duty > 0.0
            && self.duty < 1.0
            && !self.channel_weights.is_empty()
            && self.channel_weights.iter().all(|&w| w > 0.0)
            && self.noise_floor >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Param(format!("invalid subject profile {self:?}")))
        }
    }

    /// Draws every field uniformly from its allowed range.
    pub fn draw(id: usize, channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            id,
            y_rest: rng.gen_range(22.0..32.0),
            gain: rng.gen_range(4.0..8.0),
            tau: rng.gen_range(0.08..0.15),
            period: rng.gen_range(2.0..4.0),
            duty: 0.5,
            channel_weights: (0..channels).map(|_| rng.gen_range(0.5..1.5)).collect(),
            noise_floor: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub index: u8,
    pub load: f64,
    pub duration_s: f64,
}

impl StageSpec {
    pub fn validate(&self) -> Result<()> {
        if self.load >= 1.0 && self.duration_s > 0.0 {
            Ok(())
        } else {
            Err(Error::Param(format!("invalid stage {self:?}")))
        }
    }
}

/// Stages 1 and 2 unloaded, stage 3 carrying the weight.
pub fn default_stages(duration_s: f64, loaded_factor: f64) -> Vec<StageSpec> {
    vec![
        StageSpec { index: 1, load: 1.0, duration_s },
        StageSpec { index: 2, load: 1.0, duration_s },
        StageSpec { index: 3, load: loaded_factor, duration_s },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub subjects: usize,
    pub channels: usize,
    pub duration_s: f64,
    pub loaded_factor: f64,
    pub amplitude: f64,
    /// Rest interval before the first contraction of each stage, s.
    pub rest_lead_s: f64,
    pub rf_noise: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            subjects: 6,
            channels: 4,
            duration_s: 60.0,
            loaded_factor: 1.25,
            amplitude: 1.0,
            rest_lead_s: 2.0,
            rf_noise: 0.02,
        }
    }
}

/// A-mode acquisition frames, stored frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RfFrameSequence {
    pub samples_per_frame: usize,
    pub fs: f64,
    pub fc: f64,
    pub timestamps: Vec<f64>,
    pub data: Vec<f64>,
}

impl RfFrameSequence {
    pub fn frame_count(&self) -> usize {
        self.timestamps.len()
    }

    pub fn frame(&self, k: usize) -> &[f64] {
        &self.data[k * self.samples_per_frame..(k + 1) * self.samples_per_frame]
    }

    pub fn frame_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.samples_per_frame..(k + 1) * self.samples_per_frame]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageRecording {
    pub spec: StageSpec,
    /// Activation at `SEMG_FS`.
    pub activation: Vec<f64>,
    /// One series per channel at `SEMG_FS`.
    pub semg: Vec<Vec<f64>>,
    pub thickness: ThicknessTrace,
    pub rf: RfFrameSequence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecording {
    pub profile: SubjectProfile,
    pub seed: u64,
    pub stages: Vec<StageRecording>,
}

/// Raised-cosine burst over the first `duty` fraction of each period.
pub fn activation_profile(t: f64, period: f64, duty: f64, amplitude: f64, load: f64) -> f64 {
    let phase = t.rem_euclid(period) / period;
    if phase < duty {
        amplitude * load * 0.5 * (1.0 - (2.0 * std::f64::consts::PI * phase / duty).cos())
    } else {
        0.0
    }
}

/// Activation series for one stage: rest for `rest_lead_s`, then periodic bursts.
pub fn activation_series(profile: &SubjectProfile, stage: &StageSpec, cfg: &SimConfig) -> Vec<f64> {
    let n = (stage.duration_s * SEMG_FS).round() as usize;
    (0..n)
        .map(|k| {
            let t = k as f64 / SEMG_FS - cfg.rest_lead_s;
            if t < 0.0 {
                0.0
            } else {
                activation_profile(t, profile.period, profile.duty, cfg.amplitude, stage.load)
            }
        })
        .collect()
}

/// First-order forward-Euler response of thickness to activation, returned
/// every `decimation`-th step.
pub fn thickness_dynamics(
    activation: &[f64],
    dt: f64,
    tau: f64,
    y_rest: f64,
    gain: f64,
    decimation: usize,
) -> Result<ThicknessTrace> {
    if !(dt > 0.0) || tau <= dt {
        return Err(Error::Stability { tau, dt });
    }
    let k = dt / tau;
    let mut y = y_rest;
    let mut out = Vec::with_capacity(activation.len() / decimation + 1);
    for (i, &a) in activation.iter().enumerate() {
        if i % decimation == 0 {
            out.push(y);
        }
        y += k * (y_rest + gain * a - y);
    }
    Ok(ThicknessTrace::uniform(0.0, 1.0 / (dt * decimation as f64), out))
}

/// Amplitude-modulated band-limited noise per channel:
/// `(w_c·a + floor)·z_c + 0.01·η_c`.
pub fn synth_semg(activation: &[f64], profile: &SubjectProfile, seed: u64) -> Result<Vec<Vec<f64>>> {
    let band = Sos::<f64>::butter_bandpass(4, 20.0, 450.0, SEMG_FS)?;
    let n = activation.len();
    let mut out = Vec::with_capacity(profile.channel_weights.len());
    for (c, &w) in profile.channel_weights.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[c as u64]));
        let white: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let mut z = band.filter(&white);
        let s = stats::pop_std(&z);
        if s > 0.0 {
            for v in &mut z {
                *v /= s;
            }
        }
        let ch = activation
            .iter()
            .zip(&z)
            .map(|(&a, &zv)| {
                let eta: f64 = rng.sample(StandardNormal);
                (w * a + profile.noise_floor) * zv + 0.01 * eta
            })
            .collect();
        out.push(ch);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RfConfig {
    pub skin_depth_mm: f64,
    pub sound_speed: f64,
    pub amplitudes: [f64; 2],
    pub pulse_sigma_s: f64,
    pub noise_sigma: f64,
}

impl Default for RfConfig {
    fn default() -> Self {
        Self {
            skin_depth_mm: SKIN_DEPTH_MM,
            sound_speed: SOUND_SPEED,
            amplitudes: [1.0, 0.8],
            pulse_sigma_s: 0.2e-6,
            noise_sigma: 0.02,
        }
    }
}

/// Round-trip delays of the skin/muscle and muscle/bone interfaces.
pub fn echo_delays(thickness_mm: f64, cfg: &RfConfig) -> (f64, f64) {
    let z1 = cfg.skin_depth_mm * 1e-3;
    let z2 = (cfg.skin_depth_mm + thickness_mm) * 1e-3;
    (2.0 * z1 / cfg.sound_speed, 2.0 * z2 / cfg.sound_speed)
}

/// Adds a Gaussian-windowed carrier centred at `delay` into `line`.
fn add_pulse(line: &mut [f64], delay: f64, amp: f64, sigma: f64) {
    let n = line.len() as isize;
    let centre = (delay * RF_FS).round() as isize;
    let half = (8.0 * sigma * RF_FS).ceil() as isize;
    for i in (centre - half).max(0)..(centre + half + 1).min(n) {
        let dt = i as f64 / RF_FS - delay;
        let w = (-dt * dt / (2.0 * sigma * sigma)).exp();
        line[i as usize] += amp * w * (2.0 * std::f64::consts::PI * RF_FC * dt).sin();
    }
}

/// One simulated RF line for a given thickness, without noise.
pub fn synth_rf_line(thickness_mm: f64, cfg: &RfConfig) -> Result<Vec<f64>> {
    let frame_s = RF_SAMPLES as f64 / RF_FS;
    let (d1, d2) = echo_delays(thickness_mm, cfg);
    if !(d1 >= 0.0 && d2 < frame_s) {
        return Err(Error::Range { delay_s: d2, frame_s });
    }
    let mut line = vec![0.0; RF_SAMPLES];
    add_pulse(&mut line, d1, cfg.amplitudes[0], cfg.pulse_sigma_s);
    add_pulse(&mut line, d2, cfg.amplitudes[1], cfg.pulse_sigma_s);
    Ok(line)
}

pub fn synth_rf_frames(trace: &ThicknessTrace, cfg: &RfConfig, seed: u64) -> Result<RfFrameSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(trace.len() * RF_SAMPLES);
    for &y in &trace.mm {
        let mut line = synth_rf_line(y, cfg)?;
        if cfg.noise_sigma > 0.0 {
            for v in &mut line {
                let e: f64 = rng.sample(StandardNormal);
                *v += cfg.noise_sigma * e;
            }
        }
        data.extend_from_slice(&line);
    }
    Ok(RfFrameSequence { samples_per_frame: RF_SAMPLES, fs: RF_FS, fc: RF_FC, timestamps: trace.t_s.clone(), data })
}

pub fn synth_stage(profile: &SubjectProfile, stage: &StageSpec, cfg: &SimConfig, seed: u64) -> Result<StageRecording> {
    profile.validate()?;
    stage.validate()?;
    let activation = activation_series(profile, stage, cfg);
    let decimation = (SEMG_FS / FRAME_RATE).round() as usize;
    let thickness = thickness_dynamics(&activation, 1.0 / SEMG_FS, profile.tau, profile.y_rest, profile.gain, decimation)?;
    let semg = synth_semg(&activation, profile, derive_seed(seed, &[1]))?;
    let rf_cfg = RfConfig { noise_sigma: cfg.rf_noise, ..RfConfig::default() };
    let rf = synth_rf_frames(&thickness, &rf_cfg, derive_seed(seed, &[2]))?;
    Ok(StageRecording { spec: stage.clone(), activation, semg, thickness, rf })
}

pub fn synth_subject(profile: &SubjectProfile, stages: &[StageSpec], cfg: &SimConfig, seed: u64) -> Result<SubjectRecording> {
    let stages = stages
        .iter()
        .map(|s| synth_stage(profile, s, cfg, derive_seed(seed, &[u64::from(s.index)])))
        .collect::<Result<_>>()?;
    Ok(SubjectRecording { profile: profile.clone(), seed, stages })
}

/// Profiles for a cohort, one derived seed per subject.
pub fn cohort_profiles(cfg: &SimConfig, master_seed: u64) -> Result<Vec<(SubjectProfile, u64)>> {
    if cfg.subjects < 2 {
        return Err(Error::Param(format!("cohort needs at least 2 subjects, got {}", cfg.subjects)));
    }
    Ok((0..cfg.subjects)
        .map(|id| {
            let seed = derive_seed(master_seed, &[id as u64]);
            (SubjectProfile::draw(id, cfg.channels, derive_seed(seed, &[0])), seed)
        })
        .collect())
}

pub fn synth_cohort(cfg: &SimConfig, master_seed: u64) -> Result<Vec<SubjectRecording>> {
    let stages = default_stages(cfg.duration_s, cfg.loaded_factor);
    cohort_profiles(cfg, master_seed)?
        .into_iter()
        .map(|(p, seed)| synth_subject(&p, &stages, cfg, seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile() -> SubjectProfile {
        SubjectProfile {
            id: 0,
            y_rest: 25.0,
            gain: 6.0,
            tau: 0.1,
            period: 2.0,
            duty: 0.5,
            channel_weights: vec![1.0, 0.7],
            noise_floor: 0.05,
        }
    }

    #[test]
    fn activation_endpoints() {
        assert_eq!(activation_profile(0.0, 2.0, 0.5, 1.0, 1.0), 0.0);
        assert!((activation_profile(0.5, 2.0, 0.5, 1.0, 1.0) - 1.0).abs() < 1e-15);
        assert!((activation_profile(0.25 * 3.0, 3.0, 0.5, 0.8, 1.25) - 1.0).abs() < 1e-12);
        assert_eq!(activation_profile(1.5, 2.0, 0.5, 1.0, 1.0), 0.0);
    }

    #[test]
    fn activation_integral_matches_quadrature() {
        // Composite Simpson over one period.
        let (period, duty, amp, load) = (3.0, 0.4, 0.9, 1.25);
        let n = 30_000;
        let h = period / n as f64;
        let mut s = 0.0;
        for i in 0..=n {
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * activation_profile(i as f64 * h, period, duty, amp, load);
        }
        s *= h / 3.0;
        assert!((s - amp * load * duty * period / 2.0).abs() < 1e-6, "{s}");
    }

    #[test]
    fn zero_activation_is_fixed_point() {
        let tr = thickness_dynamics(&[0.0; 1000], 1e-3, 0.1, 25.0, 6.0, 50).unwrap();
        assert!(tr.mm.iter().all(|&y| y == 25.0));
        assert_eq!(tr.len(), 20);
    }

    #[test]
    fn step_response_tracks_exponential() {
        let a = vec![1.0; 3000];
        let dt = 1e-3;
        let tr = thickness_dynamics(&a, dt, 0.1, 25.0, 6.0, 1).unwrap();
        // y[100] is y(τ); closed form 25 + 6(1 − e⁻¹) = 28.793.
        let closed = 25.0 + 6.0 * (1.0 - (-1.0f64).exp());
        assert!((tr.mm[100] - closed).abs() < 0.02, "{}", tr.mm[100]);
        assert!((tr.mm[2999] - 31.0).abs() < 1e-3);
    }

    #[test]
    fn unstable_step_rejected() {
        assert!(matches!(thickness_dynamics(&[0.0; 10], 0.2, 0.1, 25.0, 6.0, 1), Err(Error::Stability { .. })));
    }

    #[test]
    fn silent_channel_is_white_noise_only() {
        let p = SubjectProfile { noise_floor: 0.0, ..profile() };
        let e = synth_semg(&vec![0.0; 20_000], &p, 9).unwrap();
        let rms = (e[0].iter().map(|v| v * v).sum::<f64>() / e[0].len() as f64).sqrt();
        assert!((rms - 0.01).abs() < 5e-4, "{rms}");
    }

    #[test]
    fn semg_deterministic_per_seed() {
        let a: Vec<f64> = (0..2000).map(|k| activation_profile(k as f64 / SEMG_FS, 2.0, 0.5, 1.0, 1.0)).collect();
        let p = profile();
        assert_eq!(synth_semg(&a, &p, 4).unwrap(), synth_semg(&a, &p, 4).unwrap());
        assert_ne!(synth_semg(&a, &p, 4).unwrap(), synth_semg(&a, &p, 5).unwrap());
    }

    #[test]
    fn delay_difference_inverts_thickness() {
        let (d1, d2) = echo_delays(20.02, &RfConfig::default());
        assert!((d2 - d1 - 26.0e-6).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_thickness_rejected() {
        assert!(matches!(synth_rf_line(70.0, &RfConfig::default()), Err(Error::Range { .. })));
    }

    #[test]
    fn equal_thickness_equal_frames_without_noise() {
        let cfg = RfConfig { noise_sigma: 0.0, ..RfConfig::default() };
        let tr = ThicknessTrace::uniform(0.0, FRAME_RATE, vec![27.3, 27.3]);
        let rf = synth_rf_frames(&tr, &cfg, 1).unwrap();
        assert_eq!(rf.frame(0), rf.frame(1));
    }

    #[test]
    fn seed_derivation_separates_streams() {
        assert_ne!(derive_seed(1, &[0]), derive_seed(1, &[1]));
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
        assert_eq!(derive_seed(7, &[3, 2]), derive_seed(7, &[3, 2]));
    }

    #[test]
    fn cohort_profiles_distinct_and_in_range() {
        let ps = cohort_profiles(&SimConfig::default(), 7).unwrap();
        assert_eq!(ps.len(), 6);
        for (i, (a, _)) in ps.iter().enumerate() {
            assert!((22.0..32.0).contains(&a.y_rest) && (4.0..8.0).contains(&a.gain));
            assert!((0.08..0.15).contains(&a.tau) && (2.0..4.0).contains(&a.period));
            assert!(a.channel_weights.iter().all(|w| (0.5..1.5).contains(w)));
            for (b, _) in &ps[i + 1..] {
                assert!((a.y_rest * 1e6).round() != (b.y_rest * 1e6).round());
            }
        }
        assert!(cohort_profiles(&SimConfig { subjects: 1, ..SimConfig::default() }, 7).is_err());
    }
}
