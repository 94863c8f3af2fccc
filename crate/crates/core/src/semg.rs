//! Raw sEMG to normalized envelope windows aligned with deformation targets.

use serde::{Deserialize, Serialize};

use crate::dsp::Sos;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sim::{SubjectRecording, FRAME_RATE, SEMG_FS};
use crate::trace::ThicknessTrace;
use crate::ultrasound::{track_thickness, TrackConfig};

pub const FEATURE_RATE: f64 = 100.0;

/// Zero-phase band-pass (Butterworth high-pass at `lo` then low-pass at `hi`).
pub fn bandpass<T: Scalar>(x: &[T], lo: f64, hi: f64, fs: f64) -> Result<Vec<T>> {
    Ok(Sos::butter_bandpass(4, lo, hi, fs)?.filtfilt(x))
}

/// Linear envelope: rectify, zero-phase 5 Hz low-pass, keep every 10th sample.
pub fn envelope_features<T: Scalar>(x: &[T], fs: f64) -> Result<Vec<T>> {
    let lp = Sos::butter_lowpass(2, 5.0, fs)?;
    let rect: Vec<T> = x.iter().map(|v| v.abs()).collect();
    let smooth = lp.filtfilt(&rect);
    let step = (fs / FEATURE_RATE).round() as usize;
    Ok(smooth.into_iter().step_by(step).collect())
}

/// Per-channel envelope features from raw channels.
pub fn channel_features(semg: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    semg.iter()
        .map(|ch| envelope_features(&bandpass(ch, 20.0, 450.0, SEMG_FS)?, SEMG_FS))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureWindow {
    pub subject: usize,
    pub stage: u8,
    pub start_s: f64,
    /// Channel-major, `channels × feature_len`.
    pub features: Vec<f64>,
    /// Deformation in mm at the frame rate.
    pub target: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    pub window_s: f64,
    pub stride_s: f64,
    /// Length of the rest interval at the start of stage 1 used as baseline.
    pub baseline_s: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { window_s: 1.0, stride_s: 0.25, baseline_s: 2.0 }
    }
}

impl WindowConfig {
    pub fn feature_len(&self) -> usize {
        (self.window_s * FEATURE_RATE).round() as usize
    }

    pub fn target_len(&self) -> usize {
        (self.window_s * FRAME_RATE).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowedDataset {
    pub channels: usize,
    pub feature_len: usize,
    pub target_len: usize,
    pub windows: Vec<FeatureWindow>,
}

impl WindowedDataset {
    pub fn subjects(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.windows.iter().map(|w| w.subject).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn filter(&self, keep: impl Fn(&FeatureWindow) -> bool) -> Self {
        Self { windows: self.windows.iter().filter(|w| keep(w)).cloned().collect(), ..self.clone() }
    }

    pub fn of_subjects(&self, ids: &[usize]) -> Self {
        self.filter(|w| ids.contains(&w.subject))
    }
}

/// Mean over the leading `baseline_s` of a trace.
pub fn rest_baseline(trace: &ThicknessTrace, baseline_s: f64) -> Result<f64> {
    let t0 = trace.t_s.first().copied().ok_or(Error::Empty("thickness trace"))?;
    let vals: Vec<f64> = trace.t_s.iter().zip(&trace.mm).filter(|(t, _)| **t < t0 + baseline_s).map(|(_, v)| *v).collect();
    if vals.is_empty() {
        return Err(Error::Empty("baseline interval"));
    }
    Ok(crate::stats::mean(&vals))
}

/// Sliding windows over one stage. `features` holds one series per channel
/// at `FEATURE_RATE`; `deformation` is at the frame rate.
pub fn make_windows(
    subject: usize,
    stage: u8,
    features: &[Vec<f64>],
    deformation: &ThicknessTrace,
    cfg: &WindowConfig,
) -> Result<Vec<FeatureWindow>> {
    let n_feat = features.first().map_or(0, Vec::len);
    if features.iter().any(|c| c.len() != n_feat) {
        return Err(Error::Alignment("channels differ in length".into()));
    }
    let feat_span = n_feat as f64 / FEATURE_RATE;
    let def_span = deformation.len() as f64 / FRAME_RATE;
    if (feat_span - def_span).abs() > 1.0 / FRAME_RATE + 1e-9 {
        return Err(Error::Alignment(format!("features span {feat_span} s, deformation {def_span} s")));
    }
    let win = cfg.feature_len();
    let stride = (cfg.stride_s * FEATURE_RATE).round() as usize;
    let tlen = cfg.target_len();
    if n_feat < win || stride == 0 {
        return Ok(Vec::new());
    }
    let count = (n_feat - win) / stride + 1;
    let t0 = deformation.t_s.first().copied().unwrap_or(0.0);
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let f0 = w * stride;
        let start_s = f0 as f64 / FEATURE_RATE;
        let mut feats = Vec::with_capacity(features.len() * win);
        for ch in features {
            feats.extend_from_slice(&ch[f0..f0 + win]);
        }
        let pos = (start_s - t0) * FRAME_RATE;
        let k0 = pos.round();
        let target: Vec<f64> = if (pos - k0).abs() < 1e-9 && (k0 as usize) + tlen <= deformation.len() {
            deformation.mm[k0 as usize..k0 as usize + tlen].to_vec()
        } else {
            (0..tlen).map(|j| deformation.sample(start_s + j as f64 / FRAME_RATE)).collect()
        };
        out.push(FeatureWindow { subject, stage, start_s, features: feats, target });
    }
    Ok(out)
}

/// Full per-subject pipeline: features from sEMG, labels from RF tracking,
/// deformation relative to the stage-1 rest baseline.
pub fn preprocess_subject(rec: &SubjectRecording, cfg: &WindowConfig) -> Result<Vec<FeatureWindow>> {
    let tracked: Vec<ThicknessTrace> = rec
        .stages
        .iter()
        .map(|s| track_thickness(&s.rf, &TrackConfig::default()).map(|t| t.trace))
        .collect::<Result<_>>()?;
    let first = rec.stages.iter().position(|s| s.spec.index == 1).unwrap_or(0);
    let baseline = rest_baseline(&tracked[first], cfg.baseline_s)?;
    let mut out = Vec::new();
    for (stage, trace) in rec.stages.iter().zip(&tracked) {
        let features = channel_features(&stage.semg)?;
        out.extend(make_windows(rec.profile.id, stage.spec.index, &features, &trace.offset(-baseline), cfg)?);
    }
    Ok(out)
}

/// Windows for a whole cohort, subjects in order.
pub fn build_dataset(cohort: &[SubjectRecording], cfg: &WindowConfig) -> Result<WindowedDataset> {
    let channels = cohort.first().and_then(|r| r.stages.first()).map_or(0, |s| s.semg.len());
    if channels == 0 {
        return Err(Error::Empty("cohort"));
    }
    let mut windows = Vec::new();
    for rec in cohort {
        windows.extend(preprocess_subject(rec, cfg)?);
    }
    Ok(WindowedDataset { channels, feature_len: cfg.feature_len(), target_len: cfg.target_len(), windows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Channels whose standard deviation was zero and replaced by 1.
    pub degenerate: Vec<usize>,
}

impl Normalizer {
    /// Population z-score statistics per channel over channel-major windows.
    pub fn fit(features: &[&[f64]], channels: usize) -> Result<Self> {
        if features.is_empty() || channels == 0 {
            return Err(Error::Empty("normalizer fit split"));
        }
        let len = features[0].len() / channels;
        if len * features.len() < 2 {
            return Err(Error::Empty("normalizer fit split (fewer than 2 samples per channel)"));
        }
        let mut mean = vec![0.0; channels];
        let mut std = vec![0.0; channels];
        let mut degenerate = Vec::new();
        let count = (len * features.len()) as f64;
        for c in 0..channels {
            let m = features.iter().map(|f| f[c * len..(c + 1) * len].iter().sum::<f64>()).sum::<f64>() / count;
            let v = features
                .iter()
                .map(|f| f[c * len..(c + 1) * len].iter().map(|x| (x - m) * (x - m)).sum::<f64>())
                .sum::<f64>()
                / count;
            mean[c] = m;
            std[c] = if v > 0.0 {
                v.sqrt()
            } else {
                degenerate.push(c);
                1.0
            };
        }
        Ok(Self { mean, std, degenerate })
    }

    pub fn fit_windows(windows: &[FeatureWindow], channels: usize) -> Result<Self> {
        let f: Vec<&[f64]> = windows.iter().map(|w| w.features.as_slice()).collect();
        Self::fit(&f, channels)
    }

    pub fn apply(&self, features: &[f64]) -> Vec<f64> {
        let channels = self.mean.len();
        let len = features.len() / channels;
        features
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let c = i / len;
                (x - self.mean[c]) / self.std[c]
            })
            .collect()
    }

    pub fn apply_dataset(&self, ds: &WindowedDataset) -> WindowedDataset {
        let windows = ds
            .windows
            .iter()
            .map(|w| FeatureWindow { features: self.apply(&w.features), ..w.clone() })
            .collect();
        WindowedDataset { windows, ..ds.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{mean, pearson, pop_std};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn tone(f: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / SEMG_FS).sin()).collect()
    }

    fn gain_db(f: f64) -> f64 {
        let x = tone(f, 10_000);
        let y = bandpass(&x, 20.0, 450.0, SEMG_FS).unwrap();
        let r = |v: &[f64]| (v.iter().map(|a| a * a).sum::<f64>() / v.len() as f64).sqrt();
        20.0 * (r(&y[2000..8000]) / r(&x[2000..8000])).log10()
    }

    #[test]
    fn bandpass_tone_sweep() {
        assert!(gain_db(1.0) <= -40.0, "{}", gain_db(1.0));
        assert!(gain_db(100.0).abs() <= 1.0, "{}", gain_db(100.0));
    }

    #[test]
    fn bandpass_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..3000).map(|_| rng.sample(StandardNormal)).collect();
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let (y, y2) = (bandpass(&x, 20.0, 450.0, SEMG_FS).unwrap(), bandpass(&x2, 20.0, 450.0, SEMG_FS).unwrap());
        assert!(y.iter().zip(&y2).all(|(a, b)| (2.0 * a - b).abs() < 1e-9));
        assert!(bandpass(&x, 200.0, 100.0, SEMG_FS).is_err());
    }

    #[test]
    fn envelope_features_zero_and_length() {
        let f = envelope_features(&vec![0.0; 995], SEMG_FS).unwrap();
        assert_eq!(f.len(), 100);
        assert!(f.iter().all(|&v| v == 0.0));
        assert_eq!(envelope_features(&vec![0.0; 1000], SEMG_FS).unwrap().len(), 100);
        assert_eq!(envelope_features(&vec![0.0; 1001], SEMG_FS).unwrap().len(), 101);
    }

    #[test]
    fn envelope_tracks_triangular_modulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let env: Vec<f64> = (0..n).map(|i| 1.0 - ((i % 2000) as f64 / 1000.0 - 1.0).abs()).collect();
        let noise: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let band = bandpass(&noise, 20.0, 450.0, SEMG_FS).unwrap();
        let x: Vec<f64> = band.iter().zip(&env).map(|(z, e)| z * e).collect();
        let f = envelope_features(&x, SEMG_FS).unwrap();
        let e_dec: Vec<f64> = env.iter().copied().step_by(10).collect();
        assert!(pearson(&f, &e_dec) > 0.9);
    }

    #[test]
    fn normalizer_closed_form_and_degenerate_channel() {
        let w: Vec<f64> = vec![1.0, 2.0, 3.0, 5.0, 5.0, 5.0];
        let n = Normalizer::fit(&[&w], 2).unwrap();
        assert_eq!(n.mean, vec![2.0, 5.0]);
        assert!((n.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(n.degenerate, vec![1]);
        let z = n.apply(&w);
        assert!((z[0] + 1.224744871391589).abs() < 1e-12 && z[1] == 0.0 && (z[2] - 1.224744871391589).abs() < 1e-12);
        assert!(z[3..].iter().all(|&v| v == 0.0));
        assert!(Normalizer::fit(&[], 2).is_err());
    }

    #[test]
    fn normalized_fit_data_is_standard() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ws: Vec<Vec<f64>> = (0..30).map(|_| (0..20).map(|i| rng.gen_range(0.0..3.0) * (1 + i / 10) as f64).collect()).collect();
        let refs: Vec<&[f64]> = ws.iter().map(Vec::as_slice).collect();
        let n = Normalizer::fit(&refs, 2).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = ws.iter().flat_map(|w| n.apply(w)[c * 10..(c + 1) * 10].to_vec()).collect();
            assert!(mean(&vals).abs() < 1e-9);
            assert!((pop_std(&vals) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn window_count_and_alignment() {
        let feats = vec![(0..6000).map(|i| i as f64).collect::<Vec<_>>(); 2];
        let def = ThicknessTrace::uniform(0.0, FRAME_RATE, (0..1200).map(|k| k as f64 * 0.01).collect());
        let ws = make_windows(3, 2, &feats, &def, &WindowConfig::default()).unwrap();
        assert_eq!(ws.len(), 237);
        assert_eq!(ws[0].target, def.mm[..20].to_vec());
        assert_eq!(ws[0].features.len(), 200);
        assert_eq!(ws[1].start_s, 0.25);
        assert_eq!(ws[1].target, def.mm[5..25].to_vec());
        assert_eq!(ws[1].features[0], 25.0);
        assert!(ws.iter().all(|w| w.subject == 3 && w.stage == 2));
    }

    #[test]
    fn span_mismatch_rejected() {
        let feats = vec![vec![0.0; 6000]];
        let def = ThicknessTrace::uniform(0.0, FRAME_RATE, vec![0.0; 1000]);
        assert!(matches!(make_windows(0, 1, &feats, &def, &WindowConfig::default()), Err(Error::Alignment(_))));
    }
}
