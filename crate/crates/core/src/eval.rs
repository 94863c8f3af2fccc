//! Deformation metrics and the cross-subject evaluation protocol.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{predict, ArchConfig, ModelParameters};
use crate::semg::{FeatureWindow, Normalizer, WindowedDataset};
use crate::sim::FRAME_RATE;
use crate::stats::MeanStd;
use crate::trace::ThicknessTrace;
use crate::train::{domain_adapt, train, AdaptConfig, TrainConfig};

/// True excursions below this (mm) are left out of the relative ME error.
pub const ME_PCT_GUARD_MM: f64 = 0.5;

/// Averages overlapping window outputs onto a common grid at `rate`.
/// Each entry is `(start_s, values)`; sample `k` of a window sits at
/// `start_s + k / rate`.
pub fn stitch_predictions(windows: &[(f64, &[f64])], rate: f64) -> Result<ThicknessTrace> {
    if windows.is_empty() {
        return Err(Error::Empty("window predictions"));
    }
    let t0 = windows.iter().map(|w| w.0).fold(f64::INFINITY, f64::min);
    let offsets: Vec<usize> = windows.iter().map(|w| ((w.0 - t0) * rate).round() as usize).collect();
    let len = windows.iter().zip(&offsets).map(|(w, o)| o + w.1.len()).max().unwrap_or(0);
    let mut sum = vec![0.0; len];
    let mut count = vec![0usize; len];
    for (w, &o) in windows.iter().zip(&offsets) {
        for (k, &v) in w.1.iter().enumerate() {
            sum[o + k] += v;
            count[o + k] += 1;
        }
    }
    let mut gaps = Vec::new();
    let mut i = 0;
    while i < len {
        if count[i] == 0 {
            let s = i;
            while i < len && count[i] == 0 {
                i += 1;
            }
            gaps.push((s, i));
        } else {
            i += 1;
        }
    }
    if !gaps.is_empty() {
        return Err(Error::Coverage(gaps));
    }
    let mm = sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect();
    Ok(ThicknessTrace::uniform(t0, rate, mm))
}

/// Periods `[start, end)` between consecutive upward crossings of the
/// half-range level. Partial periods at either end are dropped.
pub fn segment_periods(truth: &[f64]) -> Result<Vec<(usize, usize)>> {
    let lo = truth.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = truth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::Segmentation("trace is constant".into()));
    }
    let level = lo + 0.5 * (hi - lo);
    let ups: Vec<usize> = (1..truth.len()).filter(|&i| truth[i - 1] < level && truth[i] >= level).collect();
    if ups.len() < 2 {
        return Err(Error::Segmentation(format!("{} upward crossing(s), need 2 for one period", ups.len())));
    }
    Ok(ups.windows(2).map(|w| (w[0], w[1])).collect())
}

/// Peak-to-trough range of a segment.
pub fn muscle_excursion(segment: &[f64]) -> Result<f64> {
    if segment.len() < 2 {
        return Err(Error::shape("muscle_excursion", format!("segment of {} samples", segment.len())));
    }
    let hi = segment.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = segment.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(hi - lo)
}

/// Raw per-sample and per-period errors; pooled across traces, then summarized.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ErrorSamples {
    pub abs_error: Vec<f64>,
    pub me_error: Vec<f64>,
    pub me_pct: Vec<f64>,
}

impl ErrorSamples {
    pub fn collect(pred: &[f64], truth: &[f64], periods: &[(usize, usize)]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::shape("compute_metrics", format!("prediction {} vs truth {}", pred.len(), truth.len())));
        }
        let mut out = Self { abs_error: pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).collect(), ..Self::default() };
        for &(a, b) in periods {
            if b > truth.len() || a >= b {
                return Err(Error::shape("compute_metrics", format!("period [{a}, {b}) outside {} samples", truth.len())));
            }
            let me_t = muscle_excursion(&truth[a..b])?;
            let err = (muscle_excursion(&pred[a..b])? - me_t).abs();
            out.me_error.push(err);
            if me_t >= ME_PCT_GUARD_MM {
                out.me_pct.push(100.0 * err / me_t);
            }
        }
        Ok(out)
    }

    pub fn extend(&mut self, other: &ErrorSamples) {
        self.abs_error.extend_from_slice(&other.abs_error);
        self.me_error.extend_from_slice(&other.me_error);
        self.me_pct.extend_from_slice(&other.me_pct);
    }

    pub fn summarize(&self, group: &str, condition: &str, arm: &str) -> Result<MetricsReport> {
        let mtd = MeanStd::of(&self.abs_error).ok_or(Error::Empty("evaluated samples"))?;
        Ok(MetricsReport {
            group: group.to_string(),
            condition: condition.to_string(),
            arm: arm.to_string(),
            mtd,
            me: MeanStd::of(&self.me_error),
            me_pct: MeanStd::of(&self.me_pct),
            n_periods: self.me_error.len(),
            n_samples: self.abs_error.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub group: String,
    pub condition: String,
    pub arm: String,
    /// Per-sample absolute deformation error, mm.
    pub mtd: MeanStd,
    /// Per-period absolute excursion error, mm.
    pub me: Option<MeanStd>,
    /// Per-period relative excursion error, %.
    pub me_pct: Option<MeanStd>,
    pub n_periods: usize,
    pub n_samples: usize,
}

/// Metrics for one aligned trace pair with period bounds from the truth.
pub fn compute_metrics(pred: &[f64], truth: &[f64], periods: &[(usize, usize)], group: &str) -> Result<MetricsReport> {
    ErrorSamples::collect(pred, truth, periods)?.summarize(group, "", "")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Baseline,
    NoContractionLoss,
    NoCrossAttention,
}

impl Arm {
    pub fn label(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::NoContractionLoss => "no_contraction_loss",
            Arm::NoCrossAttention => "no_cross_attention",
        }
    }

    pub fn configure(self, tcfg: &TrainConfig, arch: &ArchConfig) -> (TrainConfig, ArchConfig) {
        let mut t = tcfg.clone();
        let mut a = arch.clone();
        match self {
            Arm::Baseline => {}
            Arm::NoContractionLoss => t.lambda_c = 0.0,
            Arm::NoCrossAttention => a.cross_attention = false,
        }
        (t, a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub subjects: usize,
    /// Held-out subject pairs; the remaining subjects train.
    pub test_pairs: Vec<[usize; 2]>,
    pub adapt_fraction: f64,
    pub no_contraction_loss: bool,
    pub no_cross_attention: bool,
    /// Stages kept for training and evaluation.
    pub stages: Vec<u8>,
    /// Stages summarized separately as the loaded condition.
    pub loaded_stages: Vec<u8>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            subjects: 6,
            test_pairs: vec![[0, 3], [0, 1], [2, 3], [2, 1], [0, 5]],
            adapt_fraction: 0.2,
            no_contraction_loss: true,
            no_cross_attention: true,
            stages: vec![1, 2, 3],
            loaded_stages: vec![3],
        }
    }
}

/// Letter label for a subject pair: `[0, 3]` → `"AD"`.
pub fn pair_label(pair: [usize; 2]) -> String {
    pair.iter().map(|&s| subject_letter(s)).collect()
}

pub fn subject_letter(s: usize) -> char {
    if s < 26 {
        (b'A' + s as u8) as char
    } else {
        '?'
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subjects < 6 {
            return Err(Error::Param(format!("protocol needs at least 6 subjects, got {}", self.subjects)));
        }
        if self.test_pairs.is_empty() {
            return Err(Error::Param("no test pairs".into()));
        }
        for p in &self.test_pairs {
            if p[0] == p[1] || p.iter().any(|&s| s >= self.subjects) {
                return Err(Error::Param(format!("invalid test pair {p:?} for {} subjects", self.subjects)));
            }
        }
        if !(self.adapt_fraction > 0.0 && self.adapt_fraction < 1.0) {
            return Err(Error::Param(format!("adaptation fraction {} outside (0, 1)", self.adapt_fraction)));
        }
        if self.stages.is_empty() {
            return Err(Error::Param("no stages selected".into()));
        }
        Ok(())
    }

    pub fn arms(&self) -> Vec<Arm> {
        let mut a = vec![Arm::Baseline];
        if self.no_contraction_loss {
            a.push(Arm::NoContractionLoss);
        }
        if self.no_cross_attention {
            a.push(Arm::NoCrossAttention);
        }
        a
    }

    pub fn train_subjects(&self, pair: [usize; 2]) -> Vec<usize> {
        (0..self.subjects).filter(|s| !pair.contains(s)).collect()
    }
}

/// Which windows of a test subject were used for adaptation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub group: String,
    pub arm: String,
    pub subject: usize,
    /// `(stage, start_s)` keys of the adaptation windows.
    pub adapt: Vec<(u8, f64)>,
    /// `(stage, start_s)` keys of the reserved evaluation windows.
    pub reserved: Vec<(u8, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePair {
    pub group: String,
    pub arm: String,
    pub condition: String,
    pub subject: usize,
    pub stage: u8,
    pub pred: ThicknessTrace,
    pub truth: ThicknessTrace,
    pub periods: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolOutcome {
    pub reports: Vec<MetricsReport>,
    pub splits: Vec<SplitRecord>,
    pub traces: Vec<TracePair>,
}

impl ProtocolOutcome {
    pub fn find(&self, group: &str, condition: &str, arm: &str) -> Option<&MetricsReport> {
        self.reports.iter().find(|r| r.group == group && r.condition == condition && r.arm == arm)
    }
}

/// Stitched prediction and truth traces keyed by (subject, stage).
pub fn predict_traces(
    params: &ModelParameters<f64>,
    windows: &[&FeatureWindow],
) -> Result<Vec<(usize, u8, ThicknessTrace, ThicknessTrace)>> {
    let mut keys: Vec<(usize, u8)> = windows.iter().map(|w| (w.subject, w.stage)).collect();
    keys.sort_unstable();
    keys.dedup();
    let mut out = Vec::with_capacity(keys.len());
    for (subject, stage) in keys {
        let group: Vec<&&FeatureWindow> = windows.iter().filter(|w| w.subject == subject && w.stage == stage).collect();
        let preds: Vec<Vec<f64>> = group.iter().map(|w| predict(params, &w.features)).collect::<Result<_>>()?;
        let p: Vec<(f64, &[f64])> = group.iter().zip(&preds).map(|(w, p)| (w.start_s, p.as_slice())).collect();
        let t: Vec<(f64, &[f64])> = group.iter().map(|w| (w.start_s, w.target.as_slice())).collect();
        out.push((subject, stage, stitch_predictions(&p, FRAME_RATE)?, stitch_predictions(&t, FRAME_RATE)?));
    }
    Ok(out)
}

/// Errors over stitched traces, grouped into all stages, unloaded and loaded.
fn score(
    traces: &[(usize, u8, ThicknessTrace, ThicknessTrace)],
    loaded: &[u8],
    keep: &mut Vec<TracePair>,
    tag: (&str, &str, &str),
) -> Result<[ErrorSamples; 3]> {
    let mut acc: [ErrorSamples; 3] = Default::default();
    for (subject, stage, pred, truth) in traces {
        let periods = segment_periods(&truth.mm).unwrap_or_default();
        let e = ErrorSamples::collect(&pred.mm, &truth.mm, &periods)?;
        acc[0].extend(&e);
        acc[if loaded.contains(stage) { 2 } else { 1 }].extend(&e);
        keep.push(TracePair {
            group: tag.0.into(),
            arm: tag.1.into(),
            condition: tag.2.into(),
            subject: *subject,
            stage: *stage,
            pred: pred.clone(),
            truth: truth.clone(),
            periods,
        });
    }
    Ok(acc)
}

/// Trains each arm on four subjects per test pair, scores the held-out pair
/// zero-shot and after per-subject adaptation on the first fraction of its
/// windows, always on the same reserved windows.
pub fn run_protocol(
    dataset: &WindowedDataset,
    pcfg: &ProtocolConfig,
    tcfg: &TrainConfig,
    arch: &ArchConfig,
    acfg: &AdaptConfig,
    progress: &mut dyn FnMut(&str),
) -> Result<ProtocolOutcome> {
    pcfg.validate()?;
    let present = dataset.subjects();
    if present.len() < pcfg.subjects || present.iter().take(pcfg.subjects).enumerate().any(|(i, &s)| i != s) {
        return Err(Error::Param(format!("protocol needs subjects 0..{}, dataset has {present:?}", pcfg.subjects)));
    }
    let data = dataset.filter(|w| pcfg.stages.contains(&w.stage));
    let acfg = AdaptConfig { fraction: pcfg.adapt_fraction, ..acfg.clone() };
    let breakdown = [
        String::new(),
        format!("_{}", unloaded_label(&pcfg.stages, &pcfg.loaded_stages).unwrap_or_else(|| "unloaded".into())),
        format!("_{}", stage_label(&pcfg.loaded_stages)),
    ];
    let mut outcome = ProtocolOutcome { reports: Vec::new(), splits: Vec::new(), traces: Vec::new() };
    for &pair in &pcfg.test_pairs {
        let group = pair_label(pair);
        let train_ids = pcfg.train_subjects(pair);
        let train_raw = data.of_subjects(&train_ids);
        let norm = Normalizer::fit_windows(&train_raw.windows, data.channels)?;
        let train_set = norm.apply_dataset(&train_raw);
        for arm in pcfg.arms() {
            let (t, a) = arm.configure(tcfg, arch);
            progress(&format!("{group}/{}: training on subjects {train_ids:?} ({} windows)", arm.label(), train_set.windows.len()));
            let state = train::<f64>(&train_set.windows, &t, &a)?;
            let mut zero: [ErrorSamples; 3] = Default::default();
            let mut adapted: [ErrorSamples; 3] = Default::default();
            for &s in &pair {
                let test = norm.apply_dataset(&data.of_subjects(&[s]));
                if test.windows.is_empty() {
                    return Err(Error::Empty("test subject windows"));
                }
                progress(&format!("{group}/{}: adapting to subject {}", arm.label(), subject_letter(s)));
                let ad = domain_adapt(&state.params, &test.windows, &t, &acfg)?;
                let key = |i: &usize| (test.windows[*i].stage, test.windows[*i].start_s);
                outcome.splits.push(SplitRecord {
                    group: group.clone(),
                    arm: arm.label().into(),
                    subject: s,
                    adapt: ad.adapt_idx.iter().map(key).collect(),
                    reserved: ad.reserved_idx.iter().map(key).collect(),
                });
                let reserved: Vec<&FeatureWindow> = ad.reserved_idx.iter().map(|&i| &test.windows[i]).collect();
                let zs = predict_traces(&state.params, &reserved)?;
                let tag = (group.as_str(), arm.label(), "zero_shot");
                for (acc, e) in zero.iter_mut().zip(score(&zs, &pcfg.loaded_stages, &mut outcome.traces, tag)?) {
                    acc.extend(&e);
                }
                let at = predict_traces(&ad.state.params, &reserved)?;
                let tag = (group.as_str(), arm.label(), "adapted");
                for (acc, e) in adapted.iter_mut().zip(score(&at, &pcfg.loaded_stages, &mut outcome.traces, tag)?) {
                    acc.extend(&e);
                }
            }
            for (base, acc) in [("zero_shot", &zero), ("adapted", &adapted)] {
                for (k, e) in acc.iter().enumerate() {
                    if !e.abs_error.is_empty() {
                        outcome.reports.push(e.summarize(&group, &format!("{base}{}", breakdown[k]), arm.label())?);
                    }
                }
            }
        }
    }
    Ok(outcome)
}

fn stage_label(stages: &[u8]) -> String {
    let parts: Vec<String> = stages.iter().map(u8::to_string).collect();
    let plural = if stages.len() > 1 { "stages" } else { "stage" };
    format!("{plural}_{}", parts.join("_"))
}

fn unloaded_label(all: &[u8], loaded: &[u8]) -> Option<String> {
    let rest: Vec<u8> = all.iter().copied().filter(|s| !loaded.contains(s)).collect();
    (!rest.is_empty()).then(|| stage_label(&rest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stitch_mean_and_identity() {
        let a = [1.0; 20];
        let b = [3.0; 20];
        let t = stitch_predictions(&[(0.0, &a), (0.0, &b)], 20.0).unwrap();
        assert!(t.mm.iter().all(|&v| v == 2.0));
        let r: Vec<f64> = (0..20).map(f64::from).collect();
        let single = stitch_predictions(&[(1.5, &r)], 20.0).unwrap();
        assert_eq!(single.mm, r);
        assert_eq!(single.t_s[0], 1.5);
    }

    #[test]
    fn stitch_length_and_gaps() {
        let w = [0.0; 20];
        let starts: Vec<f64> = (0..9).map(|i| i as f64 * 0.25).collect();
        let entries: Vec<(f64, &[f64])> = starts.iter().map(|&s| (s, &w[..])).collect();
        let t = stitch_predictions(&entries, 20.0).unwrap();
        let span = 2.0 + 1.0;
        assert!((t.len() as f64 - span * 20.0).abs() <= 1.0);
        match stitch_predictions(&[(0.0, &w), (2.0, &w)], 20.0) {
            Err(Error::Coverage(g)) => assert_eq!(g, vec![(20, 40)]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn segments_sinusoid() {
        let x: Vec<f64> = (0..180).map(|i| (2.0 * std::f64::consts::PI * i as f64 / 60.0 + 0.7).sin()).collect();
        let p = segment_periods(&x).unwrap();
        assert!(p.len() >= 2);
        for (a, b) in p {
            assert!((b - a).abs_diff(60) <= 1);
        }
        assert!(matches!(segment_periods(&[2.0; 50]), Err(Error::Segmentation(_))));
    }

    #[test]
    fn excursion_closed_forms() {
        assert_eq!(muscle_excursion(&[10.0, 12.0, 14.0, 12.0, 10.0]).unwrap(), 4.0);
        assert_eq!(muscle_excursion(&[3.0; 4]).unwrap(), 0.0);
        assert!(muscle_excursion(&[1.0]).is_err());
    }

    #[test]
    fn metrics_identity_and_percent() {
        let t: Vec<f64> = (0..100).map(|i| (i as f64 * 0.2).sin() * 3.0).collect();
        let p = segment_periods(&t).unwrap();
        let r = compute_metrics(&t, &t, &p, "X").unwrap();
        assert_eq!(r.mtd.mean, 0.0);
        assert_eq!(r.mtd.std, 0.0);
        assert_eq!(r.me.unwrap().mean, 0.0);
        assert_eq!(r.me_pct.unwrap().mean, 0.0);
        assert_eq!(r.n_samples, 100);
        assert_eq!(r.n_periods, p.len());

        let truth = [0.0, 5.0, 0.0];
        let pred = [0.0, 5.7, 0.0];
        let r = compute_metrics(&pred, &truth, &[(0, 3)], "X").unwrap();
        assert!((r.me.unwrap().mean - 0.7).abs() < 1e-12);
        assert!((r.me_pct.unwrap().mean - 14.0).abs() < 1e-12);
        assert!(compute_metrics(&pred, &truth[..2], &[], "X").is_err());
    }

    #[test]
    fn percent_guard_excludes_small_periods() {
        let truth = [0.0, 0.3, 0.0, 0.0, 2.0, 0.0];
        let pred = [0.0, 0.6, 0.0, 0.0, 2.5, 0.0];
        let r = compute_metrics(&pred, &truth, &[(0, 3), (3, 6)], "X").unwrap();
        assert_eq!(r.n_periods, 2);
        assert!((r.me_pct.unwrap().mean - 25.0).abs() < 1e-12);
    }

    #[test]
    fn pair_labels_and_arms() {
        assert_eq!(pair_label([0, 3]), "AD");
        assert_eq!(pair_label([0, 5]), "AF");
        let p = ProtocolConfig::default();
        assert_eq!(p.arms(), vec![Arm::Baseline, Arm::NoContractionLoss, Arm::NoCrossAttention]);
        assert_eq!(p.train_subjects([0, 3]), vec![1, 2, 4, 5]);
        assert!(ProtocolConfig { subjects: 5, ..p.clone() }.validate().is_err());
        assert!(ProtocolConfig { test_pairs: vec![[1, 1]], ..p }.validate().is_err());
        assert_eq!(stage_label(&[3]), "stage_3");
        assert_eq!(unloaded_label(&[1, 2, 3], &[3]).unwrap(), "stages_1_2");
    }
}
