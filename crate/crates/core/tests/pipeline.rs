//! Small end-to-end runs through simulation, preprocessing, training and evaluation.

use myoattn::eval::{predict_traces, segment_periods, ErrorSamples};
use myoattn::model::ArchConfig;
use myoattn::semg::{build_dataset, FeatureWindow, Normalizer, WindowConfig};
use myoattn::sim::{synth_cohort, SimConfig};
use myoattn::train::{domain_adapt, train, AdaptConfig, TrainConfig};

fn mtd_mae(params: &myoattn::model::ModelParameters<f64>, windows: &[&FeatureWindow]) -> f64 {
    let mut acc = ErrorSamples::default();
    for (_, _, pred, truth) in predict_traces(params, windows).unwrap() {
        let periods = segment_periods(&truth.mm).unwrap_or_default();
        acc.extend(&ErrorSamples::collect(&pred.mm, &truth.mm, &periods).unwrap());
    }
    acc.summarize("", "", "").unwrap().mtd.mean
}

#[test]
fn self_adaptation_changes_little() {
    let cohort = synth_cohort(&SimConfig { subjects: 2, duration_s: 20.0, ..SimConfig::default() }, 3).unwrap();
    let ds = build_dataset(&cohort, &WindowConfig::default()).unwrap();
    let norm = Normalizer::fit_windows(&ds.windows, ds.channels).unwrap();
    let ds = norm.apply_dataset(&ds);
    let arch = ArchConfig { d_model: 16, heads: 2, ff: 32, ..ArchConfig::default() };
    let tcfg = TrainConfig { epochs: 4, batch: 16, seed: 3, ..TrainConfig::default() };
    let state = train::<f64>(&ds.windows, &tcfg, &arch).unwrap();

    let own = ds.of_subjects(&[0]);
    let adapted = domain_adapt(&state.params, &own.windows, &tcfg, &AdaptConfig::default()).unwrap();
    assert_eq!(adapted.adapt_idx.len(), (own.windows.len() as f64 * 0.2).round() as usize);
    let reserved: Vec<&FeatureWindow> = adapted.reserved_idx.iter().map(|&i| &own.windows[i]).collect();
    let before = mtd_mae(&state.params, &reserved);
    let after = mtd_mae(&adapted.state.params, &reserved);
    assert!(((after - before) / before).abs() < 0.2, "before {before}, after {after}");
}

#[test]
fn labels_start_near_zero_at_rest() {
    let cohort = synth_cohort(&SimConfig { subjects: 2, duration_s: 8.0, ..SimConfig::default() }, 4).unwrap();
    let ds = build_dataset(&cohort, &WindowConfig::default()).unwrap();
    for s in 0..2 {
        let first = ds.windows.iter().find(|w| w.subject == s && w.stage == 1).unwrap();
        assert!(first.target[0].abs() < 0.05, "{}", first.target[0]);
        let peak = ds.windows.iter().filter(|w| w.subject == s).flat_map(|w| w.target.iter().copied()).fold(0.0, f64::max);
        assert!(peak > 1.0, "deformation should develop, peak {peak}");
    }
}
