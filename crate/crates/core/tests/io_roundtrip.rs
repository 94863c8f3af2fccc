use std::fs;

use myoattn::io::{self, Checkpoint, Provenance};
use myoattn::model::{predict, ArchConfig, ModelParameters};
use myoattn::semg::{build_dataset, WindowConfig};
use myoattn::sim::{synth_cohort, SimConfig};
use myoattn::train::TrainState;
use myoattn::Error;

fn small_cohort() -> Vec<myoattn::sim::SubjectRecording> {
    synth_cohort(&SimConfig { subjects: 2, duration_s: 6.0, ..SimConfig::default() }, 11).unwrap()
}

#[test]
fn dataset_round_trip_and_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = small_cohort();
    io::save_dataset(dir.path(), &cohort).unwrap();
    for id in 0..2 {
        let s = dir.path().join(format!("subject_{id}"));
        assert!(s.join("meta.json").is_file());
        for k in 1..=3 {
            for f in ["semg.f64", "thickness.csv", "rf.f64", "rf_meta.json"] {
                assert!(s.join(format!("stage_{k}")).join(f).is_file(), "{f}");
            }
        }
    }
    assert_eq!(io::load_dataset(dir.path()).unwrap(), cohort);
}

#[test]
fn meta_profile_keeps_full_precision() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = small_cohort();
    io::save_dataset(dir.path(), &cohort).unwrap();
    let text = fs::read_to_string(dir.path().join("subject_1/meta.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["format_version"], 1);
    let p = &cohort[1].profile;
    assert_eq!(v["profile"]["gain"].as_f64().unwrap().to_bits(), p.gain.to_bits());
    assert_eq!(v["profile"]["tau"].as_f64().unwrap().to_bits(), p.tau.to_bits());
    assert_eq!(v["profile"]["period"].as_f64().unwrap().to_bits(), p.period.to_bits());
    let w: Vec<f64> = serde_json::from_value(v["profile"]["channel_weights"].clone()).unwrap();
    assert_eq!(w, p.channel_weights);
}

#[test]
fn truncated_binary_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    io::save_dataset(dir.path(), &small_cohort()).unwrap();
    let f = dir.path().join("subject_0/stage_2/semg.f64");
    let bytes = fs::read(&f).unwrap();
    fs::write(&f, &bytes[..bytes.len() / 2]).unwrap();
    let err = io::load_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Data { .. }), "{err:?}");
    assert!(err.to_string().contains("stage_2/semg.f64"), "{err}");
    assert!(err.is_data_error());
}

#[test]
fn unknown_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    io::save_dataset(dir.path(), &small_cohort()).unwrap();
    let meta = dir.path().join("subject_0/meta.json");
    let text = fs::read_to_string(&meta).unwrap().replace("\"format_version\": 1", "\"format_version\": 99");
    fs::write(&meta, text).unwrap();
    let err = io::load_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("meta.json") && err.contains("99"), "{err}");
}

#[test]
fn windows_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let wc = WindowConfig::default();
    let ds = build_dataset(&small_cohort(), &wc).unwrap();
    let p = dir.path().join("w.bin");
    io::save_windows(&p, &ds, &wc).unwrap();
    let (back, wc2) = io::load_windows(&p).unwrap();
    assert_eq!(back, ds);
    assert_eq!(wc2, wc);
    let bytes = fs::read(&p).unwrap();
    fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
    assert!(io::load_windows(&p).unwrap_err().to_string().contains("w.bin"));
}

fn checkpoint(arch: &ArchConfig) -> Checkpoint {
    let params = ModelParameters::<f64>::init(arch, 5).unwrap();
    let state = TrainState::new(params.clone());
    Checkpoint::new(params, Provenance::from_state(&state, 5).unwrap(), None)
}

#[test]
fn checkpoint_round_trip_reproduces_forward() {
    let dir = tempfile::tempdir().unwrap();
    let arch = ArchConfig { d_model: 16, heads: 2, ff: 32, ..ArchConfig::default() };
    let ckpt = checkpoint(&arch);
    let p = dir.path().join("m.ckpt");
    io::save_checkpoint(&p, &ckpt).unwrap();
    let back = io::load_checkpoint(&p, None).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.header.format_version, 1);
    let x: Vec<f64> = (0..400).map(|i| (i as f64 * 0.05).sin()).collect();
    assert_eq!(predict(&back.params, &x).unwrap(), predict(&ckpt.params, &x).unwrap());
}

#[test]
fn corrupted_magic_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    io::save_checkpoint(&p, &checkpoint(&ArchConfig { d_model: 8, heads: 2, ff: 8, ..ArchConfig::default() })).unwrap();
    let mut bytes = fs::read(&p).unwrap();
    bytes[0] ^= 0xff;
    fs::write(&p, bytes).unwrap();
    let err = io::load_checkpoint(&p, None).unwrap_err().to_string();
    assert!(err.contains("magic"), "{err}");
}

#[test]
fn mismatched_architecture_names_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    io::save_checkpoint(&p, &checkpoint(&ArchConfig::default())).unwrap();
    let narrow = ArchConfig { d_model: 32, ..ArchConfig::default() };
    let err = io::load_checkpoint(&p, Some(&narrow)).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }), "{err:?}");
    assert!(err.to_string().contains("patch.w"), "{err}");
}

#[test]
fn history_digest_tracks_history() {
    let arch = ArchConfig { d_model: 8, heads: 2, ff: 8, ..ArchConfig::default() };
    let mut state = TrainState::new(ModelParameters::<f64>::init(&arch, 1).unwrap());
    let empty = Provenance::from_state(&state, 1).unwrap().history_digest;
    assert_eq!(empty.len(), 64);
    state.history.push(myoattn::train::EpochRecord { epoch: 0, lr: 1e-3, train: Default::default(), val: None });
    assert_ne!(Provenance::from_state(&state, 1).unwrap().history_digest, empty);
}
