use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use myoattn::autodiff::GradCheckConfig;
use myoattn::eval::{run_protocol, segment_periods, stitch_predictions};
use myoattn::io::{self, Checkpoint, PredictionRow, Provenance, RunConfig};
use myoattn::model::{predict, ArchConfig, ModelParameters};
use myoattn::semg::{build_dataset, FeatureWindow, Normalizer, WindowedDataset};
use myoattn::sim::{synth_cohort, FRAME_RATE};
use myoattn::train::{check_model_gradients, domain_adapt, train};
use myoattn::{Error, Result};

#[derive(Parser)]
#[command(name = "myoattn", version, about = "Muscle thickness deformation from sEMG with a dual-attention network")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Run configuration JSON; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides MYOATTN_SEED and the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Args, Clone, Default)]
struct ModelFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long = "dmodel")]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ff: Option<usize>,
    #[arg(long = "lambda-c")]
    lambda_c: Option<f64>,
    /// Replace cross-attention fusion with mean pooling.
    #[arg(long)]
    no_cross_attention: bool,
}

impl ModelFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.batch {
            cfg.train.batch = v;
        }
        if let Some(v) = self.d_model {
            cfg.arch.d_model = v;
        }
        if let Some(v) = self.heads {
            cfg.arch.heads = v;
        }
        if let Some(v) = self.ff {
            cfg.arch.ff = v;
        }
        if let Some(v) = self.lambda_c {
            cfg.train.lambda_c = v;
        }
        if self.no_cross_attention {
            cfg.arch.cross_attention = false;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a cohort into a dataset directory.
    Simulate {
        #[arg(long)]
        subjects: Option<usize>,
        /// Stage duration in seconds.
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Turn a dataset directory into a windows file.
    Preprocess {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train on the given subjects and write a checkpoint.
    Train {
        #[arg(long)]
        windows: PathBuf,
        /// Comma-separated training subject ids (default: all).
        #[arg(long, value_delimiter = ',')]
        subjects: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune a checkpoint on the first part of one subject's windows.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        windows: PathBuf,
        #[arg(long)]
        subject: usize,
        #[arg(long)]
        out: PathBuf,
        /// Keep encoder parameters fixed.
        #[arg(long)]
        freeze_encoder: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Run the cross-subject protocol and write report tables.
    Eval {
        #[arg(long)]
        windows: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Test pairs as letter codes, e.g. AD,CB (default: from config).
        #[arg(long, value_delimiter = ',')]
        pairs: Vec<String>,
        /// Also write trace plots for the baseline arm.
        #[arg(long)]
        plots: bool,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Predict stitched deformation traces from a checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        windows: PathBuf,
        #[arg(long)]
        subject: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Check model gradients against central differences on one window.
    Gradcheck {
        #[arg(long = "dmodel", default_value_t = 8)]
        d_model: usize,
        #[arg(long, default_value_t = 1)]
        heads: usize,
        #[arg(long, default_value_t = 2)]
        channels: usize,
        #[arg(long, default_value_t = 16)]
        ff: usize,
        /// Coordinates checked per tensor (0 = all).
        #[arg(long, default_value_t = 0)]
        coords: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Render predictions or a report as SVG.
    Plot {
        /// Prediction CSV written by `infer`.
        #[arg(long, conflicts_with = "report")]
        predictions: Option<PathBuf>,
        /// Report JSON written by `eval`.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        subject: Option<usize>,
        #[arg(long)]
        stage: Option<u8>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Ok(v) = std::env::var("MYOATTN_SEED") {
        cfg.seed = v.trim().parse().map_err(|_| Error::Config(format!("MYOATTN_SEED `{v}` is not an unsigned integer")))?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn normalized(ds: &WindowedDataset, norm: &Option<Normalizer>) -> WindowedDataset {
    match norm {
        Some(n) => n.apply_dataset(ds),
        None => ds.clone(),
    }
}

fn parse_pair(code: &str) -> Result<[usize; 2]> {
    let ids: Vec<usize> = code
        .trim()
        .chars()
        .map(|c| c.to_ascii_uppercase())
        .filter(char::is_ascii_uppercase)
        .map(|c| (c as u8 - b'A') as usize)
        .collect();
    match ids.as_slice() {
        [a, b] if code.trim().len() == 2 => Ok([*a, *b]),
        _ => Err(Error::Config(format!("test pair `{code}` must be two subject letters such as AD"))),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { subjects, duration, out, common } => {
            let mut cfg = resolve(&common)?;
            if let Some(n) = subjects {
                cfg.sim.subjects = n;
            }
            if let Some(d) = duration {
                cfg.sim.duration_s = d;
            }
            let cohort = synth_cohort(&cfg.sim, cfg.seed)?;
            io::save_dataset(&out, &cohort)?;
            write_text(&out.join("run_config.json"), &cfg.to_canonical_json()?)?;
            println!("wrote {} subjects to {}", cohort.len(), out.display());
        }
        Command::Preprocess { data, out, common } => {
            let cfg = resolve(&common)?;
            let cohort = io::load_dataset(&data)?;
            let ds = build_dataset(&cohort, &cfg.window)?;
            io::save_windows(&out, &ds, &cfg.window)?;
            println!("wrote {} windows from {} subjects to {}", ds.windows.len(), cohort.len(), out.display());
        }
        Command::Train { windows, subjects, out, model, common } => {
            let mut cfg = resolve(&common)?;
            model.apply(&mut cfg);
            let (ds, _) = io::load_windows(&windows)?;
            let ds = if subjects.is_empty() { ds } else { ds.of_subjects(&subjects) };
            if ds.windows.is_empty() {
                return Err(Error::Empty("training windows for the selected subjects"));
            }
            let norm = Normalizer::fit_windows(&ds.windows, ds.channels)?;
            let set = norm.apply_dataset(&ds);
            let arch = ArchConfig { channels: ds.channels, ..cfg.arch.clone() };
            let tcfg = cfg.train_config();
            let state = train::<f64>(&set.windows, &tcfg, &arch)?;
            for h in &state.history {
                let val = h.val.map_or_else(|| "-".to_string(), |v| format!("{:.5}", v.total));
                eprintln!("epoch {:>3}  lr {:.2e}  train {:.5}  val {val}", h.epoch, h.lr, h.train.total);
            }
            let prov = Provenance::from_state(&state, cfg.seed)?;
            io::save_checkpoint(&out, &Checkpoint::new(state.params, prov, Some(norm)))?;
            println!("wrote {} (best epoch {:?})", out.display(), state.best_epoch);
        }
        Command::Adapt { checkpoint, windows, subject, out, freeze_encoder, common } => {
            let cfg = resolve(&common)?;
            let ckpt = io::load_checkpoint(&checkpoint, None)?;
            let (ds, _) = io::load_windows(&windows)?;
            let target = normalized(&ds.of_subjects(&[subject]), &ckpt.header.normalizer);
            let acfg = myoattn::train::AdaptConfig { freeze_encoder, ..cfg.adapt.clone() };
            let adapted = domain_adapt(&ckpt.params, &target.windows, &cfg.train_config(), &acfg)?;
            let prov = Provenance::from_state(&adapted.state, cfg.seed)?;
            io::save_checkpoint(&out, &Checkpoint::new(adapted.state.params, prov, ckpt.header.normalizer))?;
            println!(
                "adapted on {} windows of subject {subject}; {} reserved; wrote {}",
                adapted.adapt_idx.len(),
                adapted.reserved_idx.len(),
                out.display()
            );
        }
        Command::Eval { windows, out, pairs, plots, model, common } => {
            let mut cfg = resolve(&common)?;
            model.apply(&mut cfg);
            if !pairs.is_empty() {
                cfg.protocol.test_pairs = pairs.iter().map(|p| parse_pair(p)).collect::<Result<_>>()?;
            }
            let (ds, _) = io::load_windows(&windows)?;
            let arch = ArchConfig { channels: ds.channels, ..cfg.arch.clone() };
            let outcome = run_protocol(&ds, &cfg.protocol, &cfg.train_config(), &arch, &cfg.adapt, &mut |m| eprintln!("{m}"))?;
            let settings = serde_json::to_value(&cfg).map_err(|e| Error::Config(e.to_string()))?;
            write_text(&out.join("reports.csv"), &io::report_csv(&outcome.reports)?)?;
            write_text(&out.join("reports.json"), &io::report_json(&outcome.reports, &settings)?)?;
            write_text(&out.join("reports.svg"), &io::report_svg(&outcome.reports)?)?;
            if plots {
                for tp in outcome.traces.iter().filter(|t| t.arm == "baseline") {
                    let title = format!("{} {} subject {} stage {}", tp.group, tp.condition, tp.subject, tp.stage);
                    let svg = io::trace_svg(&title, &tp.truth.t_s, &tp.pred.mm, &tp.truth.mm, &tp.periods)?;
                    let name = format!("trace_{}_{}_s{}_st{}.svg", tp.group, tp.condition, tp.subject, tp.stage);
                    write_text(&out.join("traces").join(name), &svg)?;
                }
            }
            print!("{}", io::report_csv(&outcome.reports)?);
        }
        Command::Infer { checkpoint, windows, subject, out, common } => {
            let _ = resolve(&common)?;
            let ckpt = io::load_checkpoint(&checkpoint, None)?;
            let (ds, _) = io::load_windows(&windows)?;
            let ds = match subject {
                Some(s) => ds.of_subjects(&[s]),
                None => ds,
            };
            let ds = normalized(&ds, &ckpt.header.normalizer);
            let rows = infer_rows(&ckpt.params, &ds.windows)?;
            io::write_predictions_csv(&out, &rows)?;
            println!("wrote {} samples to {}", rows.len(), out.display());
        }
        Command::Gradcheck { d_model, heads, channels, ff, coords, common } => {
            let cfg = resolve(&common)?;
            let arch = ArchConfig { d_model, heads, channels, ff, ..cfg.arch.clone() };
            let params = ModelParameters::<f64>::init(&arch, cfg.seed)?;
            let window = gradcheck_window(&arch, cfg.seed);
            let gcfg = GradCheckConfig { max_coords_per_tensor: (coords > 0).then_some(coords), seed: cfg.seed, ..GradCheckConfig::default() };
            let report = check_model_gradients(&params, &window, cfg.train.lambda_c, &gcfg)?;
            println!(
                "max relative error {:.3e} over {} coordinates ({} null), tolerance {:.0e}: {}",
                report.max_rel_error,
                report.checked,
                report.null_coords,
                report.tol,
                if report.passed() { "PASS" } else { "FAIL" }
            );
            if !report.passed() {
                return Err(Error::Contract(format!("{} coordinates exceed the tolerance", report.failures.len())));
            }
        }
        Command::Plot { predictions, report, subject, stage, out } => {
            if let Some(p) = predictions {
                let rows = io::read_predictions_csv(&p)?;
                let s = subject.or_else(|| rows.first().map(|r| r.subject)).ok_or(Error::Empty("prediction rows"))?;
                let st = stage.or_else(|| rows.iter().find(|r| r.subject == s).map(|r| r.stage)).ok_or(Error::Empty("prediction rows"))?;
                let sel: Vec<&PredictionRow> = rows.iter().filter(|r| r.subject == s && r.stage == st).collect();
                if sel.is_empty() {
                    return Err(Error::Empty("rows for the selected subject and stage"));
                }
                let t: Vec<f64> = sel.iter().map(|r| r.t_s).collect();
                let pred: Vec<f64> = sel.iter().map(|r| r.pred_mm).collect();
                let truth: Vec<f64> = sel.iter().map(|r| r.true_mm).collect();
                let periods = segment_periods(&truth).unwrap_or_default();
                write_text(&out, &io::trace_svg(&format!("subject {s} stage {st}"), &t, &pred, &truth, &periods)?)?;
            } else if let Some(r) = report {
                let text = std::fs::read_to_string(&r).map_err(|e| Error::Io { path: r.clone(), source: e })?;
                let doc: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Data { path: r.clone(), msg: e.to_string() })?;
                let reports: Vec<myoattn::eval::MetricsReport> = serde_json::from_value(doc["reports"].clone()).map_err(|e| Error::Data { path: r.clone(), msg: e.to_string() })?;
                write_text(&out, &io::report_svg(&reports)?)?;
            } else {
                return Err(Error::Config("plot needs --predictions or --report".into()));
            }
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn infer_rows(params: &ModelParameters<f64>, windows: &[FeatureWindow]) -> Result<Vec<PredictionRow>> {
    let mut keys: Vec<(usize, u8)> = windows.iter().map(|w| (w.subject, w.stage)).collect();
    keys.sort_unstable();
    keys.dedup();
    let mut rows = Vec::new();
    for (subject, stage) in keys {
        let sel: Vec<&FeatureWindow> = windows.iter().filter(|w| w.subject == subject && w.stage == stage).collect();
        let preds = sel.iter().map(|w| predict(params, &w.features)).collect::<Result<Vec<_>>>()?;
        let p: Vec<(f64, &[f64])> = sel.iter().zip(&preds).map(|(w, p)| (w.start_s, p.as_slice())).collect();
        let t: Vec<(f64, &[f64])> = sel.iter().map(|w| (w.start_s, w.target.as_slice())).collect();
        let pred = stitch_predictions(&p, FRAME_RATE)?;
        let truth = stitch_predictions(&t, FRAME_RATE)?;
        for k in 0..pred.len() {
            rows.push(PredictionRow { subject, stage, t_s: pred.t_s[k], pred_mm: pred.mm[k], true_mm: truth.mm[k] });
        }
    }
    Ok(rows)
}

/// Smooth, non-degenerate inputs and targets for the gradient check.
fn gradcheck_window(arch: &ArchConfig, seed: u64) -> FeatureWindow {
    let phase = (seed % 1000) as f64 * 1e-3;
    let features = (0..arch.input_len()).map(|i| (i as f64 * 0.37 + phase).sin() + 0.1 * (i as f64 * 1.3).cos()).collect();
    let target = (0..arch.t_out).map(|k| 2.0 * (k as f64 * 0.31 + phase).sin() + 0.05 * k as f64).collect();
    FeatureWindow { subject: 0, stage: 1, start_s: 0.0, features, target }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 2 } else { 1 })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_codes() {
        assert_eq!(parse_pair("AD").unwrap(), [0, 3]);
        assert_eq!(parse_pair("cb").unwrap(), [2, 1]);
        assert!(parse_pair("A").is_err());
        assert!(parse_pair("A1").is_err());
        assert_eq!(myoattn::eval::pair_label(parse_pair("AF").unwrap()), "AF");
    }
}
