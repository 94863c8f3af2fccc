//! On-disk formats: cohort directories, window files, checkpoints, run
//! configuration, reports and plots. Every artifact carries a format version.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{MetricsReport, ProtocolConfig};
use crate::model::{ArchConfig, ModelParameters};
use crate::semg::{FeatureWindow, Normalizer, WindowConfig, WindowedDataset};
use crate::sim::{RfFrameSequence, SimConfig, StageRecording, StageSpec, SubjectProfile, SubjectRecording};
use crate::tensor::Tensor;
use crate::trace::ThicknessTrace;
use crate::train::{AdaptConfig, EpochRecord, TrainConfig, TrainState};

pub const FORMAT_VERSION: u32 = 1;

const ARRAY_MAGIC: &[u8; 8] = b"MYOAF64\0";
const WINDOWS_MAGIC: &[u8; 8] = b"MYOAWIN\0";
const CKPT_MAGIC: &[u8; 8] = b"MYOACKP\0";
const THICKNESS_HEADER: &str = "# myoattn thickness v1";
const PREDICTION_HEADER: &str = "# myoattn prediction v1";

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn check_version(path: &Path, found: u32) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::data(path, format!("format version {found}, expected {FORMAT_VERSION}")));
    }
    Ok(())
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f64s(out: &mut Vec<u8>, v: &[f64]) {
    out.reserve(v.len() * 8);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Cursor over a binary file that reports truncation against the file name.
struct Reader<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(path: &'a Path, buf: &'a [u8], magic: &[u8; 8]) -> Result<Self> {
        let mut r = Self { path, buf, pos: 0 };
        if r.bytes(8)? != magic {
            return Err(Error::data(path, "bad magic bytes"));
        }
        check_version(path, r.u32()?)?;
        Ok(r)
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::data(self.path, format!("truncated: need {n} bytes at offset {}, file has {}", self.pos, self.buf.len()))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::data(self.path, "length overflows usize"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.bytes(n.checked_mul(8).ok_or_else(|| Error::data(self.path, "length overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn json<T: for<'de> Deserialize<'de>>(&mut self) -> Result<T> {
        let n = self.u32()? as usize;
        let raw = self.bytes(n)?;
        serde_json::from_slice(raw).map_err(|e| Error::data(self.path, format!("header: {e}")))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::data(self.path, format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// Writes a little-endian f64 array with its dimensions.
pub fn write_array(path: &Path, dims: &[usize], data: &[f64]) -> Result<()> {
    debug_assert_eq!(dims.iter().product::<usize>(), data.len());
    let mut out = Vec::with_capacity(24 + dims.len() * 8 + data.len() * 8);
    out.extend_from_slice(ARRAY_MAGIC);
    push_u32(&mut out, FORMAT_VERSION);
    push_u32(&mut out, dims.len() as u32);
    for &d in dims {
        push_u64(&mut out, d as u64);
    }
    push_f64s(&mut out, data);
    write(path, out)
}

pub fn read_array(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let buf = read(path)?;
    let mut r = Reader::new(path, &buf, ARRAY_MAGIC)?;
    let rank = r.u32()? as usize;
    let dims = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
    let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::data(path, "dimension overflow"))?;
    let data = r.f64s(n)?;
    r.finish()?;
    Ok((dims, data))
}

fn read_array_dims(path: &Path, rank: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let (dims, data) = read_array(path)?;
    if dims.len() != rank {
        return Err(Error::data(path, format!("rank {} array, expected {rank}", dims.len())));
    }
    Ok((dims, data))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubjectMeta {
    format_version: u32,
    profile: SubjectProfile,
    seed: u64,
    stages: Vec<StageSpec>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RfMeta {
    format_version: u32,
    fs: f64,
    fc: f64,
    samples_per_frame: usize,
    timestamps: Vec<f64>,
}

fn subject_dir(root: &Path, id: usize) -> PathBuf {
    root.join(format!("subject_{id}"))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::data(path, e.to_string()))?;
    s.push('\n');
    write(path, s)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_string(path)?).map_err(|e| Error::data(path, e.to_string()))
}

pub fn write_thickness_csv(path: &Path, trace: &ThicknessTrace) -> Result<()> {
    let mut s = format!("{THICKNESS_HEADER}\nt_s,mm\n");
    for (t, y) in trace.t_s.iter().zip(&trace.mm) {
        writeln!(s, "{t:?},{y:?}").expect("string write");
    }
    write(path, s)
}

pub fn read_thickness_csv(path: &Path) -> Result<ThicknessTrace> {
    let text = read_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(THICKNESS_HEADER) {
        return Err(Error::data(path, "missing or unsupported version line"));
    }
    if lines.next() != Some("t_s,mm") {
        return Err(Error::data(path, "missing column header"));
    }
    let mut trace = ThicknessTrace { t_s: Vec::new(), mm: Vec::new() };
    for (i, line) in lines.enumerate() {
        let parse = |s: Option<&str>| s.and_then(|v| v.trim().parse::<f64>().ok());
        let mut f = line.split(',');
        match (parse(f.next()), parse(f.next()), f.next()) {
            (Some(t), Some(y), None) => {
                trace.t_s.push(t);
                trace.mm.push(y);
            }
            _ => return Err(Error::data(path, format!("line {}: expected `t_s,mm`", i + 3))),
        }
    }
    Ok(trace)
}

/// Writes one `subject_<id>/` directory per recording.
pub fn save_dataset(root: &Path, cohort: &[SubjectRecording]) -> Result<()> {
    for rec in cohort {
        let dir = subject_dir(root, rec.profile.id);
        let meta = SubjectMeta {
            format_version: FORMAT_VERSION,
            profile: rec.profile.clone(),
            seed: rec.seed,
            stages: rec.stages.iter().map(|s| s.spec.clone()).collect(),
        };
        write_json(&dir.join("meta.json"), &meta)?;
        for st in &rec.stages {
            let sd = dir.join(format!("stage_{}", st.spec.index));
            let channels = st.semg.len();
            let n = st.semg.first().map_or(0, Vec::len);
            let flat: Vec<f64> = st.semg.concat();
            write_array(&sd.join("semg.f64"), &[channels, n], &flat)?;
            write_array(&sd.join("activation.f64"), &[st.activation.len()], &st.activation)?;
            write_thickness_csv(&sd.join("thickness.csv"), &st.thickness)?;
            write_array(&sd.join("rf.f64"), &[st.rf.frame_count(), st.rf.samples_per_frame], &st.rf.data)?;
            let rf_meta = RfMeta {
                format_version: FORMAT_VERSION,
                fs: st.rf.fs,
                fc: st.rf.fc,
                samples_per_frame: st.rf.samples_per_frame,
                timestamps: st.rf.timestamps.clone(),
            };
            write_json(&sd.join("rf_meta.json"), &rf_meta)?;
        }
    }
    Ok(())
}

/// Reads every `subject_<id>/` directory under `root`, ordered by id.
pub fn load_dataset(root: &Path) -> Result<Vec<SubjectRecording>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut ids = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(root, e))?;
        if let Some(id) = e.file_name().to_str().and_then(|n| n.strip_prefix("subject_")).and_then(|s| s.parse::<usize>().ok()) {
            ids.push(id);
        }
    }
    if ids.is_empty() {
        return Err(Error::data(root, "no subject_<id> directories"));
    }
    ids.sort_unstable();
    ids.into_iter().map(|id| load_subject(&subject_dir(root, id))).collect()
}

fn load_subject(dir: &Path) -> Result<SubjectRecording> {
    let meta_path = dir.join("meta.json");
    let meta: SubjectMeta = read_json(&meta_path)?;
    check_version(&meta_path, meta.format_version)?;
    let mut stages = Vec::with_capacity(meta.stages.len());
    for spec in meta.stages {
        let sd = dir.join(format!("stage_{}", spec.index));
        let semg_path = sd.join("semg.f64");
        let (dims, flat) = read_array_dims(&semg_path, 2)?;
        let semg: Vec<Vec<f64>> = if dims[1] == 0 { vec![Vec::new(); dims[0]] } else { flat.chunks(dims[1]).map(<[f64]>::to_vec).collect() };
        let (_, activation) = read_array_dims(&sd.join("activation.f64"), 1)?;
        let thickness = read_thickness_csv(&sd.join("thickness.csv"))?;
        let rf_meta_path = sd.join("rf_meta.json");
        let rf_meta: RfMeta = read_json(&rf_meta_path)?;
        check_version(&rf_meta_path, rf_meta.format_version)?;
        let rf_path = sd.join("rf.f64");
        let (rdims, data) = read_array_dims(&rf_path, 2)?;
        if rdims[1] != rf_meta.samples_per_frame || rdims[0] != rf_meta.timestamps.len() {
            return Err(Error::data(&rf_path, format!("{}×{} frames disagree with rf_meta.json", rdims[0], rdims[1])));
        }
        let rf = RfFrameSequence {
            samples_per_frame: rf_meta.samples_per_frame,
            fs: rf_meta.fs,
            fc: rf_meta.fc,
            timestamps: rf_meta.timestamps,
            data,
        };
        stages.push(StageRecording { spec, activation, semg, thickness, rf });
    }
    Ok(SubjectRecording { profile: meta.profile, seed: meta.seed, stages })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WindowsHeader {
    channels: usize,
    feature_len: usize,
    target_len: usize,
    window: WindowConfig,
    /// `(subject, stage, start_s)` per window, in payload order.
    index: Vec<(usize, u8, f64)>,
}

pub fn save_windows(path: &Path, ds: &WindowedDataset, window: &WindowConfig) -> Result<()> {
    let header = WindowsHeader {
        channels: ds.channels,
        feature_len: ds.feature_len,
        target_len: ds.target_len,
        window: window.clone(),
        index: ds.windows.iter().map(|w| (w.subject, w.stage, w.start_s)).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::data(path, e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(WINDOWS_MAGIC);
    push_u32(&mut out, FORMAT_VERSION);
    push_u32(&mut out, json.len() as u32);
    out.extend_from_slice(&json);
    for w in &ds.windows {
        if w.features.len() != ds.channels * ds.feature_len || w.target.len() != ds.target_len {
            return Err(Error::data(path, format!("window at {} s has inconsistent lengths", w.start_s)));
        }
        push_f64s(&mut out, &w.features);
        push_f64s(&mut out, &w.target);
    }
    write(path, out)
}

pub fn load_windows(path: &Path) -> Result<(WindowedDataset, WindowConfig)> {
    let buf = read(path)?;
    let mut r = Reader::new(path, &buf, WINDOWS_MAGIC)?;
    let h: WindowsHeader = r.json()?;
    let mut windows = Vec::with_capacity(h.index.len());
    for &(subject, stage, start_s) in &h.index {
        let features = r.f64s(h.channels * h.feature_len)?;
        let target = r.f64s(h.target_len)?;
        windows.push(FeatureWindow { subject, stage, start_s, features, target });
    }
    r.finish()?;
    let ds = WindowedDataset { channels: h.channels, feature_len: h.feature_len, target_len: h.target_len, windows };
    Ok((ds, h.window))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    /// SHA-256 of the canonical JSON of `history`.
    pub history_digest: String,
    pub history: Vec<EpochRecord>,
}

impl Provenance {
    pub fn from_state<T>(state: &TrainState<T>, seed: u64) -> Result<Self> {
        Ok(Self {
            seed,
            epochs: state.history.len(),
            best_epoch: state.best_epoch,
            history_digest: history_digest(&state.history)?,
            history: state.history.clone(),
        })
    }
}

pub fn history_digest(history: &[EpochRecord]) -> Result<String> {
    let canon = canonical_json(&history)?;
    Ok(Sha256::digest(canon.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub arch: ArchConfig,
    pub provenance: Provenance,
    /// Feature normalization fitted on the training subjects.
    pub normalizer: Option<Normalizer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ModelParameters<f64>,
}

impl Checkpoint {
    pub fn new(params: ModelParameters<f64>, provenance: Provenance, normalizer: Option<Normalizer>) -> Self {
        let header = CheckpointHeader { format_version: FORMAT_VERSION, arch: params.config.clone(), provenance, normalizer };
        Self { header, params }
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let json = serde_json::to_vec(&ckpt.header).map_err(|e| Error::data(path, e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    push_u32(&mut out, FORMAT_VERSION);
    push_u32(&mut out, json.len() as u32);
    out.extend_from_slice(&json);
    push_u32(&mut out, ckpt.params.len() as u32);
    for (name, t) in ckpt.params.iter() {
        push_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        push_u32(&mut out, t.rank() as u32);
        for &d in t.shape() {
            push_u64(&mut out, d as u64);
        }
        push_f64s(&mut out, t.data());
    }
    write(path, out)
}

/// Loads a checkpoint; tensors are validated against `expected` when given,
/// otherwise against the architecture stored in the header.
pub fn load_checkpoint(path: &Path, expected: Option<&ArchConfig>) -> Result<Checkpoint> {
    let buf = read(path)?;
    let mut r = Reader::new(path, &buf, CKPT_MAGIC)?;
    let header: CheckpointHeader = r.json()?;
    check_version(path, header.format_version)?;
    let count = r.u32()? as usize;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.bytes(n)?).map_err(|_| Error::data(path, "tensor name is not UTF-8"))?.to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let data = r.f64s(shape.iter().product())?;
        named.push((name, Tensor::new(shape, data)?));
    }
    r.finish()?;
    let arch = expected.cloned().unwrap_or_else(|| header.arch.clone());
    let params = ModelParameters::from_named(arch, named)?;
    Ok(Checkpoint { header, params })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub windows: PathBuf,
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            windows: "windows.bin".into(),
            checkpoint: "model.ckpt".into(),
            out_dir: "out".into(),
        }
    }
}

/// Every knob of a run. The master `seed` drives simulation and training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub sim: SimConfig,
    pub window: WindowConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub protocol: ProtocolConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            sim: SimConfig::default(),
            window: WindowConfig::default(),
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            adapt: AdaptConfig::default(),
            protocol: ProtocolConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_string(path)?).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_canonical_json(&self) -> Result<String> {
        canonical_json(self)
    }

    /// Training settings with the master seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }
}

/// `%.12g` formatting of a finite float.
pub fn format_g12(v: f64) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{v:.11e}");
    let (mant, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    if (-4..12).contains(&exp) {
        let decimals = (11 - exp).max(0) as usize;
        let fixed = format!("{v:.decimals$}");
        strip_zeros(&fixed).to_string()
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", strip_zeros(mant), exp.abs())
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn write_canonical(v: &Value, indent: usize, out: &mut String) -> Result<()> {
    let pad = |n: usize| "  ".repeat(n);
    match v {
        Value::Null | Value::Bool(_) | Value::String(_) => out.push_str(&v.to_string()),
        Value::Number(n) => {
            if n.is_f64() {
                let f = n.as_f64().expect("float");
                if !f.is_finite() {
                    return Err(Error::Config("non-finite number".into()));
                }
                out.push_str(&format_g12(f));
            } else {
                out.push_str(&n.to_string());
            }
        }
        Value::Array(items) if items.is_empty() => out.push_str("[]"),
        Value::Array(items) => {
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                write_canonical(item, indent + 1, out)?;
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push(']');
        }
        Value::Object(map) if map.is_empty() => out.push_str("{}"),
        Value::Object(map) => {
            out.push_str("{\n");
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            for (i, k) in keys.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                out.push_str(&Value::String((*k).clone()).to_string());
                out.push_str(": ");
                write_canonical(&map[*k], indent + 1, out)?;
                out.push_str(if i + 1 < keys.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push('}');
        }
    }
    Ok(())
}

/// Sorted keys, two-space indentation, floats as `%.12g`, trailing newline.
pub fn canonical_json(v: &impl Serialize) -> Result<String> {
    let value = serde_json::to_value(v).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = String::new();
    write_canonical(&value, 0, &mut out)?;
    out.push('\n');
    Ok(out)
}

pub const REPORT_COLUMNS: &str =
    "group,condition,arm,mtd_mean_mm,mtd_std_mm,me_mean_mm,me_std_mm,mepct_mean,mepct_std,n_periods,n_samples";

/// Table with one row per report; floats to three decimals, missing
/// excursion statistics left empty.
pub fn report_csv(reports: &[MetricsReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Empty("reports"));
    }
    let f = |m: Option<f64>| m.map_or_else(String::new, |v| format!("{v:.3}"));
    let mut s = format!("{REPORT_COLUMNS}\n");
    for r in reports {
        writeln!(
            s,
            "{},{},{},{:.3},{:.3},{},{},{},{},{},{}",
            r.group,
            r.condition,
            r.arm,
            r.mtd.mean,
            r.mtd.std,
            f(r.me.map(|m| m.mean)),
            f(r.me.map(|m| m.std)),
            f(r.me_pct.map(|m| m.mean)),
            f(r.me_pct.map(|m| m.std)),
            r.n_periods,
            r.n_samples
        )
        .expect("string write");
    }
    Ok(s)
}

#[derive(Serialize)]
struct ReportDocument<'a> {
    format_version: u32,
    note: &'static str,
    settings: &'a Value,
    reports: &'a [MetricsReport],
}

/// Reports at full float precision, with the run settings that produced them.
pub fn report_json(reports: &[MetricsReport], settings: &Value) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Empty("reports"));
    }
    let doc = ReportDocument {
        format_version: FORMAT_VERSION,
        note: "optimizer, schedule, epochs, batch size and loss weight are implementation choices; data are synthetic",
        settings,
        reports,
    };
    let mut s = serde_json::to_string_pretty(&doc).map_err(|e| Error::Config(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// One stitched trace row written by `infer`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub subject: usize,
    pub stage: u8,
    pub t_s: f64,
    pub pred_mm: f64,
    pub true_mm: f64,
}

pub fn write_predictions_csv(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut s = format!("{PREDICTION_HEADER}\nsubject,stage,t_s,pred_mm,true_mm\n");
    for r in rows {
        writeln!(s, "{},{},{:?},{:?},{:?}", r.subject, r.stage, r.t_s, r.pred_mm, r.true_mm).expect("string write");
    }
    write(path, s)
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<PredictionRow>> {
    let text = read_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(PREDICTION_HEADER) {
        return Err(Error::data(path, "missing or unsupported version line"));
    }
    lines.next();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::data(path, format!("line {}: expected 5 fields", i + 3));
        if f.len() != 5 {
            return Err(bad());
        }
        rows.push(PredictionRow {
            subject: f[0].parse().map_err(|_| bad())?,
            stage: f[1].parse().map_err(|_| bad())?,
            t_s: f[2].parse().map_err(|_| bad())?,
            pred_mm: f[3].parse().map_err(|_| bad())?,
            true_mm: f[4].parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Predicted and true deformation as two polylines, with vertical marks at
/// the period boundaries.
pub fn trace_svg(title: &str, t_s: &[f64], pred: &[f64], truth: &[f64], periods: &[(usize, usize)]) -> Result<String> {
    if t_s.is_empty() || pred.len() != t_s.len() || truth.len() != t_s.len() {
        return Err(Error::shape("trace_svg", "time, prediction and truth must be nonempty and equal length"));
    }
    let (w, h, m) = (900.0, 320.0, 40.0);
    let (t0, t1) = (t_s[0], t_s[t_s.len() - 1]);
    let lo = pred.iter().chain(truth).copied().fold(f64::INFINITY, f64::min);
    let hi = pred.iter().chain(truth).copied().fold(f64::NEG_INFINITY, f64::max);
    let span_t = if t1 > t0 { t1 - t0 } else { 1.0 };
    let span_y = if hi > lo { hi - lo } else { 1.0 };
    let x = |t: f64| m + (t - t0) / span_t * (w - 2.0 * m);
    let y = |v: f64| h - m - (v - lo) / span_y * (h - 2.0 * m);
    let line = |vals: &[f64]| t_s.iter().zip(vals).map(|(&t, &v)| format!("{:.2},{:.2}", x(t), y(v))).collect::<Vec<_>>().join(" ");
    let mut s = format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    );
    writeln!(s, "  <title>{}</title>", escape(title)).expect("string write");
    writeln!(s, "  <rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"white\"/>").expect("string write");
    for &(a, _) in periods {
        if let Some(&t) = t_s.get(a) {
            let px = x(t);
            writeln!(s, "  <line class=\"period\" x1=\"{px:.2}\" y1=\"{m}\" x2=\"{px:.2}\" y2=\"{}\" stroke=\"#bbbbbb\" stroke-dasharray=\"4 3\"/>", h - m)
                .expect("string write");
        }
    }
    writeln!(s, "  <polyline class=\"truth\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"{}\"/>", line(truth)).expect("string write");
    writeln!(s, "  <polyline class=\"pred\" fill=\"none\" stroke=\"#d62728\" stroke-width=\"1.2\" points=\"{}\"/>", line(pred)).expect("string write");
    writeln!(s, "  <text x=\"{m}\" y=\"20\" font-family=\"sans-serif\" font-size=\"13\">{} (blue: true, red: predicted; {:.2} to {:.2} mm)</text>", escape(title), lo, hi)
        .expect("string write");
    s.push_str("</svg>\n");
    Ok(s)
}

/// Horizontal bars of MTD error (mean with a std whisker), one per report.
pub fn report_svg(reports: &[MetricsReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Empty("reports"));
    }
    let row = 22.0;
    let (label_w, bar_w, m) = (340.0, 420.0, 20.0);
    let h = m * 2.0 + row * reports.len() as f64 + 20.0;
    let w = label_w + bar_w + 2.0 * m + 60.0;
    let top = reports.iter().map(|r| r.mtd.mean + r.mtd.std).fold(0.0, f64::max).max(1e-9);
    let mut s = format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n  <title>MTD error by group, condition and arm</title>\n  <rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    );
    for (i, r) in reports.iter().enumerate() {
        let y0 = m + 20.0 + i as f64 * row;
        let len = r.mtd.mean / top * bar_w;
        let whisker = (r.mtd.mean + r.mtd.std) / top * bar_w;
        let label = escape(&format!("{} {} {}", r.group, r.condition, r.arm));
        writeln!(s, "  <text x=\"{m}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\">{label}</text>", y0 + 14.0).expect("string write");
        writeln!(s, "  <rect x=\"{label_w}\" y=\"{y0:.1}\" width=\"{len:.2}\" height=\"{:.1}\" fill=\"#4c72b0\"/>", row - 6.0).expect("string write");
        writeln!(
            s,
            "  <line x1=\"{:.2}\" y1=\"{:.1}\" x2=\"{:.2}\" y2=\"{:.1}\" stroke=\"black\"/>",
            label_w + len,
            y0 + 8.0,
            label_w + whisker,
            y0 + 8.0
        )
        .expect("string write");
        writeln!(s, "  <text x=\"{:.2}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\">{:.3} mm</text>", label_w + whisker + 6.0, y0 + 13.0, r.mtd.mean)
            .expect("string write");
    }
    s.push_str("</svg>\n");
    Ok(s)
}
