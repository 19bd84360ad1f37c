//! On-disk dataset layout, segment-level splitting and checkpoints.
//!
//! Dataset directory:
//!
//! ```text
//! manifest.json
//! images/<id>.ppm     binary P6, 8-bit RGB
//! imu/<id>.csv        header `t,ch0,..,chN`, one row per tick, t = tick index
//! ```
//!
//! Checkpoint file: `RSFC` magic, u32 LE version, u64 LE header length,
//! UTF-8 JSON header, then raw little-endian f32 tensor payload.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ModelConfig;
use crate::error::ModelError;
use crate::params::ModelParams;
use crate::sample::{Condition, ImageTensor, ImuWindow, Sample, SurfaceClass};
use crate::tensor::{DType, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RSFC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("cannot split: {0}")]
    Split(String),
    #[error("{} is not a checkpoint (bad magic)", .0.display())]
    NotACheckpoint(PathBuf),
    #[error("{}: unsupported checkpoint version {version}", path.display())]
    Version { path: PathBuf, version: u32 },
    #[error("{}: truncated checkpoint ({what})", path.display())]
    Truncated { path: PathBuf, what: String },
    #[error("checkpoint tensor `{name}` has shape {got:?}, model expects {expected:?}")]
    ShapeConflict {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("checkpoint does not match model: {0}")]
    Model(ModelError),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> DataError {
    DataError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> DataError {
    DataError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            DataError::MissingFile(path.to_path_buf())
        } else {
            io_err(path, e)
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown split {s:?} (expected train, val or test)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub segment_id: usize,
    /// Relative to the dataset root.
    pub image: String,
    pub imu: String,
    pub label: String,
    pub condition: Condition,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub class_names: Vec<String>,
    pub sample_rate: f32,
    pub samples: Vec<SampleRecord>,
}

impl Manifest {
    pub fn empty(sample_rate: f32) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            class_names: SurfaceClass::names(),
            sample_rate,
            samples: Vec::new(),
        }
    }

    /// Structural checks that do not touch the file system.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.format_version != FORMAT_VERSION {
            return Err(DataError::Manifest(format!(
                "format_version {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let mut ids = HashSet::new();
        let mut seg_label: HashMap<usize, &str> = HashMap::new();
        for r in &self.samples {
            if !ids.insert(r.id.as_str()) {
                return Err(DataError::Manifest(format!("duplicate sample id {:?}", r.id)));
            }
            if !self.class_names.contains(&r.label) {
                return Err(DataError::Manifest(format!(
                    "sample {:?} has label {:?} outside the class set {:?}",
                    r.id, r.label, self.class_names
                )));
            }
            let l = seg_label.entry(r.segment_id).or_insert(r.label.as_str());
            if *l != r.label {
                return Err(DataError::Manifest(format!(
                    "segment {} mixes labels {:?} and {:?}",
                    r.segment_id, l, r.label
                )));
            }
        }
        Ok(())
    }

    pub fn has_splits(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|r| r.split.is_some())
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == Some(split))
            .collect()
    }
}

/// Writes `img` as binary PPM, quantizing to 8 bits.
pub fn write_ppm(path: &Path, img: &ImageTensor) -> Result<(), DataError> {
    if img.channels() != 3 {
        return Err(io_err(path, format!("PPM needs 3 channels, got {}", img.channels())));
    }
    let (h, w) = (img.height(), img.width());
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                bytes.push((img.get(c, y, x) * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn read_ppm(path: &Path) -> Result<ImageTensor, DataError> {
    let bytes = read_file(path)?;
    let mut pos = 0;
    let mut line = 1;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                if bytes[pos] == b'\n' {
                    line += 1;
                }
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(path, line, "truncated PPM header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if tokens[0] != "P6" {
        return Err(parse_err(path, 1, format!("expected magic P6, found {:?}", tokens[0])));
    }
    let num = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| parse_err(path, line, format!("invalid {what} {s:?}")))
    };
    let (w, h, maxval) = (num(&tokens[1], "width")?, num(&tokens[2], "height")?, num(&tokens[3], "maxval")?);
    if maxval != 255 {
        return Err(parse_err(path, line, format!("only 8-bit PPM is supported, maxval {maxval}")));
    }
    pos += 1;
    let need = w * h * 3;
    let body = bytes.get(pos..pos + need).ok_or_else(|| {
        parse_err(path, line + 1, format!("pixel data has {} bytes, expected {need}", bytes.len().saturating_sub(pos)))
    })?;
    Ok(ImageTensor::from_fn(3, h, w, |c, y, x| f32::from(body[(y * w + x) * 3 + c]) / 255.0))
}

/// Writes `t,ch0..chN` rows; f32 values use the shortest exact decimal form.
pub fn write_imu_csv(path: &Path, win: &ImuWindow) -> Result<(), DataError> {
    let (c, t) = (win.channels(), win.len());
    let mut s = String::from("t");
    for ch in 0..c {
        write!(s, ",ch{ch}").expect("string write");
    }
    s.push('\n');
    for tick in 0..t {
        write!(s, "{tick}").expect("string write");
        for ch in 0..c {
            write!(s, ",{}", win.channel(ch)[tick]).expect("string write");
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| io_err(path, e))
}

pub fn read_imu_csv(path: &Path, sample_rate: f32) -> Result<ImuWindow, DataError> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| parse_err(path, 1, "file is not UTF-8"))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"t") || cols.len() < 2 {
        return Err(parse_err(path, 1, "header must be `t,ch0,..,chN`"));
    }
    for (i, name) in cols[1..].iter().enumerate() {
        if *name != format!("ch{i}") {
            return Err(parse_err(path, 1, format!("column {} should be ch{i}, found {name:?}", i + 1)));
        }
    }
    let c = cols.len() - 1;
    let mut rows: Vec<Vec<f32>> = Vec::new();
    for (k, row) in lines.enumerate() {
        let line = k + 2;
        if row.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != c + 1 {
            return Err(parse_err(path, line, format!("expected {} fields, found {}", c + 1, fields.len())));
        }
        let vals = fields[1..]
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f32>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(path, line, format!("invalid value {f:?}")))
            })
            .collect::<Result<Vec<f32>, _>>()?;
        rows.push(vals);
    }
    if rows.is_empty() {
        return Err(parse_err(path, 2, "no samples"));
    }
    let t = rows.len();
    let data = (0..c).flat_map(|ch| rows.iter().map(move |r| r[ch])).collect();
    let tensor = Tensor::new(vec![c, t], data).expect("sized by construction");
    ImuWindow::new(tensor, sample_rate).map_err(|e| parse_err(path, 1, e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| io_err(path, e))
}

pub fn write_manifest(dir: &Path, m: &Manifest) -> Result<(), DataError> {
    write_json(&dir.join("manifest.json"), m)
}

/// Parses and validates `manifest.json`, checking that every referenced
/// file exists.
pub fn read_manifest(dir: &Path) -> Result<Manifest, DataError> {
    let path = dir.join("manifest.json");
    let bytes = read_file(&path)?;
    let m: Manifest = serde_json::from_slice(&bytes).map_err(|e| parse_err(&path, e.line(), e.to_string()))?;
    m.validate()?;
    for r in &m.samples {
        for rel in [&r.image, &r.imu] {
            let p = dir.join(rel);
            if !p.is_file() {
                return Err(DataError::MissingFile(p));
            }
        }
    }
    Ok(m)
}

/// Writes every sample and the manifest (without split labels).
pub fn write_dataset(dir: &Path, samples: &[Sample], sample_rate: f32) -> Result<Manifest, DataError> {
    for sub in ["images", "imu"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| io_err(&dir.join(sub), e))?;
    }
    let mut m = Manifest::empty(sample_rate);
    for s in samples {
        let image = format!("images/{}.ppm", s.id);
        let imu = format!("imu/{}.csv", s.id);
        write_ppm(&dir.join(&image), &s.image)?;
        write_imu_csv(&dir.join(&imu), &s.imu)?;
        m.samples.push(SampleRecord {
            id: s.id.clone(),
            segment_id: s.segment_id,
            image,
            imu,
            label: s.label.name().to_string(),
            condition: s.condition,
            split: None,
        });
    }
    m.validate()?;
    write_manifest(dir, &m)?;
    Ok(m)
}

/// A dataset directory with a validated manifest; samples load on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self, DataError> {
        Ok(Self {
            root: dir.to_path_buf(),
            manifest: read_manifest(dir)?,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn load(&self, i: usize) -> Result<Sample, DataError> {
        let r = &self.manifest.samples[i];
        let label: SurfaceClass = r
            .label
            .parse()
            .map_err(|e: String| DataError::Manifest(format!("sample {:?}: {e}", r.id)))?;
        Ok(Sample {
            id: r.id.clone(),
            image: read_ppm(&self.root.join(&r.image))?,
            imu: read_imu_csv(&self.root.join(&r.imu), self.manifest.sample_rate)?,
            label,
            segment_id: r.segment_id,
            condition: r.condition,
        })
    }

    pub fn load_all(&self, indices: &[usize]) -> Result<Vec<Sample>, DataError> {
        indices.iter().map(|&i| self.load(i)).collect()
    }

    pub fn save_manifest(&self) -> Result<(), DataError> {
        write_manifest(&self.root, &self.manifest)
    }
}

/// Segment ids with their sample counts, in first-appearance order.
fn segments(m: &Manifest) -> Vec<(usize, usize)> {
    let mut order = Vec::new();
    let mut count: HashMap<usize, usize> = HashMap::new();
    for r in &m.samples {
        let e = count.entry(r.segment_id).or_insert(0);
        if *e == 0 {
            order.push(r.segment_id);
        }
        *e += 1;
    }
    order.into_iter().map(|s| (s, count[&s])).collect()
}

fn check_fractions(fractions: [f64; 3]) -> Result<(), DataError> {
    if fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::Split(format!("fractions {fractions:?} must be non-negative and sum to 1")));
    }
    Ok(())
}

/// Walks `segs` in order and puts each segment in the first split whose
/// cumulative target it has not passed, judged at the segment midpoint.
fn assign_greedy(segs: &[(usize, usize)], fractions: [f64; 3], out: &mut HashMap<usize, Split>) {
    let total: usize = segs.iter().map(|s| s.1).sum();
    let bounds = [
        fractions[0] * total as f64,
        (fractions[0] + fractions[1]) * total as f64,
    ];
    let mut cum = 0usize;
    for &(seg, size) in segs {
        let mid = cum as f64 + size as f64 / 2.0;
        let split = if mid < bounds[0] {
            Split::Train
        } else if mid < bounds[1] {
            Split::Val
        } else {
            Split::Test
        };
        out.insert(seg, split);
        cum += size;
    }
}

fn apply(m: &Manifest, assignment: &HashMap<usize, Split>) -> Manifest {
    let mut out = m.clone();
    for r in &mut out.samples {
        r.split = Some(assignment[&r.segment_id]);
    }
    out
}

/// Shuffles whole segments with a seeded rng and assigns them greedily by
/// cumulative sample count toward `fractions` (train, val, test).
pub fn split_by_segment(m: &Manifest, fractions: [f64; 3], seed: u64) -> Result<Manifest, DataError> {
    check_fractions(fractions)?;
    let mut segs = segments(m);
    if segs.len() < Split::ALL.len() {
        return Err(DataError::Split(format!(
            "{} segments cannot fill {} splits",
            segs.len(),
            Split::ALL.len()
        )));
    }
    segs.sort_unstable();
    segs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = HashMap::new();
    assign_greedy(&segs, fractions, &mut assignment);
    Ok(apply(m, &assignment))
}

/// [`split_by_segment`] run independently within each class so that every
/// class with at least three segments reaches every split.
pub fn split_by_segment_stratified(
    m: &Manifest,
    fractions: [f64; 3],
    seed: u64,
) -> Result<Manifest, DataError> {
    check_fractions(fractions)?;
    let segs = segments(m);
    if segs.len() < Split::ALL.len() {
        return Err(DataError::Split(format!(
            "{} segments cannot fill {} splits",
            segs.len(),
            Split::ALL.len()
        )));
    }
    let seg_label: HashMap<usize, &str> = m.samples.iter().map(|r| (r.segment_id, r.label.as_str())).collect();
    let mut by_class: BTreeMap<&str, Vec<(usize, usize)>> = BTreeMap::new();
    for s in segs {
        by_class.entry(seg_label[&s.0]).or_default().push(s);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = HashMap::new();
    for group in by_class.values_mut() {
        group.sort_unstable();
        group.shuffle(&mut rng);
        assign_greedy(group, fractions, &mut assignment);
    }
    Ok(apply(m, &assignment))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    /// Free-form training metadata (epoch, validation accuracy, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams<f32>,
    pub meta: serde_json::Value,
}

pub fn encode_checkpoint(params: &ModelParams<f32>, config: &ModelConfig, meta: serde_json::Value) -> Vec<u8> {
    let mut payload = Vec::with_capacity(params.num_scalars() * 4);
    let mut tensors = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: DType::Float32,
            offset: payload.len() as u64,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        config: config.clone(),
        tensors,
        meta,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams<f32>,
    config: &ModelConfig,
    meta: serde_json::Value,
) -> Result<(), DataError> {
    let bytes = encode_checkpoint(params, config, meta);
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&bytes).map_err(|e| io_err(path, e))
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<Checkpoint, DataError> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(DataError::NotACheckpoint(path.to_path_buf()));
    }
    let truncated = |what: &str| DataError::Truncated {
        path: path.to_path_buf(),
        what: what.to_string(),
    };
    let version = u32::from_le_bytes(bytes.get(4..8).ok_or_else(|| truncated("version"))?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(DataError::Version {
            path: path.to_path_buf(),
            version,
        });
    }
    let hlen = u64::from_le_bytes(bytes.get(8..16).ok_or_else(|| truncated("header length"))?.try_into().expect("8 bytes"));
    let hend = 16usize
        .checked_add(usize::try_from(hlen).map_err(|_| truncated("header length"))?)
        .ok_or_else(|| truncated("header length"))?;
    let hbytes = bytes.get(16..hend).ok_or_else(|| truncated("header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(hbytes).map_err(|e| parse_err(path, e.line(), format!("checkpoint header: {e}")))?;
    let payload = &bytes[hend..];
    let mut tensors = BTreeMap::new();
    let mut spans: Vec<(u64, u64, &str)> = Vec::new();
    for e in &header.tensors {
        if e.dtype != DType::Float32 {
            return Err(parse_err(path, 1, format!("tensor `{}` has dtype {}, expected float32", e.name, e.dtype.name())));
        }
        let n: usize = e.shape.iter().product();
        let end = e.offset + 4 * n as u64;
        if end > payload.len() as u64 {
            return Err(truncated(&format!("tensor `{}` runs past the payload", e.name)));
        }
        spans.push((e.offset, end, &e.name));
        let raw = &payload[e.offset as usize..end as usize];
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data).expect("sized from shape");
        if tensors.insert(e.name.clone(), t).is_some() {
            return Err(parse_err(path, 1, format!("duplicate tensor `{}`", e.name)));
        }
    }
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(parse_err(path, 1, format!("tensors `{}` and `{}` overlap", w[0].2, w[1].2)));
        }
    }
    Ok(Checkpoint {
        config: header.config,
        params: ModelParams::from_map(tensors),
        meta: header.meta,
    })
}

/// Loads a checkpoint; with `expected`, every tensor is validated against
/// that configuration.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint, DataError> {
    let bytes = read_file(path)?;
    let ck = decode_checkpoint(path, &bytes)?;
    let cfg = expected.unwrap_or(&ck.config);
    ck.params.check_against(cfg).map_err(|e| match e {
        ModelError::Shape { what, expected, got } => DataError::ShapeConflict {
            name: what,
            expected,
            got,
        },
        other => DataError::Model(other),
    })?;
    Ok(ck)
}
