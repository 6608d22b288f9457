//! On-disk formats and the synthetic dataset generator.
//!
//! * features: `CPLF`, u32 version, u64 n_samples, u64 d_feat, then
//!   row-major f32, all little-endian
//! * labels: CSV `sample_index,class_id,split`
//! * attributes: CSV `class_id,a0,...`, one row per class
//! * manifest: flat `key=value` text, paths relative to the manifest
//! * checkpoint: `CPLM`, u32 version, header, then f64 arrays

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::domain::{validate_dataset, ClassId, Dataset, HyperParams, Matrix, Prototype, Split};
use crate::error::{CplError, Result};
use crate::net::{AdamState, AttributeEmbedder, Dims, GradientSet};
use crate::objective::{Aggregation, LossVariant};
use crate::rng::{self, Stream};
use crate::sampler::{ClassSchedule, SamplingMode};
use crate::trainer::TrainOptions;

pub const FEATURE_MAGIC: &[u8; 4] = b"CPLF";
pub const FEATURE_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CPLM";
pub const CHECKPOINT_VERSION: u32 = 1;

const FEATURE_HEADER_LEN: u64 = 4 + 4 + 8 + 8;

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub features_path: PathBuf,
    /// Labels and split tags share one CSV.
    pub labels_path: PathBuf,
    pub attributes_path: PathBuf,
    pub class_names_path: Option<PathBuf>,
    pub d_feat: usize,
    pub d_attr: usize,
    pub n_samples: usize,
    pub n_classes: usize,
    /// When absent, derived from the split tags on load.
    pub seen_classes: Option<Vec<ClassId>>,
    pub unseen_classes: Option<Vec<ClassId>>,
}

impl Manifest {
    /// Standard file names under `dir`, dimensions taken from `ds`.
    pub fn for_directory(dir: impl AsRef<Path>, ds: &Dataset) -> Self {
        let dir = dir.as_ref();
        Self {
            features_path: dir.join("features.cplf"),
            labels_path: dir.join("labels.csv"),
            attributes_path: dir.join("attributes.csv"),
            class_names_path: Some(dir.join("classes.txt")),
            d_feat: ds.d_feat(),
            d_attr: ds.d_attr(),
            n_samples: ds.n_samples(),
            n_classes: ds.n_classes(),
            seen_classes: Some(ds.seen_classes.clone()),
            unseen_classes: Some(ds.unseen_classes.clone()),
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CplError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base, path)
    }

    fn parse(text: &str, base: &Path, path: &Path) -> Result<Self> {
        let mut features = None;
        let mut labels = None;
        let mut attributes = None;
        let mut class_names = None;
        let mut dims = [None; 4];
        let mut seen = None;
        let mut unseen = None;
        let mut offset = 0u64;
        for line in text.split_inclusive('\n') {
            let here = offset;
            offset += line.len() as u64;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fmt_err = |message: String| CplError::Format {
                path: path.to_path_buf(),
                offset: here,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| fmt_err(format!("expected key=value, got '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            let num = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| fmt_err(format!("{key} must be a non-negative integer, got '{v}'")))
            };
            let classes = |v: &str| -> Result<Vec<ClassId>> {
                v.split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| num(s.trim()).map(ClassId))
                    .collect()
            };
            match key {
                "features" => features = Some(base.join(value)),
                "labels" | "splits" => labels = Some(base.join(value)),
                "attributes" => attributes = Some(base.join(value)),
                "class_names" => class_names = Some(base.join(value)),
                "d_feat" => dims[0] = Some(num(value)?),
                "d_attr" => dims[1] = Some(num(value)?),
                "n_samples" => dims[2] = Some(num(value)?),
                "n_classes" => dims[3] = Some(num(value)?),
                "seen_classes" => seen = Some(classes(value)?),
                "unseen_classes" => unseen = Some(classes(value)?),
                other => return Err(fmt_err(format!("unknown manifest key '{other}'"))),
            }
        }
        let missing = |k: &str| CplError::Format {
            path: path.to_path_buf(),
            offset,
            message: format!("missing manifest key '{k}'"),
        };
        Ok(Self {
            features_path: features.ok_or_else(|| missing("features"))?,
            labels_path: labels.ok_or_else(|| missing("labels"))?,
            attributes_path: attributes.ok_or_else(|| missing("attributes"))?,
            class_names_path: class_names,
            d_feat: dims[0].ok_or_else(|| missing("d_feat"))?,
            d_attr: dims[1].ok_or_else(|| missing("d_attr"))?,
            n_samples: dims[2].ok_or_else(|| missing("n_samples"))?,
            n_classes: dims[3].ok_or_else(|| missing("n_classes"))?,
            seen_classes: seen,
            unseen_classes: unseen,
        })
    }

    /// Writes the manifest; paths inside `path`'s directory are stored relative.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        let rel = |p: &Path| {
            p.strip_prefix(base)
                .unwrap_or(p)
                .to_string_lossy()
                .into_owned()
        };
        let list = |v: &[ClassId]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        let mut out = String::new();
        out.push_str(&format!("features={}\n", rel(&self.features_path)));
        out.push_str(&format!("labels={}\n", rel(&self.labels_path)));
        out.push_str(&format!("attributes={}\n", rel(&self.attributes_path)));
        if let Some(p) = &self.class_names_path {
            out.push_str(&format!("class_names={}\n", rel(p)));
        }
        out.push_str(&format!("d_feat={}\n", self.d_feat));
        out.push_str(&format!("d_attr={}\n", self.d_attr));
        out.push_str(&format!("n_samples={}\n", self.n_samples));
        out.push_str(&format!("n_classes={}\n", self.n_classes));
        if let Some(s) = &self.seen_classes {
            out.push_str(&format!("seen_classes={}\n", list(s)));
        }
        if let Some(u) = &self.unseen_classes {
            out.push_str(&format!("unseen_classes={}\n", list(u)));
        }
        fs::write(path, out).map_err(|e| CplError::io(path, e))
    }
}

// ---------------------------------------------------------------------------
// Features

pub fn write_features(path: impl AsRef<Path>, features: &Matrix) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(FEATURE_HEADER_LEN as usize + features.as_slice().len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(features.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(features.cols() as u64).to_le_bytes());
    for &v in features.as_slice() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| CplError::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CplError::io(path, e))?;
    let mut r = ByteReader::new(&bytes, path);
    let magic = r.take(4)?;
    if magic != FEATURE_MAGIC {
        return Err(r.error_at(0, "bad magic bytes, expected CPLF"));
    }
    let version = r.u32()?;
    if version != FEATURE_VERSION {
        return Err(CplError::Version {
            path: path.to_path_buf(),
            found: version,
            expected: FEATURE_VERSION,
        });
    }
    let n = r.u64()? as usize;
    let d = r.u64()? as usize;
    let row_bytes = d as u64 * 4;
    let body = bytes.len() as u64 - FEATURE_HEADER_LEN;
    let expected = n as u64 * row_bytes;
    if body < expected {
        let full_rows = body.checked_div(row_bytes).unwrap_or(0);
        return Err(r.error_at(
            FEATURE_HEADER_LEN + full_rows * row_bytes,
            &format!("truncated: row {full_rows} of {n} is incomplete ({body} of {expected} data bytes)"),
        ));
    }
    if body > expected {
        return Err(r.error_at(FEATURE_HEADER_LEN + expected, "trailing bytes after feature data"));
    }
    let data = bytes[FEATURE_HEADER_LEN as usize..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Matrix::from_vec(n, d, data)
}

// ---------------------------------------------------------------------------
// Labels and attributes

fn csv_err(path: &Path, e: csv::Error) -> CplError {
    let offset = e.position().map(|p| p.byte()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CplError::io(path, io),
        other => CplError::Format {
            path: path.to_path_buf(),
            offset,
            message: format!("{other:?}"),
        },
    }
}

fn write_labels(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["sample_index", "class_id", "split"])
        .map_err(|e| csv_err(path, e))?;
    for (i, (label, split)) in ds.labels.iter().zip(&ds.split).enumerate() {
        w.write_record([i.to_string(), label.to_string(), split.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CplError::io(path, e))
}

fn read_labels(path: &Path) -> Result<(Vec<ClassId>, Vec<Split>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?;
    if header != vec!["sample_index", "class_id", "split"] {
        return Err(CplError::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: "header must be sample_index,class_id,split".into(),
        });
    }
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let offset = rec.position().map(|p| p.byte()).unwrap_or(0);
        let bad = |message: String| CplError::Format {
            path: path.to_path_buf(),
            offset,
            message,
        };
        let idx: usize = rec[0].trim().parse().map_err(|_| bad(format!("bad sample index '{}'", &rec[0])))?;
        if idx != labels.len() {
            return Err(bad(format!("sample_index {idx} out of sequence, expected {}", labels.len())));
        }
        let class: usize = rec[1].trim().parse().map_err(|_| bad(format!("bad class id '{}'", &rec[1])))?;
        let split: Split = rec[2].trim().parse().map_err(|e: CplError| bad(e.to_string()))?;
        labels.push(ClassId(class));
        splits.push(split);
    }
    Ok((labels, splits))
}

fn write_attributes(path: &Path, attrs: &Matrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["class_id".to_string()];
    header.extend((0..attrs.cols()).map(|j| format!("a{j}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (c, row) in attrs.iter_rows().enumerate() {
        let mut rec = vec![c.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CplError::io(path, e))
}

fn read_attributes(path: &Path, d_attr: usize) -> Result<Matrix> {
    let mut r = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.get(0) != Some("class_id") {
        return Err(CplError::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: "first column must be class_id".into(),
        });
    }
    if header.len() != d_attr + 1 {
        return Err(CplError::Dimension {
            what: format!("attribute columns in {}", path.display()),
            expected: d_attr,
            found: header.len().saturating_sub(1),
        });
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let offset = rec.position().map(|p| p.byte()).unwrap_or(0);
        let bad = |message: String| CplError::Format {
            path: path.to_path_buf(),
            offset,
            message,
        };
        if rec.len() != d_attr + 1 {
            return Err(bad(format!("expected {} fields, found {}", d_attr + 1, rec.len())));
        }
        let id: usize = rec[0].trim().parse().map_err(|_| bad(format!("bad class id '{}'", &rec[0])))?;
        if id != rows {
            return Err(bad(format!("class_id {id} out of sequence, expected {rows}")));
        }
        for f in rec.iter().skip(1) {
            data.push(f.trim().parse::<f64>().map_err(|_| bad(format!("bad attribute value '{f}'")))?);
        }
        rows += 1;
    }
    Matrix::from_vec(rows, d_attr, data)
}

// ---------------------------------------------------------------------------
// Dataset

pub fn save_dataset(ds: &Dataset, manifest: &Manifest) -> Result<()> {
    write_features(&manifest.features_path, &ds.features)?;
    write_labels(&manifest.labels_path, ds)?;
    write_attributes(&manifest.attributes_path, &ds.attributes)?;
    if let Some(p) = &manifest.class_names_path {
        let mut text = ds.class_names.join("\n");
        text.push('\n');
        fs::write(p, text).map_err(|e| CplError::io(p, e))?;
    }
    Ok(())
}

/// Saves `ds` under `dir` with standard file names and writes
/// `dir/manifest.txt`. Returns the manifest path.
pub fn save_dataset_dir(ds: &Dataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| CplError::io(dir, e))?;
    let manifest = Manifest::for_directory(dir, ds);
    save_dataset(ds, &manifest)?;
    let path = dir.join("manifest.txt");
    manifest.write(&path)?;
    Ok(path)
}

pub fn load_dataset(manifest: &Manifest) -> Result<Dataset> {
    let features = read_features(&manifest.features_path)?;
    let dim = |what: &str, expected: usize, found: usize| -> Result<()> {
        if expected != found {
            return Err(CplError::Dimension {
                what: what.to_string(),
                expected,
                found,
            });
        }
        Ok(())
    };
    dim("feature rows (n_samples)", manifest.n_samples, features.rows())?;
    // A zero-row file cannot carry a column count worth checking beyond the header.
    dim("feature columns (d_feat)", manifest.d_feat, features.cols())?;

    let (labels, split) = read_labels(&manifest.labels_path)?;
    dim("label rows (n_samples)", manifest.n_samples, labels.len())?;

    let attributes = read_attributes(&manifest.attributes_path, manifest.d_attr)?;
    dim("attribute rows (n_classes)", manifest.n_classes, attributes.rows())?;

    let class_names = match &manifest.class_names_path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CplError::io(p, e))?;
            let names: Vec<String> = text.lines().map(str::to_string).collect();
            dim("class names", manifest.n_classes, names.len())?;
            names
        }
        None => (0..manifest.n_classes).map(|i| format!("class_{i}")).collect(),
    };

    let infer = |pick: &dyn Fn(Split) -> bool| -> Vec<ClassId> {
        labels
            .iter()
            .zip(&split)
            .filter(|(_, s)| pick(**s))
            .map(|(l, _)| *l)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    };
    let seen_classes = manifest
        .seen_classes
        .clone()
        .unwrap_or_else(|| infer(&|s| s != Split::TestUnseen));
    let unseen_classes = manifest
        .unseen_classes
        .clone()
        .unwrap_or_else(|| infer(&|s| s == Split::TestUnseen));

    let ds = Dataset {
        features,
        labels,
        split,
        attributes,
        class_names,
        seen_classes,
        unseen_classes,
    };
    let violations = validate_dataset(&ds);
    if !violations.is_empty() {
        return Err(CplError::InvalidDataset(violations));
    }
    Ok(ds)
}

pub fn load_dataset_from(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    load_dataset(&Manifest::read(manifest_path)?)
}

// ---------------------------------------------------------------------------
// Checkpoint

/// Everything needed to resume training or rebuild prototypes.
///
/// `hyperparams.epochs` records the number of epochs completed so far.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub hyperparams: HyperParams,
    pub options: TrainOptions,
    pub embedder: AttributeEmbedder,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn dims(&self) -> Dims {
        self.embedder.dims
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.embedder.dims;
        let hp = &self.hyperparams;
        let mut b = Vec::with_capacity(160 + 24 * d.n_params());
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [d.d_attr, d.hidden, d.d_feat, hp.classes, hp.shots, hp.epochs] {
            b.extend_from_slice(&(v as u64).to_le_bytes());
        }
        b.extend_from_slice(&hp.seed.to_le_bytes());
        for v in [hp.lambda, hp.gamma, hp.learning_rate, hp.weight_decay] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&self.options.to_codes());
        b.extend_from_slice(&self.adam.step.to_le_bytes());
        for v in [self.adam.beta1, self.adam.beta2, self.adam.epsilon] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        let groups = [
            self.embedder.arrays(),
            self.adam.first_moment.arrays(),
            self.adam.second_moment.arrays(),
        ];
        for group in groups {
            for (_, arr) in group {
                for v in arr {
                    b.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(CplError::NotCheckpoint {
                path: path.to_path_buf(),
            });
        }
        r.take(4)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CplError::Version {
                path: path.to_path_buf(),
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut ints = [0usize; 6];
        for v in ints.iter_mut() {
            *v = r.u64()? as usize;
        }
        let [d_attr, hidden, d_feat, classes, shots, epochs] = ints;
        let seed = r.u64()?;
        let lambda = r.f64()?;
        let gamma = r.f64()?;
        let learning_rate = r.f64()?;
        let weight_decay = r.f64()?;
        let codes_at = r.pos as u64;
        let codes: [u8; 8] = r.take(8)?.try_into().expect("8 bytes");
        let options = TrainOptions::from_codes(codes).ok_or_else(|| r.error_at(codes_at, "unknown option code"))?;
        let step = r.u64()?;
        let beta1 = r.f64()?;
        let beta2 = r.f64()?;
        let epsilon = r.f64()?;

        let dims = Dims::new(d_attr, hidden, d_feat);
        let needed = dims
            .n_params()
            .checked_mul(24)
            .ok_or_else(|| r.error_at(8, "dimension header overflows"))?;
        if r.remaining() != needed {
            return Err(r.error_at(
                r.pos as u64,
                &format!("expected {needed} bytes of parameter data, found {}", r.remaining()),
            ));
        }
        let read_set = |r: &mut ByteReader| -> Result<GradientSet> {
            let mut g = GradientSet::zeros(dims);
            for (_, arr) in g.arrays_mut() {
                for v in arr.iter_mut() {
                    *v = r.f64()?;
                }
            }
            Ok(g)
        };
        let params = read_set(&mut r)?;
        let first_moment = read_set(&mut r)?;
        let second_moment = read_set(&mut r)?;
        Ok(Self {
            hyperparams: HyperParams {
                classes,
                shots,
                lambda,
                gamma,
                epochs,
                learning_rate,
                weight_decay,
                hidden_size: hidden,
                seed,
            },
            options,
            embedder: AttributeEmbedder {
                dims,
                w1: params.w1,
                b1: params.b1,
                w2: params.w2,
                b2: params.b2,
            },
            adam: AdamState {
                first_moment,
                second_moment,
                step,
                beta1,
                beta2,
                epsilon,
            },
        })
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ck.to_bytes()).map_err(|e| CplError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CplError::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

impl TrainOptions {
    fn to_codes(self) -> [u8; 8] {
        [
            match self.mode {
                SamplingMode::TaskLevel => 0,
                SamplingMode::SampleLevel => 1,
            },
            match self.schedule {
                ClassSchedule::Uniform => 0,
                ClassSchedule::Coverage => 1,
            },
            match self.aggregation {
                Aggregation::Mean => 0,
                Aggregation::Sum => 1,
            },
            match self.variant {
                LossVariant::Combined => 0,
                LossVariant::CepOnly => 1,
            },
            self.unit_attributes as u8,
            0,
            0,
            0,
        ]
    }

    fn from_codes(c: [u8; 8]) -> Option<Self> {
        let flag = |v: u8| match v {
            0 => Some(false),
            1 => Some(true),
            _ => None,
        };
        if c[5..] != [0, 0, 0] {
            return None;
        }
        Some(Self {
            mode: if flag(c[0])? {
                SamplingMode::SampleLevel
            } else {
                SamplingMode::TaskLevel
            },
            schedule: if flag(c[1])? {
                ClassSchedule::Coverage
            } else {
                ClassSchedule::Uniform
            },
            aggregation: if flag(c[2])? { Aggregation::Sum } else { Aggregation::Mean },
            variant: if flag(c[3])? {
                LossVariant::CepOnly
            } else {
                LossVariant::Combined
            },
            unit_attributes: flag(c[4])?,
        })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    fn error_at(&self, offset: u64, message: &str) -> CplError {
        CplError::Format {
            path: self.path.to_path_buf(),
            offset,
            message: message.to_string(),
        }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.error_at(
                self.pos as u64,
                &format!("unexpected end of file (needed {n} bytes, {} left)", self.remaining()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Parameters of the synthetic benchmark.
///
/// Attributes are uniform in [0,1]; a hidden Gaussian linear map followed by
/// a ReLU gives each class mean, and samples add isotropic noise clipped at
/// zero. Seen classes get train and test_seen samples, unseen classes only
/// test_unseen ones.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub seen_classes: usize,
    pub unseen_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub d_attr: usize,
    pub d_feat: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Upper bound on seen + unseen classes, if any.
    pub class_budget: Option<usize>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seen_classes: 27,
            unseen_classes: 10,
            train_per_class: 50,
            test_per_class: 30,
            d_attr: 16,
            d_feat: 64,
            noise_sigma: 0.1,
            seed: 0,
            class_budget: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub dataset: Dataset,
    /// Ground-truth class means, one row per class.
    pub class_means: Matrix,
}

impl SyntheticData {
    /// Standard-setting accuracy of nearest-prototype recognition using the
    /// true class means as prototypes: the ceiling a learned embedder can hope for.
    pub fn oracle_accuracy(&self) -> Result<f64> {
        let protos = self
            .dataset
            .unseen_classes
            .iter()
            .map(|&c| Ok((c, Prototype::new(self.class_means.row(c.0).to_vec())?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(crate::eval::evaluate_with_prototypes(&self.dataset, &protos, crate::eval::Setting::Standard)?.acc_unseen)
    }
}

#[inline]
fn to_f32_precision(v: f64) -> f64 {
    v as f32 as f64
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    let (k, l) = (spec.seen_classes, spec.unseen_classes);
    if k < 2 || l < 2 {
        return Err(CplError::config(format!("need at least 2 seen and 2 unseen classes, got {k} and {l}")));
    }
    if spec.d_attr == 0 || spec.d_feat == 0 {
        return Err(CplError::config("dimensions must be at least 1"));
    }
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        return Err(CplError::config(format!("noise sigma must be >= 0, got {}", spec.noise_sigma)));
    }
    if let Some(budget) = spec.class_budget {
        if k + l > budget {
            return Err(CplError::config(format!("{k}+{l} classes exceed the class budget of {budget}")));
        }
    }
    let n_classes = k + l;
    let mut rng = rng::derive(spec.seed, Stream::Synthetic, 0, 0);

    let attributes = Matrix::from_vec(
        n_classes,
        spec.d_attr,
        (0..n_classes * spec.d_attr).map(|_| rng.random::<f64>()).collect(),
    )?;
    // map: d_feat x d_attr
    let scale = 1.0 / (spec.d_attr as f64).sqrt();
    let map: Vec<f64> = (0..spec.d_feat * spec.d_attr)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect();
    let mut class_means = Matrix::zeros(n_classes, spec.d_feat);
    for c in 0..n_classes {
        let a = attributes.row(c);
        for (f, out) in class_means.row_mut(c).iter_mut().enumerate() {
            let g = &map[f * spec.d_attr..(f + 1) * spec.d_attr];
            let v: f64 = g.iter().zip(a).map(|(g, a)| g * a).sum();
            *out = to_f32_precision(v.max(0.0));
        }
    }

    let mut plan: Vec<(usize, Split)> = Vec::new();
    for c in 0..k {
        plan.extend(std::iter::repeat_n((c, Split::Train), spec.train_per_class));
        plan.extend(std::iter::repeat_n((c, Split::TestSeen), spec.test_per_class));
    }
    for c in k..n_classes {
        plan.extend(std::iter::repeat_n((c, Split::TestUnseen), spec.test_per_class));
    }

    let mut features = Matrix::zeros(plan.len(), spec.d_feat);
    for (i, &(c, _)) in plan.iter().enumerate() {
        let mean = class_means.row(c);
        for (out, &mu) in features.row_mut(i).iter_mut().zip(mean) {
            let z: f64 = rng.sample(StandardNormal);
            *out = to_f32_precision((mu + spec.noise_sigma * z).max(0.0));
        }
    }

    let dataset = Dataset {
        features,
        labels: plan.iter().map(|(c, _)| ClassId(*c)).collect(),
        split: plan.iter().map(|(_, s)| *s).collect(),
        attributes,
        class_names: (0..n_classes).map(|i| format!("class_{i}")).collect(),
        seen_classes: (0..k).map(ClassId).collect(),
        unseen_classes: (k..n_classes).map(ClassId).collect(),
    };
    Ok(SyntheticData { dataset, class_means })
}
