//! Domain types shared across the pipeline: feature and attribute storage,
//! class identifiers, the dataset with its split tags, sampled episodes and
//! the hyperparameter set.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Deref;
use std::str::FromStr;

use crate::error::{CplError, Result};

/// Dense row-major matrix of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CplError::shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(cols: usize, rows: &[R]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(CplError::shape(format!(
                    "row {i} has length {}, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Builds a new matrix from the given row indices, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

macro_rules! real_vector {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name(Vec<f64>);

        impl $name {
            pub fn into_inner(self) -> Vec<f64> {
                self.0
            }
        }

        impl Deref for $name {
            type Target = [f64];
            fn deref(&self) -> &[f64] {
                &self.0
            }
        }

        impl AsRef<[f64]> for $name {
            fn as_ref(&self) -> &[f64] {
                &self.0
            }
        }
    };
}

real_vector!(
    /// A precomputed visual embedding of one sample.
    FeatureVector
);
real_vector!(
    /// Semantic descriptor of one class.
    AttributeVector
);
real_vector!(
    /// A class representative in feature space. Non-negative, since the
    /// embedder ends in a ReLU.
    Prototype
);

fn check_finite(what: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(CplError::Numeric(format!(
            "{what} entry {i} is not finite ({})",
            values[i]
        ))),
        None => Ok(()),
    }
}

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_finite("feature", &values)?;
        Ok(Self(values))
    }
}

impl AttributeVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_finite("attribute", &values)?;
        Ok(Self(values))
    }
}

impl Prototype {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_finite("prototype", &values)?;
        if let Some(i) = values.iter().position(|&v| v < 0.0) {
            return Err(CplError::Numeric(format!(
                "prototype entry {i} is negative ({})",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub(crate) fn from_relu_output(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| *v >= 0.0));
        Self(values)
    }
}

/// Dense index into a dataset's class table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClassId(pub usize);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    TestSeen,
    TestUnseen,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestSeen => "test_seen",
            Split::TestUnseen => "test_unseen",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = CplError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test_seen" => Ok(Split::TestSeen),
            "test_unseen" => Ok(Split::TestUnseen),
            other => Err(CplError::Dataset(format!("unknown split tag '{other}'"))),
        }
    }
}

/// Features, labels and class attributes for one zero-shot benchmark.
///
/// `seen_classes` and `unseen_classes` are kept in ascending order. The
/// split tag of each sample decides its role; nothing is inferred from the
/// label alone.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<ClassId>,
    pub split: Vec<Split>,
    pub attributes: Matrix,
    pub class_names: Vec<String>,
    pub seen_classes: Vec<ClassId>,
    pub unseen_classes: Vec<ClassId>,
}

impl Dataset {
    pub fn n_samples(&self) -> usize {
        self.features.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.attributes.rows()
    }

    pub fn d_feat(&self) -> usize {
        self.features.cols()
    }

    pub fn d_attr(&self) -> usize {
        self.attributes.cols()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn attribute(&self, class: ClassId) -> &[f64] {
        self.attributes.row(class.0)
    }

    /// Sample indices carrying the given split tag, ascending.
    pub fn indices_in(&self, split: Split) -> Vec<usize> {
        self.split
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn train_size(&self) -> usize {
        self.split.iter().filter(|s| **s == Split::Train).count()
    }

    /// Returns a copy whose attribute rows are scaled to unit L2 norm.
    /// All-zero rows are left unchanged.
    pub fn with_unit_attributes(&self) -> Dataset {
        let mut out = self.clone();
        normalize_rows(&mut out.attributes);
        out
    }
}

pub(crate) fn normalize_rows(m: &mut Matrix) {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

/// A single rule broken by a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    NonFinite {
        what: &'static str,
        row: usize,
    },
    LabelOutOfRange {
        sample: usize,
        class: ClassId,
    },
    ClassOutOfRange {
        class: ClassId,
    },
    DuplicateClass {
        class: ClassId,
    },
    SeenAndUnseen {
        class: ClassId,
    },
    NoSeenClasses,
    NoUnseenClasses,
    SplitLabelMismatch {
        sample: usize,
        class: ClassId,
        split: Split,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::LengthMismatch {
                what,
                expected,
                found,
            } => write!(f, "{what}: expected {expected} entries, found {found}"),
            Violation::NonFinite { what, row } => write!(f, "{what} row {row} has non-finite values"),
            Violation::LabelOutOfRange { sample, class } => {
                write!(f, "sample {sample} has out-of-range label {class}")
            }
            Violation::ClassOutOfRange { class } => write!(f, "class {class} is not in the class table"),
            Violation::DuplicateClass { class } => write!(f, "class {class} listed twice"),
            Violation::SeenAndUnseen { class } => {
                write!(f, "class {class} is both seen and unseen")
            }
            Violation::NoSeenClasses => f.write_str("no seen classes"),
            Violation::NoUnseenClasses => f.write_str("no unseen classes"),
            Violation::SplitLabelMismatch {
                sample,
                class,
                split,
            } => {
                let expect = if *split == Split::TestUnseen { "unseen" } else { "seen" };
                write!(f, "sample {sample} in split {split} has class {class}, which is not {expect}")
            }
        }
    }
}

/// Collects every invariant violation in `ds`. Empty means valid.
pub fn validate_dataset(ds: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = ds.features.rows();
    let n_classes = ds.attributes.rows();

    if ds.labels.len() != n {
        out.push(Violation::LengthMismatch {
            what: "labels",
            expected: n,
            found: ds.labels.len(),
        });
    }
    if ds.split.len() != n {
        out.push(Violation::LengthMismatch {
            what: "split tags",
            expected: n,
            found: ds.split.len(),
        });
    }
    if ds.class_names.len() != n_classes {
        out.push(Violation::LengthMismatch {
            what: "class names",
            expected: n_classes,
            found: ds.class_names.len(),
        });
    }
    for (i, row) in ds.features.iter_rows().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            out.push(Violation::NonFinite { what: "feature", row: i });
        }
    }
    for (i, row) in ds.attributes.iter_rows().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            out.push(Violation::NonFinite {
                what: "attribute",
                row: i,
            });
        }
    }

    let class_set = |list: &[ClassId], out: &mut Vec<Violation>| {
        let mut set = BTreeSet::new();
        for &c in list {
            if c.0 >= n_classes {
                out.push(Violation::ClassOutOfRange { class: c });
            }
            if !set.insert(c) {
                out.push(Violation::DuplicateClass { class: c });
            }
        }
        set
    };
    let seen = class_set(&ds.seen_classes, &mut out);
    let unseen = class_set(&ds.unseen_classes, &mut out);

    for c in seen.intersection(&unseen) {
        out.push(Violation::SeenAndUnseen { class: *c });
    }
    if seen.is_empty() {
        out.push(Violation::NoSeenClasses);
    }
    if unseen.is_empty() {
        out.push(Violation::NoUnseenClasses);
    }

    for (i, (&label, &split)) in ds.labels.iter().zip(&ds.split).enumerate() {
        if label.0 >= n_classes {
            out.push(Violation::LabelOutOfRange {
                sample: i,
                class: label,
            });
            continue;
        }
        let ok = match split {
            Split::Train | Split::TestSeen => seen.contains(&label),
            Split::TestUnseen => unseen.contains(&label),
        };
        if !ok {
            out.push(Violation::SplitLabelMismatch {
                sample: i,
                class: label,
                split,
            });
        }
    }
    out
}

/// One sampled zero-shot task. Support samples are stored class-major when
/// drawn per class; `support_labels[i]` indexes into `class_ids`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub class_ids: Vec<ClassId>,
    pub sample_indices: Vec<usize>,
    pub support_features: Matrix,
    pub support_labels: Vec<usize>,
    pub attribute_rows: Matrix,
}

impl Episode {
    pub fn n_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn n_support(&self) -> usize {
        self.support_labels.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    /// Classes per episode (C).
    pub classes: usize,
    /// Support samples per class (S).
    pub shots: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub hidden_size: usize,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            classes: 10,
            shots: 10,
            lambda: 0.1,
            gamma: 0.9,
            epochs: 40,
            learning_rate: 2e-4,
            weight_decay: 1e-4,
            hidden_size: 1024,
            seed: 0,
        }
    }
}

impl HyperParams {
    /// Defaults with C set to the dataset's unseen-class count.
    pub fn for_dataset(ds: &Dataset) -> Self {
        Self {
            classes: ds.unseen_classes.len().max(1),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(CplError::config(format!("lambda must be in [0,1], got {}", self.lambda)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(CplError::config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if self.classes == 0 || self.shots == 0 {
            return Err(CplError::config("C and S must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CplError::config(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(CplError::config(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.hidden_size == 0 {
            return Err(CplError::config("hidden size must be at least 1"));
        }
        Ok(())
    }
}
