//! Nearest-prototype recognition and per-class accuracy reporting for the
//! standard (unseen classes only) and generalized (seen + unseen) settings.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::domain::{ClassId, Dataset, Matrix, Prototype, Split};
use crate::error::{CplError, Result};
use crate::net::AttributeEmbedder;
use crate::objective::l2_distance;

/// Prototypes keyed by class, in the order they were requested.
pub type PrototypeSet = Vec<(ClassId, Prototype)>;

pub fn make_prototypes(emb: &AttributeEmbedder, attributes: &Matrix, class_ids: &[ClassId]) -> Result<PrototypeSet> {
    class_ids
        .iter()
        .map(|&c| {
            if c.0 >= attributes.rows() {
                return Err(CplError::Dataset(format!("no attribute row for class {c}")));
            }
            let (p, _) = emb.forward(attributes.row(c.0))?;
            Ok((c, p))
        })
        .collect()
}

/// Class of the closest prototype; ties go to the lowest class id.
pub fn recognize(x: &[f64], prototypes: &[(ClassId, Prototype)]) -> Result<ClassId> {
    let mut best: Option<(f64, ClassId)> = None;
    for (c, p) in prototypes {
        let d = l2_distance(x, p)?;
        best = match best {
            Some((bd, bc)) if bd < d || (bd == d && bc < *c) => Some((bd, bc)),
            _ => Some((d, *c)),
        };
    }
    best.map(|(_, c)| c)
        .ok_or_else(|| CplError::config("cannot recognise against an empty prototype set"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassTally {
    pub n: usize,
    pub correct: usize,
}

impl ClassTally {
    pub fn accuracy(&self) -> Option<f64> {
        (self.n > 0).then(|| self.correct as f64 / self.n as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Tally {
    pub per_class: BTreeMap<ClassId, ClassTally>,
    /// Counts keyed by (true, predicted).
    pub confusion: BTreeMap<(ClassId, ClassId), usize>,
}

/// Recognises each listed sample and counts hits per true class.
pub fn tally(ds: &Dataset, samples: &[usize], prototypes: &[(ClassId, Prototype)]) -> Result<Tally> {
    let mut t = Tally::default();
    for &i in samples {
        let truth = ds.labels[i];
        let pred = recognize(ds.feature(i), prototypes)?;
        let e = t.per_class.entry(truth).or_default();
        e.n += 1;
        if pred == truth {
            e.correct += 1;
        }
        *t.confusion.entry((truth, pred)).or_default() += 1;
    }
    Ok(t)
}

/// Unweighted mean of per-class accuracy over `classes` having samples.
pub fn mean_class_accuracy(t: &Tally, classes: &[ClassId]) -> Option<f64> {
    let accs: Vec<f64> = classes
        .iter()
        .filter_map(|c| t.per_class.get(c).and_then(ClassTally::accuracy))
        .collect();
    (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
}

/// `2ab / (a + b)`, or 0 when both are 0. Units are the caller's concern.
pub fn harmonic_mean(acc_seen: f64, acc_unseen: f64) -> Result<f64> {
    if acc_seen < 0.0 || acc_unseen < 0.0 || acc_seen.is_nan() || acc_unseen.is_nan() {
        return Err(CplError::Domain(format!(
            "accuracies must be non-negative, got {acc_seen} and {acc_unseen}"
        )));
    }
    let s = acc_seen + acc_unseen;
    Ok(if s == 0.0 { 0.0 } else { 2.0 * acc_seen * acc_unseen / s })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Setting {
    Standard,
    Generalized,
}

impl Setting {
    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Standard => "zsl",
            Setting::Generalized => "gzsl",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub setting: Setting,
    pub per_class: BTreeMap<ClassId, ClassTally>,
    pub confusion: BTreeMap<(ClassId, ClassId), usize>,
    pub acc_unseen: f64,
    pub acc_seen: Option<f64>,
    pub harmonic_mean: Option<f64>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn per_class_accuracy(&self) -> BTreeMap<ClassId, f64> {
        self.per_class
            .iter()
            .filter_map(|(c, t)| t.accuracy().map(|a| (*c, a)))
            .collect()
    }

    /// `class_id,n,correct,accuracy`, one row per evaluated class.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class_id,n,correct,accuracy\n");
        for (c, t) in &self.per_class {
            let acc = t.accuracy().unwrap_or(0.0);
            let _ = writeln!(out, "{c},{},{},{acc:.6}", t.n, t.correct);
        }
        out
    }

    pub fn summary_line(&self) -> String {
        let mut s = format!("setting={} acc_unseen={:.6}", self.setting.as_str(), self.acc_unseen);
        if let (Some(a), Some(h)) = (self.acc_seen, self.harmonic_mean) {
            let _ = write!(s, " acc_seen={a:.6} h={h:.6}");
        }
        s
    }

    /// Aligned text table with percentages at one decimal.
    pub fn table(&self, class_names: &[String]) -> String {
        let name = |c: &ClassId| class_names.get(c.0).cloned().unwrap_or_else(|| c.to_string());
        let width = self.per_class.keys().map(|c| name(c).len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:>8}  {:<width$}  {:>6}  {:>7}  {:>8}\n", "class_id", "name", "n", "correct", "acc(%)");
        for (c, t) in &self.per_class {
            let _ = writeln!(
                out,
                "{:>8}  {:<width$}  {:>6}  {:>7}  {:>8.1}",
                c.0,
                name(c),
                t.n,
                t.correct,
                t.accuracy().unwrap_or(0.0) * 100.0
            );
        }
        let _ = writeln!(out, "Acc_U = {:.1}%", self.acc_unseen * 100.0);
        if let (Some(a), Some(h)) = (self.acc_seen, self.harmonic_mean) {
            let _ = writeln!(out, "Acc_S = {:.1}%", a * 100.0);
            let _ = writeln!(out, "H     = {:.1}%", h * 100.0);
        }
        out
    }
}

fn split_accuracy(
    ds: &Dataset,
    split: Split,
    classes: &[ClassId],
    prototypes: &[(ClassId, Prototype)],
    tally_all: &mut Tally,
    warnings: &mut Vec<String>,
) -> Result<f64> {
    let samples = ds.indices_in(split);
    if samples.is_empty() {
        return Err(CplError::Dataset(format!("no {split} samples to evaluate")));
    }
    let t = tally(ds, &samples, prototypes)?;
    for c in classes {
        if !t.per_class.contains_key(c) {
            let msg = format!("class {c} has no {split} samples; excluded from the mean");
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    let acc = mean_class_accuracy(&t, classes)
        .ok_or_else(|| CplError::Dataset(format!("no {split} samples to evaluate")))?;
    tally_all.per_class.extend(t.per_class);
    for (k, v) in t.confusion {
        *tally_all.confusion.entry(k).or_default() += v;
    }
    Ok(acc)
}

/// Evaluates against an explicit prototype set.
pub fn evaluate_with_prototypes(ds: &Dataset, prototypes: &[(ClassId, Prototype)], setting: Setting) -> Result<EvalReport> {
    let mut all = Tally::default();
    let mut warnings = Vec::new();
    let acc_unseen = split_accuracy(ds, Split::TestUnseen, &ds.unseen_classes, prototypes, &mut all, &mut warnings)?;
    let (acc_seen, h) = match setting {
        Setting::Standard => (None, None),
        Setting::Generalized => {
            let s = split_accuracy(ds, Split::TestSeen, &ds.seen_classes, prototypes, &mut all, &mut warnings)?;
            (Some(s), Some(harmonic_mean(s, acc_unseen)?))
        }
    };
    Ok(EvalReport {
        setting,
        per_class: all.per_class,
        confusion: all.confusion,
        acc_unseen,
        acc_seen,
        harmonic_mean: h,
        warnings,
    })
}

/// Test-unseen samples against unseen-class prototypes only.
pub fn evaluate_standard(ds: &Dataset, emb: &AttributeEmbedder) -> Result<EvalReport> {
    let protos = make_prototypes(emb, &ds.attributes, &ds.unseen_classes)?;
    evaluate_with_prototypes(ds, &protos, Setting::Standard)
}

/// Both test splits against prototypes of every seen and unseen class.
pub fn evaluate_generalized(ds: &Dataset, emb: &AttributeEmbedder) -> Result<EvalReport> {
    let mut classes: Vec<ClassId> = ds.seen_classes.iter().chain(&ds.unseen_classes).copied().collect();
    classes.sort();
    let protos = make_prototypes(emb, &ds.attributes, &classes)?;
    evaluate_with_prototypes(ds, &protos, Setting::Generalized)
}
