//! Prototype losses: a distance softmax with temperature, its cross-entropy
//! (classification error via prototypes, CEP) and the distance of each sample
//! to its own class prototype (prototype encoding cost, PEC).

use crate::domain::{Episode, Matrix};
use crate::error::{CplError, Result};

/// Below this distance a (sample, prototype) pair contributes no gradient.
pub const DISTANCE_GUARD: f64 = 1e-12;
/// Probabilities are floored here before taking the log.
pub const PROBABILITY_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    #[default]
    Mean,
    Sum,
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Aggregation::Mean => "mean",
            Aggregation::Sum => "sum",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossVariant {
    /// `lambda * cep + pec`
    #[default]
    Combined,
    /// `cep` alone
    CepOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub aggregation: Aggregation,
    pub variant: LossVariant,
}

impl LossConfig {
    pub fn new(lambda: f64, gamma: f64) -> Self {
        Self {
            lambda,
            gamma,
            aggregation: Aggregation::Mean,
            variant: LossVariant::Combined,
        }
    }

    fn weights(&self) -> (f64, f64) {
        match self.variant {
            LossVariant::Combined => (self.lambda, 1.0),
            LossVariant::CepOnly => (1.0, 0.0),
        }
    }

    fn combine(&self, cep: f64, pec: f64) -> f64 {
        match self.variant {
            LossVariant::Combined => self.lambda * cep + pec,
            LossVariant::CepOnly => cep,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLossBreakdown {
    pub cep: f64,
    pub pec: f64,
    pub combined: f64,
    /// One row per support sample, one column per episode class.
    pub probabilities: Matrix,
}

/// Euclidean (non-squared) distance.
pub fn l2_distance(x: &[f64], m: &[f64]) -> Result<f64> {
    if x.len() != m.len() {
        return Err(CplError::shape(format!(
            "distance between vectors of length {} and {}",
            x.len(),
            m.len()
        )));
    }
    Ok(sq_dist(x, m).sqrt())
}

#[inline]
fn sq_dist(x: &[f64], m: &[f64]) -> f64 {
    x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `p_j = exp(-gamma d_j) / sum_l exp(-gamma d_l)`, shifted by the smallest
/// distance so the largest exponent is zero.
pub fn class_probabilities(distances: &[f64], gamma: f64) -> Result<Vec<f64>> {
    let mut p = vec![0.0; distances.len()];
    probabilities_into(distances, gamma, &mut p)?;
    Ok(p)
}

fn probabilities_into(distances: &[f64], gamma: f64, out: &mut [f64]) -> Result<()> {
    if distances.is_empty() {
        return Err(CplError::shape("empty distance vector"));
    }
    if gamma.is_nan() || gamma <= 0.0 {
        return Err(CplError::Domain(format!("temperature must be > 0, got {gamma}")));
    }
    let d_min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    if !d_min.is_finite() {
        return Err(CplError::Numeric("non-finite distance".into()));
    }
    let mut z = 0.0;
    for (o, &d) in out.iter_mut().zip(distances) {
        *o = (-gamma * (d - d_min)).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
    Ok(())
}

pub fn cep_loss(probabilities: &[f64], true_index: usize) -> Result<f64> {
    let p = probabilities.get(true_index).ok_or_else(|| {
        CplError::shape(format!(
            "true index {true_index} out of range for {} classes",
            probabilities.len()
        ))
    })?;
    Ok(-p.clamp(PROBABILITY_FLOOR, 1.0).ln())
}

pub fn pec_loss(x: &[f64], m_true: &[f64]) -> Result<f64> {
    l2_distance(x, m_true)
}

fn check_inputs(episode: &Episode, prototypes: &Matrix) -> Result<()> {
    let c = episode.n_classes();
    if prototypes.rows() != c {
        return Err(CplError::shape(format!(
            "{} prototypes for an episode of {c} classes",
            prototypes.rows()
        )));
    }
    if prototypes.cols() != episode.support_features.cols() {
        return Err(CplError::shape(format!(
            "prototype length {} vs feature length {}",
            prototypes.cols(),
            episode.support_features.cols()
        )));
    }
    if episode.support_features.rows() != episode.n_support() {
        return Err(CplError::shape("support features and labels differ in length"));
    }
    if let Some(i) = episode.support_labels.iter().position(|&l| l >= c) {
        return Err(CplError::shape(format!("support label of sample {i} out of range")));
    }
    Ok(())
}

pub fn episode_loss(episode: &Episode, prototypes: &Matrix, cfg: &LossConfig) -> Result<EpisodeLossBreakdown> {
    evaluate(episode, prototypes, cfg, false).map(|(b, _)| b)
}

/// Loss breakdown together with d(combined)/d(prototypes), one row per class.
pub fn episode_loss_grad(
    episode: &Episode,
    prototypes: &Matrix,
    cfg: &LossConfig,
) -> Result<(EpisodeLossBreakdown, Matrix)> {
    let (b, g) = evaluate(episode, prototypes, cfg, true)?;
    Ok((b, g.expect("gradient requested")))
}

fn evaluate(
    episode: &Episode,
    prototypes: &Matrix,
    cfg: &LossConfig,
    with_grad: bool,
) -> Result<(EpisodeLossBreakdown, Option<Matrix>)> {
    check_inputs(episode, prototypes)?;
    let c = prototypes.rows();
    let n = episode.n_support();
    let d_feat = prototypes.cols();
    let (w_cep, w_pec) = cfg.weights();
    let scale = match cfg.aggregation {
        Aggregation::Mean if n > 0 => 1.0 / n as f64,
        _ => 1.0,
    };

    let mut probs = Matrix::zeros(n, c);
    let mut grad = with_grad.then(|| Matrix::zeros(c, d_feat));
    let mut dist = vec![0.0; c];
    let mut cep_sum = 0.0;
    let mut pec_sum = 0.0;

    for i in 0..n {
        let x = episode.support_features.row(i);
        let t = episode.support_labels[i];
        for (j, d) in dist.iter_mut().enumerate() {
            *d = sq_dist(x, prototypes.row(j)).sqrt();
            if !d.is_finite() {
                return Err(CplError::Numeric(format!(
                    "non-finite distance between sample {i} and prototype {j}"
                )));
            }
        }
        let p = probs.row_mut(i);
        probabilities_into(&dist, cfg.gamma, p)?;
        cep_sum += -p[t].clamp(PROBABILITY_FLOOR, 1.0).ln();
        pec_sum += dist[t];

        if let Some(g) = grad.as_mut() {
            for j in 0..c {
                if dist[j] < DISTANCE_GUARD {
                    continue;
                }
                let target = if j == t { 1.0 } else { 0.0 };
                // dL/dd_j for this sample
                let coef = w_cep * cfg.gamma * (target - p[j]) + w_pec * target;
                if coef == 0.0 {
                    continue;
                }
                let k = scale * coef / dist[j];
                for (gv, (&mv, &xv)) in g.row_mut(j).iter_mut().zip(prototypes.row(j).iter().zip(x)) {
                    *gv += k * (mv - xv);
                }
            }
        }
    }

    let cep = cep_sum * scale;
    let pec = pec_sum * scale;
    let combined = cfg.combine(cep, pec);
    if !combined.is_finite() {
        return Err(CplError::Numeric(format!("non-finite loss (cep {cep}, pec {pec})")));
    }
    if let Some(g) = grad.as_ref() {
        if let Some(pos) = g.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(CplError::Numeric(format!(
                "non-finite gradient at prototype {} coordinate {}",
                pos / d_feat,
                pos % d_feat
            )));
        }
    }
    Ok((
        EpisodeLossBreakdown {
            cep,
            pec,
            combined,
            probabilities: probs,
        },
        grad,
    ))
}
