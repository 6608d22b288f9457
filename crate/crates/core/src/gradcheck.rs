//! Central-difference verification of the full training gradient: episode
//! loss composed with the embedder, differentiated with respect to every
//! embedder parameter.

use rand::Rng;

use crate::domain::{ClassId, Episode, Matrix};
use crate::error::Result;
use crate::net::{AttributeEmbedder, Dims, GradientSet};
use crate::objective::{episode_loss, episode_loss_grad, LossConfig, LossVariant};
use crate::rng::{self, Stream};

/// Deliberate defects for exercising the checker itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Negates the analytic gradient of the output-layer weights.
    SignFlip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub trials: usize,
    pub seed: u64,
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub fault: Fault,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 0,
            step: 1e-6,
            rel_tol: 1e-5,
            abs_tol: 1e-8,
            fault: Fault::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coordinate {
    pub trial: usize,
    pub array: &'static str,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub trials: usize,
    pub coordinates: usize,
    /// Largest relative error among coordinates with a gradient above the
    /// absolute tolerance.
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
    pub failures: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Combined loss of `episode` under `emb` and its gradient.
pub fn loss_and_gradient(emb: &AttributeEmbedder, episode: &Episode, cfg: &LossConfig) -> Result<(f64, GradientSet)> {
    let (protos, cache) = emb.forward_batch(&episode.attribute_rows)?;
    let (b, upstream) = episode_loss_grad(episode, &protos, cfg)?;
    Ok((b.combined, emb.backward(&cache, &upstream)?))
}

pub fn loss_only(emb: &AttributeEmbedder, episode: &Episode, cfg: &LossConfig) -> Result<f64> {
    let (protos, _) = emb.forward_batch(&episode.attribute_rows)?;
    Ok(episode_loss(episode, &protos, cfg)?.combined)
}

/// A random small network, episode and loss setting.
#[derive(Debug, Clone)]
pub struct Instance {
    pub embedder: AttributeEmbedder,
    pub episode: Episode,
    pub loss: LossConfig,
}

const KINK_MARGIN: f64 = 1e-4;

/// Draws instance `trial`; configurations with a ReLU input within
/// `KINK_MARGIN` of zero are redrawn, since differences straddling a kink
/// say nothing about the analytic gradient.
pub fn random_instance(seed: u64, trial: usize) -> Instance {
    let mut rng = rng::derive(seed, Stream::Gradcheck, trial as u64, 0);
    loop {
        let dims = Dims::new(rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=5));
        let c = rng.random_range(1..=4);
        let s = rng.random_range(1..=3);
        let mut emb = AttributeEmbedder::zeros(dims);
        emb.w1.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        emb.b1.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.5));
        emb.w2.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        emb.b2.iter_mut().for_each(|v| *v = rng.random_range(0.0..0.5));
        let attrs = Matrix::from_vec(c, dims.d_attr, (0..c * dims.d_attr).map(|_| rng.random_range(0.0..1.0)).collect())
            .expect("shape");
        let feats = Matrix::from_vec(c * s, dims.d_feat, (0..c * s * dims.d_feat).map(|_| rng.random_range(0.0..2.0)).collect())
            .expect("shape");
        let lambda = [0.0, 0.1, 1.0][rng.random_range(0..3)];
        let gamma = [0.9, 1.0][rng.random_range(0..2)];
        let mut loss = LossConfig::new(lambda, gamma);
        if rng.random_range(0..5) == 0 {
            loss.variant = LossVariant::CepOnly;
        }
        let episode = Episode {
            class_ids: (0..c).map(ClassId).collect(),
            sample_indices: (0..c * s).collect(),
            support_features: feats,
            support_labels: (0..c * s).map(|i| i / s).collect(),
            attribute_rows: attrs,
        };
        let (_, cache) = emb.forward_batch(&episode.attribute_rows).expect("shape");
        let near_kink = cache
            .hidden_pre
            .as_slice()
            .iter()
            .chain(cache.output_pre.as_slice())
            .any(|v| v.abs() < KINK_MARGIN);
        if !near_kink {
            return Instance {
                embedder: emb,
                episode,
                loss,
            };
        }
    }
}

pub fn run(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut report = GradcheckReport {
        trials: opts.trials,
        coordinates: 0,
        max_rel_error: 0.0,
        worst: None,
        failures: 0,
    };
    for trial in 0..opts.trials {
        let inst = random_instance(opts.seed, trial);
        let (_, mut grad) = loss_and_gradient(&inst.embedder, &inst.episode, &inst.loss)?;
        if opts.fault == Fault::SignFlip {
            grad.w2.iter_mut().for_each(|g| *g = -*g);
        }
        for (k, (name, analytic)) in grad.arrays().into_iter().enumerate() {
            for (i, &an) in analytic.iter().enumerate() {
                let mut net = inst.embedder.clone();
                net.arrays_mut()[k].1[i] += opts.step;
                let plus = loss_only(&net, &inst.episode, &inst.loss)?;
                net.arrays_mut()[k].1[i] = inst.embedder.arrays()[k].1[i] - opts.step;
                let minus = loss_only(&net, &inst.episode, &inst.loss)?;
                let numeric = (plus - minus) / (2.0 * opts.step);

                report.coordinates += 1;
                let abs = (an - numeric).abs();
                let scale = an.abs().max(numeric.abs());
                // Near-zero gradients are judged on absolute error alone.
                if scale <= opts.abs_tol {
                    if abs > opts.abs_tol {
                        report.failures += 1;
                    }
                    continue;
                }
                let rel = abs / scale;
                if rel >= opts.rel_tol && abs > opts.abs_tol {
                    report.failures += 1;
                }
                if rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst = Some(Coordinate {
                        trial,
                        array: name,
                        index: i,
                        analytic: an,
                        numeric,
                        rel_error: rel,
                    });
                }
            }
        }
    }
    Ok(report)
}
