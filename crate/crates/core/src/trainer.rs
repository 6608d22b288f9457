//! Episodic training loop.
//!
//! Each step samples an episode, maps its class attributes to prototypes,
//! backpropagates the prototype loss through the embedder, adds weight decay
//! and takes an Adam step. The episode stream depends only on
//! `(seed, epoch, episode)`, which is what makes resuming bit-exact.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::dataio::{save_checkpoint, Checkpoint};
use crate::domain::{validate_dataset, ClassId, Dataset, HyperParams, Split};
use crate::error::{CplError, Result};
use crate::eval;
use crate::net::{adam_step, apply_weight_decay, AdamState, AttributeEmbedder, Dims};
use crate::objective::{episode_loss_grad, Aggregation, LossConfig, LossVariant};
use crate::sampler::{ClassSchedule, EpisodePlan, EpisodeSampler, SamplingMode};

/// Switches that change what is optimised, persisted with each checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrainOptions {
    pub mode: SamplingMode,
    pub schedule: ClassSchedule,
    pub aggregation: Aggregation,
    pub variant: LossVariant,
    /// Scale every attribute row to unit L2 norm before use.
    pub unit_attributes: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub hyper: HyperParams,
    pub options: TrainOptions,
    pub checkpoint_path: Option<PathBuf>,
    /// Emit a progress line every this many episodes; 0 disables.
    pub log_every: usize,
    /// Hold out this many seen classes (highest ids) and keep the epoch whose
    /// embedder recognises their training samples best. 0 disables.
    pub validation_classes: usize,
}

impl TrainConfig {
    pub fn new(hyper: HyperParams) -> Self {
        Self {
            hyper,
            options: TrainOptions::default(),
            checkpoint_path: None,
            log_every: 0,
            validation_classes: 0,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.hyper.lambda,
            gamma: self.hyper.gamma,
            aggregation: self.options.aggregation,
            variant: self.options.variant,
        }
    }

    pub fn plan(&self) -> EpisodePlan {
        EpisodePlan {
            classes: self.hyper.classes,
            shots: self.hyper.shots,
            mode: self.options.mode,
            schedule: self.options.schedule,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub episode: usize,
    pub cep: f64,
    pub pec: f64,
    pub combined: f64,
    pub millis: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Final embedder, or the selected one when validation is enabled.
    pub embedder: AttributeEmbedder,
    pub log: Vec<TrainLogRecord>,
    /// State after the last epoch, suitable for [`resume`].
    pub checkpoint: Checkpoint,
    /// Epoch (1-based) and validation accuracy of the selected embedder.
    pub selected: Option<(usize, f64)>,
}

impl TrainOutcome {
    /// Mean combined loss per epoch, in epoch order.
    pub fn epoch_means(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for r in &self.log {
            match out.last_mut() {
                Some((e, sum, n)) if *e == r.epoch => {
                    *sum += r.combined;
                    *n += 1;
                }
                _ => out.push((r.epoch, r.combined, 1)),
            }
        }
        out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
    }
}

pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    check_inputs(ds, cfg)?;
    let dims = Dims::new(ds.d_attr(), cfg.hyper.hidden_size, ds.d_feat());
    let embedder = AttributeEmbedder::init(dims, cfg.hyper.seed);
    let adam = AdamState::new(dims);
    run(ds, cfg, embedder, adam, 0)
}

/// Continues from `checkpoint` for `cfg.hyper.epochs` further epochs.
pub fn resume(ds: &Dataset, cfg: &TrainConfig, checkpoint: &Checkpoint) -> Result<TrainOutcome> {
    check_inputs(ds, cfg)?;
    let dims = checkpoint.dims();
    let want = Dims::new(ds.d_attr(), cfg.hyper.hidden_size, ds.d_feat());
    if dims != want {
        return Err(CplError::config(format!(
            "checkpoint dimensions {}x{}x{} do not match configuration {}x{}x{}",
            dims.d_attr, dims.hidden, dims.d_feat, want.d_attr, want.hidden, want.d_feat
        )));
    }
    checkpoint.embedder.check()?;
    run(
        ds,
        cfg,
        checkpoint.embedder.clone(),
        checkpoint.adam.clone(),
        checkpoint.hyperparams.epochs,
    )
}

fn check_inputs(ds: &Dataset, cfg: &TrainConfig) -> Result<()> {
    let violations = validate_dataset(ds);
    if !violations.is_empty() {
        return Err(CplError::InvalidDataset(violations));
    }
    cfg.hyper.validate()
}

fn run(
    ds: &Dataset,
    cfg: &TrainConfig,
    mut embedder: AttributeEmbedder,
    mut adam: AdamState,
    start_epoch: usize,
) -> Result<TrainOutcome> {
    let normalized;
    let ds = if cfg.options.unit_attributes {
        normalized = ds.with_unit_attributes();
        &normalized
    } else {
        ds
    };

    let (pool, held_out) = split_validation(ds, cfg.validation_classes)?;
    let sampler = EpisodeSampler::with_pool(ds, cfg.plan(), pool)?;
    let per_epoch = sampler.episodes_per_epoch();
    let loss_cfg = cfg.loss_config();
    let hp = &cfg.hyper;
    let total_epochs = start_epoch + hp.epochs;

    let mut log = Vec::with_capacity(hp.epochs * per_epoch);
    let mut best: Option<(usize, f64, AttributeEmbedder)> = None;

    for epoch in start_epoch..total_epochs {
        for idx in 0..per_epoch {
            let t0 = Instant::now();
            let ctx = |e: CplError| match e {
                CplError::Numeric(m) => CplError::Numeric(format!("epoch {epoch} episode {idx}: {m}")),
                other => other,
            };
            let episode = sampler.episode(hp.seed, epoch as u64, idx as u64);
            let (protos, cache) = embedder.forward_batch(&episode.attribute_rows)?;
            let (breakdown, upstream) = episode_loss_grad(&episode, &protos, &loss_cfg).map_err(ctx)?;
            let grads = embedder.backward(&cache, &upstream)?;
            let grads = apply_weight_decay(&grads, &embedder, hp.weight_decay);
            adam_step(&mut embedder, &grads, &mut adam, hp.learning_rate).map_err(ctx)?;

            let record = TrainLogRecord {
                epoch,
                episode: idx,
                cep: breakdown.cep,
                pec: breakdown.pec,
                combined: breakdown.combined,
                millis: t0.elapsed().as_secs_f64() * 1e3,
            };
            if cfg.log_every > 0 && (log.len() + 1) % cfg.log_every == 0 {
                log::info!(
                    "epoch {epoch} episode {idx}: cep {:.5} pec {:.5} combined {:.5}",
                    record.cep,
                    record.pec,
                    record.combined
                );
            }
            log.push(record);
        }
        if !held_out.is_empty() {
            let acc = validation_accuracy(ds, &embedder, &held_out)?;
            log::info!("epoch {epoch}: validation accuracy {acc:.4}");
            if best.as_ref().is_none_or(|(_, b, _)| acc > *b) {
                best = Some((epoch + 1, acc, embedder.clone()));
            }
        }
    }

    let checkpoint = Checkpoint {
        hyperparams: HyperParams {
            epochs: total_epochs,
            ..hp.clone()
        },
        options: cfg.options,
        embedder: embedder.clone(),
        adam,
    };
    if let Some(path) = &cfg.checkpoint_path {
        save_checkpoint(&checkpoint, path)?;
    }
    let (embedder, selected) = match best {
        Some((e, acc, emb)) => (emb, Some((e, acc))),
        None => (embedder, None),
    };
    Ok(TrainOutcome {
        embedder,
        log,
        checkpoint,
        selected,
    })
}

fn split_validation(ds: &Dataset, n: usize) -> Result<(Vec<ClassId>, Vec<ClassId>)> {
    let k = ds.seen_classes.len();
    if n == 0 {
        return Ok((ds.seen_classes.clone(), Vec::new()));
    }
    if n >= k {
        return Err(CplError::config(format!(
            "cannot hold out {n} of {k} seen classes for validation"
        )));
    }
    let (pool, held) = ds.seen_classes.split_at(k - n);
    Ok((pool.to_vec(), held.to_vec()))
}

fn validation_accuracy(ds: &Dataset, emb: &AttributeEmbedder, classes: &[ClassId]) -> Result<f64> {
    let protos = eval::make_prototypes(emb, &ds.attributes, classes)?;
    let samples: Vec<usize> = ds
        .indices_in(Split::Train)
        .into_iter()
        .filter(|i| classes.contains(&ds.labels[*i]))
        .collect();
    let tally = eval::tally(ds, &samples, &protos)?;
    Ok(eval::mean_class_accuracy(&tally, classes).unwrap_or(0.0))
}

pub fn write_log_csv(path: impl AsRef<Path>, log: &[TrainLogRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("epoch,episode,cep,pec,combined,millis\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{},{:.3}\n",
            r.epoch, r.episode, r.cep, r.pec, r.combined, r.millis
        ));
    }
    let mut f = fs::File::create(path).map_err(|e| CplError::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| CplError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, SyntheticSpec};

    fn small() -> Dataset {
        generate_synthetic(&SyntheticSpec {
            seen_classes: 6,
            unseen_classes: 3,
            train_per_class: 8,
            test_per_class: 5,
            d_attr: 4,
            d_feat: 8,
            noise_sigma: 0.1,
            seed: 1,
            class_budget: None,
        })
        .unwrap()
        .dataset
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig::new(HyperParams {
            classes: 3,
            shots: 4,
            epochs,
            hidden_size: 16,
            learning_rate: 1e-3,
            seed: 5,
            ..HyperParams::default()
        })
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let ds = small();
        let out = train(&ds, &cfg(0)).unwrap();
        assert!(out.log.is_empty());
        let init = AttributeEmbedder::init(Dims::new(4, 16, 8), 5);
        assert_eq!(out.embedder, init);
        assert_eq!(out.checkpoint.adam.step, 0);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = small();
        let a = train(&ds, &cfg(3)).unwrap();
        let b = train(&ds, &cfg(3)).unwrap();
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        // 48 train samples / 12 per episode
        assert_eq!(a.log.len(), 3 * 4);
        assert!(a.log.iter().all(|r| r.combined.is_finite() && r.combined >= 0.0));
    }

    #[test]
    fn resume_with_zero_epochs_is_identity() {
        let ds = small();
        let a = train(&ds, &cfg(2)).unwrap();
        let b = resume(&ds, &cfg(0), &a.checkpoint).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
    }

    #[test]
    fn split_run_matches_single_run() {
        let ds = small();
        let whole = train(&ds, &cfg(4)).unwrap();
        let first = train(&ds, &cfg(2)).unwrap();
        let rest = resume(&ds, &cfg(2), &first.checkpoint).unwrap();
        assert_eq!(whole.checkpoint.to_bytes(), rest.checkpoint.to_bytes());
    }

    #[test]
    fn resume_rejects_mismatched_hidden_size() {
        let ds = small();
        let a = train(&ds, &cfg(1)).unwrap();
        let mut c = cfg(1);
        c.hyper.hidden_size = 8;
        assert!(matches!(resume(&ds, &c, &a.checkpoint), Err(CplError::Config(_))));
    }

    #[test]
    fn invalid_inputs_abort_before_training() {
        let mut ds = small();
        ds.unseen_classes.push(ds.seen_classes[0]);
        assert!(matches!(train(&ds, &cfg(1)), Err(CplError::InvalidDataset(_))));
        let mut c = cfg(1);
        c.hyper.lambda = 2.0;
        assert!(matches!(train(&small(), &c), Err(CplError::Config(_))));
        let mut c = cfg(1);
        c.hyper.classes = 7;
        assert!(matches!(train(&small(), &c), Err(CplError::Config(_))));
    }

    #[test]
    fn ablation_variants_run() {
        let ds = small();
        let mut b1 = cfg(2);
        b1.hyper.lambda = 0.0;
        let out = train(&ds, &b1).unwrap();
        assert!(out.log.iter().all(|r| r.combined == r.pec));
        let mut b2 = cfg(2);
        b2.options.variant = LossVariant::CepOnly;
        let out = train(&ds, &b2).unwrap();
        assert!(out.log.iter().all(|r| r.combined == r.cep));
        let mut s = cfg(2);
        s.options.mode = SamplingMode::SampleLevel;
        s.options.unit_attributes = true;
        let out = train(&ds, &s).unwrap();
        assert_eq!(out.checkpoint.options.mode, SamplingMode::SampleLevel);
    }

    #[test]
    fn validation_selection_reports_an_epoch() {
        let ds = small();
        let mut c = cfg(3);
        c.validation_classes = 2;
        let out = train(&ds, &c).unwrap();
        let (epoch, acc) = out.selected.unwrap();
        assert!((1..=3).contains(&epoch));
        assert!((0.0..=1.0).contains(&acc));
        c.validation_classes = 6;
        assert!(train(&ds, &c).is_err());
    }

    #[test]
    fn checkpoint_written_and_log_csv() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small();
        let mut c = cfg(1);
        c.checkpoint_path = Some(dir.path().join("m.cplm"));
        let out = train(&ds, &c).unwrap();
        let back = crate::dataio::load_checkpoint(dir.path().join("m.cplm")).unwrap();
        assert_eq!(back, out.checkpoint);
        write_log_csv(dir.path().join("log.csv"), &out.log).unwrap();
        let text = fs::read_to_string(dir.path().join("log.csv")).unwrap();
        assert!(text.starts_with("epoch,episode,cep,pec,combined,millis\n"));
        assert_eq!(text.lines().count(), out.log.len() + 1);
    }
}
