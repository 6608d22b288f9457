//! Episode construction from the training split.
//!
//! Task-level episodes pick C distinct seen classes and S support samples
//! for each. Sample-level batches draw C·S training samples irrespective
//! of class and keep whatever classes they happen to contain.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::Rng;

use crate::domain::{ClassId, Dataset, Episode, Split};
use crate::error::{CplError, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplingMode {
    #[default]
    TaskLevel,
    SampleLevel,
}

/// How task-level episodes choose their classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClassSchedule {
    /// Independent uniform draws without replacement per episode.
    #[default]
    Uniform,
    /// Walks through a fresh permutation of the class pool per block, so
    /// consecutive episodes overlap as little as possible.
    Coverage,
}

impl std::fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplingMode::TaskLevel => "task",
            SamplingMode::SampleLevel => "sample",
        })
    }
}

impl std::fmt::Display for ClassSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ClassSchedule::Uniform => "uniform",
            ClassSchedule::Coverage => "coverage",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodePlan {
    pub classes: usize,
    pub shots: usize,
    pub mode: SamplingMode,
    pub schedule: ClassSchedule,
}

impl EpisodePlan {
    pub fn new(classes: usize, shots: usize, mode: SamplingMode) -> Self {
        Self {
            classes,
            shots,
            mode,
            schedule: ClassSchedule::Uniform,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.classes * self.shots
    }
}

/// `ceil(n_train / (C·S))`, never less than one.
pub fn episodes_per_epoch(n_train: usize, plan: &EpisodePlan) -> usize {
    n_train.div_ceil(plan.batch_size().max(1)).max(1)
}

/// Precomputed per-class training indices for repeated sampling.
#[derive(Debug, Clone)]
pub struct EpisodeSampler<'a> {
    ds: &'a Dataset,
    plan: EpisodePlan,
    pool: Vec<ClassId>,
    per_class: Vec<Vec<usize>>,
    train: Vec<usize>,
}

impl<'a> EpisodeSampler<'a> {
    /// Sampler over all seen classes.
    pub fn new(ds: &'a Dataset, plan: EpisodePlan) -> Result<Self> {
        Self::with_pool(ds, plan, ds.seen_classes.clone())
    }

    /// Sampler restricted to `pool` (a subset of the seen classes).
    pub fn with_pool(ds: &'a Dataset, plan: EpisodePlan, pool: Vec<ClassId>) -> Result<Self> {
        if plan.classes == 0 || plan.shots == 0 {
            return Err(CplError::config("C and S must be at least 1"));
        }
        let mut slot = vec![usize::MAX; ds.n_classes()];
        for (i, c) in pool.iter().enumerate() {
            slot[c.0] = i;
        }
        let mut per_class = vec![Vec::new(); pool.len()];
        let mut train = Vec::new();
        for i in 0..ds.n_samples() {
            if ds.split[i] != Split::Train {
                continue;
            }
            let s = slot[ds.labels[i].0];
            if s != usize::MAX {
                per_class[s].push(i);
                train.push(i);
            }
        }
        match plan.mode {
            SamplingMode::TaskLevel => {
                if plan.classes > pool.len() {
                    return Err(CplError::config(format!(
                        "episode needs {} classes but only {} seen classes are available",
                        plan.classes,
                        pool.len()
                    )));
                }
                if let Some(i) = per_class.iter().position(Vec::is_empty) {
                    return Err(CplError::Dataset(format!(
                        "seen class {} has no training samples",
                        pool[i]
                    )));
                }
            }
            SamplingMode::SampleLevel => {
                if plan.batch_size() > train.len() {
                    return Err(CplError::config(format!(
                        "batch of {} samples exceeds the {} training samples",
                        plan.batch_size(),
                        train.len()
                    )));
                }
            }
        }
        Ok(Self {
            ds,
            plan,
            pool,
            per_class,
            train,
        })
    }

    pub fn plan(&self) -> &EpisodePlan {
        &self.plan
    }

    pub fn train_size(&self) -> usize {
        self.train.len()
    }

    pub fn episodes_per_epoch(&self) -> usize {
        episodes_per_epoch(self.train.len(), &self.plan)
    }

    /// The episode at position `index` of `epoch`, a pure function of its
    /// coordinates and `seed`.
    pub fn episode(&self, seed: u64, epoch: u64, index: u64) -> Episode {
        let mut rng = rng::derive(seed, Stream::Episode, epoch, index);
        match (self.plan.mode, self.plan.schedule) {
            (SamplingMode::SampleLevel, _) => self.sample_batch(&mut rng),
            (SamplingMode::TaskLevel, ClassSchedule::Uniform) => self.sample_episode(&mut rng),
            (SamplingMode::TaskLevel, ClassSchedule::Coverage) => {
                let slots = self.coverage_classes(seed, epoch, index);
                self.build_task(&slots, &mut rng)
            }
        }
    }

    /// Task-level episode with uniformly drawn classes.
    pub fn sample_episode<R: Rng + ?Sized>(&self, rng: &mut R) -> Episode {
        let slots = index::sample(rng, self.pool.len(), self.plan.classes).into_vec();
        self.build_task(&slots, rng)
    }

    /// Sample-level batch of C·S distinct training samples.
    pub fn sample_batch<R: Rng + ?Sized>(&self, rng: &mut R) -> Episode {
        let picks: Vec<usize> = index::sample(rng, self.train.len(), self.plan.batch_size())
            .into_iter()
            .map(|i| self.train[i])
            .collect();
        let class_ids: Vec<ClassId> = picks
            .iter()
            .map(|&i| self.ds.labels[i])
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let labels = picks
            .iter()
            .map(|&i| class_ids.binary_search(&self.ds.labels[i]).expect("class present"))
            .collect();
        self.assemble(class_ids, picks, labels)
    }

    fn build_task<R: Rng + ?Sized>(&self, slots: &[usize], rng: &mut R) -> Episode {
        let s = self.plan.shots;
        let mut picks = Vec::with_capacity(slots.len() * s);
        let mut labels = Vec::with_capacity(slots.len() * s);
        for (local, &slot) in slots.iter().enumerate() {
            let members = &self.per_class[slot];
            if members.len() >= s {
                picks.extend(index::sample(rng, members.len(), s).into_iter().map(|i| members[i]));
            } else {
                picks.extend((0..s).map(|_| members[rng.random_range(0..members.len())]));
            }
            labels.extend(std::iter::repeat_n(local, s));
        }
        let class_ids = slots.iter().map(|&i| self.pool[i]).collect();
        self.assemble(class_ids, picks, labels)
    }

    fn coverage_classes(&self, seed: u64, epoch: u64, index: u64) -> Vec<usize> {
        let k = self.pool.len();
        let c = self.plan.classes;
        let block_perm = |b: u64| {
            let mut r = rng::derive(seed, Stream::Coverage, epoch, b);
            index::sample(&mut r, k, k).into_vec()
        };
        let mut pos = index * c as u64;
        let mut chosen: Vec<usize> = Vec::with_capacity(c);
        let mut seen = vec![false; k];
        let mut block = u64::MAX;
        let mut perm = Vec::new();
        while chosen.len() < c {
            let b = pos / k as u64;
            if b != block {
                block = b;
                perm = block_perm(b);
            }
            let slot = perm[(pos % k as u64) as usize];
            if !seen[slot] {
                seen[slot] = true;
                chosen.push(slot);
            }
            pos += 1;
        }
        chosen
    }

    fn assemble(&self, class_ids: Vec<ClassId>, picks: Vec<usize>, labels: Vec<usize>) -> Episode {
        let class_rows: Vec<usize> = class_ids.iter().map(|c: &ClassId| c.0).collect();
        Episode {
            support_features: self.ds.features.select_rows(&picks),
            attribute_rows: self.ds.attributes.select_rows(&class_rows),
            class_ids,
            sample_indices: picks,
            support_labels: labels,
        }
    }
}

pub fn sample_episode<R: Rng + ?Sized>(ds: &Dataset, plan: &EpisodePlan, rng: &mut R) -> Result<Episode> {
    let plan = EpisodePlan {
        mode: SamplingMode::TaskLevel,
        ..*plan
    };
    Ok(EpisodeSampler::new(ds, plan)?.sample_episode(rng))
}

pub fn sample_batch<R: Rng + ?Sized>(ds: &Dataset, plan: &EpisodePlan, rng: &mut R) -> Result<Episode> {
    let plan = EpisodePlan {
        mode: SamplingMode::SampleLevel,
        ..*plan
    };
    Ok(EpisodeSampler::new(ds, plan)?.sample_batch(rng))
}
