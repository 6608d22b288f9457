//! Episodic prototype learning for zero-shot recognition.
//!
//! Class attribute vectors are mapped to visual-space prototypes by a small
//! MLP trained over sampled zero-shot episodes; test samples are assigned to
//! the nearest prototype.

pub mod dataio;
pub mod domain;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod net;
pub mod objective;
pub mod rng;
pub mod sampler;
pub mod trainer;

pub use dataio::{
    generate_synthetic, load_checkpoint, load_dataset, load_dataset_from, save_checkpoint, save_dataset,
    save_dataset_dir, Checkpoint, Manifest, SyntheticData, SyntheticSpec,
};
pub use domain::{
    validate_dataset, AttributeVector, ClassId, Dataset, Episode, FeatureVector, HyperParams, Matrix, Prototype,
    Split, Violation,
};
pub use error::{CplError, Result};
pub use eval::{
    evaluate_generalized, evaluate_standard, evaluate_with_prototypes, harmonic_mean, make_prototypes, recognize, EvalReport,
    PrototypeSet, Setting,
};
pub use net::{AdamState, AttributeEmbedder, Dims, GradientSet};
pub use objective::{class_probabilities, episode_loss, l2_distance, Aggregation, EpisodeLossBreakdown, LossConfig, LossVariant};
pub use sampler::{ClassSchedule, EpisodePlan, EpisodeSampler, SamplingMode};
pub use trainer::{resume, train, TrainConfig, TrainLogRecord, TrainOptions, TrainOutcome};
