//! Learned mixtures of in-context experts.
//!
//! A demonstration pool is split into subsets; each subset conditions one
//! expert distribution over a closed answer vocabulary, and the experts are
//! combined with weights learned on a training split.

pub mod distributions;
pub mod error;
pub mod experts;
pub mod harness;
pub mod partitioning;
pub mod rng;
pub mod training;
pub mod weighting;

pub use distributions::{
    mixture_combine, poe_combine, predict_label, AnswerVocabulary, Combination, MixtureWeights,
    TokenDistribution,
};
pub use error::{Error, Result};
pub use experts::{ExpertSource, ExternalExpert, Query, SimilarityExpert, SimilarityExpertConfig};
pub use partitioning::{Demonstration, Partition, PartitionStrategy, Tag};
pub use training::{train, ImleScope, LabeledExample, Trainable, TrainingConfig, TrainingTrace};
pub use weighting::{HyperNetwork, SparseWeighting, WeightCheckpoint, WeightingKind};
