//! Hybrid style siamese network for complementary-item retrieval.
//!
//! A shared-weight convolutional embedder whose early layers also feed
//! gram-matrix style heads. Training combines a triplet margin loss on the
//! embeddings with a negated style loss that pushes positive and negative
//! items apart in style space; retrieval quality is scored by bidirectional
//! reciprocal rank.

pub mod datapipe;
pub mod error;
pub mod evaluator;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
pub use tensor::{finite_diff_check, BnMode, Graph, GradCheck, RunningStats, Tensor, Var};
pub use datapipe::{Category, Dataset, FoldSplit, ItemRecord, Manifest, Triplet};
pub use evaluator::{EvalPairSet, EvalResults, RankResult};
pub use experiment::{ExperimentOptions, ResultsTable};
pub use losses::{LossBreakdown, LossParams};
pub use model::{Model, ModelConfig};
pub use trainer::{AdamState, Schedule, TrainConfig};
