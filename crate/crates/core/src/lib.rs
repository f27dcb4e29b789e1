//! Knowledge supplementation on demand: find the knowledge a model lacks,
//! train a low-rank module for it, keep the module only when its embeddings
//! cluster by class, and merge verified modules back into the model.

pub mod adapter;
pub mod backbone;
pub mod datahub;
pub mod error;
pub mod identifier;
pub mod pipeline;
pub mod tensor;
pub mod trainer;
pub mod verifier;

pub use adapter::{attach, combine, KnowledgeModule, KnowledgeVector, MergedBackbone};
pub use backbone::{AdapterTarget, Backbone, ClassifierHead, ModelConfig};
pub use datahub::{ClassificationDataset, Example, Split};
pub use error::{KsodError, Result};
pub use identifier::{ErrorSample, JudgeClient, KnowledgeCandidate};
pub use pipeline::{run_algorithm1, PipelineConfig, RunReport};
pub use trainer::{TrainConfig, TrainReport};
pub use verifier::{verify, VerificationReport};
