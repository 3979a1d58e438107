//! Generative augmentation for ID-only recommendation data.
//!
//! The pipeline turns a user–item interaction matrix into instruction-style
//! prompts, generates candidate items per user with a text or token
//! backend, filters them back onto the item set and merges the survivors
//! into the training data of ordinary ID-based recommenders.

pub mod augment;
pub mod checkpoint;
pub mod dataset;
pub mod eval;
pub mod genbackend;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod parsefilter;
pub mod pipeline;
pub mod promptgen;
pub mod recommenders;
pub mod synthetic;

pub use augment::{AugmentedDataset, CompositionStats, GeneratedInteractions};
pub use dataset::{
    DatasetStats, IdMap, IdMaps, InteractionDataset, ItemIdx, SplitBundle, SplitKind, UserIdx,
};
pub use eval::{GroupReport, RankingMetrics};
pub use genbackend::{GenerationRequest, GenerationResponse, Generator};
pub use parsefilter::{FilterReport, GenerationRecord, ParsedCandidates};
pub use promptgen::{CorpusConfig, PromptInstance, PromptTemplate, Vocabulary};
pub use recommenders::{EmbeddingTable, Scorer};
