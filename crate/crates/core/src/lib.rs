//! Decoder-only model that retrieves passages with its own attention states.

pub mod ablate;
pub mod checkpoint;
pub mod compress;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
mod forward;
pub mod model;
pub mod objectives;
pub mod params;
mod passages;
pub mod tokenizer;
pub mod trainer;

pub use compress::{CompressedKv, CompressionKind, KvCodec, KvCompression};
pub use config::{shift_positions, EncodingStrategy, FrozenMode, LayerGroupPlan, ModelConfig};
pub use error::{CoreError, Result};
pub use model::{
    argmax, pool_passage_embedding, pool_query_embedding, score, DecodeOutput, Decoder, Model, PassageEmbedding,
    PassageKv, PassageLookup, PromptState, QueryEmbedding,
};
pub use objectives::{
    distill_loss, generation_loss, joint_loss, nce_loss, retrieval_distribution, target_distribution,
    DistillationTemperatures, LossBreakdown, Stage,
};
pub use params::{LayerParams, Params};
pub use tokenizer::Tokenizer;
