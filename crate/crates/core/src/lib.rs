//! Zero-shot referring image segmentation over mask proposals with a frozen
//! image-text dual encoder.
//!
//! Each proposal is scored by the cosine similarity between a fused visual
//! feature (masked global context plus a masked crop) and a fused text feature
//! (whole expression plus its target noun phrase). The best-scoring proposal
//! is the prediction.

pub mod baselines;
pub mod bench;
pub mod encoder;
pub mod error;
pub mod fixtures;
pub mod mask_io;
pub mod metrics;
pub mod model;
pub mod scoring;
pub mod synthetic;
pub mod text;
pub mod visual;

pub use error::{error_chain, Error, Result};
pub use model::{
    cosine, fuse, EmbeddingVector, Expression, FeatureGrid, FusionWeights, GridMask, GridProvenance, Image,
    MaskProposal, MaskSource, ScoreBreakdown, ScoredMask,
};
pub use scoring::{score_proposals, select_mask, ProposalSet, ScoringConfig};
pub use text::{extract_target_np, NounPhrase, ParseToken, ParseTree};
pub use visual::{PoolQuery, TokenMaskingConfig};
