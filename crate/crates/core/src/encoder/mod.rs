//! Adapter seams into a contrastively aligned image-text dual encoder.
//!
//! The visual side is split into a backbone (`backbone_features`) and a
//! pooling head (`attention_pool`) so that mask surgery can be applied at the
//! boundary between them. For residual backbones the boundary is the input of
//! the attention-pooling layer. For patch transformers it is the token state
//! entering the first of the last `k` layers, where `k` is chosen by the
//! caller.

mod config;
mod mock;
pub(crate) mod nn;

use serde::{Deserialize, Serialize};

pub use config::{DualEncoder, EncoderConfig, GradientMode};
pub use mock::{MockPatchTransformer, MockResidualEncoder, MockTextEncoder};

use crate::error::{Error, Result};
use crate::model::{cosine, EmbeddingVector, FeatureGrid, GridMask, Image};
use crate::visual::TokenMaskingConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    ResidualBackbone,
    PatchTransformer,
}

/// Whether an adapter may be invoked from several threads at once.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Concurrency {
    Shared,
    Exclusive,
}

/// Static geometry of a visual encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualEncoderHandle {
    pub kind: EncoderKind,
    pub input_resolution: usize,
    pub grid_shape: (usize, usize),
    pub embed_dim: usize,
    /// Number of transformer layers; zero for residual backbones.
    pub layer_count: usize,
}

impl VisualEncoderHandle {
    pub fn new(
        kind: EncoderKind,
        input_resolution: usize,
        grid_shape: (usize, usize),
        embed_dim: usize,
        layer_count: usize,
    ) -> Result<Self> {
        let (gh, gw) = grid_shape;
        if input_resolution == 0 || gh == 0 || gw == 0 || embed_dim == 0 {
            return Err(Error::InvalidConfig(
                "input resolution, grid shape and embed dim must be positive".into(),
            ));
        }
        if !input_resolution.is_multiple_of(gh) || !input_resolution.is_multiple_of(gw) {
            return Err(Error::InvalidConfig(format!(
                "grid {gh}x{gw} does not tile a {input_resolution}x{input_resolution} input"
            )));
        }
        if kind == EncoderKind::PatchTransformer && layer_count == 0 {
            return Err(Error::InvalidConfig(
                "patch transformer needs at least one layer".into(),
            ));
        }
        let layer_count = match kind {
            EncoderKind::ResidualBackbone => 0,
            EncoderKind::PatchTransformer => layer_count,
        };
        Ok(VisualEncoderHandle {
            kind,
            input_resolution,
            grid_shape,
            embed_dim,
            layer_count,
        })
    }

    /// Geometry of a backbone with a fixed output stride (or patch size).
    pub fn with_stride(
        kind: EncoderKind,
        input_resolution: usize,
        stride: usize,
        embed_dim: usize,
        layer_count: usize,
    ) -> Result<Self> {
        if stride == 0 || !input_resolution.is_multiple_of(stride) {
            return Err(Error::InvalidConfig(format!(
                "stride {stride} does not divide input resolution {input_resolution}"
            )));
        }
        let side = input_resolution / stride;
        Self::new(kind, input_resolution, (side, side), embed_dim, layer_count)
    }

    pub fn cell_size(&self) -> (usize, usize) {
        (
            self.input_resolution / self.grid_shape.0,
            self.input_resolution / self.grid_shape.1,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoderHandle {
    pub embed_dim: usize,
    pub max_token_length: usize,
}

/// Activations at the masking boundary of a visual encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneState {
    /// Spatial features (residual) or grid tokens (transformer).
    pub grid: FeatureGrid,
    /// Class token for transformers; absent for residual backbones.
    pub class_token: Option<Vec<f64>>,
    /// Transformer layers still to run after the boundary.
    pub remaining_layers: usize,
}

pub trait VisualEncoder: Send + Sync {
    fn handle(&self) -> &VisualEncoderHandle;

    fn concurrency(&self) -> Concurrency {
        Concurrency::Shared
    }

    /// Standard whole-image embedding.
    fn encode_image(&self, img: &Image) -> Result<EmbeddingVector>;

    /// Runs the encoder up to the masking boundary. `masking_layers` is the
    /// number of trailing transformer layers left unexecuted; residual
    /// backbones ignore it.
    fn backbone_features(&self, img: &Image, masking_layers: usize) -> Result<BackboneState>;

    /// Finishes the forward pass from `state` without any masking.
    fn attention_pool(&self, state: &BackboneState) -> Result<EmbeddingVector>;

    /// Finishes the forward pass with out-of-mask cells zeroed: masked
    /// attention pooling for residual backbones, token masking for
    /// transformers.
    fn masked_pool(
        &self,
        state: &BackboneState,
        mask: &GridMask,
        cfg: &TokenMaskingConfig,
    ) -> Result<EmbeddingVector>;

    /// Gradient of `cosine(attention_pool(state), text)` with respect to
    /// `state.grid`.
    fn similarity_gradient(&self, _state: &BackboneState, _text: &EmbeddingVector) -> Result<FeatureGrid> {
        Err(Error::GradientsUnsupported)
    }

    /// Per-cell language-compatible features obtained by applying the pooling
    /// head's value and output projections to every cell.
    fn dense_projection(&self, _state: &BackboneState) -> Result<FeatureGrid> {
        Err(Error::SurgeryUnsupported(
            "adapter does not expose its pooling projections".into(),
        ))
    }
}

pub trait TextEncoder: Send + Sync {
    fn handle(&self) -> &TextEncoderHandle;

    fn concurrency(&self) -> Concurrency {
        Concurrency::Shared
    }

    fn encode_text(&self, text: &str) -> Result<EmbeddingVector>;
}

/// Boundary used when a transformer's gradient is requested without an
/// explicit layer: the input of the final block.
pub const GRADIENT_BOUNDARY_LAYERS: usize = 1;

/// Similarity gradient at the encoder's default gradient boundary, together
/// with the activations it was taken at.
pub fn similarity_gradient(
    enc: &dyn VisualEncoder,
    img: &Image,
    text: &EmbeddingVector,
) -> Result<(BackboneState, FeatureGrid)> {
    let state = enc.backbone_features(img, GRADIENT_BOUNDARY_LAYERS)?;
    let grad = enc.similarity_gradient(&state, text)?;
    Ok((state, grad))
}

/// Central-difference gradient of `cosine(attention_pool(state), text)` with
/// respect to every entry of `state.grid`.
pub fn finite_difference_gradient(
    enc: &dyn VisualEncoder,
    state: &BackboneState,
    text: &EmbeddingVector,
    step: f64,
) -> Result<FeatureGrid> {
    let mut grad = state.grid.clone();
    let mut probe = state.clone();
    for i in 0..state.grid.values().len() {
        let base = state.grid.values()[i];
        probe.grid.values_mut()[i] = base + step;
        let plus = cosine(&enc.attention_pool(&probe)?, text)?;
        probe.grid.values_mut()[i] = base - step;
        let minus = cosine(&enc.attention_pool(&probe)?, text)?;
        probe.grid.values_mut()[i] = base;
        grad.values_mut()[i] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}
