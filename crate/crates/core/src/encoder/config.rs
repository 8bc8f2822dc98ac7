use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    EncoderKind, MockPatchTransformer, MockResidualEncoder, MockTextEncoder, TextEncoder, TextEncoderHandle,
    VisualEncoder, VisualEncoderHandle,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    None,
    Analytic,
    FiniteDifference,
}

/// Flat key-value adapter configuration.
///
/// ```toml
/// kind = "residual_backbone"
/// backend = "mock"
/// input_resolution = 224
/// grid_h = 7
/// grid_w = 7
/// embed_dim = 16
/// seed = 0
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub backend: String,
    /// Location of pretrained weights; unused by the mock backend.
    pub weights: Option<String>,
    pub input_resolution: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub embed_dim: usize,
    pub layer_count: usize,
    pub gradients: Option<GradientMode>,
    pub seed: u64,
    /// Image resize filter applied before encoding.
    pub interpolation: String,
    pub width: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub max_token_length: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::ResidualBackbone,
            backend: "mock".into(),
            weights: None,
            input_resolution: 224,
            grid_h: 7,
            grid_w: 7,
            embed_dim: 16,
            layer_count: 6,
            gradients: None,
            seed: 0,
            interpolation: "bilinear".into(),
            width: 32,
            heads: 4,
            mlp_hidden: 64,
            max_token_length: 77,
        }
    }
}

/// A built visual/text encoder pair sharing one embedding space.
#[derive(Clone)]
pub struct DualEncoder {
    pub visual: Arc<dyn VisualEncoder>,
    pub text: Arc<dyn TextEncoder>,
}

impl EncoderConfig {
    pub fn mock(kind: EncoderKind, seed: u64) -> Self {
        EncoderConfig {
            kind,
            seed,
            ..Default::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::schema(path, e.message().to_string()))
    }

    pub fn gradient_mode(&self) -> GradientMode {
        self.gradients.unwrap_or(match self.kind {
            EncoderKind::ResidualBackbone => GradientMode::Analytic,
            EncoderKind::PatchTransformer => GradientMode::FiniteDifference,
        })
    }

    pub fn visual_handle(&self) -> Result<VisualEncoderHandle> {
        VisualEncoderHandle::new(
            self.kind,
            self.input_resolution,
            (self.grid_h, self.grid_w),
            self.embed_dim,
            self.layer_count,
        )
    }

    pub fn build(&self) -> Result<DualEncoder> {
        if self.interpolation != "bilinear" {
            return Err(Error::InvalidConfig(format!(
                "unsupported interpolation '{}'; only bilinear is available",
                self.interpolation
            )));
        }
        if self.backend != "mock" {
            return Err(Error::EncoderFailure(format!(
                "backend '{}' is not available in this build",
                self.backend
            )));
        }
        let handle = self.visual_handle()?;
        let visual: Arc<dyn VisualEncoder> = match self.kind {
            EncoderKind::ResidualBackbone => Arc::new(MockResidualEncoder::new(
                handle,
                self.width,
                self.heads,
                self.seed,
                self.gradient_mode(),
            )?),
            EncoderKind::PatchTransformer => Arc::new(MockPatchTransformer::new(
                handle,
                self.width,
                self.heads,
                self.mlp_hidden,
                self.seed,
                self.gradient_mode(),
            )?),
        };
        let text = Arc::new(MockTextEncoder::new(
            TextEncoderHandle {
                embed_dim: self.embed_dim,
                max_token_length: self.max_token_length,
            },
            self.seed,
        ));
        Ok(DualEncoder { visual, text })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_toml() {
        let cfg: EncoderConfig = toml::from_str(
            r#"
            kind = "patch_transformer"
            layer_count = 4
            seed = 9
            gradients = "none"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.kind, EncoderKind::PatchTransformer);
        assert_eq!(cfg.layer_count, 4);
        assert_eq!(cfg.gradient_mode(), GradientMode::None);
        assert_eq!(cfg.input_resolution, 224);
        let built = cfg.build().unwrap();
        assert_eq!(built.visual.handle().grid_shape, (7, 7));
        assert_eq!(built.text.handle().embed_dim, 16);
    }

    #[test]
    fn rejects_unknown_keys_and_backends() {
        assert!(toml::from_str::<EncoderConfig>("colour = 3").is_err());
        let cfg = EncoderConfig {
            backend: "onnx".into(),
            ..Default::default()
        };
        assert!(matches!(cfg.build(), Err(Error::EncoderFailure(_))));
    }
}
