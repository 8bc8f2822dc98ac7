//! Zero-shot comparison methods adapted to mask-proposal scoring. Each
//! returns one score per proposal (`-inf` for empty proposals) so that the
//! result feeds straight into [`crate::scoring::select_mask`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::{similarity_gradient, EncoderKind, VisualEncoder};
use crate::error::{Error, Result};
use crate::model::{cosine, EmbeddingVector, FeatureGrid, GridMask, Image};
use crate::scoring::{allows_parallel, map_proposals, ProposalSet};
use crate::visual::{
    global_visual_feature_in, local_visual_feature, resize_mask_to_grid, ImageContext, TokenMaskingConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    GradCam,
    ScoreMap,
    RegionToken,
    Cropping,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [
        BaselineKind::GradCam,
        BaselineKind::ScoreMap,
        BaselineKind::RegionToken,
        BaselineKind::Cropping,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::GradCam => "grad-cam",
            BaselineKind::ScoreMap => "score-map",
            BaselineKind::RegionToken => "region-token",
            BaselineKind::Cropping => "cropping",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown baseline '{s}'")))
    }
}

/// Mean of a row-major cell map over the set cells of `mask`.
pub fn mean_over_mask(map: &[f64], mask: &GridMask) -> f64 {
    let (sum, count) = map
        .iter()
        .zip(mask.bits())
        .filter(|(_, &keep)| keep)
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    sum / count as f64
}

fn masked_means(map: &[f64], shape: (usize, usize), props: &ProposalSet) -> Result<Vec<f64>> {
    props
        .proposals()
        .iter()
        .map(|m| {
            if m.is_empty() {
                Ok(f64::NEG_INFINITY)
            } else {
                Ok(mean_over_mask(map, &resize_mask_to_grid(m, shape)?))
            }
        })
        .collect()
}

/// `ReLU(sum_c w_c A_c)` with `w_c` the spatial mean of the gradient in
/// channel `c`. Row-major over cells.
pub fn grad_cam_map(activations: &FeatureGrid, gradient: &FeatureGrid) -> Result<Vec<f64>> {
    if activations.channels() != gradient.channels() || activations.shape() != gradient.shape() {
        return Err(Error::DimensionMismatch {
            expected: activations.values().len(),
            found: gradient.values().len(),
        });
    }
    let cells = activations.cell_count();
    let channels = activations.channels();
    let weights: Vec<f64> = (0..channels)
        .map(|c| gradient.values()[c * cells..(c + 1) * cells].iter().sum::<f64>() / cells as f64)
        .collect();
    Ok((0..cells)
        .map(|i| {
            let v: f64 = (0..channels)
                .map(|c| weights[c] * activations.values()[c * cells + i])
                .sum();
            v.max(0.0)
        })
        .collect())
}

/// Scores proposals by the mean Grad-CAM activation inside each mask. The
/// map is not rescaled; selection only depends on the ordering of means.
pub fn grad_cam_scores(
    vis: &dyn VisualEncoder,
    img: &Image,
    text: &EmbeddingVector,
    props: &ProposalSet,
) -> Result<Vec<f64>> {
    props.check_image(img)?;
    let (state, gradient) = similarity_gradient(vis, img, text)?;
    let map = grad_cam_map(&state.grid, &gradient)?;
    masked_means(&map, state.grid.shape(), props)
}

/// Per-cell cosine between a dense feature grid and the text feature.
pub fn cosine_map(dense: &FeatureGrid, text: &EmbeddingVector) -> Result<Vec<f64>> {
    dense
        .cells()
        .into_iter()
        .map(|cell| cosine(&EmbeddingVector::new(cell)?, text))
        .collect()
}

/// Dense score-map baseline: value and output projections of the pooling
/// head applied per cell, cosine with the text, averaged within each mask.
pub fn score_map_scores(
    vis: &dyn VisualEncoder,
    img: &Image,
    text: &EmbeddingVector,
    props: &ProposalSet,
) -> Result<Vec<f64>> {
    props.check_image(img)?;
    if vis.handle().kind != EncoderKind::ResidualBackbone {
        return Err(Error::SurgeryUnsupported(
            "score map needs a residual backbone with an attention-pooling head".into(),
        ));
    }
    let state = vis.backbone_features(img, 0)?;
    let dense = vis.dense_projection(&state)?;
    let map = cosine_map(&dense, text)?;
    masked_means(&map, dense.shape(), props)
}

/// Region-token baseline: token masking applied before every transformer
/// layer, scored by the class token.
pub fn region_token_scores(
    vis: &dyn VisualEncoder,
    img: &Image,
    text: &EmbeddingVector,
    props: &ProposalSet,
    parallel: bool,
) -> Result<Vec<f64>> {
    props.check_image(img)?;
    let handle = vis.handle();
    if handle.kind != EncoderKind::PatchTransformer {
        return Err(Error::SurgeryUnsupported(
            "region tokens need a patch transformer".into(),
        ));
    }
    let cfg = TokenMaskingConfig {
        k: handle.layer_count,
        reapply_per_layer: true,
        ..Default::default()
    };
    let ctx = ImageContext::new(vis, img, &cfg)?;
    map_proposals(props.len(), allows_parallel(vis, parallel), |i| {
        let m = &props.proposals()[i];
        if m.is_empty() {
            return Ok(f64::NEG_INFINITY);
        }
        cosine(text, &global_visual_feature_in(vis, &ctx, m, &cfg)?)
    })
}

/// Cropping baseline: similarity of the text to each masked crop.
pub fn cropping_scores(
    vis: &dyn VisualEncoder,
    img: &Image,
    text: &EmbeddingVector,
    props: &ProposalSet,
    parallel: bool,
) -> Result<Vec<f64>> {
    props.check_image(img)?;
    map_proposals(props.len(), allows_parallel(vis, parallel), |i| {
        let m = &props.proposals()[i];
        if m.is_empty() {
            return Ok(f64::NEG_INFINITY);
        }
        cosine(text, &local_visual_feature(vis, img, m)?)
    })
}

pub fn baseline_scores(
    kind: BaselineKind,
    vis: &dyn VisualEncoder,
    img: &Image,
    text: &EmbeddingVector,
    props: &ProposalSet,
    parallel: bool,
) -> Result<Vec<f64>> {
    match kind {
        BaselineKind::GradCam => grad_cam_scores(vis, img, text, props),
        BaselineKind::ScoreMap => score_map_scores(vis, img, text, props),
        BaselineKind::RegionToken => region_token_scores(vis, img, text, props, parallel),
        BaselineKind::Cropping => cropping_scores(vis, img, text, props, parallel),
    }
}
