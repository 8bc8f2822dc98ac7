//! Proposal scoring and argmax selection.

use rayon::prelude::*;

use crate::encoder::{Concurrency, TextEncoder, VisualEncoder};
use crate::error::{Error, Result};
use crate::model::{
    cosine, EmbeddingVector, Expression, FusionWeights, Image, MaskProposal, ScoreBreakdown, ScoredMask,
};
use crate::text::{extract_target_np, text_features_for, whole_sentence, ParseTree, TextFeatures};
use crate::visual::{global_local_visual_feature_in, ImageContext, TokenMaskingConfig};

/// Ordered, shape-consistent mask proposals for one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProposalSet {
    proposals: Vec<MaskProposal>,
}

impl ProposalSet {
    pub fn new(proposals: Vec<MaskProposal>) -> Result<Self> {
        let first = proposals.first().ok_or(Error::SelectionImpossible)?.shape();
        for p in &proposals {
            p.check_shape(first)?;
        }
        Ok(ProposalSet { proposals })
    }

    pub fn proposals(&self) -> &[MaskProposal] {
        &self.proposals
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.proposals[0].shape()
    }

    pub fn get(&self, i: usize) -> Option<&MaskProposal> {
        self.proposals.get(i)
    }

    pub(crate) fn check_image(&self, img: &Image) -> Result<()> {
        if self.shape() != img.shape() {
            return Err(Error::ShapeMismatch {
                expected: img.shape(),
                found: self.shape(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoringConfig {
    pub masking: TokenMaskingConfig,
    /// Score proposals on the rayon pool. Ignored for exclusive-access
    /// adapters.
    pub parallel: bool,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            masking: TokenMaskingConfig::default(),
            parallel: true,
        }
    }
}

/// Maps `f` over proposal indices, in parallel when allowed. Output order is
/// always index order.
pub(crate) fn map_proposals<T, F>(count: usize, parallel: bool, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if parallel {
        (0..count).into_par_iter().map(f).collect()
    } else {
        (0..count).map(f).collect()
    }
}

pub(crate) fn allows_parallel(enc: &dyn VisualEncoder, requested: bool) -> bool {
    requested && enc.concurrency() == Concurrency::Shared
}

/// Textual feature for an expression, using the parse when one is given.
pub fn text_feature(
    enc: &dyn TextEncoder,
    expr: &Expression,
    parse: Option<&ParseTree>,
    beta: f64,
) -> Result<TextFeatures> {
    let np = match parse {
        Some(p) => extract_target_np(p, expr)?,
        None => whole_sentence(expr),
    };
    text_features_for(enc, expr, np, beta)
}

/// Scores every proposal against a textual feature already computed.
pub fn score_with_text(
    vis: &dyn VisualEncoder,
    ctx: &ImageContext,
    props: &ProposalSet,
    text: &EmbeddingVector,
    alpha: f64,
    cfg: &ScoringConfig,
) -> Result<Vec<ScoredMask>> {
    props.check_image(&ctx.image)?;
    let parallel = allows_parallel(vis, cfg.parallel);
    map_proposals(props.len(), parallel, |i| {
        let m = &props.proposals[i];
        if m.is_empty() {
            return Ok(ScoredMask::empty_sentinel(i));
        }
        let feats = global_local_visual_feature_in(vis, ctx, m, alpha, &cfg.masking)?;
        Ok(ScoredMask {
            proposal_index: i,
            score: cosine(text, &feats.fused)?,
            breakdown: Some(ScoreBreakdown {
                global: cosine(text, &feats.global)?,
                local: cosine(text, &feats.local)?,
            }),
            empty: false,
        })
    })
}

/// Scores every proposal of `img` against the expression. The backbone runs
/// once for the image; empty proposals keep their slot with a `-inf` score.
#[allow(clippy::too_many_arguments)]
pub fn score_proposals(
    vis: &dyn VisualEncoder,
    txt: &dyn TextEncoder,
    img: &Image,
    props: &ProposalSet,
    expr: &Expression,
    parse: Option<&ParseTree>,
    weights: FusionWeights,
    cfg: &ScoringConfig,
) -> Result<Vec<ScoredMask>> {
    props.check_image(img)?;
    let text = text_feature(txt, expr, parse, weights.beta())?;
    let ctx = ImageContext::new(vis, img, &cfg.masking)?;
    score_with_text(vis, &ctx, props, &text.fused, weights.alpha(), cfg)
}

/// Highest-scoring proposal; ties go to the lowest index.
pub fn select_mask(scored: &[ScoredMask]) -> Result<ScoredMask> {
    scored
        .iter()
        .filter(|s| !s.empty && !s.score.is_nan() && s.score > f64::NEG_INFINITY)
        .fold(None, |best: Option<&ScoredMask>, s| match best {
            Some(b) if b.score >= s.score => Some(b),
            _ => Some(s),
        })
        .copied()
        .ok_or(Error::SelectionImpossible)
}

/// Wraps plain scores (e.g. from a baseline) into `ScoredMask`s, marking
/// `-inf` entries as empty sentinels.
pub fn scored_from(scores: &[f64]) -> Vec<ScoredMask> {
    scores
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            if s == f64::NEG_INFINITY {
                ScoredMask::empty_sentinel(i)
            } else {
                ScoredMask::new(i, s)
            }
        })
        .collect()
}
