//! Deterministic seeded stand-ins for a pretrained dual encoder.
//!
//! Both visual mocks embed each grid cell from the mean color of its patch.
//! The residual mock follows the backbone with a multi-head attention-pooling
//! head whose query comes from the mean cell. The transformer mock prepends a
//! class token and runs a stack of pre-norm blocks. Every weight is drawn from
//! a ChaCha stream keyed by the configured seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::nn::{add, add_assign, attend, dot, gelu, random_vec, LayerNorm, Linear};
use super::{
    finite_difference_gradient, BackboneState, EncoderKind, GradientMode, TextEncoder, TextEncoderHandle,
    VisualEncoder, VisualEncoderHandle,
};
use crate::error::{Error, Result};
use crate::model::{EmbeddingVector, Expression, FeatureGrid, GridMask, GridProvenance, Image};
use crate::visual::{PoolQuery, TokenMaskingConfig};

const FD_STEP: f64 = 1e-5;

/// Per-cell mean colors of the image resized to the encoder resolution,
/// centered and scaled to roughly unit range.
fn patch_colors(handle: &VisualEncoderHandle, img: &Image) -> Vec<[f64; 3]> {
    let res = handle.input_resolution;
    let resized = img.resized(res, res);
    let (gh, gw) = handle.grid_shape;
    let (ch, cw) = handle.cell_size();
    let norm = (ch * cw) as f64;
    let mut out = Vec::with_capacity(gh * gw);
    for gr in 0..gh {
        for gc in 0..gw {
            let mut sum = [0.0f64; 3];
            for r in gr * ch..(gr + 1) * ch {
                for c in gc * cw..(gc + 1) * cw {
                    let px = resized.pixel(r, c);
                    for k in 0..3 {
                        sum[k] += px[k] as f64;
                    }
                }
            }
            out.push(sum.map(|s| (s / norm / 255.0 - 0.5) * 4.0));
        }
    }
    out
}

fn check_grid(handle: &VisualEncoderHandle, grid: &FeatureGrid, channels: usize) -> Result<()> {
    if grid.shape() != handle.grid_shape || grid.channels() != channels {
        return Err(Error::EncoderFailure(format!(
            "grid {}x{}x{} does not match encoder geometry {}x{}x{}",
            grid.channels(),
            grid.height(),
            grid.width(),
            channels,
            handle.grid_shape.0,
            handle.grid_shape.1
        )));
    }
    Ok(())
}

fn check_mask(handle: &VisualEncoderHandle, mask: &GridMask) -> Result<()> {
    if mask.shape() != handle.grid_shape {
        return Err(Error::ShapeMismatch {
            expected: handle.grid_shape,
            found: mask.shape(),
        });
    }
    if mask.count() == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(())
}

fn embedding(values: Vec<f64>) -> Result<EmbeddingVector> {
    EmbeddingVector::new(values).map_err(|e| Error::EncoderFailure(e.to_string()))
}

/// Gradient of `cosine(out, text)` with respect to `out`.
fn cosine_grad(out: &[f64], text: &[f64]) -> Result<Vec<f64>> {
    let no = dot(out, out).sqrt();
    let nt = dot(text, text).sqrt();
    if no < crate::model::ZERO_NORM_EPS || nt < crate::model::ZERO_NORM_EPS {
        return Err(Error::ZeroVector {
            eps: crate::model::ZERO_NORM_EPS,
        });
    }
    let cos = dot(out, text) / (no * nt);
    Ok(out
        .iter()
        .zip(text)
        .map(|(o, t)| t / (no * nt) - cos * o / (no * no))
        .collect())
}

/// Residual-style mock: affine per-patch stem followed by attention pooling.
#[derive(Debug, Clone)]
pub struct MockResidualEncoder {
    handle: VisualEncoderHandle,
    gradients: GradientMode,
    width: usize,
    heads: usize,
    stem: Linear,
    cell_pos: Vec<Vec<f64>>,
    pool_pos: Vec<Vec<f64>>,
    q_proj: Linear,
    k_proj: Linear,
    v_proj: Linear,
    c_proj: Linear,
}

struct PoolTrace {
    z: Vec<Vec<f64>>,
    q: Vec<f64>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    weights: Vec<Vec<f64>>,
    out: Vec<f64>,
}

impl MockResidualEncoder {
    pub fn new(
        handle: VisualEncoderHandle,
        width: usize,
        heads: usize,
        seed: u64,
        gradients: GradientMode,
    ) -> Result<Self> {
        if handle.kind != EncoderKind::ResidualBackbone {
            return Err(Error::InvalidConfig(
                "residual mock needs a residual_backbone handle".into(),
            ));
        }
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::InvalidConfig(format!(
                "width {width} not divisible by {heads} heads"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = handle.grid_shape.0 * handle.grid_shape.1;
        let stem = Linear::random(&mut rng, 3, width, true);
        let cell_pos = (0..cells).map(|_| random_vec(&mut rng, width, 0.5)).collect();
        let pool_pos = (0..=cells).map(|_| random_vec(&mut rng, width, 0.1)).collect();
        let q_proj = Linear::random(&mut rng, width, width, true);
        let k_proj = Linear::random(&mut rng, width, width, true);
        let v_proj = Linear::random(&mut rng, width, width, true);
        let c_proj = Linear::random(&mut rng, width, handle.embed_dim, true);
        Ok(MockResidualEncoder {
            handle,
            gradients,
            width,
            heads,
            stem,
            cell_pos,
            pool_pos,
            q_proj,
            k_proj,
            v_proj,
            c_proj,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn pool(&self, query_source: &[f64], cells: &[Vec<f64>]) -> PoolTrace {
        let mut z = Vec::with_capacity(cells.len() + 1);
        z.push(add(query_source, &self.pool_pos[0]));
        for (cell, pos) in cells.iter().zip(&self.pool_pos[1..]) {
            z.push(add(cell, pos));
        }
        let q = self.q_proj.forward(&z[0]);
        let keys: Vec<_> = z.iter().map(|t| self.k_proj.forward(t)).collect();
        let values: Vec<_> = z.iter().map(|t| self.v_proj.forward(t)).collect();
        let (concat, weights) = attend(&q, &keys, &values, self.heads);
        let out = self.c_proj.forward(&concat);
        PoolTrace {
            z,
            q,
            keys,
            values,
            weights,
            out,
        }
    }

    /// Backpropagates `grad_out` through the pooling head, returning the
    /// gradient for the query source token and each cell.
    fn pool_backward(&self, trace: &PoolTrace, grad_out: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let g_concat = self.c_proj.backward_input(grad_out);
        let tokens = trace.z.len();
        let head_dim = self.width / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut g_q = vec![0.0; self.width];
        let mut g_k = vec![vec![0.0; self.width]; tokens];
        let mut g_v = vec![vec![0.0; self.width]; tokens];
        for h in 0..self.heads {
            let span = h * head_dim..(h + 1) * head_dim;
            let a = &trace.weights[h];
            let go = &g_concat[span.clone()];
            let g_a: Vec<f64> = trace.values.iter().map(|v| dot(go, &v[span.clone()])).collect();
            let mean_ga: f64 = a.iter().zip(&g_a).map(|(x, y)| x * y).sum();
            for j in 0..tokens {
                for (gv, g) in g_v[j][span.clone()].iter_mut().zip(go) {
                    *gv = a[j] * g;
                }
                let g_s = a[j] * (g_a[j] - mean_ga) * scale;
                for (d, gq) in span.clone().zip(g_q[span.clone()].iter_mut()) {
                    *gq += g_s * trace.keys[j][d];
                }
                for (d, gk) in span.clone().zip(g_k[j][span.clone()].iter_mut()) {
                    *gk = g_s * trace.q[d];
                }
            }
        }
        let mut g_z: Vec<Vec<f64>> = (0..tokens)
            .map(|j| {
                let mut g = self.k_proj.backward_input(&g_k[j]);
                add_assign(&mut g, &self.v_proj.backward_input(&g_v[j]));
                g
            })
            .collect();
        add_assign(&mut g_z[0], &self.q_proj.backward_input(&g_q));
        let query = g_z.remove(0);
        (query, g_z)
    }

    fn analytic_gradient(&self, state: &BackboneState, text: &EmbeddingVector) -> Result<FeatureGrid> {
        check_grid(&self.handle, &state.grid, self.width)?;
        if text.dim() != self.handle.embed_dim {
            return Err(Error::DimensionMismatch {
                expected: self.handle.embed_dim,
                found: text.dim(),
            });
        }
        let cells = state.grid.cells();
        let query = mean_cells(&cells, None);
        let trace = self.pool(&query, &cells);
        let g_out = cosine_grad(&trace.out, text.as_slice())?;
        let (g_query, g_cells) = self.pool_backward(&trace, &g_out);
        let n = cells.len() as f64;
        let grads: Vec<Vec<f64>> = g_cells
            .into_iter()
            .map(|mut g| {
                for (x, gq) in g.iter_mut().zip(&g_query) {
                    *x += gq / n;
                }
                g
            })
            .collect();
        let (gh, gw) = self.handle.grid_shape;
        FeatureGrid::from_cells(gh, gw, &grads, GridProvenance::Backbone)
    }
}

/// Mean of the selected cells (all cells when `mask` is `None`).
fn mean_cells(cells: &[Vec<f64>], mask: Option<&GridMask>) -> Vec<f64> {
    let dim = cells[0].len();
    let mut sum = vec![0.0; dim];
    let mut count = 0usize;
    for (i, cell) in cells.iter().enumerate() {
        if mask.is_none_or(|m| m.bits()[i]) {
            add_assign(&mut sum, cell);
            count += 1;
        }
    }
    sum.iter().map(|s| s / count as f64).collect()
}

impl VisualEncoder for MockResidualEncoder {
    fn handle(&self) -> &VisualEncoderHandle {
        &self.handle
    }

    fn encode_image(&self, img: &Image) -> Result<EmbeddingVector> {
        let state = self.backbone_features(img, 0)?;
        self.attention_pool(&state)
    }

    fn backbone_features(&self, img: &Image, _masking_layers: usize) -> Result<BackboneState> {
        let cells: Vec<Vec<f64>> = patch_colors(&self.handle, img)
            .iter()
            .zip(&self.cell_pos)
            .map(|(rgb, pos)| add(&self.stem.forward(rgb), pos))
            .collect();
        let (gh, gw) = self.handle.grid_shape;
        Ok(BackboneState {
            grid: FeatureGrid::from_cells(gh, gw, &cells, GridProvenance::Backbone)?,
            class_token: None,
            remaining_layers: 0,
        })
    }

    fn attention_pool(&self, state: &BackboneState) -> Result<EmbeddingVector> {
        check_grid(&self.handle, &state.grid, self.width)?;
        let cells = state.grid.cells();
        let query = mean_cells(&cells, None);
        embedding(self.pool(&query, &cells).out)
    }

    fn masked_pool(
        &self,
        state: &BackboneState,
        mask: &GridMask,
        cfg: &TokenMaskingConfig,
    ) -> Result<EmbeddingVector> {
        check_grid(&self.handle, &state.grid, self.width)?;
        check_mask(&self.handle, mask)?;
        let cells: Vec<Vec<f64>> = state
            .grid
            .cells()
            .into_iter()
            .zip(mask.bits())
            .map(|(cell, &keep)| if keep { cell } else { vec![0.0; self.width] })
            .collect();
        let query = match cfg.pool_query {
            PoolQuery::InMaskMean => mean_cells(&cells, Some(mask)),
            PoolQuery::FullGridMean => mean_cells(&cells, None),
        };
        embedding(self.pool(&query, &cells).out)
    }

    fn similarity_gradient(&self, state: &BackboneState, text: &EmbeddingVector) -> Result<FeatureGrid> {
        match self.gradients {
            GradientMode::None => Err(Error::GradientsUnsupported),
            GradientMode::Analytic => self.analytic_gradient(state, text),
            GradientMode::FiniteDifference => finite_difference_gradient(self, state, text, FD_STEP),
        }
    }

    fn dense_projection(&self, state: &BackboneState) -> Result<FeatureGrid> {
        check_grid(&self.handle, &state.grid, self.width)?;
        let projected: Vec<Vec<f64>> = state
            .grid
            .cells()
            .iter()
            .zip(&self.pool_pos[1..])
            .map(|(cell, pos)| self.c_proj.forward(&self.v_proj.forward(&add(cell, pos))))
            .collect();
        let (gh, gw) = self.handle.grid_shape;
        FeatureGrid::from_cells(gh, gw, &projected, GridProvenance::Backbone)
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn random(rng: &mut ChaCha8Rng, width: usize, hidden: usize) -> Self {
        Block {
            ln1: LayerNorm::random(rng, width),
            q: Linear::random(rng, width, width, true),
            k: Linear::random(rng, width, width, true),
            v: Linear::random(rng, width, width, true),
            out: Linear::random(rng, width, width, true),
            ln2: LayerNorm::random(rng, width),
            fc1: Linear::random(rng, width, hidden, true),
            fc2: Linear::random(rng, hidden, width, true),
        }
    }

    fn forward(&self, tokens: &mut [Vec<f64>], heads: usize) {
        let normed: Vec<_> = tokens.iter().map(|t| self.ln1.forward(t)).collect();
        let keys: Vec<_> = normed.iter().map(|t| self.k.forward(t)).collect();
        let values: Vec<_> = normed.iter().map(|t| self.v.forward(t)).collect();
        let attended: Vec<_> = normed
            .iter()
            .map(|t| {
                self.out
                    .forward(&attend(&self.q.forward(t), &keys, &values, heads).0)
            })
            .collect();
        for (t, a) in tokens.iter_mut().zip(&attended) {
            add_assign(t, a);
        }
        for t in tokens.iter_mut() {
            let hidden: Vec<f64> = self
                .fc1
                .forward(&self.ln2.forward(t))
                .into_iter()
                .map(gelu)
                .collect();
            add_assign(t, &self.fc2.forward(&hidden));
        }
    }
}

/// Transformer-style mock with a class token and pre-norm blocks.
#[derive(Debug, Clone)]
pub struct MockPatchTransformer {
    handle: VisualEncoderHandle,
    gradients: GradientMode,
    width: usize,
    heads: usize,
    patch: Linear,
    class_embedding: Vec<f64>,
    pos: Vec<Vec<f64>>,
    ln_pre: LayerNorm,
    blocks: Vec<Block>,
    ln_post: LayerNorm,
    proj: Linear,
}

impl MockPatchTransformer {
    pub fn new(
        handle: VisualEncoderHandle,
        width: usize,
        heads: usize,
        mlp_hidden: usize,
        seed: u64,
        gradients: GradientMode,
    ) -> Result<Self> {
        if handle.kind != EncoderKind::PatchTransformer {
            return Err(Error::InvalidConfig(
                "transformer mock needs a patch_transformer handle".into(),
            ));
        }
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::InvalidConfig(format!(
                "width {width} not divisible by {heads} heads"
            )));
        }
        if gradients == GradientMode::Analytic {
            return Err(Error::InvalidConfig(
                "transformer mock offers finite-difference gradients only".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = handle.grid_shape.0 * handle.grid_shape.1;
        let patch = Linear::random(&mut rng, 3, width, true);
        let class_embedding = random_vec(&mut rng, width, 1.0);
        let pos = (0..=cells).map(|_| random_vec(&mut rng, width, 0.5)).collect();
        let ln_pre = LayerNorm::random(&mut rng, width);
        let blocks = (0..handle.layer_count)
            .map(|_| Block::random(&mut rng, width, mlp_hidden))
            .collect();
        let ln_post = LayerNorm::random(&mut rng, width);
        let proj = Linear::random(&mut rng, width, handle.embed_dim, false);
        Ok(MockPatchTransformer {
            handle,
            gradients,
            width,
            heads,
            patch,
            class_embedding,
            pos,
            ln_pre,
            blocks,
            ln_post,
            proj,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn embed(&self, img: &Image) -> Vec<Vec<f64>> {
        let mut tokens = Vec::with_capacity(self.pos.len());
        tokens.push(self.ln_pre.forward(&add(&self.class_embedding, &self.pos[0])));
        for (rgb, pos) in patch_colors(&self.handle, img).iter().zip(&self.pos[1..]) {
            tokens.push(self.ln_pre.forward(&add(&self.patch.forward(rgb), pos)));
        }
        tokens
    }

    fn head(&self, tokens: &[Vec<f64>]) -> Result<EmbeddingVector> {
        embedding(self.proj.forward(&self.ln_post.forward(&tokens[0])))
    }

    fn state_tokens(&self, state: &BackboneState) -> Result<Vec<Vec<f64>>> {
        check_grid(&self.handle, &state.grid, self.width)?;
        let cls = state
            .class_token
            .as_ref()
            .ok_or_else(|| Error::EncoderFailure("token state has no class token".into()))?;
        if state.remaining_layers > self.blocks.len() {
            return Err(Error::EncoderFailure(format!(
                "state expects {} remaining layers, encoder has {}",
                state.remaining_layers,
                self.blocks.len()
            )));
        }
        let mut tokens = vec![cls.clone()];
        tokens.extend(state.grid.cells());
        Ok(tokens)
    }

    /// Runs blocks `start_layer..L` on `tokens` (class token first) and
    /// returns the class-token embedding.
    ///
    /// When `mask` is given, out-of-mask grid tokens are zeroed at the input
    /// of `start_layer` and, if `reapply` is set, at the input of every later
    /// block too. `hook` sees each block's input before masking.
    pub fn forward_from(
        &self,
        mut tokens: Vec<Vec<f64>>,
        start_layer: usize,
        mask: Option<(&GridMask, bool)>,
        hook: &mut dyn FnMut(usize, &mut [Vec<f64>]),
    ) -> Result<EmbeddingVector> {
        if let Some((m, _)) = mask {
            check_mask(&self.handle, m)?;
        }
        for (offset, block) in self.blocks.iter().enumerate().skip(start_layer) {
            hook(offset, &mut tokens);
            if let Some((m, reapply)) = mask {
                if offset == start_layer || reapply {
                    for (token, &keep) in tokens[1..].iter_mut().zip(m.bits()) {
                        if !keep {
                            token.iter_mut().for_each(|v| *v = 0.0);
                        }
                    }
                }
            }
            block.forward(&mut tokens, self.heads);
        }
        self.head(&tokens)
    }

    /// Token masking with an observation hook on every block input.
    pub fn masked_pool_with_hook(
        &self,
        state: &BackboneState,
        mask: &GridMask,
        cfg: &TokenMaskingConfig,
        hook: &mut dyn FnMut(usize, &mut [Vec<f64>]),
    ) -> Result<EmbeddingVector> {
        let tokens = self.state_tokens(state)?;
        let start = self.blocks.len() - state.remaining_layers;
        self.forward_from(tokens, start, Some((mask, cfg.reapply_per_layer)), hook)
    }
}

impl VisualEncoder for MockPatchTransformer {
    fn handle(&self) -> &VisualEncoderHandle {
        &self.handle
    }

    fn encode_image(&self, img: &Image) -> Result<EmbeddingVector> {
        self.forward_from(self.embed(img), 0, None, &mut |_, _| {})
    }

    fn backbone_features(&self, img: &Image, masking_layers: usize) -> Result<BackboneState> {
        let layers = self.blocks.len();
        if masking_layers > layers {
            return Err(Error::InvalidConfig(format!(
                "cannot mask {masking_layers} layers of a {layers}-layer transformer"
            )));
        }
        let mut tokens = self.embed(img);
        for block in &self.blocks[..layers - masking_layers] {
            block.forward(&mut tokens, self.heads);
        }
        let (gh, gw) = self.handle.grid_shape;
        let class_token = tokens.remove(0);
        Ok(BackboneState {
            grid: FeatureGrid::from_cells(gh, gw, &tokens, GridProvenance::TokenState)?,
            class_token: Some(class_token),
            remaining_layers: masking_layers,
        })
    }

    fn attention_pool(&self, state: &BackboneState) -> Result<EmbeddingVector> {
        let tokens = self.state_tokens(state)?;
        let start = self.blocks.len() - state.remaining_layers;
        self.forward_from(tokens, start, None, &mut |_, _| {})
    }

    fn masked_pool(
        &self,
        state: &BackboneState,
        mask: &GridMask,
        cfg: &TokenMaskingConfig,
    ) -> Result<EmbeddingVector> {
        self.masked_pool_with_hook(state, mask, cfg, &mut |_, _| {})
    }

    fn similarity_gradient(&self, state: &BackboneState, text: &EmbeddingVector) -> Result<FeatureGrid> {
        match self.gradients {
            GradientMode::FiniteDifference => finite_difference_gradient(self, state, text, FD_STEP),
            _ => Err(Error::GradientsUnsupported),
        }
    }
}

/// Text mock: each string maps to a unit Gaussian vector seeded by a SHA-256
/// of the configured seed and the (possibly truncated) text.
#[derive(Debug, Clone)]
pub struct MockTextEncoder {
    handle: TextEncoderHandle,
    seed: u64,
}

impl MockTextEncoder {
    pub fn new(handle: TextEncoderHandle, seed: u64) -> Self {
        MockTextEncoder { handle, seed }
    }
}

impl TextEncoder for MockTextEncoder {
    fn handle(&self) -> &TextEncoderHandle {
        &self.handle
    }

    fn encode_text(&self, text: &str) -> Result<EmbeddingVector> {
        Expression::new("", text)?;
        let words: Vec<&str> = text.split_whitespace().collect();
        let truncated;
        let key = if words.len() > self.handle.max_token_length {
            log::warn!(
                "expression has {} tokens, truncating to {}",
                words.len(),
                self.handle.max_token_length
            );
            truncated = words[..self.handle.max_token_length].join(" ");
            truncated.as_str()
        } else {
            text
        };
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(key.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(hasher.finalize().into());
        let raw: Vec<f64> = (0..self.handle.embed_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let norm = dot(&raw, &raw).sqrt();
        embedding(raw.into_iter().map(|v| v / norm).collect())
    }
}
