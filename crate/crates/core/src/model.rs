//! Value types shared by every stage of the pipeline: images, masks,
//! embeddings, feature grids, and the two vector primitives (`cosine`, `fuse`)
//! the scoring rule is built from.
//!
//! Embeddings are kept exactly as the encoders emit them. Normalization only
//! happens inside [`cosine`], because the weighted fusion of global and local
//! features is defined on raw encoder outputs.

use std::path::Path;

use image::{imageops::FilterType, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm below which a vector is treated as zero by [`cosine`].
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// An RGB image with 8-bit channels, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    id: String,
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(id: impl Into<String>, height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidValue(format!(
                "image must be at least 1x1, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::InvalidValue(format!(
                "expected {} pixel bytes for a {height}x{width} RGB image, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(Image {
            id: id.into(),
            height,
            width,
            pixels,
        })
    }

    /// Uniformly colored image.
    pub fn filled(id: impl Into<String>, height: usize, width: usize, rgb: [u8; 3]) -> Result<Self> {
        let pixels = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Image::new(id, height, width, pixels)
    }

    pub fn from_fn(
        id: impl Into<String>,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [u8; 3],
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for r in 0..height {
            for c in 0..width {
                pixels.extend_from_slice(&f(r, c));
            }
        }
        Image::new(id, height, width, pixels)
    }

    pub fn from_rgb(id: impl Into<String>, img: &RgbImage) -> Result<Self> {
        Image::new(
            id,
            img.height() as usize,
            img.width() as usize,
            img.as_raw().clone(),
        )
    }

    pub fn open(id: impl Into<String>, path: &Path) -> Result<Self> {
        let decoded = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Image::from_rgb(id, &decoded.to_rgb8())
    }

    pub fn to_rgb(&self) -> RgbImage {
        RgbImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .expect("pixel buffer length is checked at construction")
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear resize. Returns a clone when the shape already matches.
    pub fn resized(&self, height: usize, width: usize) -> Image {
        if (height, width) == self.shape() {
            return self.clone();
        }
        let out = image::imageops::resize(&self.to_rgb(), width as u32, height as u32, FilterType::Triangle);
        Image {
            id: self.id.clone(),
            height,
            width,
            pixels: out.into_raw(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    #[default]
    Proposal,
    GroundTruth,
}

/// Binary mask over an image, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskProposal {
    height: usize,
    width: usize,
    bits: Vec<bool>,
    source: MaskSource,
}

impl MaskProposal {
    pub fn new(height: usize, width: usize, bits: Vec<bool>, source: MaskSource) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::InvalidValue(format!(
                "mask of shape {height}x{width} needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(MaskProposal {
            height,
            width,
            bits,
            source,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                bits.push(f(r, c));
            }
        }
        MaskProposal {
            height,
            width,
            bits,
            source: MaskSource::Proposal,
        }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        MaskProposal::from_fn(height, width, |_, _| false)
    }

    pub fn full(height: usize, width: usize) -> Self {
        MaskProposal::from_fn(height, width, |_, _| true)
    }

    pub fn with_source(mut self, source: MaskSource) -> Self {
        self.source = source;
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn source(&self) -> MaskSource {
        self.source
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Tight bounding box `(row0, col0, row1, col1)`, end-exclusive.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bbox: Option<(usize, usize, usize, usize)> = None;
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    bbox = Some(match bbox {
                        None => (r, c, r + 1, c + 1),
                        Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r + 1), c1.max(c + 1)),
                    });
                }
            }
        }
        bbox
    }

    pub(crate) fn check_shape(&self, expected: (usize, usize)) -> Result<()> {
        if self.shape() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                found: self.shape(),
            });
        }
        Ok(())
    }
}

/// A mask resized onto a feature or token grid. Built by
/// [`crate::visual::resize_mask_to_grid`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl GridMask {
    pub(crate) fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Self {
        debug_assert_eq!(bits.len(), height * width);
        GridMask { height, width, bits }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// A feature vector in the shared image-text space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!("non-finite embedding entry {bad}")));
        }
        Ok(EmbeddingVector(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, factor: f64) -> EmbeddingVector {
        EmbeddingVector(self.0.iter().map(|v| v * factor).collect())
    }
}

/// Cosine similarity with the default zero-norm threshold.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    cosine_with_eps(a, b, ZERO_NORM_EPS)
}

pub fn cosine_with_eps(a: &EmbeddingVector, b: &EmbeddingVector, eps: f64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na < eps || nb < eps {
        return Err(Error::ZeroVector { eps });
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// Elementwise `w * a + (1 - w) * b`.
///
/// The endpoints return the corresponding input unchanged so that `w = 1`
/// and `w = 0` reduce exactly to the global and local features.
pub fn fuse(a: &EmbeddingVector, b: &EmbeddingVector, w: f64) -> Result<EmbeddingVector> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    check_unit_weight(w)?;
    if w == 1.0 {
        return Ok(a.clone());
    }
    if w == 0.0 {
        return Ok(b.clone());
    }
    Ok(EmbeddingVector(
        a.0.iter().zip(&b.0).map(|(x, y)| w * x + (1.0 - w) * y).collect(),
    ))
}

pub(crate) fn check_unit_weight(w: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::WeightOutOfRange(w));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridProvenance {
    Backbone,
    TokenState,
}

/// Dense `channels x height x width` tensor, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
    provenance: GridProvenance,
}

impl FeatureGrid {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        values: Vec<f64>,
        provenance: GridProvenance,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidValue(format!(
                "feature grid dims must be positive, got {channels}x{height}x{width}"
            )));
        }
        if values.len() != channels * height * width {
            return Err(Error::InvalidValue(format!(
                "feature grid {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("non-finite feature grid entry".into()));
        }
        Ok(FeatureGrid {
            channels,
            height,
            width,
            values,
            provenance,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize, provenance: GridProvenance) -> Self {
        FeatureGrid {
            channels,
            height,
            width,
            values: vec![0.0; channels * height * width],
            provenance,
        }
    }

    /// Builds a grid from per-cell vectors listed in row-major cell order.
    pub fn from_cells(
        height: usize,
        width: usize,
        cells: &[Vec<f64>],
        provenance: GridProvenance,
    ) -> Result<Self> {
        if cells.len() != height * width {
            return Err(Error::InvalidValue(format!(
                "expected {} cells, got {}",
                height * width,
                cells.len()
            )));
        }
        let channels = cells.first().map_or(0, Vec::len);
        let mut grid = FeatureGrid::zeros(channels, height, width, provenance);
        for (i, cell) in cells.iter().enumerate() {
            if cell.len() != channels {
                return Err(Error::DimensionMismatch {
                    expected: channels,
                    found: cell.len(),
                });
            }
            grid.set_cell(i / width, i % width, cell);
        }
        FeatureGrid::new(channels, height, width, grid.values, provenance)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn cell_count(&self) -> usize {
        self.height * self.width
    }

    pub fn provenance(&self) -> GridProvenance {
        self.provenance
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn index(&self, channel: usize, row: usize, col: usize) -> usize {
        channel * self.height * self.width + row * self.width + col
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.values[self.index(channel, row, col)]
    }

    pub fn set(&mut self, channel: usize, row: usize, col: usize, value: f64) {
        let i = self.index(channel, row, col);
        self.values[i] = value;
    }

    /// Channel vector at one cell.
    pub fn cell(&self, row: usize, col: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.get(c, row, col)).collect()
    }

    pub fn set_cell(&mut self, row: usize, col: usize, values: &[f64]) {
        for (c, v) in values.iter().enumerate() {
            self.set(c, row, col, *v);
        }
    }

    /// Cells in row-major order.
    pub fn cells(&self) -> Vec<Vec<f64>> {
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| (r, c)))
            .map(|(r, c)| self.cell(r, c))
            .collect()
    }
}

/// Fusion weights for the visual (`alpha`) and textual (`beta`) features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    alpha: f64,
    beta: f64,
}

impl FusionWeights {
    /// Visual weight used for short-expression datasets.
    pub const DEFAULT_ALPHA: f64 = 0.95;
    /// Visual weight for datasets with long expressions.
    pub const LONG_EXPRESSION_ALPHA: f64 = 0.85;
    pub const DEFAULT_BETA: f64 = 0.5;

    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        check_unit_weight(alpha)?;
        check_unit_weight(beta)?;
        Ok(FusionWeights { alpha, beta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

impl Default for FusionWeights {
    fn default() -> Self {
        FusionWeights {
            alpha: Self::DEFAULT_ALPHA,
            beta: Self::DEFAULT_BETA,
        }
    }
}

/// A referring expression.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Expression {
    id: String,
    text: String,
}

impl Expression {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::EmptyExpression);
        }
        Ok(Expression { id: id.into(), text })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

/// Per-feature similarities behind a fused score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub global: f64,
    pub local: f64,
}

/// Similarity of one proposal to the expression.
///
/// Empty proposals keep their slot with `score = -inf` and `empty = true`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredMask {
    pub proposal_index: usize,
    pub score: f64,
    pub breakdown: Option<ScoreBreakdown>,
    pub empty: bool,
}

impl ScoredMask {
    pub fn new(proposal_index: usize, score: f64) -> Self {
        ScoredMask {
            proposal_index,
            score,
            breakdown: None,
            empty: false,
        }
    }

    pub fn empty_sentinel(proposal_index: usize) -> Self {
        ScoredMask {
            proposal_index,
            score: f64::NEG_INFINITY,
            breakdown: None,
            empty: true,
        }
    }
}
