//! Mask-guided visual features for a single proposal.
//!
//! The global feature runs the whole image through the backbone once and
//! applies the mask at the pooling boundary, so context from the rest of the
//! image is already mixed into the in-mask cells. The local feature encodes
//! the masked-and-cropped region on its own. The two are blended with `alpha`.

use serde::{Deserialize, Serialize};

use crate::encoder::{BackboneState, EncoderKind, VisualEncoder};
use crate::error::{Error, Result};
use crate::model::{fuse, EmbeddingVector, GridMask, Image, MaskProposal};

/// How the pooling query is formed from a masked residual grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PoolQuery {
    /// Mean over in-mask cells only.
    #[default]
    InMaskMean,
    /// Mean over every cell of the zeroed grid.
    FullGridMean,
}

/// Masking parameters for the global feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenMaskingConfig {
    /// Number of final transformer layers that see masked tokens.
    pub k: usize,
    /// Zero out-of-mask tokens before every one of the last `k` layers,
    /// rather than only before the first of them.
    pub reapply_per_layer: bool,
    pub pool_query: PoolQuery,
}

impl TokenMaskingConfig {
    pub const DEFAULT_MASK_LAYERS: usize = 3;

    pub fn with_k(k: usize) -> Self {
        TokenMaskingConfig {
            k,
            ..Default::default()
        }
    }
}

impl Default for TokenMaskingConfig {
    fn default() -> Self {
        TokenMaskingConfig {
            k: Self::DEFAULT_MASK_LAYERS,
            reapply_per_layer: true,
            pool_query: PoolQuery::InMaskMean,
        }
    }
}

/// Resizes a pixel mask onto a `(h, w)` grid. A cell is set when any pixel
/// falling in it is set. Cell `i` covers rows `floor(i*H/h)..ceil((i+1)*H/h)`,
/// so every pixel belongs to at least one cell.
pub fn resize_mask_to_grid(m: &MaskProposal, grid_shape: (usize, usize)) -> Result<GridMask> {
    let (gh, gw) = grid_shape;
    if gh == 0 || gw == 0 {
        return Err(Error::InvalidValue("grid shape must be positive".into()));
    }
    if m.is_empty() {
        return Err(Error::EmptyMask);
    }
    let (h, w) = m.shape();
    // never empty: ceil((i+1)p/n) > floor(ip/n)
    let span =
        |i: usize, cells: usize, pixels: usize| (i * pixels / cells)..((i + 1) * pixels).div_ceil(cells);
    let mut bits = Vec::with_capacity(gh * gw);
    for gr in 0..gh {
        let rows = span(gr, gh, h);
        for gc in 0..gw {
            let cols = span(gc, gw, w);
            bits.push(rows.clone().any(|r| cols.clone().any(|c| m.get(r, c))));
        }
    }
    Ok(GridMask::from_bits(gh, gw, bits))
}

/// Backbone activations for one image, reused across all its proposals.
#[derive(Debug, Clone)]
pub struct ImageContext {
    pub image: Image,
    pub state: BackboneState,
}

impl ImageContext {
    pub fn new(enc: &dyn VisualEncoder, img: &Image, cfg: &TokenMaskingConfig) -> Result<Self> {
        let state = enc.backbone_features(img, masking_boundary(enc, cfg)?)?;
        Ok(ImageContext {
            image: img.clone(),
            state,
        })
    }

    pub fn from_state(img: &Image, state: BackboneState) -> Self {
        ImageContext {
            image: img.clone(),
            state,
        }
    }
}

fn masking_boundary(enc: &dyn VisualEncoder, cfg: &TokenMaskingConfig) -> Result<usize> {
    let handle = enc.handle();
    match handle.kind {
        EncoderKind::ResidualBackbone => Ok(0),
        EncoderKind::PatchTransformer if cfg.k <= handle.layer_count => Ok(cfg.k),
        EncoderKind::PatchTransformer => Err(Error::InvalidConfig(format!(
            "mask layers k={} exceeds layer count {}",
            cfg.k, handle.layer_count
        ))),
    }
}

/// Global-context feature of `m`, using activations already computed for
/// the image.
pub fn global_visual_feature_in(
    enc: &dyn VisualEncoder,
    ctx: &ImageContext,
    m: &MaskProposal,
    cfg: &TokenMaskingConfig,
) -> Result<EmbeddingVector> {
    m.check_shape(ctx.image.shape())?;
    let grid_mask = resize_mask_to_grid(m, enc.handle().grid_shape)?;
    enc.masked_pool(&ctx.state, &grid_mask, cfg)
}

pub fn global_visual_feature(
    enc: &dyn VisualEncoder,
    img: &Image,
    m: &MaskProposal,
    cfg: &TokenMaskingConfig,
) -> Result<EmbeddingVector> {
    if m.is_empty() {
        return Err(Error::EmptyMask);
    }
    let ctx = ImageContext::new(enc, img, cfg)?;
    global_visual_feature_in(enc, &ctx, m, cfg)
}

/// Crop geometry derived from a mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropSpec {
    /// `(row0, col0, row1, col1)`, end-exclusive.
    pub bbox: (usize, usize, usize, usize),
    pub pad_to_square: bool,
    pub fill_value: u8,
}

impl CropSpec {
    pub fn from_mask(m: &MaskProposal) -> Result<Self> {
        let bbox = m.bbox().ok_or(Error::EmptyMask)?;
        Ok(CropSpec {
            bbox,
            pad_to_square: true,
            fill_value: 0,
        })
    }

    pub fn crop_shape(&self) -> (usize, usize) {
        let (r0, c0, r1, c1) = self.bbox;
        (r1 - r0, c1 - c0)
    }

    pub fn output_shape(&self) -> (usize, usize) {
        let (h, w) = self.crop_shape();
        if self.pad_to_square {
            let side = h.max(w);
            (side, side)
        } else {
            (h, w)
        }
    }
}

/// Zeroes pixels outside `m`, crops to its tight bounding box, and pads the
/// crop to a square with the crop centered.
pub fn crop_to_mask(img: &Image, m: &MaskProposal) -> Result<Image> {
    m.check_shape(img.shape())?;
    let spec = CropSpec::from_mask(m)?;
    apply_crop(img, m, &spec)
}

pub fn apply_crop(img: &Image, m: &MaskProposal, spec: &CropSpec) -> Result<Image> {
    let (r0, c0, r1, c1) = spec.bbox;
    if r1 <= r0 || c1 <= c0 || r1 > img.height() || c1 > img.width() {
        return Err(Error::InvalidValue(format!(
            "crop box {:?} outside image",
            spec.bbox
        )));
    }
    let (ch, cw) = spec.crop_shape();
    let (oh, ow) = spec.output_shape();
    let (off_r, off_c) = ((oh - ch) / 2, (ow - cw) / 2);
    let fill = [spec.fill_value; 3];
    Image::from_fn(img.id(), oh, ow, |r, c| {
        let in_crop = (off_r..off_r + ch).contains(&r) && (off_c..off_c + cw).contains(&c);
        if !in_crop {
            return fill;
        }
        let (sr, sc) = (r0 + r - off_r, c0 + c - off_c);
        if m.get(sr, sc) {
            img.pixel(sr, sc)
        } else {
            [0, 0, 0]
        }
    })
}

/// Local-context feature: the encoder's embedding of the masked crop.
pub fn local_visual_feature(
    enc: &dyn VisualEncoder,
    img: &Image,
    m: &MaskProposal,
) -> Result<EmbeddingVector> {
    enc.encode_image(&crop_to_mask(img, m)?)
}

/// Fused visual feature together with its two components.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures {
    pub fused: EmbeddingVector,
    pub global: EmbeddingVector,
    pub local: EmbeddingVector,
}

pub fn global_local_visual_feature_in(
    enc: &dyn VisualEncoder,
    ctx: &ImageContext,
    m: &MaskProposal,
    alpha: f64,
    cfg: &TokenMaskingConfig,
) -> Result<VisualFeatures> {
    crate::model::check_unit_weight(alpha)?;
    let global = global_visual_feature_in(enc, ctx, m, cfg)?;
    let local = local_visual_feature(enc, &ctx.image, m)?;
    let fused = fuse(&global, &local, alpha)?;
    Ok(VisualFeatures { fused, global, local })
}

pub fn global_local_visual_feature(
    enc: &dyn VisualEncoder,
    img: &Image,
    m: &MaskProposal,
    alpha: f64,
    cfg: &TokenMaskingConfig,
) -> Result<VisualFeatures> {
    if m.is_empty() {
        return Err(Error::EmptyMask);
    }
    let ctx = ImageContext::new(enc, img, cfg)?;
    global_local_visual_feature_in(enc, &ctx, m, alpha, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, EncoderKind};
    use crate::model::cosine;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Per-cell OR over the pixels a cell covers, computed pixel-first.
    fn grid_oracle(m: &MaskProposal, gh: usize, gw: usize) -> Vec<bool> {
        let (h, w) = m.shape();
        let mut out = vec![false; gh * gw];
        for r in 0..h {
            for c in 0..w {
                if m.get(r, c) {
                    for gr in 0..gh {
                        for gc in 0..gw {
                            let rows = (gr * h / gh)..((gr + 1) * h).div_ceil(gh);
                            let cols = (gc * w / gw)..((gc + 1) * w).div_ceil(gw);
                            if rows.contains(&r) && cols.contains(&c) {
                                out[gr * gw + gc] = true;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn resize_examples() {
        let full = resize_mask_to_grid(&MaskProposal::full(4, 4), (2, 2)).unwrap();
        assert!(full.bits().iter().all(|&b| b));
        let single = MaskProposal::from_fn(4, 4, |r, c| r == 0 && c == 0);
        let g = resize_mask_to_grid(&single, (2, 2)).unwrap();
        assert_eq!(g.bits(), &[true, false, false, false]);
        assert_eq!(g.bits(), grid_oracle(&single, 2, 2).as_slice());
        assert!(matches!(
            resize_mask_to_grid(&MaskProposal::empty(4, 4), (2, 2)),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn resize_matches_oracle_on_uneven_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (h, w) = (rng.random_range(1..30), rng.random_range(1..30));
            let (gh, gw) = (rng.random_range(1..9), rng.random_range(1..9));
            let p = rng.random_range(0.01..0.3);
            let m = MaskProposal::from_fn(h, w, |_, _| rng.random_bool(p));
            if m.is_empty() {
                continue;
            }
            let g = resize_mask_to_grid(&m, (gh, gw)).unwrap();
            assert_eq!(
                g.bits(),
                grid_oracle(&m, gh, gw).as_slice(),
                "{h}x{w} -> {gh}x{gw}"
            );
            assert!(g.count() > 0);
        }
    }

    #[test]
    fn crop_examples() {
        let img = Image::from_fn("i", 10, 10, |r, c| [r as u8 * 10 + 1, c as u8 + 1, 7]).unwrap();
        assert_eq!(crop_to_mask(&img, &MaskProposal::full(10, 10)).unwrap(), img);

        let left = MaskProposal::from_fn(10, 10, |_, c| c < 5);
        assert_eq!(CropSpec::from_mask(&left).unwrap().bbox, (0, 0, 10, 5));
        let crop = crop_to_mask(&img, &left).unwrap();
        assert_eq!(crop.shape(), (10, 10));
        // centered horizontally: columns 2..7 carry the source columns 0..5
        assert_eq!(crop.pixel(3, 2), img.pixel(3, 0));
        assert_eq!(crop.pixel(3, 6), img.pixel(3, 4));
        assert_eq!(crop.pixel(3, 1), [0, 0, 0]);
        assert_eq!(crop.pixel(3, 8), [0, 0, 0]);

        let dot = MaskProposal::from_fn(10, 10, |r, c| r == 4 && c == 6);
        let crop = crop_to_mask(&img, &dot).unwrap();
        assert_eq!(crop.shape(), (1, 1));
        assert_eq!(crop.pixel(0, 0), img.pixel(4, 6));

        assert!(matches!(
            crop_to_mask(&img, &MaskProposal::empty(10, 10)),
            Err(Error::EmptyMask)
        ));
        assert!(matches!(
            crop_to_mask(&img, &MaskProposal::full(9, 10)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn crop_zeroes_background_inside_box() {
        let img = Image::filled("i", 6, 6, [200, 100, 50]).unwrap();
        let diag = MaskProposal::from_fn(6, 6, |r, c| r == c);
        let crop = crop_to_mask(&img, &diag).unwrap();
        assert_eq!(crop.pixel(0, 0), [200, 100, 50]);
        assert_eq!(crop.pixel(0, 1), [0, 0, 0]);
    }

    fn scene() -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        Image::from_fn("s", 64, 64, |_, _| [rng.random(), rng.random(), rng.random()]).unwrap()
    }

    #[test]
    fn full_mask_reduces_to_image_embedding() {
        let img = scene();
        let full = MaskProposal::full(64, 64);
        for kind in [EncoderKind::ResidualBackbone, EncoderKind::PatchTransformer] {
            let enc = EncoderConfig::mock(kind, 1).build().unwrap().visual;
            let vanilla = enc.encode_image(&img).unwrap();
            let g = global_visual_feature(enc.as_ref(), &img, &full, &TokenMaskingConfig::default()).unwrap();
            let l = local_visual_feature(enc.as_ref(), &img, &full).unwrap();
            assert_eq!(g, vanilla);
            assert_eq!(l, vanilla);
        }
    }

    #[test]
    fn fusion_endpoints_and_global_local_difference() {
        let img = scene();
        let enc = EncoderConfig::mock(EncoderKind::ResidualBackbone, 1)
            .build()
            .unwrap()
            .visual;
        let half = MaskProposal::from_fn(64, 64, |_, c| c < 32);
        let cfg = TokenMaskingConfig::default();
        let one = global_local_visual_feature(enc.as_ref(), &img, &half, 1.0, &cfg).unwrap();
        assert_eq!(one.fused, one.global);
        let zero = global_local_visual_feature(enc.as_ref(), &img, &half, 0.0, &cfg).unwrap();
        assert_eq!(zero.fused, zero.local);
        assert_eq!(
            zero.local,
            local_visual_feature(enc.as_ref(), &img, &half).unwrap()
        );
        assert_ne!(one.global, one.local);
        assert!(cosine(&one.global, &one.local).unwrap() < 1.0 - 1e-9);
        assert!(matches!(
            global_local_visual_feature(enc.as_ref(), &img, &half, 1.2, &cfg),
            Err(Error::WeightOutOfRange(_))
        ));
    }

    #[test]
    fn too_many_mask_layers_is_rejected() {
        let enc = EncoderConfig::mock(EncoderKind::PatchTransformer, 1)
            .build()
            .unwrap()
            .visual;
        let img = scene();
        let m = MaskProposal::full(64, 64);
        assert!(matches!(
            global_visual_feature(enc.as_ref(), &img, &m, &TokenMaskingConfig::with_k(7)),
            Err(Error::InvalidConfig(_))
        ));
    }
}
