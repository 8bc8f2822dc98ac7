//! Mask and annotation files.
//!
//! Masks are exchanged as uncompressed column-major run-length encodings:
//! `counts` alternates runs of zeros and ones, starting with zeros, scanning
//! each column top to bottom.

use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MaskProposal, MaskSource};
use crate::scoring::ProposalSet;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RleMask {
    /// `[height, width]`
    pub size: [usize; 2],
    pub counts: Vec<usize>,
}

pub fn rle_encode(m: &MaskProposal) -> RleMask {
    let (h, w) = m.shape();
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0usize;
    for c in 0..w {
        for r in 0..h {
            let bit = m.get(r, c);
            if bit != current {
                counts.push(run);
                run = 0;
                current = bit;
            }
            run += 1;
        }
    }
    counts.push(run);
    RleMask { size: [h, w], counts }
}

pub fn rle_decode(rle: &RleMask) -> Result<MaskProposal> {
    rle_decode_in(rle, "mask")
}

fn rle_decode_in(rle: &RleMask, context: &str) -> Result<MaskProposal> {
    let [h, w] = rle.size;
    let total: usize = rle.counts.iter().sum();
    if total != h * w {
        return Err(Error::MalformedRle {
            context: context.to_string(),
            detail: format!("counts sum to {total}, expected {h}x{w} = {}", h * w),
        });
    }
    let mut column_major = Vec::with_capacity(h * w);
    for (i, &run) in rle.counts.iter().enumerate() {
        column_major.extend(std::iter::repeat_n(i % 2 == 1, run));
    }
    Ok(MaskProposal::from_fn(h, w, |r, c| column_major[c * h + r]))
}

/// Even-odd fill of polygons given as flat `[x0, y0, x1, y1, ...]` lists in
/// pixel coordinates. A pixel is set when its center lies inside an odd
/// number of polygon boundaries.
pub fn rasterize_polygons(height: usize, width: usize, polygons: &[Vec<f64>]) -> Result<MaskProposal> {
    for p in polygons {
        if p.len() < 6 || p.len() % 2 != 0 {
            return Err(Error::InvalidValue(format!(
                "polygon needs an even number (>= 6) of coordinates, got {}",
                p.len()
            )));
        }
    }
    Ok(MaskProposal::from_fn(height, width, |r, c| {
        let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
        let mut inside = false;
        for poly in polygons {
            let n = poly.len() / 2;
            for i in 0..n {
                let (x1, y1) = (poly[2 * i], poly[2 * i + 1]);
                let j = (i + 1) % n;
                let (x2, y2) = (poly[2 * j], poly[2 * j + 1]);
                if (y1 > py) != (y2 > py) {
                    let x_cross = x1 + (py - y1) * (x2 - x1) / (y2 - y1);
                    if px < x_cross {
                        inside = !inside;
                    }
                }
            }
        }
        inside
    }))
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::schema(path, e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec(value).map_err(|e| Error::schema(path, e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProposalFile {
    images: Vec<ProposalImage>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProposalImage {
    id: String,
    height: usize,
    width: usize,
    proposals: Vec<RleMask>,
}

/// Proposal sets keyed by image id, in file order.
pub type ProposalMap = IndexMap<String, ProposalSet>;

/// Loads `{"images":[{"id","height","width","proposals":[RLE...]}]}`.
/// Images listing no proposals are left out of the map.
pub fn load_proposals(path: &Path) -> Result<ProposalMap> {
    let file: ProposalFile = read_json(path)?;
    let mut out = IndexMap::with_capacity(file.images.len());
    for img in file.images {
        let mut masks = Vec::with_capacity(img.proposals.len());
        for (i, rle) in img.proposals.iter().enumerate() {
            let context = format!("{}: image '{}' proposal {i}", path.display(), img.id);
            let m = rle_decode_in(rle, &context)?;
            m.check_shape((img.height, img.width))?;
            masks.push(m);
        }
        if masks.is_empty() {
            log::warn!("image '{}' has no proposals", img.id);
            continue;
        }
        if out.insert(img.id.clone(), ProposalSet::new(masks)?).is_some() {
            return Err(Error::schema(path, format!("duplicate image id '{}'", img.id)));
        }
    }
    Ok(out)
}

pub fn save_proposals(path: &Path, proposals: &ProposalMap) -> Result<()> {
    let images = proposals
        .iter()
        .map(|(id, set)| {
            let (height, width) = set.shape();
            ProposalImage {
                id: id.clone(),
                height,
                width,
                proposals: set.proposals().iter().map(rle_encode).collect(),
            }
        })
        .collect();
    write_json(path, &ProposalFile { images })
}

/// One benchmark example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalRecord {
    pub id: String,
    pub image_id: String,
    pub image_path: String,
    pub expression: String,
    pub gt_mask: MaskProposal,
    pub object_class: Option<String>,
}

impl EvalRecord {
    /// Image path resolved against the directory of the records file.
    pub fn resolve_image_path(&self, records_file: &Path) -> PathBuf {
        let p = Path::new(&self.image_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            records_file.parent().unwrap_or(Path::new(".")).join(p)
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordFile {
    records: Vec<RecordJson>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordJson {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    image_id: String,
    image_path: String,
    expression: String,
    gt: GtJson,
    class: Option<String>,
}

/// Ground truth as RLE or as polygons rasterized at load time.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GtJson {
    size: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    counts: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    polygons: Option<Vec<Vec<f64>>>,
}

impl GtJson {
    fn decode(self, path: &Path, context: &str) -> Result<MaskProposal> {
        let mask = match (self.counts, self.polygons) {
            (Some(counts), None) => rle_decode_in(
                &RleMask {
                    size: self.size,
                    counts,
                },
                context,
            )?,
            (None, Some(polys)) => rasterize_polygons(self.size[0], self.size[1], &polys)
                .map_err(|e| Error::schema(path, format!("{context}: {e}")))?,
            _ => {
                return Err(Error::schema(
                    path,
                    format!("{context}: gt needs exactly one of `counts` or `polygons`"),
                ))
            }
        };
        Ok(mask.with_source(MaskSource::GroundTruth))
    }
}

/// Loads `{"records":[{"image_id","image_path","expression","gt","class"}]}`.
pub fn load_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let file: RecordFile = read_json(path)?;
    file.records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let context = format!("{}: record {i}", path.display());
            if r.expression.trim().is_empty() {
                return Err(Error::schema(path, format!("record {i}: empty `expression`")));
            }
            Ok(EvalRecord {
                id: r.id.unwrap_or_else(|| format!("{}/{i}", r.image_id)),
                gt_mask: r.gt.decode(path, &context)?,
                image_id: r.image_id,
                image_path: r.image_path,
                expression: r.expression,
                object_class: r.class,
            })
        })
        .collect()
}

pub fn save_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let records = records
        .iter()
        .map(|r| {
            let rle = rle_encode(&r.gt_mask);
            RecordJson {
                id: Some(r.id.clone()),
                image_id: r.image_id.clone(),
                image_path: r.image_path.clone(),
                expression: r.expression.clone(),
                gt: GtJson {
                    size: rle.size,
                    counts: Some(rle.counts),
                    polygons: None,
                },
                class: r.object_class.clone(),
            }
        })
        .collect();
    write_json(path, &RecordFile { records })
}

/// Every annotated instance of an image, used to assign classes to
/// predicted masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GtInstance {
    pub class: String,
    pub mask: MaskProposal,
}

pub type InstanceMap = IndexMap<String, Vec<GtInstance>>;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceFile {
    images: Vec<InstanceImage>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceImage {
    id: String,
    instances: Vec<InstanceJson>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceJson {
    class: String,
    mask: RleMask,
}

/// Loads `{"images":[{"id","instances":[{"class","mask":RLE}]}]}`.
pub fn load_instances(path: &Path) -> Result<InstanceMap> {
    let file: InstanceFile = read_json(path)?;
    let mut out = IndexMap::new();
    for img in file.images {
        let instances = img
            .instances
            .into_iter()
            .enumerate()
            .map(|(i, inst)| {
                let context = format!("{}: image '{}' instance {i}", path.display(), img.id);
                Ok(GtInstance {
                    class: inst.class,
                    mask: rle_decode_in(&inst.mask, &context)?.with_source(MaskSource::GroundTruth),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.insert(img.id, instances);
    }
    Ok(out)
}

pub fn save_instances(path: &Path, instances: &InstanceMap) -> Result<()> {
    let images = instances
        .iter()
        .map(|(id, list)| InstanceImage {
            id: id.clone(),
            instances: list
                .iter()
                .map(|g| InstanceJson {
                    class: g.class.clone(),
                    mask: rle_encode(&g.mask),
                })
                .collect(),
        })
        .collect();
    write_json(path, &InstanceFile { images })
}
