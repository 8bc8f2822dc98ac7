//! Procedurally generated scenes and benchmark fixtures.
//!
//! Each scene holds a few colored balls (ellipses) and boxes (rectangles) on a
//! noisy background, placed in separate horizontal slots. Proposals are the
//! object masks plus distractors; referring expressions name an object by
//! color, class and slot.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bench::BenchConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::mask_io::{
    save_instances, save_proposals, save_records, write_atomic, EvalRecord, GtInstance, ProposalMap,
};
use crate::model::{Image, MaskProposal, MaskSource};
use crate::scoring::ProposalSet;
use crate::text::{ParseFile, ParseToken, ParseTree};

const COLORS: [(&str, [u8; 3]); 6] = [
    ("red", [220, 40, 40]),
    ("green", [40, 180, 60]),
    ("blue", [40, 70, 220]),
    ("yellow", [230, 210, 40]),
    ("white", [240, 240, 240]),
    ("black", [20, 20, 20]),
];

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub class: String,
    pub color: String,
    /// "left", "middle" or "right".
    pub position: String,
    pub mask: MaskProposal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub objects: Vec<SceneObject>,
    pub proposals: ProposalSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureOptions {
    pub scenes: usize,
    pub records_per_scene: usize,
    pub seed: u64,
    pub encoder: EncoderConfig,
}

impl Default for FixtureOptions {
    fn default() -> Self {
        FixtureOptions {
            scenes: 5,
            records_per_scene: 1,
            seed: 0,
            encoder: EncoderConfig::default(),
        }
    }
}

/// Files written by [`write_fixture`].
#[derive(Debug, Clone)]
pub struct FixturePaths {
    pub dir: PathBuf,
    pub config: PathBuf,
    pub encoder: PathBuf,
    pub records: PathBuf,
    pub proposals: PathBuf,
    pub parses: PathBuf,
    pub instances: PathBuf,
}

fn position_word(slot: usize, slots: usize) -> &'static str {
    match (slot, slots) {
        (0, _) => "left",
        (s, n) if s + 1 == n => "right",
        _ => "middle",
    }
}

/// Generates scene `index` deterministically from `seed`.
pub fn generate_scene(seed: u64, index: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let height = rng.random_range(40..=72);
    let width = rng.random_range(48..=80);
    let bg: [u8; 3] = [
        rng.random_range(90..=150),
        rng.random_range(90..=150),
        rng.random_range(90..=150),
    ];
    let n_objects = rng.random_range(2..=3);
    let mut palette: Vec<usize> = (0..COLORS.len()).collect();
    palette.shuffle(&mut rng);

    let slot_w = width / n_objects;
    let mut objects = Vec::with_capacity(n_objects);
    for slot in 0..n_objects {
        let (color, rgb) = COLORS[palette[slot]];
        let ball = rng.random_bool(0.5);
        let ow = rng.random_range(slot_w / 2..=slot_w * 4 / 5).max(4);
        let oh = rng.random_range(height / 4..=height * 3 / 5).max(4);
        let c0 = slot * slot_w + rng.random_range(0..=slot_w - ow);
        let r0 = rng.random_range(0..=height - oh);
        let (cy, cx) = (r0 as f64 + oh as f64 / 2.0, c0 as f64 + ow as f64 / 2.0);
        let (ry, rx) = (oh as f64 / 2.0, ow as f64 / 2.0);
        let mask = MaskProposal::from_fn(height, width, |r, c| {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            if ball {
                ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0
            } else {
                (r0..r0 + oh).contains(&r) && (c0..c0 + ow).contains(&c)
            }
        });
        objects.push((
            SceneObject {
                class: if ball { "ball" } else { "box" }.to_string(),
                color: color.to_string(),
                position: position_word(slot, n_objects).to_string(),
                mask,
            },
            rgb,
        ));
    }

    let noise: Vec<i16> = (0..height * width * 3)
        .map(|_| rng.random_range(-12..=12))
        .collect();
    let image = Image::from_fn(format!("scene_{index}"), height, width, |r, c| {
        let base = objects
            .iter()
            .find(|(o, _)| o.mask.get(r, c))
            .map_or(bg, |(_, rgb)| *rgb);
        let k = (r * width + c) * 3;
        [0, 1, 2].map(|ch| (base[ch] as i16 + noise[k + ch]).clamp(0, 255) as u8)
    })
    .expect("scene dimensions are positive");
    let objects: Vec<SceneObject> = objects.into_iter().map(|(o, _)| o).collect();

    let mut proposals: Vec<MaskProposal> = objects.iter().map(|o| o.mask.clone()).collect();
    let (a, b) = (&objects[0].mask, &objects[1].mask);
    proposals.push(MaskProposal::from_fn(height, width, |r, c| {
        a.get(r, c) || b.get(r, c)
    }));
    let br0 = rng.random_range(0..height / 2);
    let bc0 = rng.random_range(0..width / 2);
    let (bh, bw) = (height / 3, width / 3);
    proposals.push(MaskProposal::from_fn(height, width, |r, c| {
        (br0..br0 + bh).contains(&r)
            && (bc0..bc0 + bw).contains(&c)
            && !objects.iter().any(|o| o.mask.get(r, c))
    }));
    if index == 0 {
        proposals.push(MaskProposal::empty(height, width));
    }
    proposals.shuffle(&mut rng);
    let proposals = proposals
        .into_iter()
        .map(|m| m.with_source(MaskSource::Proposal))
        .collect();

    Scene {
        image,
        objects,
        proposals: ProposalSet::new(proposals).expect("scene proposals share the image shape"),
    }
}

fn tok(i: usize, text: &str, pos: &str, head: usize, dep: &str) -> ParseToken {
    ParseToken {
        i,
        text: text.into(),
        pos: pos.into(),
        head,
        dep: dep.into(),
    }
}

/// A referring expression for `o` in one of three templates, with its parse.
pub fn describe(o: &SceneObject, template: usize) -> (String, ParseTree) {
    let (color, class, position) = (o.color.as_str(), o.class.as_str(), o.position.as_str());
    match template % 3 {
        0 => (
            format!("the {color} {class} on the {position}"),
            ParseTree {
                tokens: vec![
                    tok(0, "the", "DET", 2, "det"),
                    tok(1, color, "ADJ", 2, "amod"),
                    tok(2, class, "NOUN", 2, "ROOT"),
                    tok(3, "on", "ADP", 2, "prep"),
                    tok(4, "the", "DET", 5, "det"),
                    tok(5, position, "NOUN", 3, "pobj"),
                ],
                chunks: vec![[0, 3], [4, 6]],
            },
        ),
        1 => (
            format!("{color} {class}"),
            ParseTree {
                tokens: vec![tok(0, color, "ADJ", 1, "amod"), tok(1, class, "NOUN", 1, "ROOT")],
                chunks: vec![[0, 2]],
            },
        ),
        _ => (
            format!("{class} that is {color}"),
            ParseTree {
                tokens: vec![
                    tok(0, class, "NOUN", 0, "ROOT"),
                    tok(1, "that", "PRON", 2, "nsubj"),
                    tok(2, "is", "AUX", 0, "relcl"),
                    tok(3, color, "ADJ", 2, "acomp"),
                ],
                chunks: vec![[0, 1], [1, 2]],
            },
        ),
    }
}

pub fn generate_scenes(opts: &FixtureOptions) -> Vec<Scene> {
    (0..opts.scenes).map(|i| generate_scene(opts.seed, i)).collect()
}

#[derive(Serialize)]
struct BenchFile<'a> {
    alpha: f64,
    beta: f64,
    mask_layers: usize,
    encoder: &'a str,
    records: &'a str,
    proposals: &'a str,
    parses: &'a str,
    instances: &'a str,
}

/// Writes images, proposals, records, parses, instances, an encoder config
/// and a benchmark config into `dir`.
pub fn write_fixture(dir: &Path, opts: &FixtureOptions) -> Result<FixturePaths> {
    if opts.scenes == 0 || opts.records_per_scene == 0 {
        return Err(Error::InvalidConfig(
            "fixture needs at least one scene and one record".into(),
        ));
    }
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let mut proposals = ProposalMap::new();
    let mut records = Vec::new();
    let mut parses = ParseFile::default();
    let mut instances = IndexMap::new();

    for (i, scene) in generate_scenes(opts).into_iter().enumerate() {
        let id = scene.image.id().to_string();
        let rel = format!("images/{id}.png");
        let png = dir.join(&rel);
        scene.image.to_rgb().save(&png).map_err(|e| Error::Image {
            path: png.clone(),
            source: e,
        })?;
        let mut order: Vec<usize> = (0..scene.objects.len()).collect();
        order.shuffle(&mut rng);
        for (j, &o) in order.iter().cycle().take(opts.records_per_scene).enumerate() {
            let obj = &scene.objects[o];
            let (text, tree) = describe(obj, i + j);
            parses.parses.insert(text.clone(), tree);
            records.push(EvalRecord {
                id: format!("{id}/{j}"),
                image_id: id.clone(),
                image_path: rel.clone(),
                expression: text,
                gt_mask: obj.mask.clone().with_source(MaskSource::GroundTruth),
                object_class: Some(obj.class.clone()),
            });
        }
        instances.insert(
            id.clone(),
            scene
                .objects
                .iter()
                .map(|o| GtInstance {
                    class: o.class.clone(),
                    mask: o.mask.clone(),
                })
                .collect(),
        );
        proposals.insert(id, scene.proposals);
    }

    let paths = FixturePaths {
        dir: dir.to_path_buf(),
        config: dir.join("bench.toml"),
        encoder: dir.join("encoder.toml"),
        records: dir.join("records.json"),
        proposals: dir.join("proposals.json"),
        parses: dir.join("parses.json"),
        instances: dir.join("instances.json"),
    };
    save_proposals(&paths.proposals, &proposals)?;
    save_records(&paths.records, &records)?;
    save_instances(&paths.instances, &instances)?;
    let parses_json = serde_json::to_string_pretty(&parses).expect("parses serialize");
    write_atomic(&paths.parses, parses_json.as_bytes())?;
    let enc = toml::to_string(&opts.encoder).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    write_atomic(&paths.encoder, enc.as_bytes())?;
    let defaults = BenchConfig::default();
    let bench = BenchFile {
        alpha: defaults.alpha,
        beta: defaults.beta,
        mask_layers: defaults.mask_layers.min(opts.encoder.layer_count),
        encoder: "encoder.toml",
        records: "records.json",
        proposals: "proposals.json",
        parses: "parses.json",
        instances: "instances.json",
    };
    let bench = toml::to_string(&bench).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    write_atomic(&paths.config, bench.as_bytes())?;
    Ok(paths)
}
