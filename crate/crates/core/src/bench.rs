//! Benchmark runner and parameter sweeps.
//!
//! A run scores every record's proposals, keeps the argmax, and reports one
//! row per record plus a summary. The summary is computed from the rows alone,
//! and rows are emitted in record order whatever the thread schedule.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::baselines::{baseline_scores, BaselineKind};
use crate::encoder::{BackboneState, Concurrency, DualEncoder, EncoderConfig, EncoderKind};
use crate::error::{Error, Result};
use crate::mask_io::{load_instances, load_proposals, load_records, EvalRecord, InstanceMap, ProposalMap};
use crate::metrics::{best_proposal, predicted_class, Overlap};
use crate::model::{check_unit_weight, Expression, FeatureGrid, GridProvenance, Image, ScoredMask};
use crate::scoring::{score_with_text, scored_from, select_mask, text_feature, ProposalSet, ScoringConfig};
use crate::text::{ParseFile, ParseTree};
use crate::visual::{ImageContext, PoolQuery, TokenMaskingConfig};

/// Scoring method: the global-local pipeline or one of the baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Baseline(pub Option<BaselineKind>);

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            None => f.write_str("none"),
            Some(k) => f.write_str(k.name()),
        }
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "none" {
            Ok(Baseline(None))
        } else {
            Ok(Baseline(Some(s.parse()?)))
        }
    }
}

impl Serialize for Baseline {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Baseline {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Method parameters shared by single-image segmentation and benchmark runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub alpha: f64,
    pub beta: f64,
    pub masking: TokenMaskingConfig,
    pub baseline: Baseline,
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            alpha: 0.95,
            beta: 0.5,
            masking: TokenMaskingConfig::default(),
            baseline: Baseline(None),
        }
    }
}

impl MethodConfig {
    pub fn validate(&self, encoder: &EncoderConfig) -> Result<()> {
        check_unit_weight(self.alpha)?;
        check_unit_weight(self.beta)?;
        if encoder.kind == EncoderKind::PatchTransformer && self.masking.k > encoder.layer_count {
            return Err(Error::InvalidConfig(format!(
                "mask_layers {} exceeds layer_count {}",
                self.masking.k, encoder.layer_count
            )));
        }
        Ok(())
    }
}

/// Scores all proposals of one image for one expression with `method`.
/// `ctx` must hold backbone activations computed with `method.masking`.
pub fn score_method(
    enc: &DualEncoder,
    ctx: &ImageContext,
    props: &ProposalSet,
    expr: &Expression,
    parse: Option<&ParseTree>,
    method: &MethodConfig,
    parallel: bool,
) -> Result<Vec<ScoredMask>> {
    let text = text_feature(enc.text.as_ref(), expr, parse, method.beta)?;
    match method.baseline.0 {
        None => {
            let cfg = ScoringConfig {
                masking: method.masking,
                parallel,
            };
            score_with_text(enc.visual.as_ref(), ctx, props, &text.fused, method.alpha, &cfg)
        }
        Some(kind) => {
            let scores = baseline_scores(
                kind,
                enc.visual.as_ref(),
                &ctx.image,
                &text.fused,
                props,
                parallel,
            )?;
            Ok(scored_from(&scores))
        }
    }
}

/// Flat benchmark configuration; keys mirror the CLI flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub alpha: f64,
    pub beta: f64,
    pub mask_layers: usize,
    pub reapply_per_layer: bool,
    pub pool_query: PoolQuery,
    pub baseline: Baseline,
    /// Encoder config file; the default mock encoder when absent.
    pub encoder: Option<PathBuf>,
    pub records: PathBuf,
    pub proposals: PathBuf,
    pub parses: Option<PathBuf>,
    /// Per-image annotated instances with classes, for MC-ACC / CC-oIoU.
    pub instances: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Overrides the encoder seed.
    pub seed: Option<u64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let method = MethodConfig::default();
        BenchConfig {
            alpha: method.alpha,
            beta: method.beta,
            mask_layers: method.masking.k,
            reapply_per_layer: method.masking.reapply_per_layer,
            pool_query: method.masking.pool_query,
            baseline: method.baseline,
            encoder: None,
            records: PathBuf::from("records.json"),
            proposals: PathBuf::from("proposals.json"),
            parses: None,
            instances: None,
            out: None,
            seed: None,
        }
    }
}

impl BenchConfig {
    /// Loads a TOML config, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: BenchConfig =
            toml::from_str(&text).map_err(|e| Error::schema(path, e.message().to_string()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.records);
        fix(&mut self.proposals);
        for p in [
            &mut self.encoder,
            &mut self.parses,
            &mut self.instances,
            &mut self.out,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn method(&self) -> MethodConfig {
        MethodConfig {
            alpha: self.alpha,
            beta: self.beta,
            masking: TokenMaskingConfig {
                k: self.mask_layers,
                reapply_per_layer: self.reapply_per_layer,
                pool_query: self.pool_query,
            },
            baseline: self.baseline,
        }
    }

    pub fn encoder_config(&self) -> Result<EncoderConfig> {
        let mut cfg = match &self.encoder {
            Some(p) => EncoderConfig::load(p)?,
            None => EncoderConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

/// Execution settings that do not affect results.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub parallel: bool,
    /// Directory for cached backbone activations, one file per image and
    /// encoder configuration.
    pub cache_dir: Option<PathBuf>,
}

impl RunOptions {
    pub const CACHE_ENV: &'static str = "GROUNDING_KIT_CACHE";

    pub fn from_env(parallel: bool) -> Self {
        RunOptions {
            parallel,
            cache_dir: std::env::var_os(Self::CACHE_ENV).map(PathBuf::from),
        }
    }
}

/// One report row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRow {
    pub id: String,
    /// Selected proposal index, `-1` when the example failed.
    pub chosen: i64,
    pub score: Option<f64>,
    pub iou: f64,
    pub intersection: usize,
    pub union: usize,
    /// Overlap of the best available proposal with the ground truth.
    pub upper_bound: Overlap,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ExampleRow {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub oiou: f64,
    pub miou: f64,
    pub mc_acc: Option<f64>,
    pub cc_oiou: Option<f64>,
    pub upper_bound_oiou: Option<f64>,
    pub upper_bound_miou: Option<f64>,
    pub examples: usize,
    pub failures: usize,
}

fn ratio(i: usize, u: usize) -> f64 {
    if u == 0 {
        0.0
    } else {
        i as f64 / u as f64
    }
}

impl Summary {
    /// Aggregates rows. Failed rows count as zero intersection over the
    /// ground-truth area in oIoU and are left out of mIoU.
    pub fn from_rows(rows: &[ExampleRow]) -> Self {
        let (mut i, mut u) = (0, 0);
        let (mut ui, mut uu) = (0, 0);
        let (mut ci, mut cu, mut correct) = (0, 0, 0);
        let mut iou_sum = 0.0;
        let mut ub_sum = 0.0;
        let mut succeeded = 0;
        for r in rows {
            i += r.intersection;
            u += r.union;
            ui += r.upper_bound.intersection;
            uu += r.upper_bound.union;
            ub_sum += r.upper_bound.iou();
            if !r.failed() {
                iou_sum += r.iou;
                succeeded += 1;
            }
            if r.class_correct == Some(true) {
                ci += r.intersection;
                cu += r.union;
                correct += 1;
            }
        }
        let has_classes = !rows.is_empty() && rows.iter().all(|r| r.class_correct.is_some());
        let n = rows.len();
        Summary {
            oiou: ratio(i, u),
            miou: if succeeded == 0 {
                0.0
            } else {
                iou_sum / succeeded as f64
            },
            mc_acc: has_classes.then(|| correct as f64 / n as f64),
            cc_oiou: has_classes.then(|| ratio(ci, cu)),
            upper_bound_oiou: (n > 0).then(|| ratio(ui, uu)),
            upper_bound_miou: (n > 0).then(|| ub_sum / n as f64),
            examples: n,
            failures: n - succeeded,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub method: MethodConfig,
    pub encoder: EncoderConfig,
    pub records: PathBuf,
    pub proposals: PathBuf,
    pub parses: Option<PathBuf>,
    pub instances: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: ResolvedConfig,
    pub examples: Vec<ExampleRow>,
    pub summary: Summary,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report is always serializable");
        s.push('\n');
        s
    }
}

/// Inputs of a benchmark, loaded once.
pub struct BenchInputs {
    pub records_path: PathBuf,
    pub records: Vec<EvalRecord>,
    pub proposals: ProposalMap,
    pub parses: ParseFile,
    pub instances: Option<InstanceMap>,
}

impl BenchInputs {
    pub fn load(cfg: &BenchConfig) -> Result<Self> {
        Ok(BenchInputs {
            records_path: cfg.records.clone(),
            records: load_records(&cfg.records)?,
            proposals: load_proposals(&cfg.proposals)?,
            parses: match &cfg.parses {
                Some(p) => ParseFile::load(p)?,
                None => ParseFile::default(),
            },
            instances: cfg.instances.as_deref().map(load_instances).transpose()?,
        })
    }
}

/// Disk cache of backbone activations keyed by encoder config, masking
/// boundary and image content.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FeatureCache { dir: dir.into() }
    }

    fn key(encoder: &EncoderConfig, boundary_k: usize, img: &Image) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(encoder).expect("encoder config serializes"));
        h.update(boundary_k.to_le_bytes());
        h.update(img.height().to_le_bytes());
        h.update(img.width().to_le_bytes());
        h.update(img.pixels());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn encode(state: &BackboneState) -> Vec<u8> {
        let g = &state.grid;
        let mut out = Vec::new();
        for v in [g.channels(), g.height(), g.width(), state.remaining_layers] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.push(matches!(g.provenance(), GridProvenance::TokenState) as u8);
        let cls = state.class_token.as_deref().unwrap_or(&[]);
        out.push(state.class_token.is_some() as u8);
        out.extend_from_slice(&(cls.len() as u64).to_le_bytes());
        for v in cls.iter().chain(g.values()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    fn decode(bytes: &[u8]) -> Option<BackboneState> {
        let mut cur = bytes;
        let mut take = |n: usize| -> Option<&[u8]> {
            if cur.len() < n {
                return None;
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Some(head)
        };
        let mut u64s = [0usize; 4];
        for v in &mut u64s {
            *v = u64::from_le_bytes(take(8)?.try_into().ok()?) as usize;
        }
        let [channels, height, width, remaining] = u64s;
        let provenance = if take(1)?[0] == 1 {
            GridProvenance::TokenState
        } else {
            GridProvenance::Backbone
        };
        let has_cls = take(1)?[0] == 1;
        let cls_len = u64::from_le_bytes(take(8)?.try_into().ok()?) as usize;
        let mut floats = |n: usize| -> Option<Vec<f64>> {
            (0..n)
                .map(|_| Some(f64::from_le_bytes(take(8)?.try_into().ok()?)))
                .collect()
        };
        let cls = floats(cls_len)?;
        let values = floats(channels.checked_mul(height)?.checked_mul(width)?)?;
        Some(BackboneState {
            grid: FeatureGrid::new(channels, height, width, values, provenance).ok()?,
            class_token: has_cls.then_some(cls),
            remaining_layers: remaining,
        })
    }

    pub fn context(
        &self,
        enc: &DualEncoder,
        encoder_cfg: &EncoderConfig,
        img: &Image,
        masking: &TokenMaskingConfig,
    ) -> Result<ImageContext> {
        let boundary = match encoder_cfg.kind {
            EncoderKind::ResidualBackbone => 0,
            EncoderKind::PatchTransformer => masking.k,
        };
        let path = self
            .dir
            .join(format!("{}.bin", Self::key(encoder_cfg, boundary, img)));
        if let Some(state) = std::fs::read(&path).ok().and_then(|b| Self::decode(&b)) {
            return Ok(ImageContext::from_state(img, state));
        }
        let ctx = ImageContext::new(enc.visual.as_ref(), img, masking)?;
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        crate::mask_io::write_atomic(&path, &Self::encode(&ctx.state))?;
        Ok(ctx)
    }
}

struct Evaluator<'a> {
    enc: &'a DualEncoder,
    encoder_cfg: &'a EncoderConfig,
    method: &'a MethodConfig,
    inputs: &'a BenchInputs,
    opts: &'a RunOptions,
    parallel: bool,
}

impl Evaluator<'_> {
    fn parse_for(&self, expr: &str) -> Option<&ParseTree> {
        let p = self.inputs.parses.parses.get(expr);
        if p.is_none() && self.method.beta < 1.0 {
            log::warn!("no parse for {expr:?}; using the whole sentence as its noun phrase");
        }
        p
    }

    fn upper_bound(&self, r: &EvalRecord) -> Overlap {
        self.inputs
            .proposals
            .get(&r.image_id)
            .filter(|set| set.shape() == r.gt_mask.shape())
            .and_then(|set| best_proposal(&r.gt_mask, set.proposals()).ok())
            .map_or(
                Overlap {
                    intersection: 0,
                    union: r.gt_mask.area(),
                },
                |(_, o)| o,
            )
    }

    fn failure(&self, r: &EvalRecord, err: &Error) -> ExampleRow {
        ExampleRow {
            id: r.id.clone(),
            chosen: -1,
            score: None,
            iou: 0.0,
            intersection: 0,
            union: r.gt_mask.area(),
            upper_bound: self.upper_bound(r),
            class_correct: self.inputs.instances.as_ref().map(|_| false),
            error: Some(crate::error::error_chain(err)),
        }
    }

    fn image_context(&self, r: &EvalRecord) -> Result<ImageContext> {
        let path = r.resolve_image_path(&self.inputs.records_path);
        let img = Image::open(r.image_id.clone(), &path)?;
        match &self.opts.cache_dir {
            Some(dir) => {
                FeatureCache::new(dir).context(self.enc, self.encoder_cfg, &img, &self.method.masking)
            }
            None => ImageContext::new(self.enc.visual.as_ref(), &img, &self.method.masking),
        }
    }

    fn evaluate(&self, ctx: &ImageContext, r: &EvalRecord) -> Result<ExampleRow> {
        r.gt_mask.check_shape(ctx.image.shape())?;
        let props = self
            .inputs
            .proposals
            .get(&r.image_id)
            .ok_or(Error::SelectionImpossible)?;
        let expr = Expression::new(r.id.clone(), r.expression.clone())?;
        let scored = score_method(
            self.enc,
            ctx,
            props,
            &expr,
            self.parse_for(&r.expression),
            self.method,
            self.parallel,
        )?;
        let best = select_mask(&scored)?;
        let pred = &props.proposals()[best.proposal_index];
        let overlap = Overlap::of(pred, &r.gt_mask)?;
        let class_correct = match &self.inputs.instances {
            None => None,
            Some(inv) => {
                let target = r
                    .object_class
                    .as_deref()
                    .ok_or_else(|| Error::InvalidValue(format!("record {} has no object class", r.id)))?;
                let instances = inv.get(&r.image_id).map(Vec::as_slice).unwrap_or(&[]);
                Some(predicted_class(pred, instances)? == Some(target))
            }
        };
        Ok(ExampleRow {
            id: r.id.clone(),
            chosen: best.proposal_index as i64,
            score: Some(best.score),
            iou: overlap.iou(),
            intersection: overlap.intersection,
            union: overlap.union,
            upper_bound: self.upper_bound(r),
            class_correct,
            error: None,
        })
    }

    fn run_group(&self, indices: &[usize]) -> Vec<(usize, ExampleRow)> {
        let records = &self.inputs.records;
        match self.image_context(&records[indices[0]]) {
            Err(e) => indices
                .iter()
                .map(|&i| (i, self.failure(&records[i], &e)))
                .collect(),
            Ok(ctx) => indices
                .iter()
                .map(|&i| {
                    let row = self
                        .evaluate(&ctx, &records[i])
                        .unwrap_or_else(|e| self.failure(&records[i], &e));
                    (i, row)
                })
                .collect(),
        }
    }
}

/// Runs a benchmark on already-loaded inputs.
pub fn run_on_inputs(
    inputs: &BenchInputs,
    encoder_cfg: &EncoderConfig,
    method: &MethodConfig,
    opts: &RunOptions,
    config: ResolvedConfig,
) -> Result<Report> {
    method.validate(encoder_cfg)?;
    let enc = encoder_cfg.build()?;
    let parallel = opts.parallel && enc.visual.concurrency() == Concurrency::Shared;
    let eval = Evaluator {
        enc: &enc,
        encoder_cfg,
        method,
        inputs,
        opts,
        parallel,
    };
    let mut groups: IndexMap<&str, Vec<usize>> = IndexMap::new();
    for (i, r) in inputs.records.iter().enumerate() {
        groups.entry(r.image_id.as_str()).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = groups.into_values().collect();
    let results: Vec<Vec<(usize, ExampleRow)>> = if parallel {
        groups.par_iter().map(|g| eval.run_group(g)).collect()
    } else {
        groups.iter().map(|g| eval.run_group(g)).collect()
    };
    let mut by_index: HashMap<usize, ExampleRow> = results.into_iter().flatten().collect();
    let examples: Vec<ExampleRow> = (0..inputs.records.len())
        .map(|i| by_index.remove(&i).expect("every record yields a row"))
        .collect();
    let failures = examples.iter().filter(|r| r.failed()).count();
    if failures > 0 {
        log::warn!("{failures} of {} examples failed", examples.len());
    }
    let summary = Summary::from_rows(&examples);
    Ok(Report {
        config,
        examples,
        summary,
    })
}

pub fn run_benchmark(cfg: &BenchConfig, opts: &RunOptions) -> Result<Report> {
    let encoder = cfg.encoder_config()?;
    let inputs = BenchInputs::load(cfg)?;
    let method = cfg.method();
    let resolved = ResolvedConfig {
        method,
        encoder: encoder.clone(),
        records: cfg.records.clone(),
        proposals: cfg.proposals.clone(),
        parses: cfg.parses.clone(),
        instances: cfg.instances.clone(),
    };
    run_on_inputs(&inputs, &encoder, &method, opts, resolved)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Alpha,
    Beta,
    MaskLayers,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Alpha => "alpha",
            SweepAxis::Beta => "beta",
            SweepAxis::MaskLayers => "k",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepAxis::Alpha),
            "beta" => Ok(SweepAxis::Beta),
            "k" | "mask-layers" | "mask_layers" => Ok(SweepAxis::MaskLayers),
            _ => Err(Error::InvalidConfig(format!("unknown sweep axis '{s}'"))),
        }
    }
}

/// Grid points: `0, 0.05, ..., 1` for the weights, `0..=L` for `k`.
pub fn sweep_values(axis: SweepAxis, layer_count: usize) -> Vec<f64> {
    match axis {
        SweepAxis::Alpha | SweepAxis::Beta => (0..=20).map(|i| i as f64 / 20.0).collect(),
        SweepAxis::MaskLayers => (0..=layer_count).map(|k| k as f64).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub summary: Summary,
}

/// Reruns the benchmark at every grid point of one axis, holding the other
/// parameters at their configured values.
pub fn run_sweep(cfg: &BenchConfig, axis: SweepAxis, opts: &RunOptions) -> Result<Vec<SweepRow>> {
    let encoder = cfg.encoder_config()?;
    if axis == SweepAxis::MaskLayers && encoder.kind != EncoderKind::PatchTransformer {
        return Err(Error::InvalidConfig(
            "k sweeps need a patch_transformer encoder".into(),
        ));
    }
    let inputs = BenchInputs::load(cfg)?;
    sweep_values(axis, encoder.layer_count)
        .into_iter()
        .map(|value| {
            let mut method = cfg.method();
            match axis {
                SweepAxis::Alpha => method.alpha = value,
                SweepAxis::Beta => method.beta = value,
                SweepAxis::MaskLayers => method.masking.k = value as usize,
            }
            let resolved = ResolvedConfig {
                method,
                encoder: encoder.clone(),
                records: cfg.records.clone(),
                proposals: cfg.proposals.clone(),
                parses: cfg.parses.clone(),
                instances: cfg.instances.clone(),
            };
            let report = run_on_inputs(&inputs, &encoder, &method, opts, resolved)?;
            Ok(SweepRow {
                value,
                summary: report.summary,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(i: usize, u: usize, failed: bool) -> ExampleRow {
        ExampleRow {
            id: "x".into(),
            chosen: if failed { -1 } else { 0 },
            score: (!failed).then_some(0.1),
            iou: ratio(i, u),
            intersection: i,
            union: u,
            upper_bound: Overlap {
                intersection: u,
                union: u,
            },
            class_correct: None,
            error: failed.then(|| "boom".to_string()),
        }
    }

    #[test]
    fn summary_counts_failures_in_oiou_only() {
        let rows = vec![row(2, 4, false), row(0, 2, true)];
        let s = Summary::from_rows(&rows);
        assert!((s.oiou - 2.0 / 6.0).abs() < 1e-12);
        assert!((s.miou - 0.5).abs() < 1e-12);
        assert_eq!(s.failures, 1);
        assert_eq!(s.upper_bound_oiou, Some(1.0));
        assert_eq!(s.mc_acc, None);
    }

    #[test]
    fn sweep_grid_sizes() {
        assert_eq!(sweep_values(SweepAxis::Alpha, 6).len(), 21);
        assert_eq!(sweep_values(SweepAxis::Beta, 6)[20], 1.0);
        assert_eq!(sweep_values(SweepAxis::MaskLayers, 6).len(), 7);
    }

    #[test]
    fn baseline_flag_parsing() {
        assert_eq!("none".parse::<Baseline>().unwrap(), Baseline(None));
        assert_eq!(
            "cropping".parse::<Baseline>().unwrap(),
            Baseline(Some(BaselineKind::Cropping))
        );
        let cfg: BenchConfig = toml::from_str("baseline = \"grad-cam\"\nalpha = 0.85").unwrap();
        assert_eq!(cfg.baseline, Baseline(Some(BaselineKind::GradCam)));
        assert_eq!(cfg.beta, 0.5);
    }

    #[test]
    fn cache_codec_round_trips() {
        let state = BackboneState {
            grid: FeatureGrid::new(2, 1, 2, vec![1.5, -2.0, 0.1, 3.0], GridProvenance::TokenState).unwrap(),
            class_token: Some(vec![0.25, -0.5]),
            remaining_layers: 3,
        };
        let bytes = FeatureCache::encode(&state);
        assert_eq!(FeatureCache::decode(&bytes), Some(state));
        assert_eq!(FeatureCache::decode(&bytes[..10]), None);
    }
}
