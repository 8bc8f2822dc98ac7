//! Command-line front end: single-image segmentation, benchmark runs, sweeps
//! and noun-phrase inspection.

mod plot;

use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use grounding_kit::bench::{
    run_benchmark, run_sweep, score_method, Baseline, BenchConfig, RunOptions, SweepAxis,
};
use grounding_kit::encoder::EncoderKind;
use grounding_kit::mask_io::{load_proposals, load_records, write_atomic};
use grounding_kit::metrics::{proposal_upper_bound, upper_bound_overlaps};
use grounding_kit::synthetic::{write_fixture, FixtureOptions};
use grounding_kit::text::{extract_target_np, whole_sentence, ParseFile};
use grounding_kit::visual::ImageContext;
use grounding_kit::{select_mask, Error, Expression, Image, MaskProposal, ScoredMask};

#[derive(Parser)]
#[command(
    name = "grounding-kit",
    version,
    about = "Zero-shot referring segmentation over mask proposals"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pick the proposal that best matches an expression in one image.
    Segment(SegmentArgs),
    /// Run a benchmark and write a JSON report.
    Bench(BenchArgs),
    /// Sweep alpha, beta or k and write a CSV table plus an SVG plot.
    Ablate(AblateArgs),
    /// Show the target noun phrase of each parsed expression.
    Np(NpArgs),
    /// Score obtained by always choosing the best-IoU proposal.
    UpperBound(UpperBoundArgs),
    /// Write a small synthetic benchmark.
    MakeFixture(FixtureArgs),
}

/// Method flags; each overrides the matching key of `--config`.
#[derive(Args, Clone, Default)]
struct MethodArgs {
    /// TOML config whose keys mirror these flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Visual fusion weight on the global-context feature (default 0.95).
    #[arg(long)]
    alpha: Option<f64>,
    /// Text fusion weight on the whole sentence (default 0.5).
    #[arg(long)]
    beta: Option<f64>,
    /// Number of trailing transformer layers with token masking (default 3).
    #[arg(long)]
    mask_layers: Option<usize>,
    /// Encoder config file.
    #[arg(long)]
    encoder: Option<PathBuf>,
    /// none, grad-cam, score-map, region-token or cropping.
    #[arg(long)]
    baseline: Option<Baseline>,
    #[arg(long)]
    proposals: Option<PathBuf>,
    #[arg(long)]
    records: Option<PathBuf>,
    #[arg(long)]
    parses: Option<PathBuf>,
    /// Overrides the encoder seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Score proposals and images on all cores.
    #[arg(long)]
    parallel: bool,
}

impl MethodArgs {
    fn bench_config(&self) -> anyhow::Result<BenchConfig> {
        let mut cfg = match &self.config {
            Some(p) => BenchConfig::load(p)?,
            None => BenchConfig::default(),
        };
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.beta {
            cfg.beta = v;
        }
        if let Some(v) = self.mask_layers {
            cfg.mask_layers = v;
        }
        if let Some(v) = self.baseline {
            cfg.baseline = v;
        }
        if let Some(v) = &self.encoder {
            cfg.encoder = Some(v.clone());
        }
        if let Some(v) = &self.proposals {
            cfg.proposals = v.clone();
        }
        if let Some(v) = &self.records {
            cfg.records = v.clone();
        }
        if let Some(v) = &self.parses {
            cfg.parses = Some(v.clone());
        }
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
        Ok(cfg)
    }

    fn run_options(&self) -> RunOptions {
        RunOptions::from_env(self.parallel)
    }
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    expression: String,
    /// Image key in the proposals file; optional when it holds one image.
    #[arg(long)]
    image_id: Option<String>,
    /// Output directory for overlay.png and scores.json.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    method: MethodArgs,
}

#[derive(Args)]
struct BenchArgs {
    /// Report path; defaults to the config's `out` or report.json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Ground-truth instances with classes for MC-ACC and CC-oIoU.
    #[arg(long)]
    instances: Option<PathBuf>,
    #[command(flatten)]
    method: MethodArgs,
}

#[derive(Args)]
struct AblateArgs {
    /// alpha, beta or k.
    #[arg(long)]
    sweep: SweepAxis,
    /// Output directory for the CSV and SVG files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    instances: Option<PathBuf>,
    #[command(flatten)]
    method: MethodArgs,
}

#[derive(Args)]
struct NpArgs {
    /// Parses keyed by expression; the bundled examples when absent.
    #[arg(long)]
    parses: Option<PathBuf>,
    /// Restrict to the expressions of these records.
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Args)]
struct UpperBoundArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    proposals: PathBuf,
    /// Also write the result as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    scenes: usize,
    #[arg(long, default_value_t = 1)]
    records_per_scene: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// residual_backbone or patch_transformer.
    #[arg(long, default_value = "residual_backbone")]
    kind: String,
}

#[derive(Serialize)]
struct ProposalScore {
    rank: usize,
    index: usize,
    /// `null` for empty proposals.
    score: Option<f64>,
}

#[derive(Serialize)]
struct SegmentOutput {
    image_id: String,
    expression: String,
    noun_phrase: String,
    chosen: usize,
    score: f64,
    scores: Vec<ProposalScore>,
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn overlay(img: &Image, mask: &MaskProposal) -> anyhow::Result<Vec<u8>> {
    let mut rgb = img.to_rgb();
    for (c, r, px) in rgb.enumerate_pixels_mut() {
        if mask.get(r as usize, c as usize) {
            px.0 = [0, 1, 2].map(|ch| ((px.0[ch] as u16 + [255, 0, 0][ch]) / 2) as u8);
        }
    }
    let mut bytes = Vec::new();
    rgb.write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    Ok(bytes)
}

/// Scores from best to worst, ties broken by proposal index.
fn ranked(scored: &[ScoredMask]) -> Vec<ProposalScore> {
    let mut order: Vec<&ScoredMask> = scored.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.proposal_index.cmp(&b.proposal_index))
    });
    order
        .into_iter()
        .enumerate()
        .map(|(rank, s)| ProposalScore {
            rank,
            index: s.proposal_index,
            score: (!s.empty).then_some(s.score),
        })
        .collect()
}

fn segment(args: &SegmentArgs) -> anyhow::Result<()> {
    let cfg = args.method.bench_config()?;
    let method = cfg.method();
    let encoder_cfg = cfg.encoder_config()?;
    method.validate(&encoder_cfg)?;
    let enc = encoder_cfg.build()?;

    let proposals = load_proposals(&cfg.proposals)?;
    let (image_id, props) = match &args.image_id {
        Some(id) => (
            id.clone(),
            proposals
                .get(id)
                .with_context(|| format!("no proposals for image '{id}'"))?,
        ),
        None if proposals.len() == 1 => {
            let (id, set) = proposals.first().expect("one entry");
            (id.clone(), set)
        }
        None => bail!("proposals file holds {} images; pass --image-id", proposals.len()),
    };
    let img = Image::open(image_id.clone(), &args.image)?;
    let expr = Expression::new("cli", args.expression.clone())?;
    let parses = match &cfg.parses {
        Some(p) => ParseFile::load(p)?,
        None => ParseFile::default(),
    };
    let parse = parses.parses.get(expr.text());
    let noun_phrase = match parse {
        Some(p) => extract_target_np(p, &expr)?,
        None => whole_sentence(&expr),
    };

    let ctx = ImageContext::new(enc.visual.as_ref(), &img, &method.masking)?;
    let scored = score_method(&enc, &ctx, props, &expr, parse, &method, args.method.parallel)?;
    let best = select_mask(&scored)?;

    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let png = overlay(&img, &props.proposals()[best.proposal_index])?;
    write_atomic(&args.out.join("overlay.png"), &png)?;
    let out = SegmentOutput {
        image_id,
        expression: expr.text().to_string(),
        noun_phrase: noun_phrase.text,
        chosen: best.proposal_index,
        score: best.score,
        scores: ranked(&scored),
    };
    write_json(&args.out.join("scores.json"), &out)?;
    println!(
        "chosen proposal {} (score {:.6})",
        best.proposal_index, best.score
    );
    Ok(())
}

fn bench(args: &BenchArgs) -> anyhow::Result<()> {
    let mut cfg = args.method.bench_config()?;
    if let Some(p) = &args.instances {
        cfg.instances = Some(p.clone());
    }
    let report = run_benchmark(&cfg, &args.method.run_options())?;
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("report.json"));
    write_atomic(&out, report.to_json().as_bytes())?;
    let s = &report.summary;
    println!(
        "oIoU {:.4}  mIoU {:.4}  examples {}  failures {}",
        s.oiou, s.miou, s.examples, s.failures
    );
    if let (Some(acc), Some(cc)) = (s.mc_acc, s.cc_oiou) {
        println!("MC-ACC {acc:.4}  CC-oIoU {cc:.4}");
    }
    if let Some(ub) = s.upper_bound_oiou {
        println!("upper bound oIoU {ub:.4}");
    }
    println!("report written to {}", out.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn ablate(args: &AblateArgs) -> anyhow::Result<()> {
    let mut cfg = args.method.bench_config()?;
    if let Some(p) = &args.instances {
        cfg.instances = Some(p.clone());
    }
    let rows = run_sweep(&cfg, args.sweep, &args.method.run_options())?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let name = args.sweep.name();

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        name,
        "oiou",
        "miou",
        "mc_acc",
        "cc_oiou",
        "upper_bound_oiou",
        "failures",
    ])?;
    for r in &rows {
        let s = &r.summary;
        w.write_record([
            format!("{}", r.value),
            format!("{:.6}", s.oiou),
            format!("{:.6}", s.miou),
            fmt_opt(s.mc_acc),
            fmt_opt(s.cc_oiou),
            fmt_opt(s.upper_bound_oiou),
            s.failures.to_string(),
        ])?;
    }
    let csv_path = args.out.join(format!("sweep_{name}.csv"));
    write_atomic(&csv_path, &w.into_inner()?)?;

    let svg = plot::sweep_svg(name, &rows)?;
    let svg_path = args.out.join(format!("sweep_{name}.svg"));
    write_atomic(&svg_path, svg.as_bytes())?;
    for r in &rows {
        println!(
            "{name}={:<5} oIoU {:.4}  mIoU {:.4}",
            r.value, r.summary.oiou, r.summary.miou
        );
    }
    println!("wrote {} and {}", csv_path.display(), svg_path.display());
    Ok(())
}

fn np(args: &NpArgs) -> anyhow::Result<()> {
    let parses = match &args.parses {
        Some(p) => ParseFile::load(p)?,
        None => grounding_kit::fixtures::np_parses(),
    };
    let expressions: Vec<String> = match &args.records {
        Some(p) => load_records(p)?.into_iter().map(|r| r.expression).collect(),
        None => parses.parses.keys().cloned().collect(),
    };
    let mut whole = 0;
    println!("expression\tnoun_phrase\twhole_sentence");
    for text in &expressions {
        let expr = Expression::new("np", text.clone())?;
        let np = match parses.parses.get(text) {
            Some(p) => extract_target_np(p, &expr)?,
            None => whole_sentence(&expr),
        };
        whole += np.is_whole_sentence as usize;
        println!("{text}\t{}\t{}", np.text, np.is_whole_sentence);
    }
    let pct = if expressions.is_empty() {
        0.0
    } else {
        100.0 * whole as f64 / expressions.len() as f64
    };
    println!(
        "whole-sentence noun phrases: {pct:.2}% ({whole}/{})",
        expressions.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct UpperBound {
    oiou: f64,
    miou: f64,
    examples: usize,
}

fn upper_bound(args: &UpperBoundArgs) -> anyhow::Result<()> {
    let records = load_records(&args.records)?;
    let proposals = load_proposals(&args.proposals)?;
    let (oiou, miou) = proposal_upper_bound(&records, &proposals)?;
    let examples = upper_bound_overlaps(&records, &proposals)?.len();
    println!("upper bound oIoU {oiou:.4}  mIoU {miou:.4}  examples {examples}");
    if let Some(out) = &args.out {
        write_json(out, &UpperBound { oiou, miou, examples })?;
    }
    Ok(())
}

fn make_fixture(args: &FixtureArgs) -> anyhow::Result<()> {
    let kind: EncoderKind = serde_json::from_value(serde_json::Value::String(args.kind.clone()))
        .with_context(|| format!("unknown encoder kind '{}'", args.kind))?;
    let opts = FixtureOptions {
        scenes: args.scenes,
        records_per_scene: args.records_per_scene,
        seed: args.seed,
        encoder: grounding_kit::encoder::EncoderConfig::mock(kind, args.seed),
    };
    let paths = write_fixture(&args.out, &opts)?;
    println!("fixture written; run with --config {}", paths.config.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(
            Error::SchemaError { .. }
            | Error::MalformedRle { .. }
            | Error::MalformedParse(_)
            | Error::Io { .. }
            | Error::Image { .. },
        ) => 2,
        Some(Error::EncoderFailure(_) | Error::GradientsUnsupported | Error::SurgeryUnsupported(_)) => 3,
        Some(Error::SelectionImpossible) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Segment(a) => segment(a),
        Command::Bench(a) => bench(a),
        Command::Ablate(a) => ablate(a),
        Command::Np(a) => np(a),
        Command::UpperBound(a) => upper_bound(a),
        Command::MakeFixture(a) => make_fixture(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
