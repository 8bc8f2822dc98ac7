use std::path::Path;

use grounding_kit::baselines::BaselineKind;
use grounding_kit::bench::{run_benchmark, run_sweep, Baseline, BenchConfig, RunOptions, SweepAxis};
use grounding_kit::encoder::{EncoderConfig, EncoderKind};
use grounding_kit::mask_io::{load_instances, load_proposals, load_records, save_records};
use grounding_kit::metrics::{iou, mask_class_metrics, overall_iou, proposal_upper_bound};
use grounding_kit::synthetic::{write_fixture, FixtureOptions, FixturePaths};
use grounding_kit::Error;

fn fixture(dir: &Path, kind: EncoderKind, seed: u64) -> FixturePaths {
    let opts = FixtureOptions {
        scenes: 3,
        records_per_scene: 2,
        seed,
        encoder: EncoderConfig::mock(kind, seed),
    };
    write_fixture(dir, &opts).unwrap()
}

#[test]
fn summary_matches_metrics_recomputed_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let paths = write_fixture(dir.path(), &FixtureOptions::default()).unwrap();
    let cfg = BenchConfig::load(&paths.config).unwrap();
    let report = run_benchmark(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(report.examples.len(), 5);

    let records = load_records(&paths.records).unwrap();
    let proposals = load_proposals(&paths.proposals).unwrap();
    let instances = load_instances(&paths.instances).unwrap();
    let preds: Vec<_> = records
        .iter()
        .zip(&report.examples)
        .map(|(r, row)| proposals[&r.image_id].proposals()[row.chosen as usize].clone())
        .collect();
    let pairs: Vec<_> = preds.iter().zip(&records).map(|(p, r)| (p, &r.gt_mask)).collect();
    let oiou = overall_iou(&pairs).unwrap();
    let miou = pairs.iter().map(|(p, g)| iou(p, g).unwrap()).sum::<f64>() / pairs.len() as f64;
    let s = &report.summary;
    assert!((s.oiou - oiou).abs() < 1e-12);
    assert!((s.miou - miou).abs() < 1e-12);
    let (ub_o, ub_m) = proposal_upper_bound(&records, &proposals).unwrap();
    assert!((s.upper_bound_oiou.unwrap() - ub_o).abs() < 1e-12);
    assert!((s.upper_bound_miou.unwrap() - ub_m).abs() < 1e-12);
    let preds_opt: Vec<_> = preds.into_iter().map(Some).collect();
    let class = mask_class_metrics(&records, &preds_opt, &instances).unwrap();
    assert!((s.mc_acc.unwrap() - class.mc_acc).abs() < 1e-12);
    assert!((s.cc_oiou.unwrap() - class.cc_oiou).abs() < 1e-12);
}

#[test]
fn alpha_zero_matches_cropping_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let paths = fixture(dir.path(), EncoderKind::PatchTransformer, 3);
    let mut cfg = BenchConfig::load(&paths.config).unwrap();
    cfg.alpha = 0.0;
    let a = run_benchmark(&cfg, &RunOptions::default()).unwrap();
    cfg.alpha = 0.95;
    cfg.baseline = Baseline(Some(BaselineKind::Cropping));
    let b = run_benchmark(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(a.summary, b.summary);
    for (x, y) in a.examples.iter().zip(&b.examples) {
        assert_eq!(x.chosen, y.chosen);
        assert!((x.score.unwrap() - y.score.unwrap()).abs() < 1e-9);
    }
}

#[test]
fn every_baseline_runs_on_a_supporting_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let res = fixture(&dir.path().join("r"), EncoderKind::ResidualBackbone, 1);
    let tf = fixture(&dir.path().join("t"), EncoderKind::PatchTransformer, 1);
    for (kind, paths) in [
        (BaselineKind::GradCam, &res),
        (BaselineKind::GradCam, &tf),
        (BaselineKind::ScoreMap, &res),
        (BaselineKind::RegionToken, &tf),
        (BaselineKind::Cropping, &res),
    ] {
        let mut cfg = BenchConfig::load(&paths.config).unwrap();
        cfg.baseline = Baseline(Some(kind));
        let report = run_benchmark(&cfg, &RunOptions::default()).unwrap();
        assert_eq!(report.summary.failures, 0, "{kind}");
    }
    // unsupported combinations surface as per-example failures
    let mut cfg = BenchConfig::load(&tf.config).unwrap();
    cfg.baseline = Baseline(Some(BaselineKind::ScoreMap));
    let report = run_benchmark(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(report.summary.failures, report.examples.len());
    assert_eq!(report.summary.oiou, 0.0);
}

#[test]
fn failures_are_reported_and_the_run_continues() {
    let dir = tempfile::tempdir().unwrap();
    let paths = fixture(dir.path(), EncoderKind::ResidualBackbone, 5);
    let mut records = load_records(&paths.records).unwrap();
    records[0].image_path = "images/missing.png".into();
    let n = records.len();
    save_records(&paths.records, &records).unwrap();
    let cfg = BenchConfig::load(&paths.config).unwrap();
    let report = run_benchmark(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(report.examples.len(), n);
    // both records of the first image share the missing file
    assert_eq!(report.summary.failures, 2);
    let failed = &report.examples[0];
    assert_eq!(failed.chosen, -1);
    assert_eq!(failed.intersection, 0);
    assert_eq!(failed.union, records[0].gt_mask.area());
    assert!(failed.error.as_deref().unwrap().contains("missing.png"));
    let ok: Vec<_> = report.examples.iter().filter(|r| r.error.is_none()).collect();
    let miou = ok.iter().map(|r| r.iou).sum::<f64>() / ok.len() as f64;
    assert!((report.summary.miou - miou).abs() < 1e-12);
}

#[test]
fn reports_are_identical_with_parallelism_and_cache() {
    let dir = tempfile::tempdir().unwrap();
    let paths = fixture(dir.path(), EncoderKind::PatchTransformer, 9);
    let cfg = BenchConfig::load(&paths.config).unwrap();
    let plain = run_benchmark(&cfg, &RunOptions::default()).unwrap().to_json();
    let cached = RunOptions {
        parallel: true,
        cache_dir: Some(dir.path().join("cache")),
    };
    let first = run_benchmark(&cfg, &cached).unwrap().to_json();
    let entries = std::fs::read_dir(dir.path().join("cache")).unwrap().count();
    assert_eq!(entries, 3);
    let second = run_benchmark(&cfg, &cached).unwrap().to_json();
    assert_eq!(plain, first);
    assert_eq!(plain, second);
}

#[test]
fn sweeps_cover_their_grids() {
    let dir = tempfile::tempdir().unwrap();
    let paths = fixture(dir.path(), EncoderKind::PatchTransformer, 2);
    let cfg = BenchConfig::load(&paths.config).unwrap();
    let rows = run_sweep(&cfg, SweepAxis::MaskLayers, &RunOptions::default()).unwrap();
    assert_eq!(rows.len(), 7);
    let mut k0 = cfg.clone();
    k0.mask_layers = 0;
    assert_eq!(
        rows[0].summary,
        run_benchmark(&k0, &RunOptions::default()).unwrap().summary
    );
    let rows = run_sweep(&cfg, SweepAxis::Beta, &RunOptions::default()).unwrap();
    assert_eq!(rows.len(), 21);
    assert_eq!(rows[20].value, 1.0);

    let res = fixture(&dir.path().join("r"), EncoderKind::ResidualBackbone, 2);
    let cfg = BenchConfig::load(&res.config).unwrap();
    assert!(matches!(
        run_sweep(&cfg, SweepAxis::MaskLayers, &RunOptions::default()),
        Err(Error::InvalidConfig(_))
    ));
}

#[test]
fn invalid_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let paths = fixture(dir.path(), EncoderKind::PatchTransformer, 4);
    let mut cfg = BenchConfig::load(&paths.config).unwrap();
    cfg.mask_layers = 7;
    assert!(matches!(
        run_benchmark(&cfg, &RunOptions::default()),
        Err(Error::InvalidConfig(_))
    ));
    cfg.mask_layers = 3;
    cfg.alpha = 1.5;
    assert!(matches!(
        run_benchmark(&cfg, &RunOptions::default()),
        Err(Error::WeightOutOfRange(_))
    ));
    std::fs::write(&paths.config, "alpha = 0.9\nunknown_key = 1\n").unwrap();
    assert!(matches!(
        BenchConfig::load(&paths.config),
        Err(Error::SchemaError { .. })
    ));
}
