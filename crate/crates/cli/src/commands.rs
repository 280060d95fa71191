use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use confmask::calibrate::{
    calibrate_bruteforce_extended, calibrate_dp_extended, check_alpha, load_record, save_record,
};
use confmask::experiments::{
    mean_and_se, run_alpha_sweep, run_guarantee, run_leakage, run_prior_counterexample,
    run_psnr_bound, CounterexampleConfig, ExperimentConfig, ExperimentReport,
};
use confmask::fidelity::{compute_fidelity, load_annotation_png};
use confmask::imagecore::{
    load_floatmap, load_mask_png, load_png, save_floatmap, save_mask_png, save_png,
    srgb_to_lab_normalized, LAB_NORMALIZATION,
};
use confmask::{
    calibrate_bruteforce, calibrate_dp, empirical_risk, make_mask, mask_stats, BinaryMask,
    CalibrationPair, CalibrationRecord, EvalReport, FidelityMap, MaskedPsnr, MetricSpec, PlanarImage,
    ScoreConfig, ScoreMap, WorldConfig,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataset::{self, id, read_json, write_json, Dataset};
use crate::{
    CalibrateArgs, EvaluateArgs, FidelityCmdArgs, GenerateArgs, MaskArgs, OverlayArgs,
    ScoreCmdArgs, SimCommon, SimulateCommand,
};

const SCORE_SIDECAR: &str = "score_config.json";
const METRIC_SIDECAR: &str = "metric.json";

#[derive(Serialize, Deserialize)]
struct ScoreSidecar {
    score_config: ScoreConfig,
    lab_normalization: String,
}

#[derive(Serialize, Deserialize)]
struct MetricSidecar {
    metric: MetricSpec,
    lab_normalization: String,
}

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

/// Writes `config.json`: the command, its flags and the derived settings.
fn echo(out: &Path, command: &str, args: &impl Serialize, resolved: serde_json::Value) -> Result<()> {
    write_json(
        &out.join("config.json"),
        &json!({ "command": command, "args": args, "resolved": resolved }),
    )
}

fn check_score_dir(dir: &Path, cfg: &ScoreConfig) -> Result<()> {
    let side: ScoreSidecar = read_json(&dir.join(SCORE_SIDECAR))?;
    ensure!(
        side.lab_normalization == LAB_NORMALIZATION,
        "score maps in {} use Lab normalization {:?}",
        dir.display(),
        side.lab_normalization
    );
    ensure!(
        &side.score_config == cfg,
        "score spec mismatch: {} holds {:?}, expected {:?}",
        dir.display(),
        side.score_config,
        cfg
    );
    Ok(())
}

fn check_metric_dir(dir: &Path, metric: &MetricSpec) -> Result<()> {
    let side: MetricSidecar = read_json(&dir.join(METRIC_SIDECAR))?;
    ensure!(
        side.lab_normalization == LAB_NORMALIZATION,
        "difference maps in {} use Lab normalization {:?}",
        dir.display(),
        side.lab_normalization
    );
    ensure!(
        &side.metric == metric,
        "metric spec mismatch: {} holds {}, expected {}",
        dir.display(),
        side.metric,
        metric
    );
    Ok(())
}

fn cfm_path(dir: &Path, i: usize) -> std::path::PathBuf {
    dir.join(format!("{}.cfm", id(i)))
}

fn score_map(ds: &Dataset, i: usize, cfg: &ScoreConfig, dir: Option<&Path>) -> Result<ScoreMap> {
    match dir {
        Some(d) => {
            let p = cfm_path(d, i);
            let img = load_floatmap(&p).with_context(|| format!("reading {}", p.display()))?;
            Ok(ScoreMap::from_planar(img)?)
        }
        None => ds.score(i, cfg),
    }
}

fn fidelity_map(
    ds: &Dataset,
    i: usize,
    metric: &MetricSpec,
    dir: Option<&Path>,
    annotations: Option<&Path>,
) -> Result<FidelityMap> {
    if let Some(d) = dir {
        let p = cfm_path(d, i);
        let img = load_floatmap(&p).with_context(|| format!("reading {}", p.display()))?;
        return Ok(FidelityMap::from_planar(img)?);
    }
    let y = srgb_to_lab_normalized(&ds.truth(i)?)?;
    let yhat = srgb_to_lab_normalized(&ds.prediction(i)?)?;
    let annotation = match (metric, annotations) {
        (MetricSpec::Semantic, Some(dir)) => {
            let p = dir.join(format!("{}.png", id(i)));
            Some(load_annotation_png(&p).with_context(|| format!("reading {}", p.display()))?)
        }
        (MetricSpec::Semantic, None) => bail!("the semantic metric needs --annotations"),
        _ => None,
    };
    let d = compute_fidelity(metric, &y, &yhat, annotation.as_ref())?;
    Ok(FidelityMap::from_planar(d.as_planar().round_to_f32())?)
}

/// Blends untrusted pixels halfway toward pure red.
pub fn render_overlay(img: &PlanarImage, mask: &BinaryMask) -> Result<PlanarImage> {
    ensure!(
        img.dims() == mask.dims(),
        "image is {:?} but the mask is {:?}",
        img.dims(),
        mask.dims()
    );
    let c = img.channels();
    ensure!(c == 1 || c == 3, "overlay needs a gray or RGB image, got {c} channels");
    let mut data = Vec::with_capacity(img.pixel_count() * 3);
    for (p, &trusted) in mask.bits().iter().enumerate() {
        for ch in 0..3 {
            let v = img.data()[p * c + if c == 3 { ch } else { 0 }];
            let red = if ch == 0 { 1.0 } else { 0.0 };
            data.push(if trusted { v } else { 0.5 * v + 0.5 * red });
        }
    }
    Ok(PlanarImage::new(img.width(), img.height(), 3, data)?)
}

pub fn generate(a: &GenerateArgs) -> Result<u8> {
    let world = if a.perfect {
        WorldConfig {
            lr_width: a.world.lr_width,
            lr_height: a.world.lr_height,
            factor: a.world.factor,
            ..WorldConfig::perfect(a.seed)
        }
    } else {
        a.world.world(a.seed)
    };
    let manifest = dataset::generate(&a.out, &world, a.count, a.with_draws)?;
    echo(&a.out, "generate-synthetic", a, json!({ "world": world }))?;
    println!("wrote {} pairs to {}", manifest.count, a.out.display());
    Ok(0)
}

pub fn score(a: &ScoreCmdArgs) -> Result<u8> {
    let ds = Dataset::open(&a.dataset)?;
    let cfg = a.score.config()?;
    prepare_out(&a.out)?;
    let ids = ds.ids(a.range)?;
    for &i in &ids {
        save_floatmap(ds.score(i, &cfg)?.as_planar(), cfm_path(&a.out, i))?;
    }
    write_json(
        &a.out.join(SCORE_SIDECAR),
        &ScoreSidecar { score_config: cfg, lab_normalization: LAB_NORMALIZATION.into() },
    )?;
    echo(&a.out, "score", a, json!({ "score_config": cfg }))?;
    println!("wrote {} score maps to {}", ids.len(), a.out.display());
    Ok(0)
}

pub fn fidelity(a: &FidelityCmdArgs) -> Result<u8> {
    let ds = Dataset::open(&a.dataset)?;
    let metric = a.metric.spec()?;
    prepare_out(&a.out)?;
    let ids = ds.ids(a.range)?;
    for &i in &ids {
        let d = fidelity_map(&ds, i, &metric, None, a.annotations.as_deref())?;
        save_floatmap(d.as_planar(), cfm_path(&a.out, i))?;
    }
    write_json(
        &a.out.join(METRIC_SIDECAR),
        &MetricSidecar { metric, lab_normalization: LAB_NORMALIZATION.into() },
    )?;
    echo(&a.out, "fidelity", a, json!({ "metric": metric }))?;
    println!("wrote {} difference maps to {}", ids.len(), a.out.display());
    Ok(0)
}

pub fn calibrate(a: &CalibrateArgs) -> Result<u8> {
    check_alpha(a.alpha, a.extended_alpha)?;
    let ds = Dataset::open(&a.dataset)?;
    let cfg = a.score.config()?;
    let metric = a.metric.spec()?;
    if let Some(d) = &a.scores {
        check_score_dir(d, &cfg)?;
    }
    if let Some(d) = &a.fidelity {
        check_metric_dir(d, &metric)?;
    }
    let ids = ds.ids(a.range)?;
    ensure!(!ids.is_empty(), "calibration needs at least one pair");
    let pairs = ids
        .iter()
        .map(|&i| {
            let s = score_map(&ds, i, &cfg, a.scores.as_deref())?;
            let d = fidelity_map(&ds, i, &metric, a.fidelity.as_deref(), a.annotations.as_deref())?;
            Ok(CalibrationPair::new(s, d)?)
        })
        .collect::<Result<Vec<_>>>()?;

    let (dp, brute) = if a.extended_alpha {
        (calibrate_dp_extended as Solver, calibrate_bruteforce_extended as Solver)
    } else {
        (calibrate_dp as Solver, calibrate_bruteforce as Solver)
    };
    let t = if a.bruteforce { brute(&pairs, a.alpha, a.mode)? } else { dp(&pairs, a.alpha, a.mode)? };
    if a.verify {
        let other = if a.bruteforce { dp(&pairs, a.alpha, a.mode)? } else { brute(&pairs, a.alpha, a.mode)? };
        ensure!(other == t, "verification failed: solvers disagree ({t} vs {other})");
    }
    let risk = empirical_risk(&pairs, t)?;
    let record = CalibrationRecord::new(a.alpha, t, pairs.len(), a.mode, metric, cfg);
    prepare_out(&a.out)?;
    save_record(&record, a.out.join("calibration.json"))?;
    echo(&a.out, "calibrate", a, json!({ "score_config": cfg, "metric": metric }))?;
    println!("threshold: {t}");
    println!("n: {}", pairs.len());
    println!("empirical risk: {risk}");
    if a.verify {
        println!("verified: dynamic program and brute force agree");
    }
    Ok(0)
}

type Solver = fn(&[CalibrationPair], f64, confmask::CalibrationMode) -> confmask::Result<confmask::Threshold>;

pub fn mask(a: &MaskArgs) -> Result<u8> {
    let rec = load_record(&a.record)?;
    rec.check_compatible(None, None)?;
    let (score, prediction) = match (&a.dataset, a.index, &a.score, &a.prediction) {
        (Some(root), Some(i), None, _) => {
            let ds = Dataset::open(root)?;
            ensure!(i < ds.manifest.count, "index {i} outside the dataset");
            (ds.score(i, &rec.score_config)?, ds.prediction(i)?)
        }
        (None, _, Some(path), Some(pred)) => {
            let dir = path.parent().unwrap_or(Path::new("."));
            check_score_dir(dir, &rec.score_config)?;
            let s = ScoreMap::from_planar(load_floatmap(path).with_context(|| format!("reading {}", path.display()))?)?;
            (s, load_png(pred).with_context(|| format!("reading {}", pred.display()))?)
        }
        _ => bail!("give either --dataset with --index, or --score with --prediction"),
    };
    let mask = make_mask(&score, rec.threshold);
    let overlay = render_overlay(&prediction, &mask)?;
    prepare_out(&a.out)?;
    save_mask_png(&mask, a.out.join("mask.png"))?;
    save_png(&overlay, a.out.join("overlay.png"))?;
    echo(&a.out, "mask", a, json!({ "threshold": rec.threshold }))?;
    println!("threshold: {}", rec.threshold);
    println!("mask size (mistrust fraction): {}", mask_stats(&mask).mistrust_fraction);
    Ok(0)
}

fn mean_psnr(values: &[MaskedPsnr]) -> MaskedPsnr {
    let finite: Vec<f64> = values.iter().filter_map(|p| p.value()).collect();
    if !finite.is_empty() {
        MaskedPsnr::Value(finite.iter().sum::<f64>() / finite.len() as f64)
    } else if values.contains(&MaskedPsnr::Infinite) {
        MaskedPsnr::Infinite
    } else {
        MaskedPsnr::NotAvailable
    }
}

pub fn evaluate(a: &EvaluateArgs) -> Result<u8> {
    let rec = load_record(&a.record)?;
    rec.check_compatible(None, None)?;
    let ds = Dataset::open(&a.dataset)?;
    if let Some(d) = &a.scores {
        check_score_dir(d, &rec.score_config)?;
    }
    let ids = ds.ids(a.range)?;
    let mut reports = Vec::with_capacity(ids.len());
    for &i in &ids {
        let y = srgb_to_lab_normalized(&ds.truth(i)?)?;
        let yhat = srgb_to_lab_normalized(&ds.prediction(i)?)?;
        let d = fidelity_map(&ds, i, &rec.metric, None, a.annotations.as_deref())?;
        let s = score_map(&ds, i, &rec.score_config, a.scores.as_deref())?;
        let mask = make_mask(&s, rec.threshold);
        reports.push(EvalReport::new(&d, &yhat, &y, &mask)?);
    }

    prepare_out(&a.out)?;
    let path = a.out.join("eval.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record([
        "image_id",
        "alpha",
        "mode",
        "threshold",
        "fidelity_error",
        "masked_psnr",
        "trusted_fraction",
        "mistrust_fraction",
    ])?;
    let alpha = rec.alpha.to_string();
    let mode = rec.mode.to_string();
    let threshold = rec.threshold.to_string();
    for (&i, r) in ids.iter().zip(&reports) {
        w.write_record([
            id(i),
            alpha.clone(),
            mode.clone(),
            threshold.clone(),
            r.fidelity_error.to_string(),
            r.masked_psnr.to_string(),
            r.trusted_fraction.to_string(),
            r.mistrust_fraction.to_string(),
        ])?;
    }
    let col = |f: fn(&EvalReport) -> f64| reports.iter().map(f).collect::<Vec<f64>>();
    let fe = mean_and_se(&col(|r| r.fidelity_error));
    let trusted = mean_and_se(&col(|r| r.trusted_fraction));
    let mistrust = mean_and_se(&col(|r| r.mistrust_fraction));
    let psnr = mean_psnr(&reports.iter().map(|r| r.masked_psnr).collect::<Vec<_>>());
    let show = |m: Option<(f64, f64)>| m.map_or("NA".to_string(), |(v, _)| v.to_string());
    w.write_record([
        "mean".to_string(),
        alpha,
        mode,
        threshold,
        show(fe),
        psnr.to_string(),
        show(trusted),
        show(mistrust),
    ])?;
    w.flush()?;
    echo(&a.out, "evaluate", a, json!({ "record": rec }))?;
    println!("pairs: {}", reports.len());
    if let Some((m, se)) = fe {
        println!("mean fidelity error: {m} (SE {se}, alpha {})", rec.alpha);
    }
    println!("mean masked PSNR: {psnr}");
    println!("mean mask size (mistrust fraction): {}", show(mistrust));
    Ok(0)
}

fn experiment_config(c: &SimCommon) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig {
        world: c.world.world(c.seed),
        score: c.score.config()?,
        metric: c.metric.spec()?,
        mode: c.mode,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn lower<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

fn report(out: &Path, command: &str, args: &impl Serialize, r: &ExperimentReport) -> Result<u8> {
    prepare_out(out)?;
    r.write_to(out)?;
    echo(out, command, args, r.parameters.clone())?;
    for res in &r.results {
        let mean = match (res.mean, res.std_err) {
            (Some(m), Some(se)) => format!("{m:.6} (SE {se:.6})"),
            _ => "NA".into(),
        };
        println!(
            "{} alpha={} bound={} mean={} used={}/{} verdict={}",
            res.experiment,
            res.alpha,
            res.bound,
            mean,
            res.used,
            res.trials,
            lower(&res.verdict)
        );
        if let Some(m) = res.mean_mistrust_fraction {
            println!("  mask size (mistrust fraction): {m:.4}");
        }
    }
    for c in &r.checks {
        println!("check {}: {} ({})", c.name, if c.passed { "pass" } else { "fail" }, c.detail);
    }
    println!("verdict: {}", lower(&r.verdict));
    Ok(r.verdict.exit_code() as u8)
}

pub fn simulate(cmd: &SimulateCommand) -> Result<u8> {
    match cmd {
        SimulateCommand::Guarantee(a) => {
            let r = run_guarantee(&experiment_config(&a.common)?, a.n, &a.alpha, a.trials)?;
            report(&a.common.out, "simulate guarantee", a, &r)
        }
        SimulateCommand::PsnrBound(a) => {
            let r = run_psnr_bound(&experiment_config(&a.common)?, a.n, &a.alpha, a.trials)?;
            report(&a.common.out, "simulate psnr-bound", a, &r)
        }
        SimulateCommand::AlphaSweep(a) => {
            let r = run_alpha_sweep(&experiment_config(&a.common)?, a.n, &a.alpha, a.trials)?;
            report(&a.common.out, "simulate alpha-sweep", a, &r)
        }
        SimulateCommand::Leakage(a) => {
            let cfg = experiment_config(&a.common)?;
            let bound = confmask::experiments::leakage_bound(a.alpha, a.n_new, a.n_leaked);
            println!("bound: {bound}");
            let r = run_leakage(&cfg, a.n_new, a.n_leaked, a.alpha, a.trials)?;
            report(&a.common.out, "simulate leakage", a, &r)
        }
        SimulateCommand::Counterexample(a) => {
            let cfg = CounterexampleConfig {
                seed: a.seed,
                tau: a.tau,
                epsilon: a.epsilon,
                alpha: a.alpha,
                delta: a.delta.unwrap_or(a.tau / 2.0),
                error: a.error,
                n: a.n,
                trials: a.trials,
            };
            let r = run_prior_counterexample(&cfg)?;
            report(&a.out, "simulate counterexample", a, &r)
        }
    }
}

pub fn overlay(a: &OverlayArgs) -> Result<u8> {
    let mask = load_mask_png(&a.mask).with_context(|| format!("reading {}", a.mask.display()))?;
    let img = load_png(&a.image).with_context(|| format!("reading {}", a.image.display()))?;
    let out = render_overlay(&img, &mask)?;
    prepare_out(&a.out)?;
    save_png(&out, a.out.join("overlay.png"))?;
    echo(&a.out, "overlay", a, json!({}))?;
    println!("mask size (mistrust fraction): {}", mask_stats(&mask).mistrust_fraction);
    Ok(0)
}
