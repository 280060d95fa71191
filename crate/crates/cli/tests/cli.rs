use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use confmask::calibrate::load_record;
use confmask::imagecore::{load_floatmap, load_mask_png, load_png, load_png_with_text};
use confmask::{make_mask, GenerativeModel, ScoreMap, Threshold};
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_confmask")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn generate(dir: &Path, count: usize, seed: u64, extra: &[&str]) {
    let count = count.to_string();
    let seed = seed.to_string();
    let mut args = vec!["generate-synthetic", "--out", p(dir), "--count", &count, "--seed", &seed];
    args.extend_from_slice(extra);
    ok(&args);
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn threshold_line(stdout: &str) -> String {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix("threshold: "))
        .expect("threshold printed")
        .to_string()
}

fn calibrate(data: &Path, out: &Path, alpha: &str, extra: &[&str]) -> String {
    let mut args = vec!["calibrate", "--dataset", p(data), "--alpha", alpha, "--out", p(out)];
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn empty_dataset_has_manifest_only() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path().join("d");
    generate(&d, 0, 1, &[]);
    let names: Vec<_> = files(&d).into_keys().collect();
    assert_eq!(names, vec![PathBuf::from("config.json"), PathBuf::from("manifest.json")]);
}

#[test]
fn generation_is_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    generate(&a, 3, 5, &["--with-draws", "2"]);
    generate(&b, 3, 5, &["--with-draws", "2"]);
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.len(), 2 + 3 * 2 + 3 * 3);
    assert_eq!(fa, fb);
    let c = tmp.path().join("c");
    generate(&c, 3, 6, &["--with-draws", "2"]);
    assert_ne!(files(&c), fa);
}

#[test]
fn generation_shapes() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path().join("d");
    generate(&d, 10, 2, &["--factor", "4", "--lr-width", "32", "--lr-height", "32"]);
    for i in 0..10 {
        let x = load_png(d.join(format!("X/{i:04}.png"))).unwrap();
        let y = load_png(d.join(format!("Y/{i:04}.png"))).unwrap();
        assert_eq!((x.dims(), x.channels()), ((32, 32), 3));
        assert_eq!(y.dims(), (128, 128));
    }
}

#[test]
fn calibrate_small_alpha_trusts_nothing() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path().join("d");
    generate(&d, 5, 3, &[]);
    let out = calibrate(&d, &tmp.path().join("cal"), "0.01", &[]);
    assert_eq!(threshold_line(&out), "-inf");
    assert!(out.contains("n: 5"));
    let rec = load_record(tmp.path().join("cal/calibration.json")).unwrap();
    assert_eq!(rec.threshold, Threshold::NEG_INF);
}

#[test]
fn calibrate_perfect_model_trusts_everything() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path().join("d");
    generate(&d, 5, 3, &["--perfect"]);
    let out = calibrate(&d, &tmp.path().join("cal"), "0.6", &[]);
    assert_eq!(threshold_line(&out), "+inf");
    assert!(out.contains("empirical risk: 0.5"));
}

#[test]
fn calibrate_verify_matches_bruteforce_and_stored_maps() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path().join("d");
    generate(&d, 50, 7, &[]);
    let dp = calibrate(&d, &tmp.path().join("c1"), "0.1", &["--verify"]);
    assert!(dp.contains("verified"));
    let t = threshold_line(&dp);
    assert!(t.parse::<f64>().unwrap().is_finite(), "threshold {t}");
    let bf = calibrate(&d, &tmp.path().join("c2"), "0.1", &["--bruteforce"]);
    assert_eq!(threshold_line(&bf), t);

    let (s, f) = (tmp.path().join("scores"), tmp.path().join("fid"));
    ok(&["score", "--dataset", p(&d), "--out", p(&s)]);
    ok(&["fidelity", "--dataset", p(&d), "--out", p(&f)]);
    let stored = calibrate(&d, &tmp.path().join("c3"), "0.1", &["--scores", p(&s), "--fidelity", p(&f)]);
    assert_eq!(threshold_line(&stored), t);

    let bad = run(&[
        "calibrate", "--dataset", p(&d), "--alpha", "0.1", "--out", p(&tmp.path().join("c4")),
        "--scores", p(&s), "--kernel", "box:1",
    ]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("score spec mismatch"));
}

#[test]
fn mask_extremes_and_delegation() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path().join("d");
    generate(&d, 6, 4, &[]);
    let pred = load_png(d.join("X/0000.png")).unwrap();
    assert_eq!(pred.dims(), (16, 16));

    // Trust everything: alpha = 1 on five pairs always yields +inf.
    calibrate(&d, &tmp.path().join("all"), "1", &["--range", "0:5"]);
    let m = tmp.path().join("m_all");
    ok(&["mask", "--record", p(&tmp.path().join("all/calibration.json")), "--dataset", p(&d), "--index", "5", "--out", p(&m)]);
    let (mask, text) = load_png_with_text(m.join("mask.png")).unwrap();
    assert!(mask.data().iter().all(|&v| v == 1.0));
    assert!(text.iter().any(|(k, v)| k == "mask-polarity" && v == "255=trusted,0=untrusted"));
    let overlay = load_png(m.join("overlay.png")).unwrap();
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("manifest.json")).unwrap()).unwrap();
    let world: confmask::WorldConfig = serde_json::from_value(manifest["world"].clone()).unwrap();
    let x5 = load_png(d.join("X/0005.png")).unwrap();
    let shown = confmask::MockModel::from_world(&world).sample(&x5, 0).unwrap();
    let shown = shown.map(|v| (v * 255.0).round() / 255.0).unwrap();
    assert_eq!(overlay, shown);

    calibrate(&d, &tmp.path().join("none"), "0.01", &["--range", "0:5"]);
    let m0 = tmp.path().join("m_none");
    ok(&["mask", "--record", p(&tmp.path().join("none/calibration.json")), "--dataset", p(&d), "--index", "5", "--out", p(&m0)]);
    assert!(load_mask_png(m0.join("mask.png")).unwrap().is_empty());
    let tinted = load_png(m0.join("overlay.png")).unwrap();
    for px in tinted.data().chunks_exact(3) {
        assert!(px[0] >= 0.5 - 1e-9 && px[1] <= 0.5 + 1e-9 && px[2] <= 0.5 + 1e-9);
    }
    for (a, b) in overlay.data().chunks_exact(3).zip(tinted.data().chunks_exact(3)) {
        assert!((b[1] - a[1] * 0.5).abs() <= 1.0 / 255.0 + 1e-9);
    }

    // A finite threshold from a stored score map.
    calibrate(&d, &tmp.path().join("mid"), "0.2", &["--range", "0:5"]);
    let s = tmp.path().join("scores");
    ok(&["score", "--dataset", p(&d), "--out", p(&s), "--range", "5:6"]);
    let pred_path = tmp.path().join("pred.png");
    confmask::imagecore::save_png(&pred, &pred_path).unwrap();
    let rec = load_record(tmp.path().join("mid/calibration.json")).unwrap();
    let score = ScoreMap::from_planar(load_floatmap(s.join("0005.cfm")).unwrap()).unwrap();
    let m2 = tmp.path().join("m_mid");
    let out = run(&[
        "mask", "--record", p(&tmp.path().join("mid/calibration.json")), "--score", p(&s.join("0005.cfm")),
        "--prediction", p(&pred_path), "--out", p(&m2),
    ]);
    // The prediction must match the score map's size.
    assert_eq!(out.status.code(), Some(1));
    let pred_hr = tmp.path().join("pred_hr.png");
    confmask::imagecore::save_png(&load_png(d.join("Y/0005.png")).unwrap(), &pred_hr).unwrap();
    ok(&[
        "mask", "--record", p(&tmp.path().join("mid/calibration.json")), "--score", p(&s.join("0005.cfm")),
        "--prediction", p(&pred_hr), "--out", p(&m2),
    ]);
    assert_eq!(load_mask_png(m2.join("mask.png")).unwrap(), make_mask(&score, rec.threshold));

    // Score maps built under another kernel are refused.
    let s_bad = tmp.path().join("scores_bad");
    ok(&["score", "--dataset", p(&d), "--out", p(&s_bad), "--range", "5:6", "--kernel", "box:1"]);
    let bad = run(&[
        "mask", "--record", p(&tmp.path().join("mid/calibration.json")), "--score", p(&s_bad.join("0005.cfm")),
        "--prediction", p(&pred_hr), "--out", p(&tmp.path().join("m_bad")),
    ]);
    assert_eq!(bad.status.code(), Some(1));
}

fn eval_rows(dir: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(dir.join("eval.csv")).unwrap();
    text.lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn evaluate_perfect_and_empty() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path().join("d");
    generate(&d, 8, 9, &["--perfect"]);
    calibrate(&d, &tmp.path().join("cal"), "0.6", &["--range", "0:5"]);
    let e = tmp.path().join("eval");
    ok(&["evaluate", "--record", p(&tmp.path().join("cal/calibration.json")), "--dataset", p(&d), "--range", "5:8", "--out", p(&e)]);
    let rows = eval_rows(&e);
    assert_eq!(
        rows[0],
        ["image_id", "alpha", "mode", "threshold", "fidelity_error", "masked_psnr", "trusted_fraction", "mistrust_fraction"]
    );
    assert_eq!(rows.len(), 1 + 3 + 1);
    for r in &rows[1..] {
        assert_eq!(r[4], "0");
        assert_eq!(r[5], "inf");
        assert_eq!(r[6], "1");
    }
    assert_eq!(rows[4][0], "mean");

    let d2 = tmp.path().join("d2");
    generate(&d2, 8, 9, &[]);
    calibrate(&d2, &tmp.path().join("cal2"), "0.01", &["--range", "0:5"]);
    let e2 = tmp.path().join("eval2");
    ok(&["evaluate", "--record", p(&tmp.path().join("cal2/calibration.json")), "--dataset", p(&d2), "--range", "5:8", "--out", p(&e2)]);
    for r in &eval_rows(&e2)[1..] {
        assert_eq!((r[4].as_str(), r[5].as_str(), r[7].as_str()), ("0", "NA", "1"));
    }

    fs::remove_file(d2.join("Y/0006.png")).unwrap();
    let missing = run(&["evaluate", "--record", p(&tmp.path().join("cal2/calibration.json")), "--dataset", p(&d2), "--range", "5:8", "--out", p(&e2)]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("missing ground truth"));
}

#[test]
fn evaluate_default_run_within_guarantee() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path().join("d");
    generate(&d, 130, 7, &[]);
    calibrate(&d, &tmp.path().join("cal"), "0.2", &["--range", "0:50"]);
    let e = tmp.path().join("eval");
    let out = ok(&["evaluate", "--record", p(&tmp.path().join("cal/calibration.json")), "--dataset", p(&d), "--range", "50:130", "--out", p(&e)]);
    let rows = eval_rows(&e);
    let fe: Vec<f64> = rows[1..rows.len() - 1].iter().map(|r| r[4].parse().unwrap()).collect();
    let n = fe.len() as f64;
    let mean = fe.iter().sum::<f64>() / n;
    let sd = (fe.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean <= 0.2 + 3.0 * sd / n.sqrt(), "mean {mean} sd {sd}");
    assert!(out.contains("mistrust fraction"));
}

#[test]
fn config_echo_everywhere() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path().join("d");
    generate(&d, 2, 1, &[]);
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["command"], "generate-synthetic");
    assert_eq!(cfg["args"]["seed"], 1);
    assert_eq!(cfg["resolved"]["world"]["lr_width"], 16);
    let s = tmp.path().join("s");
    ok(&["score", "--dataset", p(&d), "--out", p(&s), "--draws", "4", "--post-blur", "1.5"]);
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(s.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["resolved"]["score_config"]["draws"], 4);
    assert_eq!(cfg["resolved"]["score_config"]["post_blur"], 1.5);
}

#[test]
fn simulate_requires_seed() {
    let tmp = TempDir::new().unwrap();
    let out = run(&["simulate", "guarantee", "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));
    let unknown = run(&["simulate", "nonsense", "--seed", "1", "--out", p(tmp.path())]);
    assert!(!unknown.status.success());
}

#[test]
fn simulate_leakage_prints_bound() {
    let tmp = TempDir::new().unwrap();
    let out = run(&[
        "simulate", "leakage", "--n-new", "9", "--n-leaked", "10", "--alpha", "0.1", "--trials", "10",
        "--seed", "3", "--lr-width", "8", "--lr-height", "8", "--out", p(tmp.path()),
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().any(|l| l == "bound: 0.2"), "{stdout}");
    assert!(matches!(out.status.code(), Some(0 | 2 | 3)));
    assert!(tmp.path().join("summary.json").exists());
    assert!(tmp.path().join("trials.csv").exists());
}

#[test]
fn simulate_counterexample_shows_violation() {
    let tmp = TempDir::new().unwrap();
    let out = run(&["simulate", "counterexample", "--tau", "0.5", "--seed", "1", "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["verdict"], "pass");
}

#[test]
fn simulate_reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let args = |dir: &Path| {
        vec![
            "simulate".to_string(), "alpha-sweep".into(), "--alpha".into(), "0.1,0.3".into(), "--n".into(), "10".into(),
            "--trials".into(), "6".into(), "--seed".into(), "11".into(), "--lr-width".into(), "8".into(),
            "--lr-height".into(), "8".into(), "--out".into(), dir.to_str().unwrap().into(),
        ]
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ra = Command::new(env!("CARGO_BIN_EXE_confmask")).args(args(&a)).output().unwrap();
    let rb = Command::new(env!("CARGO_BIN_EXE_confmask")).args(args(&b)).output().unwrap();
    assert!(matches!(ra.status.code(), Some(0 | 2 | 3)));
    assert_eq!(ra.status.code(), rb.status.code());
    assert_eq!(ra.stdout, rb.stdout);
    assert_eq!(files(&a), files(&b));
    assert_eq!(files(&a).len(), 3);
}

#[test]
fn overlay_command() {
    let tmp = TempDir::new().unwrap();
    let img = confmask::PlanarImage::filled(2, 1, 3, 0.0).unwrap();
    let mask = confmask::BinaryMask::new(2, 1, vec![true, false]).unwrap();
    confmask::imagecore::save_png(&img, tmp.path().join("img.png")).unwrap();
    confmask::imagecore::save_mask_png(&mask, tmp.path().join("mask.png")).unwrap();
    let o = tmp.path().join("o");
    let out = ok(&["overlay", "--mask", p(&tmp.path().join("mask.png")), "--image", p(&tmp.path().join("img.png")), "--out", p(&o)]);
    assert!(out.contains("0.5"));
    let rendered = load_png(o.join("overlay.png")).unwrap();
    assert_eq!(rendered.data()[..3], [0.0, 0.0, 0.0]);
    assert!((rendered.data()[3] - 128.0 / 255.0).abs() < 1e-9);
    assert_eq!(rendered.data()[4..], [0.0, 0.0]);
}
