//! Monte Carlo harnesses for the guarantees of conformal masks.
//!
//! Every trial draws fresh pairs from the synthetic world, calibrates on
//! `n` of them and evaluates on one held-out pair. Pair `slot` of trial `t`
//! has world index `t·2^20 + slot`: honest calibration pairs use slots
//! `0..n`, leaked pairs start at `2^19`, and the test pair is the last slot.
//! A harness run is therefore a pure function of its parameters.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::calibrate::{calibrate_dp, empirical_risk, make_mask, CalibrationMode, CalibrationPair, Threshold};
use crate::error::{Error, Result};
use crate::fidelity::{compute_fidelity, FidelityMap, MetricSpec};
use crate::imagecore::srgb_to_lab_normalized;
use crate::metrics::{EvalReport, MaskedPsnr};
use crate::rng::{stream, TAG_TRIAL};
use crate::scoremap::{score_from_draws, score_model, GenerativeModel, ScoreConfig, ScoreMap};
use crate::synthmodel::{gen_pair, MockModel, WorldConfig};

const TRIAL_STRIDE: u64 = 1 << 20;
const LEAKED_BASE: u64 = 1 << 19;
const TEST_SLOT: u64 = TRIAL_STRIDE - 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub score: ScoreConfig,
    pub metric: MetricSpec,
    pub mode: CalibrationMode,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            score: ScoreConfig::default(),
            metric: MetricSpec::Pointwise,
            mode: CalibrationMode::Conservative,
        }
    }
}

impl ExperimentConfig {
    pub fn with_seed(seed: u64) -> Self {
        let mut cfg = Self::default();
        cfg.world.seed = seed;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.score.validate()?;
        if self.metric == MetricSpec::Semantic {
            return Err(Error::InvalidArgument(
                "the synthetic world has no annotations; use a pointwise or neighborhood metric".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

impl Verdict {
    pub fn exit_code(self) -> i32 {
        match self {
            Verdict::Pass => 0,
            Verdict::Fail => 2,
            Verdict::Inconclusive => 3,
        }
    }

    fn combine(items: impl IntoIterator<Item = Verdict>) -> Verdict {
        let mut out = Verdict::Pass;
        for v in items {
            match v {
                Verdict::Fail => return Verdict::Fail,
                Verdict::Inconclusive => out = Verdict::Inconclusive,
                Verdict::Pass => {}
            }
        }
        out
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Inconclusive => "inconclusive",
        })
    }
}

/// One held-out evaluation at one `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrialResult {
    pub trial: usize,
    pub alpha: f64,
    pub threshold: Threshold,
    pub fidelity_error: f64,
    pub masked_psnr: MaskedPsnr,
    pub trusted_fraction: f64,
    pub mistrust_fraction: f64,
    /// Empirical risk of the calibration set at the chosen threshold.
    pub calibration_risk: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateResult {
    pub experiment: String,
    pub alpha: f64,
    pub bound: f64,
    pub trials: usize,
    /// Trials that entered the mean.
    pub used: usize,
    /// Trials skipped because the quantity was undefined.
    pub skipped: usize,
    /// Trials whose PSNR was infinite (zero error on a nonempty mask).
    pub infinite: usize,
    pub mean: Option<f64>,
    pub std_err: Option<f64>,
    pub mean_mistrust_fraction: Option<f64>,
    pub mistrust_std_err: Option<f64>,
    pub calibration_risk_violations: usize,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// One scalar-world trial of the prior-method counterexample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CounterexampleTrial {
    pub trial: usize,
    pub lambda: f64,
    pub mask_value: f64,
    pub population_risk: f64,
    pub violated: bool,
    pub our_threshold: Threshold,
    pub our_fidelity_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub parameters: serde_json::Value,
    pub results: Vec<AggregateResult>,
    pub checks: Vec<Check>,
    pub verdict: Verdict,
    #[serde(skip)]
    pub trials: Vec<TrialResult>,
    #[serde(skip)]
    pub counterexample_trials: Vec<CounterexampleTrial>,
}

impl ExperimentReport {
    fn finish(
        experiment: &str,
        parameters: serde_json::Value,
        results: Vec<AggregateResult>,
        checks: Vec<Check>,
        trials: Vec<TrialResult>,
    ) -> Self {
        let verdict = Verdict::combine(
            results
                .iter()
                .map(|r| r.verdict)
                .chain(checks.iter().map(|c| if c.passed { Verdict::Pass } else { Verdict::Fail })),
        );
        Self {
            experiment: experiment.to_string(),
            parameters,
            results,
            checks,
            verdict,
            trials,
            counterexample_trials: Vec::new(),
        }
    }

    pub fn trials_at(&self, alpha: f64) -> Vec<TrialResult> {
        rows_at(&self.trials, alpha)
    }

    pub fn summary_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn trials_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
        if self.counterexample_trials.is_empty() {
            w.write_record([
                "trial",
                "alpha",
                "threshold",
                "fidelity_error",
                "masked_psnr",
                "trusted_fraction",
                "mistrust_fraction",
                "calibration_risk",
            ])
            .map_err(csv_err)?;
            for t in &self.trials {
                w.write_record([
                    t.trial.to_string(),
                    t.alpha.to_string(),
                    t.threshold.to_string(),
                    t.fidelity_error.to_string(),
                    t.masked_psnr.to_string(),
                    t.trusted_fraction.to_string(),
                    t.mistrust_fraction.to_string(),
                    t.calibration_risk.to_string(),
                ])
                .map_err(csv_err)?;
            }
        } else {
            w.write_record([
                "trial",
                "lambda",
                "mask_value",
                "population_risk",
                "violated",
                "our_threshold",
                "our_fidelity_error",
            ])
            .map_err(csv_err)?;
            for t in &self.counterexample_trials {
                w.write_record([
                    t.trial.to_string(),
                    t.lambda.to_string(),
                    t.mask_value.to_string(),
                    t.population_risk.to_string(),
                    t.violated.to_string(),
                    t.our_threshold.to_string(),
                    t.our_fidelity_error.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `summary.json` and `trials.csv` into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let summary = dir.join("summary.json");
        fs::write(&summary, self.summary_json()?).map_err(|e| Error::io(&summary, e))?;
        let trials = dir.join("trials.csv");
        fs::write(&trials, self.trials_csv()?).map_err(|e| Error::io(&trials, e))?;
        Ok(())
    }
}

/// Sample mean and standard error (sample standard deviation over `√T`).
pub fn mean_and_se(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Some((mean, (var / n).sqrt()))
}

struct EvaluatedPair {
    score: ScoreMap,
    fidelity: FidelityMap,
}

fn pair_index(trial: usize, slot: u64) -> u64 {
    trial as u64 * TRIAL_STRIDE + slot
}

fn evaluate_slot(
    cfg: &ExperimentConfig,
    model: &MockModel,
    index: u64,
    leaked: bool,
) -> Result<(EvaluatedPair, Option<(crate::LabImage, crate::LabImage)>)> {
    let (x, y) = gen_pair(&cfg.world, index)?;
    if leaked {
        let score = score_model(model, &x, &cfg.score)?;
        let (w, h) = score.dims();
        return Ok((EvaluatedPair { score, fidelity: FidelityMap::zeros(w, h) }, None));
    }
    // Draw 0 is the prediction; draws 1..=M feed the score.
    let indices: Vec<u64> = (0..=cfg.score.draws as u64).collect();
    let mut labs = model
        .sample_many(&x, &indices)?
        .iter()
        .map(srgb_to_lab_normalized)
        .collect::<Result<Vec<_>>>()?;
    let score = score_from_draws(&labs[1..], &cfg.score)?;
    let yhat = labs.swap_remove(0);
    let y = srgb_to_lab_normalized(&y)?;
    let fidelity = compute_fidelity(&cfg.metric, &y, &yhat, None)?;
    Ok((EvaluatedPair { score, fidelity }, Some((y, yhat))))
}

fn run_one_trial(
    cfg: &ExperimentConfig,
    trial: usize,
    n_new: usize,
    n_leaked: usize,
    alphas: &[f64],
) -> Result<Vec<TrialResult>> {
    let model = MockModel::from_world(&cfg.world);
    let mut pairs = Vec::with_capacity(n_new + n_leaked);
    let slots = (0..n_new as u64)
        .map(|s| (s, false))
        .chain((0..n_leaked as u64).map(|j| (LEAKED_BASE + j, true)));
    for (slot, leaked) in slots {
        let (p, _) = evaluate_slot(cfg, &model, pair_index(trial, slot), leaked)?;
        pairs.push(CalibrationPair::new(p.score, p.fidelity)?);
    }
    let all_zero_score = pairs.iter().all(|p| p.score().values().iter().all(|&s| s == 0.0));
    if all_zero_score && pairs.iter().any(|p| p.fidelity().max() > 0.0) {
        return Err(Error::Degenerate(format!(
            "trial {trial}: every score is zero while differences are not; \
             the model's draws never disagree"
        )));
    }

    let (test, truth) = evaluate_slot(cfg, &model, pair_index(trial, TEST_SLOT), false)?;
    let (y, yhat) = truth.expect("test pair is honest");
    alphas
        .iter()
        .map(|&alpha| {
            let threshold = calibrate_dp(&pairs, alpha, cfg.mode)?;
            let mask = make_mask(&test.score, threshold);
            let report = EvalReport::new(&test.fidelity, &yhat, &y, &mask)?;
            Ok(TrialResult {
                trial,
                alpha,
                threshold,
                fidelity_error: report.fidelity_error,
                masked_psnr: report.masked_psnr,
                trusted_fraction: report.trusted_fraction,
                mistrust_fraction: report.mistrust_fraction,
                calibration_risk: empirical_risk(&pairs, threshold)?,
            })
        })
        .collect()
}

fn check_common(cfg: &ExperimentConfig, n: usize, alphas: &[f64], trials: usize) -> Result<()> {
    cfg.validate()?;
    if n < 1 {
        return Err(Error::InvalidArgument("need at least one calibration pair".into()));
    }
    if trials < 1 {
        return Err(Error::InvalidArgument("need at least one trial".into()));
    }
    if alphas.is_empty() {
        return Err(Error::InvalidArgument("no alpha values given".into()));
    }
    for &a in alphas {
        crate::calibrate::check_alpha(a, false)?;
    }
    Ok(())
}

/// Runs `trials` independent trials, each calibrating on `n_new` honest and
/// `n_leaked` zero-difference pairs and evaluating every `alpha` on the same
/// held-out pair. Results are ordered by trial, then by `alphas` order.
pub fn simulate_trials(
    cfg: &ExperimentConfig,
    n_new: usize,
    n_leaked: usize,
    alphas: &[f64],
    trials: usize,
) -> Result<Vec<TrialResult>> {
    check_common(cfg, n_new + n_leaked, alphas, trials)?;
    if n_new < 1 {
        return Err(Error::InvalidArgument("need at least one honest calibration pair".into()));
    }
    let per_trial: Vec<Vec<TrialResult>> = (0..trials)
        .into_par_iter()
        .map(|t| run_one_trial(cfg, t, n_new, n_leaked, alphas))
        .collect::<Result<_>>()?;
    Ok(per_trial.into_iter().flatten().collect())
}

/// Rows evaluated at exactly `alpha`, in trial order.
pub fn rows_at(trials: &[TrialResult], alpha: f64) -> Vec<TrialResult> {
    trials.iter().filter(|t| t.alpha == alpha).copied().collect()
}

/// Mean held-out fidelity error against `bound`; pass iff `mean ≤ bound + 3·SE`
/// and, in conservative mode, no trial with a finite or `+inf` threshold has
/// calibration risk above `alpha`. At `-inf` the risk is `3/(n+1)` whatever
/// the data, so those trials are not counted.
pub fn aggregate_fidelity(
    experiment: &str,
    trials: &[TrialResult],
    alpha: f64,
    bound: f64,
    mode: CalibrationMode,
) -> AggregateResult {
    let rows = rows_at(trials, alpha);
    let fe: Vec<f64> = rows.iter().map(|t| t.fidelity_error).collect();
    let mis: Vec<f64> = rows.iter().map(|t| t.mistrust_fraction).collect();
    let violations = if mode == CalibrationMode::Conservative {
        rows.iter()
            .filter(|t| t.threshold > Threshold::NEG_INF && t.calibration_risk > alpha)
            .count()
    } else {
        0
    };
    let stats = mean_and_se(&fe);
    let mis_stats = mean_and_se(&mis);
    let verdict = match stats {
        None => Verdict::Inconclusive,
        Some((m, se)) if m <= bound + 3.0 * se && violations == 0 => Verdict::Pass,
        Some(_) => Verdict::Fail,
    };
    AggregateResult {
        experiment: experiment.to_string(),
        alpha,
        bound,
        trials: rows.len(),
        used: fe.len(),
        skipped: 0,
        infinite: 0,
        mean: stats.map(|s| s.0),
        std_err: stats.map(|s| s.1),
        mean_mistrust_fraction: mis_stats.map(|s| s.0),
        mistrust_std_err: mis_stats.map(|s| s.1),
        calibration_risk_violations: violations,
        verdict,
    }
}

/// Mean finite masked PSNR against `−20·log10(alpha)`. Empty masks are
/// skipped; infinite values are counted separately and left out of the mean.
pub fn aggregate_psnr(experiment: &str, trials: &[TrialResult], alpha: f64) -> AggregateResult {
    let rows = rows_at(trials, alpha);
    let bound = -20.0 * alpha.log10();
    let finite: Vec<f64> = rows.iter().filter_map(|t| t.masked_psnr.value()).collect();
    let infinite = rows.iter().filter(|t| t.masked_psnr == MaskedPsnr::Infinite).count();
    let skipped = rows.iter().filter(|t| t.masked_psnr == MaskedPsnr::NotAvailable).count();
    let mis: Vec<f64> = rows.iter().map(|t| t.mistrust_fraction).collect();
    let mis_stats = mean_and_se(&mis);
    let stats = mean_and_se(&finite);
    let verdict = match stats {
        Some((m, se)) if m >= bound - 3.0 * se => Verdict::Pass,
        Some(_) => Verdict::Fail,
        None if infinite > 0 => Verdict::Pass,
        None => Verdict::Inconclusive,
    };
    AggregateResult {
        experiment: experiment.to_string(),
        alpha,
        bound,
        trials: rows.len(),
        used: finite.len(),
        skipped,
        infinite,
        mean: stats.map(|s| s.0),
        std_err: stats.map(|s| s.1),
        mean_mistrust_fraction: mis_stats.map(|s| s.0),
        mistrust_std_err: mis_stats.map(|s| s.1),
        calibration_risk_violations: 0,
        verdict,
    }
}

/// Counts trials whose thresholds decrease somewhere along increasing `alpha`.
fn threshold_order_check(trials: &[TrialResult], alphas: &[f64]) -> Check {
    let mut order: Vec<usize> = (0..alphas.len()).collect();
    order.sort_by(|&a, &b| alphas[a].total_cmp(&alphas[b]));
    let k = alphas.len();
    let bad = trials
        .chunks(k)
        .filter(|chunk| order.windows(2).any(|w| chunk[w[0]].threshold > chunk[w[1]].threshold))
        .count();
    Check {
        name: "thresholds_monotone_in_alpha".into(),
        passed: bad == 0,
        detail: format!("{bad} trials with a threshold decreasing in alpha"),
    }
}

fn base_parameters(cfg: &ExperimentConfig, trials: usize) -> serde_json::Value {
    json!({
        "seed": cfg.world.seed,
        "trials": trials,
        "world": cfg.world,
        "score": cfg.score,
        "metric": cfg.metric,
        "mode": cfg.mode,
    })
}

fn with(mut base: serde_json::Value, extra: serde_json::Value) -> serde_json::Value {
    if let (Some(b), Some(e)) = (base.as_object_mut(), extra.as_object()) {
        for (k, v) in e {
            b.insert(k.clone(), v.clone());
        }
    }
    base
}

/// Held-out fidelity error against `alpha` for each `alpha`.
pub fn run_guarantee(cfg: &ExperimentConfig, n: usize, alphas: &[f64], trials: usize) -> Result<ExperimentReport> {
    let rows = simulate_trials(cfg, n, 0, alphas, trials)?;
    let results = alphas
        .iter()
        .map(|&a| aggregate_fidelity("guarantee", &rows, a, a, cfg.mode))
        .collect();
    let checks = vec![threshold_order_check(&rows, alphas)];
    let params = with(base_parameters(cfg, trials), json!({ "n": n, "alphas": alphas }));
    Ok(ExperimentReport::finish("guarantee", params, results, checks, rows))
}

/// Masked PSNR against `−20·log10(alpha)`. Requires the pointwise metric.
pub fn run_psnr_bound(cfg: &ExperimentConfig, n: usize, alphas: &[f64], trials: usize) -> Result<ExperimentReport> {
    if cfg.metric != MetricSpec::Pointwise {
        return Err(Error::InvalidArgument("the PSNR bound needs the pointwise metric".into()));
    }
    let rows = simulate_trials(cfg, n, 0, alphas, trials)?;
    let results = alphas.iter().map(|&a| aggregate_psnr("psnr-bound", &rows, a)).collect();
    let params = with(base_parameters(cfg, trials), json!({ "n": n, "alphas": alphas }));
    Ok(ExperimentReport::finish("psnr-bound", params, results, Vec::new(), rows))
}

/// Worst-case bound under `n_leaked` perfectly fit calibration pairs.
pub fn leakage_bound(alpha: f64, n_new: usize, n_leaked: usize) -> f64 {
    alpha * (n_new + n_leaked + 1) as f64 / (n_new + 1) as f64
}

/// Calibration with `n_leaked` extra zero-difference pairs.
pub fn run_leakage(
    cfg: &ExperimentConfig,
    n_new: usize,
    n_leaked: usize,
    alpha: f64,
    trials: usize,
) -> Result<ExperimentReport> {
    let rows = simulate_trials(cfg, n_new, n_leaked, &[alpha], trials)?;
    let bound = leakage_bound(alpha, n_new, n_leaked);
    let results = vec![aggregate_fidelity("leakage", &rows, alpha, bound, cfg.mode)];
    let params = with(
        base_parameters(cfg, trials),
        json!({ "n_new": n_new, "n_leaked": n_leaked, "alpha": alpha }),
    );
    Ok(ExperimentReport::finish("leakage", params, results, Vec::new(), rows))
}

/// Fidelity error and mask size across ascending `alphas`.
pub fn run_alpha_sweep(cfg: &ExperimentConfig, n: usize, alphas: &[f64], trials: usize) -> Result<ExperimentReport> {
    if alphas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("alphas must be strictly ascending".into()));
    }
    let rows = simulate_trials(cfg, n, 0, alphas, trials)?;
    let results: Vec<AggregateResult> = alphas
        .iter()
        .map(|&a| aggregate_fidelity("alpha-sweep", &rows, a, a, cfg.mode))
        .collect();
    let mut bad = Vec::new();
    for w in results.windows(2) {
        let (m0, s0) = (w[0].mean_mistrust_fraction.unwrap_or(0.0), w[0].mistrust_std_err.unwrap_or(0.0));
        let (m1, s1) = (w[1].mean_mistrust_fraction.unwrap_or(0.0), w[1].mistrust_std_err.unwrap_or(0.0));
        if m1 > m0 + 2.0 * s0.max(s1) {
            bad.push(format!("{} -> {}", w[0].alpha, w[1].alpha));
        }
    }
    let checks = vec![
        Check {
            name: "mistrust_nonincreasing".into(),
            passed: bad.is_empty(),
            detail: if bad.is_empty() {
                "mean mistrust fraction nonincreasing within 2 SE".into()
            } else {
                format!("increases at {}", bad.join(", "))
            },
        },
        threshold_order_check(&rows, alphas),
    ];
    let params = with(base_parameters(cfg, trials), json!({ "n": n, "alphas": alphas }));
    Ok(ExperimentReport::finish("alpha-sweep", params, results, checks, rows))
}

/// Parameters of the scalar two-regime world used against the prior method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleConfig {
    pub seed: u64,
    /// Probability that a sample's prediction error is zero.
    pub tau: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub delta: f64,
    /// Error value when the prediction is wrong.
    pub error: f64,
    pub n: usize,
    pub trials: usize,
}

impl CounterexampleConfig {
    pub fn new(seed: u64, tau: f64) -> Self {
        Self {
            seed,
            tau,
            epsilon: 0.01,
            alpha: 0.2,
            delta: tau / 2.0,
            error: 1.0,
            n: 20,
            trials: 2000,
        }
    }

    /// Largest `alpha` for which the construction is guaranteed to break the
    /// prior method.
    pub fn alpha_ceiling(&self) -> f64 {
        (1.0 + self.epsilon) / 2.0 * (1.0 - self.tau) * self.error
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidArgument(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if (self.delta - self.tau / 2.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "the construction needs delta = tau/2 = {}, got {}",
                self.tau / 2.0,
                self.delta
            )));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 || self.error.is_nan() || self.error <= 0.0 || self.error > 3.0 {
            return Err(Error::InvalidArgument("epsilon must be > 0 and error in (0, 3]".into()));
        }
        crate::calibrate::check_alpha(self.alpha, false)?;
        if self.alpha > self.alpha_ceiling() {
            return Err(Error::InvalidArgument(format!(
                "alpha {} exceeds (1+eps)/2 * E[error] = {}; the example does not apply",
                self.alpha,
                self.alpha_ceiling()
            )));
        }
        if self.n < 1 || self.trials < 1 {
            return Err(Error::InvalidArgument("n and trials must be positive".into()));
        }
        Ok(())
    }
}

/// The prior method's calibrated `lambda` for per-sample errors on a
/// single-pixel world with zero uncertainty score.
pub fn prior_method_lambda(errors: &[f64], alpha: f64, delta: f64, epsilon: f64) -> f64 {
    // With σ = 0 the mask is min(λ/(1+ε), 1); λ_i is capped at 1.
    let mut lambdas: Vec<f64> = errors
        .iter()
        .map(|&e| if e == 0.0 { 1.0 } else { (alpha * (1.0 + epsilon) / e).min(1.0) })
        .collect();
    lambdas.sort_by(f64::total_cmp);
    let n = lambdas.len();
    let k = (((1.0 - delta) * n as f64).ceil() as usize).clamp(1, n) - 1;
    lambdas[k]
}

pub fn prior_method_mask(lambda: f64, sigma: f64, epsilon: f64) -> f64 {
    (lambda / (1.0 - sigma + epsilon)).min(1.0)
}

/// Monte Carlo of the prior method's violation probability, plus conformal
/// masks calibrated on the same draws.
pub fn run_prior_counterexample(cfg: &CounterexampleConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mean_error = (1.0 - cfg.tau) * cfg.error;
    let rows: Vec<CounterexampleTrial> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream(cfg.seed, TAG_TRIAL, &[t as u64]);
            let draws: Vec<f64> = (0..=cfg.n)
                .map(|_| if rng.random::<f64>() < cfg.tau { 0.0 } else { cfg.error })
                .collect();
            let (calib, test) = draws.split_at(cfg.n);
            let lambda = prior_method_lambda(calib, cfg.alpha, cfg.delta, cfg.epsilon);
            let mask_value = prior_method_mask(lambda, 0.0, cfg.epsilon);
            let population_risk = mask_value * mean_error;

            let pairs: Vec<CalibrationPair> = calib
                .iter()
                .map(|&e| {
                    CalibrationPair::new(
                        ScoreMap::new(1, 1, vec![0.0])?,
                        FidelityMap::new(1, 1, vec![e])?,
                    )
                })
                .collect::<Result<_>>()?;
            let our_threshold = calibrate_dp(&pairs, cfg.alpha, CalibrationMode::Conservative)?;
            let our_fidelity_error = if 0.0 <= our_threshold.value() { test[0] } else { 0.0 };
            Ok(CounterexampleTrial {
                trial: t,
                lambda,
                mask_value,
                population_risk,
                violated: population_risk > cfg.alpha,
                our_threshold,
                our_fidelity_error,
            })
        })
        .collect::<Result<_>>()?;

    let t = rows.len() as f64;
    let freq = rows.iter().filter(|r| r.violated).count() as f64 / t;
    let se = (freq * (1.0 - freq) / t).sqrt();
    let prior = AggregateResult {
        experiment: "counterexample-prior".into(),
        alpha: cfg.alpha,
        bound: cfg.delta,
        trials: rows.len(),
        used: rows.len(),
        skipped: 0,
        infinite: 0,
        mean: Some(freq),
        std_err: Some(se),
        mean_mistrust_fraction: None,
        mistrust_std_err: None,
        calibration_risk_violations: 0,
        // Passing here means the violation was demonstrated.
        verdict: if freq - cfg.delta >= 3.0 * se && freq > cfg.delta {
            Verdict::Pass
        } else {
            Verdict::Fail
        },
    };
    let ours: Vec<f64> = rows.iter().map(|r| r.our_fidelity_error).collect();
    let (m, s) = mean_and_se(&ours).expect("at least one trial");
    let ours = AggregateResult {
        experiment: "counterexample-ours".into(),
        alpha: cfg.alpha,
        bound: cfg.alpha,
        trials: rows.len(),
        used: rows.len(),
        skipped: 0,
        infinite: 0,
        mean: Some(m),
        std_err: Some(s),
        mean_mistrust_fraction: None,
        mistrust_std_err: None,
        calibration_risk_violations: 0,
        verdict: if m <= cfg.alpha + 3.0 * s { Verdict::Pass } else { Verdict::Fail },
    };
    let params = json!({
        "seed": cfg.seed,
        "tau": cfg.tau,
        "epsilon": cfg.epsilon,
        "alpha": cfg.alpha,
        "delta": cfg.delta,
        "error": cfg.error,
        "n": cfg.n,
        "trials": cfg.trials,
        "alpha_ceiling": cfg.alpha_ceiling(),
    });
    let mut report = ExperimentReport::finish("counterexample", params, vec![prior, ours], Vec::new(), Vec::new());
    report.counterexample_trials = rows;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::with_seed(seed);
        cfg.world.lr_width = 8;
        cfg.world.lr_height = 8;
        cfg.score.draws = 4;
        cfg
    }

    #[test]
    fn mean_and_se_values() {
        assert_eq!(mean_and_se(&[]), None);
        assert_eq!(mean_and_se(&[2.0]), Some((2.0, 0.0)));
        let (m, s) = mean_and_se(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn perfect_world_has_zero_error() {
        let mut cfg = small(5);
        cfg.world = WorldConfig { lr_width: 8, lr_height: 8, ..WorldConfig::perfect(5) };
        let rep = run_guarantee(&cfg, 5, &[0.6, 0.9], 10).unwrap();
        assert!(rep.trials.iter().all(|t| t.fidelity_error == 0.0));
        assert!(rep.trials.iter().all(|t| t.threshold == Threshold::POS_INF));
        assert_eq!(rep.verdict, Verdict::Pass);
    }

    #[test]
    fn tiny_alpha_trusts_nothing() {
        let cfg = small(1);
        let rep = run_guarantee(&cfg, 5, &[0.4], 6).unwrap();
        for t in &rep.trials {
            assert_eq!(t.threshold, Threshold::NEG_INF);
            assert_eq!(t.fidelity_error, 0.0);
            assert_eq!(t.mistrust_fraction, 1.0);
            assert_eq!(t.masked_psnr, MaskedPsnr::NotAvailable);
        }
        let psnr = run_psnr_bound(&cfg, 5, &[0.4], 6).unwrap();
        assert_eq!(psnr.verdict, Verdict::Inconclusive);
        assert_eq!(psnr.results[0].skipped, 6);
    }

    #[test]
    fn noiseless_structured_world_is_degenerate() {
        let mut cfg = small(2);
        cfg.world.noise_base = 0.0;
        cfg.world.noise_gradient = 0.0;
        cfg.score.kernel = crate::KernelSpec::Box { radius: 0 };
        cfg.score.post_blur = None;
        assert!(matches!(run_guarantee(&cfg, 3, &[0.9], 2), Err(Error::Degenerate(_))));
    }

    #[test]
    fn leakage_without_leaks_matches_guarantee() {
        let cfg = small(9);
        let g = run_guarantee(&cfg, 6, &[0.7], 5).unwrap();
        let l = run_leakage(&cfg, 6, 0, 0.7, 5).unwrap();
        assert_eq!(g.trials, l.trials);
        assert_eq!(g.results[0].mean, l.results[0].mean);
        assert_eq!(leakage_bound(0.1, 9, 10), 0.1 * 20.0 / 10.0);
    }

    #[test]
    fn extra_alphas_do_not_change_rows() {
        let cfg = small(6);
        let g = run_guarantee(&cfg, 5, &[0.8], 3).unwrap();
        let s = run_alpha_sweep(&cfg, 5, &[0.6, 0.8, 1.0], 3).unwrap();
        assert_eq!(g.trials, s.trials_at(0.8));
        assert_eq!(g.results[0], aggregate_fidelity("guarantee", &s.trials, 0.8, 0.8, cfg.mode));
    }

    #[test]
    fn reruns_are_identical() {
        let cfg = small(4);
        let a = run_alpha_sweep(&cfg, 4, &[0.7, 0.9], 4).unwrap();
        let b = run_alpha_sweep(&cfg, 4, &[0.7, 0.9], 4).unwrap();
        assert_eq!(a.summary_json().unwrap(), b.summary_json().unwrap());
        assert_eq!(a.trials_csv().unwrap(), b.trials_csv().unwrap());
        assert!(run_alpha_sweep(&cfg, 4, &[0.9, 0.7], 4).is_err());
    }

    #[test]
    fn argument_checks() {
        let cfg = small(0);
        assert!(run_guarantee(&cfg, 0, &[0.5], 2).is_err());
        assert!(run_guarantee(&cfg, 2, &[], 2).is_err());
        assert!(run_guarantee(&cfg, 2, &[1.5], 2).is_err());
        let mut sem = cfg;
        sem.metric = MetricSpec::Semantic;
        assert!(run_guarantee(&sem, 2, &[0.5], 2).is_err());
        let mut nb = cfg;
        nb.metric = MetricSpec::Neighborhood { kernel: crate::KernelSpec::Box { radius: 1 } };
        assert!(run_psnr_bound(&nb, 2, &[0.5], 2).is_err());
    }

    #[test]
    fn prior_method_pieces() {
        assert_eq!(prior_method_mask(0.5, 0.0, 0.01), 0.5 / 1.01);
        assert_eq!(prior_method_mask(1.0, 0.0, 0.01), 1.0 / 1.01);
        assert_eq!(prior_method_lambda(&[0.0; 7], 0.01, 0.9, 0.01), 1.0);
        // Sorted lambdas are [0.202, 0.202, 0.202, 1]; the 0.75 quantile is the third.
        let l = prior_method_lambda(&[0.0, 1.0, 1.0, 1.0], 0.2, 0.25, 0.01);
        assert!((l - 0.202).abs() < 1e-12);
    }

    #[test]
    fn counterexample_validation() {
        let ok = CounterexampleConfig::new(1, 0.5);
        assert!(ok.validate().is_ok());
        assert!(CounterexampleConfig { delta: 0.3, ..ok }.validate().is_err());
        assert!(CounterexampleConfig { alpha: 0.3, ..ok }.validate().is_err());
        assert!(CounterexampleConfig { tau: 1.0, delta: 0.5, ..ok }.validate().is_err());
    }

    #[test]
    fn counterexample_small_run() {
        let cfg = CounterexampleConfig { trials: 200, ..CounterexampleConfig::new(3, 0.5) };
        let rep = run_prior_counterexample(&cfg).unwrap();
        assert_eq!(rep.results[0].verdict, Verdict::Pass);
        assert_eq!(rep.results[1].verdict, Verdict::Pass);
        assert_eq!(rep.verdict, Verdict::Pass);
        assert!(rep.trials_csv().unwrap().starts_with("trial,lambda,"));
    }

    #[test]
    fn verdict_codes() {
        assert_eq!(Verdict::Pass.exit_code(), 0);
        assert_eq!(Verdict::Fail.exit_code(), 2);
        assert_eq!(Verdict::Inconclusive.exit_code(), 3);
        assert_eq!(Verdict::combine([Verdict::Pass, Verdict::Inconclusive]), Verdict::Inconclusive);
        assert_eq!(Verdict::combine([Verdict::Inconclusive, Verdict::Fail]), Verdict::Fail);
    }
}
