//! Conformal threshold selection and mask construction.
//!
//! The calibration risk at threshold `t` is
//!
//! ```text
//! R(t) = (3 + Σ_i sup{ D_i(p) : σ_i(p) ≤ t }) / (n + 1)
//! ```
//!
//! with an empty supremum counting as 0. `R` is a nondecreasing,
//! right-continuous step function of `t` that only jumps at observed scores.
//! Two solvers compute the threshold: a sort-and-sweep over all
//! `(σ, D, image)` triples ([`calibrate_dp`]) and a per-candidate rescan
//! ([`calibrate_bruteforce`]). Both sum the per-image maxima with the same
//! fixed pairwise tree, so their risk values are bit-identical and the two
//! always return the same threshold.

use std::cmp::Ordering;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::fidelity::{FidelityMap, MetricSpec};
use crate::imagecore::{BinaryMask, LAB_NORMALIZATION};
use crate::scoremap::{ScoreConfig, ScoreMap};

/// Score map and difference map of one calibration image.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationPair {
    score: ScoreMap,
    fidelity: FidelityMap,
}

impl CalibrationPair {
    pub fn new(score: ScoreMap, fidelity: FidelityMap) -> Result<Self> {
        if score.dims() != fidelity.dims() {
            return Err(Error::DimensionMismatch {
                expected: score.dims(),
                actual: fidelity.dims(),
            });
        }
        Ok(Self { score, fidelity })
    }

    pub fn score(&self) -> &ScoreMap {
        &self.score
    }

    pub fn fidelity(&self) -> &FidelityMap {
        &self.fidelity
    }

    /// `sup{ D(p) : σ(p) ≤ t }`, zero when nothing qualifies.
    pub fn sup_below(&self, t: Threshold) -> f64 {
        let t = t.value();
        self.score
            .values()
            .iter()
            .zip(self.fidelity.values())
            .filter(|(&s, _)| s <= t)
            .fold(0.0, |acc, (_, &d)| acc.max(d))
    }
}

/// Extended-real threshold. `-inf` trusts nothing, `+inf` trusts everything.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold(f64);

impl Threshold {
    pub const NEG_INF: Threshold = Threshold(f64::NEG_INFINITY);
    pub const POS_INF: Threshold = Threshold(f64::INFINITY);

    pub fn new(value: f64) -> Result<Self> {
        if value.is_nan() {
            return Err(Error::InvalidArgument("threshold cannot be NaN".into()));
        }
        Ok(Threshold(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_finite(self) -> bool {
        self.0.is_finite()
    }
}

impl Eq for Threshold {}

impl PartialOrd for Threshold {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Threshold {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.partial_cmp(&other.0).expect("thresholds are never NaN")
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            v if v == f64::INFINITY => f.write_str("+inf"),
            v if v == f64::NEG_INFINITY => f.write_str("-inf"),
            v => write!(f, "{v}"),
        }
    }
}

impl FromStr for Threshold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "+inf" | "inf" => Ok(Threshold::POS_INF),
            "-inf" => Ok(Threshold::NEG_INF),
            v => v
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("bad threshold {s:?}")))
                .and_then(Threshold::new),
        }
    }
}

impl Serialize for Threshold {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else {
            s.serialize_str(&self.to_string())
        }
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Threshold;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a finite number, \"+inf\" or \"-inf\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Threshold, E> {
                if v.is_finite() {
                    Ok(Threshold(v))
                } else {
                    Err(E::custom("non-finite threshold must be a string"))
                }
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Threshold, E> {
                Ok(Threshold(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Threshold, E> {
                Ok(Threshold(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Threshold, E> {
                match v {
                    "+inf" => Ok(Threshold::POS_INF),
                    "-inf" => Ok(Threshold::NEG_INF),
                    _ => Err(E::custom(format!("unknown threshold string {v:?}"))),
                }
            }
        }
        d.deserialize_any(V)
    }
}

/// How the crossing point of the risk curve is resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    /// Largest observed score whose risk is within `alpha`; the calibration
    /// risk at the returned threshold never exceeds `alpha`.
    #[default]
    Conservative,
    /// The literal supremum `sup{t : R(t) ≤ alpha}`, i.e. the first observed
    /// score at which the risk exceeds `alpha`.
    SupFaithful,
}

impl fmt::Display for CalibrationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CalibrationMode::Conservative => "conservative",
            CalibrationMode::SupFaithful => "sup_faithful",
        })
    }
}

impl FromStr for CalibrationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conservative" => Ok(CalibrationMode::Conservative),
            "sup" | "sup_faithful" | "sup-faithful" => Ok(CalibrationMode::SupFaithful),
            _ => Err(Error::InvalidArgument(format!("unknown mode {s:?}"))),
        }
    }
}

/// Pairwise-summation tree over per-image maxima. Updating a leaf recomputes
/// only its ancestors, and every internal node is always `left + right`, so
/// the root equals [`tree_sum`] of the current leaves bit for bit.
struct RiskTree {
    size: usize,
    nodes: Vec<f64>,
}

impl RiskTree {
    fn new(n: usize) -> Self {
        let size = n.next_power_of_two();
        Self {
            size,
            nodes: vec![0.0; 2 * size],
        }
    }

    fn from_leaves(leaves: &[f64]) -> Self {
        let mut tree = Self::new(leaves.len());
        tree.nodes[tree.size..tree.size + leaves.len()].copy_from_slice(leaves);
        for i in (1..tree.size).rev() {
            tree.nodes[i] = tree.nodes[2 * i] + tree.nodes[2 * i + 1];
        }
        tree
    }

    #[inline]
    fn leaf(&self, i: usize) -> f64 {
        self.nodes[self.size + i]
    }

    fn set(&mut self, i: usize, v: f64) {
        let mut k = self.size + i;
        self.nodes[k] = v;
        while k > 1 {
            k /= 2;
            self.nodes[k] = self.nodes[2 * k] + self.nodes[2 * k + 1];
        }
    }

    fn total(&self) -> f64 {
        self.nodes[1]
    }
}

/// Sum in the fixed pairwise order used by both solvers.
fn tree_sum(values: &[f64]) -> f64 {
    RiskTree::from_leaves(values).total()
}

#[inline]
fn risk_from_sum(sum: f64, n: usize) -> f64 {
    (3.0 + sum) / (n + 1) as f64
}

fn check_pairs(pairs: &[CalibrationPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no calibration pairs".into()));
    }
    if pairs.len() > u32::MAX as usize {
        return Err(Error::InvalidArgument("too many calibration pairs".into()));
    }
    Ok(())
}

/// Accepts `alpha` in `(0, 1]`, or `(0, 3]` when `extended` is set.
pub fn check_alpha(alpha: f64, extended: bool) -> Result<()> {
    let hi = if extended { 3.0 } else { 1.0 };
    if !(alpha > 0.0 && alpha <= hi) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in (0, {hi}], got {alpha}"
        )));
    }
    Ok(())
}

/// Calibration risk `R(t)`.
pub fn empirical_risk(pairs: &[CalibrationPair], t: Threshold) -> Result<f64> {
    check_pairs(pairs)?;
    let sups: Vec<f64> = pairs.iter().map(|p| p.sup_below(t)).collect();
    Ok(risk_from_sum(tree_sum(&sups), pairs.len()))
}

/// Threshold by sort-and-sweep, `O(N log N)` in the total pixel count.
pub fn calibrate_dp(pairs: &[CalibrationPair], alpha: f64, mode: CalibrationMode) -> Result<Threshold> {
    check_alpha(alpha, false)?;
    calibrate_dp_unchecked(pairs, alpha, mode)
}

/// [`calibrate_dp`] accepting `alpha` up to 3.
pub fn calibrate_dp_extended(pairs: &[CalibrationPair], alpha: f64, mode: CalibrationMode) -> Result<Threshold> {
    check_alpha(alpha, true)?;
    calibrate_dp_unchecked(pairs, alpha, mode)
}

fn calibrate_dp_unchecked(pairs: &[CalibrationPair], alpha: f64, mode: CalibrationMode) -> Result<Threshold> {
    check_pairs(pairs)?;
    let n = pairs.len();
    if risk_from_sum(0.0, n) > alpha {
        return Ok(Threshold::NEG_INF);
    }

    let mut triples: Vec<(f64, f64, u32)> = pairs
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, p)| {
            p.score
                .values()
                .iter()
                .zip(p.fidelity.values())
                .map(move |(&s, &d)| (s, d, i as u32))
        })
        .collect();
    triples.par_sort_unstable_by(|a, b| a.0.total_cmp(&b.0));

    let mut tree = RiskTree::new(n);
    let mut last_ok = Threshold::NEG_INF;
    let mut i = 0;
    while i < triples.len() {
        let t = triples[i].0;
        // The whole tie group enters before the risk is checked.
        while i < triples.len() && triples[i].0 == t {
            let (_, d, img) = triples[i];
            if d > tree.leaf(img as usize) {
                tree.set(img as usize, d);
            }
            i += 1;
        }
        if risk_from_sum(tree.total(), n) > alpha {
            return Ok(match mode {
                CalibrationMode::Conservative => last_ok,
                CalibrationMode::SupFaithful => Threshold(t),
            });
        }
        last_ok = Threshold(t);
    }
    Ok(Threshold::POS_INF)
}

/// Threshold by evaluating the risk afresh at every distinct observed score.
/// Quadratic; intended as a reference.
pub fn calibrate_bruteforce(pairs: &[CalibrationPair], alpha: f64, mode: CalibrationMode) -> Result<Threshold> {
    check_alpha(alpha, false)?;
    calibrate_bruteforce_unchecked(pairs, alpha, mode)
}

/// [`calibrate_bruteforce`] accepting `alpha` up to 3.
pub fn calibrate_bruteforce_extended(
    pairs: &[CalibrationPair],
    alpha: f64,
    mode: CalibrationMode,
) -> Result<Threshold> {
    check_alpha(alpha, true)?;
    calibrate_bruteforce_unchecked(pairs, alpha, mode)
}

fn calibrate_bruteforce_unchecked(
    pairs: &[CalibrationPair],
    alpha: f64,
    mode: CalibrationMode,
) -> Result<Threshold> {
    check_pairs(pairs)?;
    if empirical_risk(pairs, Threshold::NEG_INF)? > alpha {
        return Ok(Threshold::NEG_INF);
    }
    if empirical_risk(pairs, Threshold::POS_INF)? <= alpha {
        return Ok(Threshold::POS_INF);
    }
    let mut candidates: Vec<f64> = pairs
        .iter()
        .flat_map(|p| p.score.values().iter().copied())
        .collect();
    candidates.sort_unstable_by(f64::total_cmp);
    candidates.dedup();

    let mut best_ok = Threshold::NEG_INF;
    let mut first_bad = Threshold::POS_INF;
    for &t in &candidates {
        let t = Threshold(t);
        if empirical_risk(pairs, t)? <= alpha {
            best_ok = best_ok.max(t);
        } else {
            first_bad = first_bad.min(t);
        }
    }
    Ok(match mode {
        CalibrationMode::Conservative => best_ok,
        CalibrationMode::SupFaithful => first_bad,
    })
}

/// Trusted pixels are those with score `≤ t`.
pub fn make_mask(score: &ScoreMap, t: Threshold) -> BinaryMask {
    let t = t.value();
    BinaryMask::new(
        score.width(),
        score.height(),
        score.values().iter().map(|&s| s <= t).collect(),
    )
    .expect("mask dims follow the score map")
}

pub const RECORD_VERSION: u32 = 1;

/// Everything needed to apply a calibrated threshold consistently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub version: u32,
    pub alpha: f64,
    pub threshold: Threshold,
    pub n: usize,
    pub mode: CalibrationMode,
    pub metric: MetricSpec,
    pub score_config: ScoreConfig,
    pub lab_normalization: String,
    pub created: String,
}

impl CalibrationRecord {
    pub fn new(
        alpha: f64,
        threshold: Threshold,
        n: usize,
        mode: CalibrationMode,
        metric: MetricSpec,
        score_config: ScoreConfig,
    ) -> Self {
        Self {
            version: RECORD_VERSION,
            alpha,
            threshold,
            n,
            mode,
            metric,
            score_config,
            lab_normalization: LAB_NORMALIZATION.to_string(),
            created: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != RECORD_VERSION {
            return Err(Error::Record(format!(
                "unsupported record version {} (expected {RECORD_VERSION})",
                self.version
            )));
        }
        if self.n < 1 {
            return Err(Error::Record("n must be at least 1".into()));
        }
        check_alpha(self.alpha, true).map_err(|e| Error::Record(e.to_string()))?;
        Ok(())
    }

    /// Refuses to apply this record to maps built under different conventions.
    pub fn check_compatible(&self, metric: Option<&MetricSpec>, score: Option<&ScoreConfig>) -> Result<()> {
        let mut problems = Vec::new();
        if self.lab_normalization != LAB_NORMALIZATION {
            problems.push(format!(
                "Lab normalization {:?} differs from {:?}",
                self.lab_normalization, LAB_NORMALIZATION
            ));
        }
        if let Some(m) = metric {
            if m != &self.metric {
                problems.push(format!("metric {m} differs from calibrated metric {}", self.metric));
            }
        }
        if let Some(s) = score {
            if s != &self.score_config {
                problems.push(format!(
                    "score config {s:?} differs from calibrated {:?}",
                    self.score_config
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Incompatible(problems.join("; ")))
        }
    }
}

pub fn save_record(rec: &CalibrationRecord, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(rec)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_record(path: impl AsRef<Path>) -> Result<CalibrationRecord> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rec: CalibrationRecord =
        serde_json::from_str(&text).map_err(|e| Error::Record(e.to_string()))?;
    rec.validate()?;
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(sigma: f64, d: f64) -> CalibrationPair {
        CalibrationPair::new(
            ScoreMap::new(1, 1, vec![sigma]).unwrap(),
            FidelityMap::new(1, 1, vec![d]).unwrap(),
        )
        .unwrap()
    }

    fn staircase() -> Vec<CalibrationPair> {
        (1..=5).map(|i| single(i as f64, 0.1 * i as f64)).collect()
    }

    #[test]
    fn risk_examples() {
        let pairs = staircase();
        assert_eq!(empirical_risk(&pairs, Threshold::NEG_INF).unwrap(), 0.5);
        let r4 = empirical_risk(&pairs, Threshold(4.0)).unwrap();
        assert!((r4 - (0.5 + 1.0 / 6.0)).abs() < 1e-12);
        assert_eq!(format!("{r4:.4}"), "0.6667");
        let zeros: Vec<_> = (0..5).map(|i| single(i as f64, 0.0)).collect();
        for t in [Threshold::NEG_INF, Threshold(2.0), Threshold::POS_INF] {
            assert_eq!(empirical_risk(&zeros, t).unwrap(), 0.5);
        }
        assert!(empirical_risk(&[], Threshold::POS_INF).is_err());
    }

    #[test]
    fn calibrate_examples() {
        let zeros: Vec<_> = (0..5).map(|i| single(i as f64, 0.0)).collect();
        let pairs = staircase();
        for mode in [CalibrationMode::Conservative, CalibrationMode::SupFaithful] {
            for f in [calibrate_dp, calibrate_bruteforce] {
                assert_eq!(f(&zeros, 0.5, mode).unwrap(), Threshold::POS_INF);
                assert_eq!(f(&pairs, 0.49, mode).unwrap(), Threshold::NEG_INF);
            }
        }
        for f in [calibrate_dp, calibrate_bruteforce] {
            assert_eq!(f(&pairs, 0.7, CalibrationMode::Conservative).unwrap(), Threshold(4.0));
            assert_eq!(f(&pairs, 0.7, CalibrationMode::SupFaithful).unwrap(), Threshold(5.0));
        }
    }

    #[test]
    fn alpha_validation() {
        let pairs = staircase();
        for bad in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(calibrate_dp(&pairs, bad, CalibrationMode::Conservative).is_err());
            assert!(calibrate_bruteforce(&pairs, bad, CalibrationMode::Conservative).is_err());
        }
        assert!(calibrate_dp_extended(&pairs, 2.5, CalibrationMode::Conservative).is_ok());
        assert!(calibrate_dp_extended(&pairs, 3.5, CalibrationMode::Conservative).is_err());
        assert!(calibrate_dp(&[], 0.5, CalibrationMode::Conservative).is_err());
    }

    #[test]
    fn mask_examples() {
        let s = ScoreMap::new(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(make_mask(&s, Threshold::POS_INF).bits().iter().all(|&b| b));
        assert!(make_mask(&s, Threshold::NEG_INF).bits().iter().all(|&b| !b));
        assert_eq!(make_mask(&s, Threshold(2.5)).bits(), &[true, true, false, false]);
    }

    #[test]
    fn tree_sum_matches_incremental_tree() {
        let leaves = [0.1, 0.7, 0.3333, 1e-9, 2.9, 0.25, 0.125];
        let mut t = RiskTree::new(leaves.len());
        for (i, v) in leaves.iter().enumerate() {
            t.set(i, *v);
        }
        assert_eq!(t.total().to_bits(), tree_sum(&leaves).to_bits());
        assert_eq!(tree_sum(&[0.4]), 0.4);
    }

    #[test]
    fn threshold_serde() {
        for t in [Threshold::POS_INF, Threshold::NEG_INF, Threshold(0.1 + 0.2), Threshold(-3.0e-12)] {
            let s = serde_json::to_string(&t).unwrap();
            let back: Threshold = serde_json::from_str(&s).unwrap();
            assert_eq!(back.value().to_bits(), t.value().to_bits());
        }
        assert_eq!(serde_json::to_string(&Threshold::POS_INF).unwrap(), "\"+inf\"");
        assert_eq!(serde_json::to_string(&Threshold::NEG_INF).unwrap(), "\"-inf\"");
        assert!(serde_json::from_str::<Threshold>("\"nan\"").is_err());
        assert_eq!("+inf".parse::<Threshold>().unwrap(), Threshold::POS_INF);
        assert!("nan".parse::<Threshold>().is_err());
    }

    #[test]
    fn record_round_trip_and_guards() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rec.json");
        for t in [Threshold::POS_INF, Threshold(0.012_345_678_901_234_5)] {
            let rec = CalibrationRecord::new(
                0.1,
                t,
                50,
                CalibrationMode::Conservative,
                MetricSpec::Pointwise,
                ScoreConfig::default(),
            );
            save_record(&rec, &path).unwrap();
            assert_eq!(load_record(&path).unwrap(), rec);
        }
        let rec = load_record(&path).unwrap();
        assert!(rec.check_compatible(Some(&MetricSpec::Pointwise), Some(&ScoreConfig::default())).is_ok());
        let err = rec.check_compatible(Some(&MetricSpec::Semantic), None).unwrap_err();
        assert!(matches!(err, Error::Incompatible(ref m) if m.contains("semantic")));
        let other = ScoreConfig { draws: 4, ..Default::default() };
        assert!(rec.check_compatible(None, Some(&other)).is_err());

        let text = std::fs::read_to_string(&path).unwrap().replace("\"version\": 1", "\"version\": 7");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load_record(&path), Err(Error::Record(_))));
        std::fs::write(&path, "{ not json").unwrap();
        assert!(matches!(load_record(&path), Err(Error::Record(_))));
    }
}
