//! Per-pixel indecision scores built from repeated model draws.
//!
//! Every estimator reduces the draws at a pixel in an order fixed by sorting
//! the per-draw values, so results do not depend on the order draws arrive in.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{srgb_to_lab_normalized, LabImage, PlanarImage};
use crate::kernels::{convolve2d, convolve_plane, Kernel, KernelSpec};

/// Single-channel map of indecision scores; larger means less certain.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap(PlanarImage);

impl ScoreMap {
    /// Values must be finite. Negative zero is folded into positive zero.
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        let values = values.into_iter().map(|v| v + 0.0).collect();
        Ok(Self(PlanarImage::new(width, height, 1, values)?))
    }

    pub fn from_planar(img: PlanarImage) -> Result<Self> {
        img.ensure_channels(1)?;
        Self::new(img.width(), img.height(), img.into_data())
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }

    pub fn as_planar(&self) -> &PlanarImage {
        &self.0
    }

    /// Rounds to `f32`, matching what a CFM1 round-trip yields.
    pub fn round_to_f32(&self) -> Self {
        Self(self.0.round_to_f32())
    }
}

/// How scores are derived from model draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    /// Number of stochastic draws `M`, at least 2.
    pub draws: usize,
    /// Kernel applied inside the variance; `box:0` gives the plain variance.
    pub kernel: KernelSpec,
    /// Gaussian sigma for the final blur of the score map.
    pub post_blur: Option<f64>,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            draws: 8,
            kernel: KernelSpec::Box { radius: 2 },
            post_blur: Some(2.0),
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if self.draws < 2 {
            return Err(Error::InvalidArgument(format!(
                "at least 2 draws are needed, got {}",
                self.draws
            )));
        }
        self.kernel.build()?;
        if let Some(s) = self.post_blur {
            KernelSpec::gaussian(s).build()?;
        }
        Ok(())
    }
}

/// A stochastic image-to-image model. `draw_index` selects an independent
/// realization; the same index must reproduce the same output.
pub trait GenerativeModel: Sync {
    fn sample(&self, input: &PlanarImage, draw_index: u64) -> Result<PlanarImage>;

    /// Draws for several indices at once; must equal calling [`Self::sample`]
    /// for each index in turn.
    fn sample_many(&self, input: &PlanarImage, draw_indices: &[u64]) -> Result<Vec<PlanarImage>> {
        draw_indices.iter().map(|&i| self.sample(input, i)).collect()
    }
}

fn check_draws(draws: &[LabImage]) -> Result<(usize, usize)> {
    if draws.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "at least 2 draws are needed, got {}",
            draws.len()
        )));
    }
    let dims = draws[0].dims();
    for d in &draws[1..] {
        if d.dims() != dims {
            return Err(Error::DimensionMismatch {
                expected: dims,
                actual: d.dims(),
            });
        }
    }
    Ok(dims)
}

/// Pixel-wise population variance over the draws, averaged over the three
/// Lab channels.
pub fn sigma_var(draws: &[LabImage]) -> Result<ScoreMap> {
    let (w, h) = check_draws(draws)?;
    let m = draws.len() as f64;
    let mut samples = vec![0.0; draws.len()];
    let mut out = Vec::with_capacity(w * h);
    for p in 0..w * h {
        let mut acc = 0.0;
        for c in 0..3 {
            for (s, d) in samples.iter_mut().zip(draws) {
                *s = d.data()[p * 3 + c];
            }
            samples.sort_unstable_by(f64::total_cmp);
            // Shifted by the smallest sample so equal draws give exactly zero.
            let lo = samples[0];
            let mean = samples.iter().map(|v| v - lo).sum::<f64>() / m;
            let var = samples.iter().map(|v| (v - lo - mean) * (v - lo - mean)).sum::<f64>() / m;
            acc += var;
        }
        out.push((acc / 3.0).max(0.0));
    }
    ScoreMap::new(w, h, out)
}

/// Kernel-smoothed variance `E[draw² ∗ K] − (E[draw ∗ K])²`, channel-averaged,
/// before clamping at zero.
pub fn sigma_ker_unclamped(draws: &[LabImage], kernel: &Kernel) -> Result<Vec<f64>> {
    let (w, h) = check_draws(draws)?;
    let m = draws.len() as f64;
    let mut acc = vec![0.0; w * h];
    for c in 0..3 {
        // Per draw: smoothed value and smoothed square.
        let moments: Vec<(Vec<f64>, Vec<f64>)> = draws
            .iter()
            .map(|d| {
                let plane = d.as_planar().plane(c);
                let sq: Vec<f64> = plane.iter().map(|v| v * v).collect();
                (
                    convolve_plane_checked(&plane, w, h, kernel),
                    convolve_plane_checked(&sq, w, h, kernel),
                )
            })
            .collect();
        let mut pairs = vec![(0.0, 0.0); draws.len()];
        for (p, out) in acc.iter_mut().enumerate() {
            for (slot, (first, second)) in pairs.iter_mut().zip(&moments) {
                *slot = (first[p], second[p]);
            }
            pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
            let mean = pairs.iter().map(|q| q.0).sum::<f64>() / m;
            let mean_sq = pairs.iter().map(|q| q.1).sum::<f64>() / m;
            *out += mean_sq - mean * mean;
        }
    }
    Ok(acc.into_iter().map(|v| v / 3.0).collect())
}

fn convolve_plane_checked(plane: &[f64], w: usize, h: usize, kernel: &Kernel) -> Vec<f64> {
    if kernel.is_identity() {
        plane.to_vec()
    } else {
        convolve_plane(plane, w, h, kernel)
    }
}

/// Kernel-smoothed variance, clamped at zero. A radius-0 box kernel gives
/// [`sigma_var`] up to rounding.
pub fn sigma_ker(draws: &[LabImage], kernel: &Kernel) -> Result<ScoreMap> {
    let (w, h) = check_draws(draws)?;
    if kernel.radius() > 0 && kernel.side() > 2 * w.min(h) {
        return Err(Error::InvalidKernel(format!(
            "kernel side {} too large for {w}x{h} draws",
            kernel.side()
        )));
    }
    let raw = sigma_ker_unclamped(draws, kernel)?;
    ScoreMap::new(w, h, raw.into_iter().map(|v| v.max(0.0)).collect())
}

/// Optional Gaussian blur of a finished score map.
pub fn finalize_score(map: &ScoreMap, post_blur: Option<f64>) -> Result<ScoreMap> {
    match post_blur {
        None => Ok(map.clone()),
        Some(sigma) => {
            let k = KernelSpec::gaussian(sigma).build()?;
            ScoreMap::from_planar(convolve2d(map.as_planar(), &k)?)
        }
    }
}

/// Applies a full [`ScoreConfig`] to Lab draws.
pub fn score_from_draws(draws: &[LabImage], cfg: &ScoreConfig) -> Result<ScoreMap> {
    cfg.validate()?;
    if draws.len() != cfg.draws {
        return Err(Error::InvalidArgument(format!(
            "config expects {} draws, got {}",
            cfg.draws,
            draws.len()
        )));
    }
    let raw = sigma_ker(draws, &cfg.kernel.build()?)?;
    finalize_score(&raw, cfg.post_blur)
}

/// Draws `cfg.draws` samples (indices `1..=M`) from `model` and scores them.
/// Index 0 is reserved for the prediction that is shown to the user.
pub fn score_model(model: &dyn GenerativeModel, input: &PlanarImage, cfg: &ScoreConfig) -> Result<ScoreMap> {
    let indices: Vec<u64> = (1..=cfg.draws as u64).collect();
    let draws = model
        .sample_many(input, &indices)?
        .iter()
        .map(srgb_to_lab_normalized)
        .collect::<Result<Vec<_>>>()?;
    score_from_draws(&draws, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{make_box, make_gaussian};
    use proptest::prelude::*;

    fn lab(w: usize, h: usize, data: Vec<f64>) -> LabImage {
        LabImage::from_normalized(PlanarImage::new(w, h, 3, data).unwrap()).unwrap()
    }

    // Straightforward two-pass variance used as the reference.
    fn oracle_var(draws: &[LabImage]) -> Vec<f64> {
        let n = draws[0].data().len() / 3;
        (0..n)
            .map(|p| {
                (0..3)
                    .map(|c| {
                        let xs: Vec<f64> = draws.iter().map(|d| d.data()[p * 3 + c]).collect();
                        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
                        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64
                    })
                    .sum::<f64>()
                    / 3.0
            })
            .collect()
    }

    fn arb_draws(max_m: usize) -> impl Strategy<Value = Vec<LabImage>> {
        (2usize..=max_m, 3usize..7, 3usize..7).prop_flat_map(|(m, w, h)| {
            proptest::collection::vec(proptest::collection::vec(0.0..=1.0f64, w * h * 3), m)
                .prop_map(move |ds| ds.into_iter().map(|d| lab(w, h, d)).collect())
        })
    }

    #[test]
    fn identical_draws_score_zero() {
        let d = lab(3, 2, (0..18).map(|i| i as f64 / 17.0).collect());
        let draws = vec![d.clone(), d.clone(), d];
        assert!(sigma_var(&draws).unwrap().values().iter().all(|&v| v == 0.0));
        let flat = lab(4, 4, [0.3, 0.6, 0.2].repeat(16));
        let flat_draws = vec![flat.clone(), flat.clone(), flat];
        for k in [make_box(1), make_gaussian(1.0, 2).unwrap()] {
            assert!(sigma_ker(&flat_draws, &k).unwrap().values().iter().all(|&v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn identical_textured_draws_keep_window_variance() {
        // With equal draws the smoothed second moment still sees the spatial
        // spread inside the kernel window: (f²∗K) − (f∗K)².
        let d = lab(4, 4, (0..48).map(|i| ((i * 7) % 11) as f64 / 10.0).collect());
        let draws = vec![d.clone(), d.clone()];
        let k = make_box(1);
        let f = crate::kernels::convolve2d_dense(d.as_planar(), &k).unwrap();
        let f2 = crate::kernels::convolve2d_dense(&d.as_planar().map(|v| v * v).unwrap(), &k).unwrap();
        let got = sigma_ker(&draws, &k).unwrap();
        for p in 0..16 {
            let v: f64 = (0..3).map(|c| f2.data()[p * 3 + c] - f.data()[p * 3 + c].powi(2)).sum::<f64>() / 3.0;
            assert!((got.values()[p] - v.max(0.0)).abs() < 1e-12);
        }
        assert!(got.values().iter().any(|&v| v > 1e-3));
    }

    #[test]
    fn single_channel_difference() {
        let a = lab(2, 2, vec![0.5; 12]);
        let mut bd = vec![0.5; 12];
        let delta = 0.3;
        bd[3 + 1] += delta;
        let b = lab(2, 2, bd);
        let s = sigma_var(&[a, b]).unwrap();
        let expected = delta * delta / 4.0 / 3.0;
        assert!((s.values()[1] - expected).abs() < 1e-15);
        for i in [0, 2, 3] {
            assert_eq!(s.values()[i], 0.0);
        }
    }

    #[test]
    fn three_random_draws_match_two_pass() {
        let vals = [
            0.11, 0.52, 0.93, 0.27, 0.64, 0.05, 0.38, 0.79, 0.46, 0.15, 0.86, 0.33,
            0.71, 0.02, 0.58, 0.99, 0.24, 0.67, 0.41, 0.88, 0.13, 0.56, 0.35, 0.74,
            0.09, 0.62, 0.47, 0.81, 0.26, 0.53, 0.95, 0.18, 0.44, 0.07, 0.69, 0.32,
        ];
        let draws: Vec<LabImage> = vals.chunks(12).map(|c| lab(2, 2, c.to_vec())).collect();
        let s = sigma_var(&draws).unwrap();
        for (a, b) in s.values().iter().zip(oracle_var(&draws)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn ker_matches_separate_moment_oracle() {
        // 4 draws of 4x4, box radius 1: build E[f²∗K] and E[f∗K] with the
        // dense reference convolution, then subtract.
        let draws: Vec<LabImage> = (0..4)
            .map(|m| lab(4, 4, (0..48).map(|i| (((i * 37 + m * 11) % 23) as f64) / 22.0).collect()))
            .collect();
        let k = make_box(1);
        let got = sigma_ker(&draws, &k).unwrap();
        let mut first = vec![0.0; 48];
        let mut second = vec![0.0; 48];
        for d in &draws {
            let f = crate::kernels::convolve2d_dense(d.as_planar(), &k).unwrap();
            let sq = d.as_planar().map(|v| v * v).unwrap();
            let f2 = crate::kernels::convolve2d_dense(&sq, &k).unwrap();
            for i in 0..48 {
                first[i] += f.data()[i] / 4.0;
                second[i] += f2.data()[i] / 4.0;
            }
        }
        for p in 0..16 {
            let v: f64 = (0..3).map(|c| second[p * 3 + c] - first[p * 3 + c].powi(2)).sum::<f64>() / 3.0;
            assert!((got.values()[p] - v.max(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        let a = lab(2, 2, vec![0.5; 12]);
        assert!(sigma_var(std::slice::from_ref(&a)).is_err());
        let b = lab(2, 1, vec![0.5; 6]);
        assert!(sigma_var(&[a.clone(), b.clone()]).is_err());
        assert!(sigma_ker(&[a.clone(), b], &make_box(0)).is_err());
        assert!(sigma_ker(&[a.clone(), a], &make_box(2)).is_err());
        assert!(ScoreConfig { draws: 1, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn finalize_behaviour() {
        let map = ScoreMap::new(3, 3, (0..9).map(|i| i as f64).collect()).unwrap();
        assert_eq!(finalize_score(&map, None).unwrap(), map);
        let c = ScoreMap::new(8, 8, vec![0.25; 64]).unwrap();
        let out = finalize_score(&c, Some(1.0)).unwrap();
        assert!(out.values().iter().all(|v| (v - 0.25).abs() < 1e-12));

        let mut delta = vec![0.0; 81];
        delta[4 * 9 + 4] = 1.0;
        let d = ScoreMap::new(9, 9, delta).unwrap();
        let out = finalize_score(&d, Some(1.0)).unwrap();
        let k = make_gaussian(1.0, 3).unwrap();
        for dy in -3isize..=3 {
            for dx in -3isize..=3 {
                let v = out.values()[((4 + dy) * 9 + 4 + dx) as usize];
                assert!((v - k.weight(dx, dy)).abs() < 1e-15);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn one_box_recovers_variance(draws in arb_draws(6)) {
            let a = sigma_var(&draws).unwrap();
            let b = sigma_ker(&draws, &make_box(0)).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() <= 1e-7);
            }
        }

        #[test]
        fn ker_nonnegative_before_clamp(draws in arb_draws(6), r in 0usize..2, s in 0.4..2.0f64, gauss in any::<bool>()) {
            let k = if gauss { make_gaussian(s, r.max(1)).unwrap() } else { make_box(r) };
            for v in sigma_ker_unclamped(&draws, &k).unwrap() {
                prop_assert!(v >= -1e-9);
            }
        }

        #[test]
        fn permutation_invariant(draws in arb_draws(6), rot in 0usize..6) {
            let mut perm = draws.clone();
            let r = rot % perm.len();
            perm.rotate_left(r);
            let last = perm.len() - 1;
            perm.swap(0, last);
            prop_assert_eq!(sigma_var(&draws).unwrap(), sigma_var(&perm).unwrap());
            let k = make_box(1);
            prop_assert_eq!(sigma_ker(&draws, &k).unwrap(), sigma_ker(&perm, &k).unwrap());
        }

        #[test]
        fn shift_invariant(draws in arb_draws(5), c in -0.5..0.5f64) {
            // Shift into a range where every sample stays inside [0, 1].
            let squeeze: Vec<LabImage> = draws.iter()
                .map(|d| lab(d.width(), d.height(), d.data().iter().map(|v| 0.25 + 0.5 * v).collect()))
                .collect();
            let shifted: Vec<LabImage> = squeeze.iter()
                .map(|d| lab(d.width(), d.height(), d.data().iter().map(|v| v + c * 0.5).collect()))
                .collect();
            let k = make_box(1);
            for (a, b) in sigma_var(&squeeze).unwrap().values().iter().zip(sigma_var(&shifted).unwrap().values()) {
                prop_assert!((a - b).abs() <= 1e-7);
            }
            for (a, b) in sigma_ker(&squeeze, &k).unwrap().values().iter().zip(sigma_ker(&shifted, &k).unwrap().values()) {
                prop_assert!((a - b).abs() <= 1e-7);
            }
        }
    }
}
