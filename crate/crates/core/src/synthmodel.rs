//! Synthetic image world and a stochastic mock upscaler.
//!
//! Ground truth `Y` is mid-gray plus randomly placed flat-topped color bumps
//! and a patch of oriented sinusoidal texture. The low-resolution input is the
//! box-downsampled `Y`. The mock model upsamples bilinearly and adds Gaussian
//! noise whose amplitude grows with the local gradient of the upsampled image,
//! so draws disagree most around edges and texture.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{downsample_box, PlanarImage};
use crate::rng::{fnv1a, stream, TAG_MODEL, TAG_WORLD};
use crate::scoremap::GenerativeModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    pub lr_width: usize,
    pub lr_height: usize,
    /// Upscaling factor, 2 or 4.
    pub factor: usize,
    pub bumps_min: usize,
    pub bumps_max: usize,
    pub texture_amplitude: f64,
    /// Per-channel noise standard deviation of the mock on flat regions.
    pub noise_base: f64,
    /// Extra noise per unit of local gradient magnitude.
    pub noise_gradient: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lr_width: 16,
            lr_height: 16,
            factor: 2,
            bumps_min: 2,
            bumps_max: 5,
            texture_amplitude: 0.08,
            noise_base: 0.004,
            noise_gradient: 0.6,
        }
    }
}

impl WorldConfig {
    /// A world with constant mid-gray images and a noiseless model, so the
    /// model output equals the ground truth.
    pub fn perfect(seed: u64) -> Self {
        Self {
            seed,
            bumps_min: 0,
            bumps_max: 0,
            texture_amplitude: 0.0,
            noise_base: 0.0,
            noise_gradient: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_width < 4 || self.lr_height < 4 {
            return Err(Error::InvalidArgument(format!(
                "low-resolution size {}x{} is below 4x4",
                self.lr_width, self.lr_height
            )));
        }
        if self.factor != 2 && self.factor != 4 {
            return Err(Error::InvalidArgument(format!("factor must be 2 or 4, got {}", self.factor)));
        }
        if self.bumps_min > self.bumps_max {
            return Err(Error::InvalidArgument("bumps_min exceeds bumps_max".into()));
        }
        for (name, v) in [
            ("texture_amplitude", self.texture_amplitude),
            ("noise_base", self.noise_base),
            ("noise_gradient", self.noise_gradient),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn hr_dims(&self) -> (usize, usize) {
        (self.lr_width * self.factor, self.lr_height * self.factor)
    }
}

struct Bump {
    cx: f64,
    cy: f64,
    radius: f64,
    color: [f64; 3],
}

struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    weight: [f64; 3],
}

/// Ground-truth image for `index`.
pub fn gen_ground_truth(cfg: &WorldConfig, index: u64) -> Result<PlanarImage> {
    cfg.validate()?;
    let (w, h) = cfg.hr_dims();
    let side = w.min(h) as f64;
    let mut rng = stream(cfg.seed, TAG_WORLD, &[index]);

    let base: [f64; 3] = std::array::from_fn(|_| 0.5 + rng.random_range(-0.05..=0.05));
    let n_bumps = rng.random_range(cfg.bumps_min..=cfg.bumps_max);
    let bumps: Vec<Bump> = (0..n_bumps)
        .map(|_| Bump {
            cx: rng.random_range(0.0..w as f64),
            cy: rng.random_range(0.0..h as f64),
            radius: rng.random_range(0.08..0.25) * side,
            color: std::array::from_fn(|_| rng.random_range(-0.35..=0.35)),
        })
        .collect();

    let waves: Vec<Wave> = (0..3)
        .map(|_| {
            let f = rng.random_range(0.08..0.35);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            Wave {
                fx: f * theta.cos(),
                fy: f * theta.sin(),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                weight: std::array::from_fn(|_| rng.random_range(-1.0..=1.0)),
            }
        })
        .collect();
    let (ex, ey) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
    let er = rng.random_range(0.15..0.35) * side;

    PlanarImage::from_fn(w, h, 3, |x, y, c| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let mut v = base[c];
        for b in &bumps {
            let d = ((px - b.cx).powi(2) + (py - b.cy).powi(2)).sqrt() / b.radius;
            v += b.color[c] * (-d.powi(4)).exp();
        }
        if cfg.texture_amplitude > 0.0 {
            let env = (-((px - ex).powi(2) + (py - ey).powi(2)) / (2.0 * er * er)).exp();
            let tex: f64 = waves
                .iter()
                .map(|wv| wv.weight[c] * (std::f64::consts::TAU * (wv.fx * px + wv.fy * py) + wv.phase).sin())
                .sum();
            v += cfg.texture_amplitude * env * tex / 3.0;
        }
        v.clamp(0.0, 1.0)
    })
}

/// `(X, Y)` pair for `index`; a pure function of the config and index.
pub fn gen_pair(cfg: &WorldConfig, index: u64) -> Result<(PlanarImage, PlanarImage)> {
    let y = gen_ground_truth(cfg, index)?;
    let x = downsample_box(&y, cfg.factor)?;
    Ok((x, y))
}

/// Bilinear upsampling with pixel-center alignment and edge clamping.
pub fn bilinear_upsample(img: &PlanarImage, factor: usize) -> Result<PlanarImage> {
    if factor == 0 {
        return Err(Error::InvalidArgument("factor must be positive".into()));
    }
    let (w, h) = img.dims();
    let coord = |o: usize, n: usize| {
        let s = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    PlanarImage::from_fn(w * factor, h * factor, img.channels(), |x, y, c| {
        let (x0, x1, tx) = coord(x, w);
        let (y0, y1, ty) = coord(y, h);
        let top = img.get(x0, y0, c) * (1.0 - tx) + img.get(x1, y0, c) * tx;
        let bottom = img.get(x0, y1, c) * (1.0 - tx) + img.get(x1, y1, c) * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

/// Central-difference gradient magnitude, pooled over channels.
pub fn gradient_magnitude(img: &PlanarImage) -> Vec<f64> {
    let (w, h) = img.dims();
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
            let mut acc = 0.0;
            for c in 0..img.channels() {
                let gx = (img.get(xr, y, c) - img.get(xl, y, c)) / (xr - xl).max(1) as f64;
                let gy = (img.get(x, yd, c) - img.get(x, yu, c)) / (yd - yu).max(1) as f64;
                acc += gx * gx + gy * gy;
            }
            out.push(acc.sqrt());
        }
    }
    out
}

/// Stochastic upscaler. Draws are keyed by the model seed, the input's bits
/// and the draw index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MockModel {
    pub seed: u64,
    pub factor: usize,
    pub noise_base: f64,
    pub noise_gradient: f64,
}

impl MockModel {
    pub fn from_world(cfg: &WorldConfig) -> Self {
        Self {
            seed: cfg.seed,
            factor: cfg.factor,
            noise_base: cfg.noise_base,
            noise_gradient: cfg.noise_gradient,
        }
    }

    /// Per-pixel noise standard deviation for an input.
    pub fn amplitude_field(&self, input: &PlanarImage) -> Result<Vec<f64>> {
        let up = bilinear_upsample(input, self.factor)?;
        Ok(self.amplitudes(&up))
    }

    fn amplitudes(&self, up: &PlanarImage) -> Vec<f64> {
        if self.noise_gradient == 0.0 {
            return vec![self.noise_base; up.pixel_count()];
        }
        gradient_magnitude(up)
            .into_iter()
            .map(|g| self.noise_base + self.noise_gradient * g)
            .collect()
    }

}

fn input_key(input: &PlanarImage) -> u64 {
    fnv1a(input.data().iter().flat_map(|v| v.to_bits().to_le_bytes()))
}

impl MockModel {
    fn perturb(&self, up: &PlanarImage, amp: &[f64], key: u64, draw_index: u64) -> Result<PlanarImage> {
        let mut rng: ChaCha8Rng = stream(self.seed, TAG_MODEL, &[key, draw_index]);
        let data = up
            .data()
            .chunks_exact(3)
            .zip(amp)
            .flat_map(|(px, &a)| {
                let noise: [f64; 3] = std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal));
                [0, 1, 2].map(|c| (px[c] + a * noise[c]).clamp(0.0, 1.0))
            })
            .collect();
        PlanarImage::new(up.width(), up.height(), 3, data)
    }
}

impl GenerativeModel for MockModel {
    fn sample(&self, input: &PlanarImage, draw_index: u64) -> Result<PlanarImage> {
        Ok(self.sample_many(input, &[draw_index])?.remove(0))
    }

    fn sample_many(&self, input: &PlanarImage, draw_indices: &[u64]) -> Result<Vec<PlanarImage>> {
        input.ensure_channels(3)?;
        let up = bilinear_upsample(input, self.factor)?;
        if self.noise_base == 0.0 && self.noise_gradient == 0.0 {
            let clean = up.map(|v| v.clamp(0.0, 1.0))?;
            return Ok(vec![clean; draw_indices.len()]);
        }
        let amp = self.amplitudes(&up);
        let key = input_key(input);
        draw_indices.iter().map(|&i| self.perturb(&up, &amp, key, i)).collect()
    }
}
