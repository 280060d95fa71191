//! Normalized low-pass kernels and 2-D correlation with reflect-101 borders.
//!
//! Both kernel families are separable, so [`convolve2d`] runs two 1-D passes.
//! [`convolve2d_dense`] is the direct double loop and serves as a reference.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::PlanarImage;

/// Serializable description of a kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelSpec {
    Box { radius: usize },
    Gaussian { radius: usize, sigma: f64 },
}

impl KernelSpec {
    /// Gaussian spec with the default 3σ truncation.
    pub fn gaussian(sigma: f64) -> Self {
        KernelSpec::Gaussian {
            radius: default_gaussian_radius(sigma),
            sigma,
        }
    }

    pub fn build(&self) -> Result<Kernel> {
        match *self {
            KernelSpec::Box { radius } => Ok(make_box(radius)),
            KernelSpec::Gaussian { radius, sigma } => make_gaussian(sigma, radius),
        }
    }

    pub fn radius(&self) -> usize {
        match *self {
            KernelSpec::Box { radius } | KernelSpec::Gaussian { radius, .. } => radius,
        }
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelSpec::Box { radius } => write!(f, "box:{radius}"),
            KernelSpec::Gaussian { radius, sigma } => write!(f, "gaussian:{sigma}:{radius}"),
        }
    }
}

/// Parses `box:R`, `gaussian:S` or `gaussian:S:R`.
impl FromStr for KernelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidKernel(format!("cannot parse kernel spec {s:?}"));
        let mut parts = s.split(':');
        let kind = parts.next().ok_or_else(bad)?;
        let args: Vec<&str> = parts.collect();
        match (kind, args.as_slice()) {
            ("box", [r]) => Ok(KernelSpec::Box {
                radius: r.parse().map_err(|_| bad())?,
            }),
            ("gaussian", [s]) => {
                let sigma: f64 = s.parse().map_err(|_| bad())?;
                if !(sigma > 0.0 && sigma.is_finite()) {
                    return Err(bad());
                }
                Ok(KernelSpec::gaussian(sigma))
            }
            ("gaussian", [s, r]) => Ok(KernelSpec::Gaussian {
                sigma: s.parse().map_err(|_| bad())?,
                radius: r.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

pub fn default_gaussian_radius(sigma: f64) -> usize {
    ((3.0 * sigma).ceil() as usize).max(1)
}

/// Square, nonnegative, unit-sum weight grid of side `2·radius + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    spec: KernelSpec,
    radius: usize,
    weights: Vec<f64>,
    // 1-D factor whose outer product with itself is `weights`.
    factor: Vec<f64>,
}

impl Kernel {
    pub fn spec(&self) -> KernelSpec {
        self.spec
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    /// Row-major weights; `weight(dx, dy)` indexes with offsets in `-r..=r`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, dx: isize, dy: isize) -> f64 {
        let r = self.radius as isize;
        self.weights[((dy + r) * (2 * r + 1) + dx + r) as usize]
    }

    pub fn is_identity(&self) -> bool {
        self.radius == 0
    }
}

pub fn make_box(radius: usize) -> Kernel {
    let side = 2 * radius + 1;
    Kernel {
        spec: KernelSpec::Box { radius },
        radius,
        weights: vec![1.0 / (side * side) as f64; side * side],
        factor: vec![1.0 / side as f64; side],
    }
}

/// Truncated Gaussian, weights `∝ exp(−(dx²+dy²)/(2σ²))`, renormalized.
pub fn make_gaussian(sigma: f64, radius: usize) -> Result<Kernel> {
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::InvalidKernel(format!("sigma must be positive, got {sigma}")));
    }
    if radius < 1 {
        return Err(Error::InvalidKernel("gaussian radius must be at least 1".into()));
    }
    let r = radius as isize;
    let two_s2 = 2.0 * sigma * sigma;
    let raw: Vec<f64> = (-r..=r)
        .map(|d| (-((d * d) as f64) / two_s2).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    let factor: Vec<f64> = raw.iter().map(|v| v / total).collect();

    let mut weights = Vec::with_capacity(raw.len() * raw.len());
    for dy in -r..=r {
        for dx in -r..=r {
            weights.push((-((dx * dx + dy * dy) as f64) / two_s2).exp());
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(Kernel {
        spec: KernelSpec::Gaussian { radius, sigma },
        radius,
        weights,
        factor,
    })
}

#[inline]
fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    // Repeated reflection is periodic in 2(n-1).
    let period = 2 * (n as isize - 1);
    let j = i.rem_euclid(period);
    (if j >= n as isize { period - j } else { j }) as usize
}

fn check_fits(width: usize, height: usize, kernel: &Kernel) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidImage("empty image".into()));
    }
    if kernel.radius > 0 && kernel.side() > 2 * width.min(height) {
        return Err(Error::InvalidKernel(format!(
            "kernel side {} exceeds twice the smallest image side {}",
            kernel.side(),
            width.min(height)
        )));
    }
    Ok(())
}

/// Correlates one `width × height` plane with the kernel's separable factor.
pub(crate) fn convolve_plane(plane: &[f64], width: usize, height: usize, kernel: &Kernel) -> Vec<f64> {
    let r = kernel.radius as isize;
    let f = &kernel.factor;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..height {
        let row = &plane[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0.0;
            for (k, w) in f.iter().enumerate() {
                acc += w * row[reflect101(x as isize + k as isize - r, width)];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for (k, w) in f.iter().enumerate() {
            let sy = reflect101(y as isize + k as isize - r, height);
            let src = &tmp[sy * width..(sy + 1) * width];
            let dst = &mut out[y * width..(y + 1) * width];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
    out
}

/// Per-channel 2-D correlation with reflect-101 borders. Output dims equal input dims.
pub fn convolve2d(img: &PlanarImage, kernel: &Kernel) -> Result<PlanarImage> {
    check_fits(img.width(), img.height(), kernel)?;
    if kernel.is_identity() {
        return Ok(img.clone());
    }
    let planes: Vec<Vec<f64>> = img
        .planes()
        .iter()
        .map(|p| convolve_plane(p, img.width(), img.height(), kernel))
        .collect();
    PlanarImage::from_planes(img.width(), img.height(), &planes)
}

/// Direct `O(w·h·side²)` evaluation of [`convolve2d`].
pub fn convolve2d_dense(img: &PlanarImage, kernel: &Kernel) -> Result<PlanarImage> {
    check_fits(img.width(), img.height(), kernel)?;
    let (w, h) = img.dims();
    let r = kernel.radius as isize;
    PlanarImage::from_fn(w, h, img.channels(), |x, y, c| {
        let mut acc = 0.0;
        for dy in -r..=r {
            let sy = reflect101(y as isize + dy, h);
            for dx in -r..=r {
                let sx = reflect101(x as isize + dx, w);
                acc += kernel.weight(dx, dy) * img.get(sx, sy, c);
            }
        }
        acc
    })
}
