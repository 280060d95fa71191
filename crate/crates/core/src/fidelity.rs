//! Local difference maps `D_p` and the fidelity error of a mask.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{load_png, BinaryMask, LabImage, PlanarImage};
use crate::kernels::{convolve2d, Kernel, KernelSpec};

/// Upper bound of every local difference.
pub const MAX_FIDELITY: f64 = 3.0;

/// Per-pixel local differences, each in `[0, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FidelityMap(PlanarImage);

impl FidelityMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !(0.0..=MAX_FIDELITY).contains(v)) {
            return Err(Error::InvalidArgument(format!(
                "fidelity value {} at index {i} outside [0, 3]",
                values[i]
            )));
        }
        Ok(Self(PlanarImage::new(width, height, 1, values)?))
    }

    pub fn from_planar(img: PlanarImage) -> Result<Self> {
        img.ensure_channels(1)?;
        Self::new(img.width(), img.height(), img.into_data())
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self(PlanarImage::filled(width, height, 1, 0.0).expect("valid dims"))
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

    pub fn max(&self) -> f64 {
        self.values().iter().copied().fold(0.0, f64::max)
    }
}

/// Which local difference is used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricSpec {
    Pointwise,
    Neighborhood { kernel: KernelSpec },
    Semantic,
}

impl fmt::Display for MetricSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricSpec::Pointwise => f.write_str("pointwise"),
            MetricSpec::Neighborhood { kernel } => write!(f, "neighborhood[{kernel}]"),
            MetricSpec::Semantic => f.write_str("semantic"),
        }
    }
}

impl MetricSpec {
    /// Builds a spec from a metric name and, for `neighborhood`, a kernel.
    pub fn parse(name: &str, kernel: Option<KernelSpec>) -> Result<Self> {
        match name {
            "pointwise" => Ok(MetricSpec::Pointwise),
            "semantic" => Ok(MetricSpec::Semantic),
            "neighborhood" => {
                let kernel = kernel.ok_or_else(|| {
                    Error::InvalidArgument("neighborhood metric needs a kernel".into())
                })?;
                kernel.build()?;
                Ok(MetricSpec::Neighborhood { kernel })
            }
            other => Err(Error::InvalidArgument(format!("unknown metric {other:?}"))),
        }
    }
}

impl FromStr for MetricSpec {
    type Err = Error;

    /// Accepts `pointwise`, `semantic` and `neighborhood:<kernel>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some(("neighborhood", k)) => Self::parse("neighborhood", Some(k.parse()?)),
            _ => Self::parse(s, None),
        }
    }
}

fn check_pair(y: &LabImage, yhat: &LabImage) -> Result<()> {
    if y.dims() != yhat.dims() {
        return Err(Error::DimensionMismatch {
            expected: y.dims(),
            actual: yhat.dims(),
        });
    }
    Ok(())
}

fn l1_map(a: &[f64], b: &[f64], w: usize, h: usize) -> Result<FidelityMap> {
    let values = a
        .chunks_exact(3)
        .zip(b.chunks_exact(3))
        .map(|(p, q)| {
            let d: f64 = p.iter().zip(q).map(|(x, y)| (x - y).abs()).sum();
            d.clamp(0.0, MAX_FIDELITY)
        })
        .collect();
    FidelityMap::new(w, h, values)
}

/// `D_p = ‖Y_p − Ŷ_p‖₁` over the three normalized Lab channels.
pub fn d_pointwise(y: &LabImage, yhat: &LabImage) -> Result<FidelityMap> {
    check_pair(y, yhat)?;
    l1_map(y.data(), yhat.data(), y.width(), y.height())
}

/// `D_p = ‖(Y∗K)_p − (Ŷ∗K)_p‖₁`.
pub fn d_neighborhood(y: &LabImage, yhat: &LabImage, kernel: &Kernel) -> Result<FidelityMap> {
    check_pair(y, yhat)?;
    let ys = convolve2d(y.as_planar(), kernel)?;
    let hs = convolve2d(yhat.as_planar(), kernel)?;
    l1_map(ys.data(), hs.data(), y.width(), y.height())
}

/// Passes a binary annotation through as `{0, 1}` differences. Three-channel
/// annotations are reduced by per-pixel maximum.
pub fn d_semantic(annotation: &PlanarImage, dims: (usize, usize)) -> Result<FidelityMap> {
    if annotation.dims() != dims {
        return Err(Error::DimensionMismatch {
            expected: dims,
            actual: annotation.dims(),
        });
    }
    if let Some(i) = annotation.data().iter().position(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument(format!(
            "annotation value {} at index {i} is not binary",
            annotation.data()[i]
        )));
    }
    let ch = annotation.channels();
    let values = annotation
        .data()
        .chunks_exact(ch)
        .map(|px| px.iter().copied().fold(0.0, f64::max))
        .collect();
    FidelityMap::new(dims.0, dims.1, values)
}

/// Loads an annotation PNG, mapping 0 to "same" and any nonzero sample to "different".
pub fn load_annotation_png(path: impl AsRef<Path>) -> Result<PlanarImage> {
    load_png(path)?.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

/// Evaluates a metric. Semantic metrics need the annotation raster.
pub fn compute_fidelity(
    metric: &MetricSpec,
    y: &LabImage,
    yhat: &LabImage,
    annotation: Option<&PlanarImage>,
) -> Result<FidelityMap> {
    match metric {
        MetricSpec::Pointwise => d_pointwise(y, yhat),
        MetricSpec::Neighborhood { kernel } => d_neighborhood(y, yhat, &kernel.build()?),
        MetricSpec::Semantic => {
            check_pair(y, yhat)?;
            let a = annotation.ok_or_else(|| {
                Error::InvalidArgument("semantic metric needs an annotation".into())
            })?;
            d_semantic(a, y.dims())
        }
    }
}

/// Largest difference inside the trusted region; zero for an empty mask.
pub fn fidelity_error(d: &FidelityMap, mask: &BinaryMask) -> Result<f64> {
    if d.dims() != mask.dims() {
        return Err(Error::DimensionMismatch {
            expected: d.dims(),
            actual: mask.dims(),
        });
    }
    Ok(d
        .values()
        .iter()
        .zip(mask.bits())
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(0.0, f64::max))
}
