//! Per-image evaluation: masked PSNR, mask size and risk curves.
//!
//! PSNR is computed in normalized Lab, pooling every channel value of every
//! trusted pixel into one population. It is not the usual sRGB/luma PSNR.

use std::fmt;

use serde::{Serialize, Serializer};

use crate::calibrate::{empirical_risk, CalibrationPair, Threshold};
use crate::error::{Error, Result};
use crate::fidelity::{fidelity_error, FidelityMap};
use crate::imagecore::{BinaryMask, LabImage};

/// PSNR over a mask, with sentinels for the two degenerate cases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskedPsnr {
    Value(f64),
    /// Nonempty mask with zero error.
    Infinite,
    /// Empty mask.
    NotAvailable,
}

impl MaskedPsnr {
    pub fn value(self) -> Option<f64> {
        match self {
            MaskedPsnr::Value(v) => Some(v),
            _ => None,
        }
    }
}

impl fmt::Display for MaskedPsnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskedPsnr::Value(v) => write!(f, "{v}"),
            MaskedPsnr::Infinite => f.write_str("inf"),
            MaskedPsnr::NotAvailable => f.write_str("NA"),
        }
    }
}

impl Serialize for MaskedPsnr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            MaskedPsnr::Value(v) => s.serialize_f64(*v),
            other => s.serialize_str(&other.to_string()),
        }
    }
}

fn check_mask(dims: (usize, usize), mask: &BinaryMask) -> Result<()> {
    if dims != mask.dims() {
        return Err(Error::DimensionMismatch {
            expected: dims,
            actual: mask.dims(),
        });
    }
    Ok(())
}

/// `10·log10(s² / mse)` over the trusted region, where `s` is the largest
/// ground-truth value there.
pub fn masked_psnr(yhat: &LabImage, y: &LabImage, mask: &BinaryMask) -> Result<MaskedPsnr> {
    if yhat.dims() != y.dims() {
        return Err(Error::DimensionMismatch {
            expected: y.dims(),
            actual: yhat.dims(),
        });
    }
    check_mask(y.dims(), mask)?;
    let mut count = 0usize;
    let mut sq = 0.0;
    let mut peak = 0.0f64;
    for ((a, b), &m) in y.data().chunks_exact(3).zip(yhat.data().chunks_exact(3)).zip(mask.bits()) {
        if !m {
            continue;
        }
        for c in 0..3 {
            sq += (a[c] - b[c]) * (a[c] - b[c]);
            peak = peak.max(a[c]);
        }
        count += 3;
    }
    if count == 0 {
        return Ok(MaskedPsnr::NotAvailable);
    }
    let mse = sq / count as f64;
    if mse == 0.0 {
        return Ok(MaskedPsnr::Infinite);
    }
    Ok(MaskedPsnr::Value(10.0 * (peak * peak / mse).log10()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MaskStats {
    pub trusted_fraction: f64,
    /// Share of pixels left untrusted; this is the reported "mask size".
    pub mistrust_fraction: f64,
}

pub fn mask_stats(mask: &BinaryMask) -> MaskStats {
    let total = mask.bits().len();
    let trusted = mask.count_trusted();
    MaskStats {
        trusted_fraction: trusted as f64 / total as f64,
        mistrust_fraction: (total - trusted) as f64 / total as f64,
    }
}

/// Calibration risk at each grid point.
pub fn risk_curve(pairs: &[CalibrationPair], grid: &[Threshold]) -> Result<Vec<(Threshold, f64)>> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty threshold grid".into()));
    }
    grid.iter().map(|&t| Ok((t, empirical_risk(pairs, t)?))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub fidelity_error: f64,
    pub masked_psnr: MaskedPsnr,
    pub trusted_fraction: f64,
    pub mistrust_fraction: f64,
    pub n_trusted_pixels: usize,
}

impl EvalReport {
    pub fn new(d: &FidelityMap, yhat: &LabImage, y: &LabImage, mask: &BinaryMask) -> Result<Self> {
        let stats = mask_stats(mask);
        Ok(Self {
            fidelity_error: fidelity_error(d, mask)?,
            masked_psnr: masked_psnr(yhat, y, mask)?,
            trusted_fraction: stats.trusted_fraction,
            mistrust_fraction: stats.mistrust_fraction,
            n_trusted_pixels: mask.count_trusted(),
        })
    }
}
