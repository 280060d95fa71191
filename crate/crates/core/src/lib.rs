//! Conformal confidence masks for images produced by stochastic generative
//! restoration models.
//!
//! The pipeline: draw several outputs from a black-box model, reduce them to
//! a per-pixel indecision score ([`scoremap`]), measure local differences to
//! ground truth on a calibration set ([`fidelity`]), pick the largest score
//! threshold whose inflated empirical risk stays below `alpha`
//! ([`calibrate`]), and trust exactly the pixels whose score falls under it.
//! The expected worst-case local error inside the trusted region of a fresh
//! image is then at most `alpha`.
//!
//! [`synthmodel`] and [`experiments`] provide a seeded synthetic world and
//! Monte Carlo harnesses that check these guarantees end to end.

pub mod calibrate;
pub mod error;
pub mod experiments;
pub mod fidelity;
pub mod imagecore;
pub mod kernels;
pub mod metrics;
mod rng;
pub mod scoremap;
pub mod synthmodel;

pub use calibrate::{
    calibrate_bruteforce, calibrate_dp, empirical_risk, make_mask, CalibrationMode,
    CalibrationPair, CalibrationRecord, Threshold,
};
pub use error::{Error, Result};
pub use fidelity::{fidelity_error, FidelityMap, MetricSpec};
pub use imagecore::{BinaryMask, LabImage, PlanarImage};
pub use kernels::{Kernel, KernelSpec};
pub use metrics::{mask_stats, masked_psnr, EvalReport, MaskStats, MaskedPsnr};
pub use scoremap::{GenerativeModel, ScoreConfig, ScoreMap};
pub use synthmodel::{MockModel, WorldConfig};
