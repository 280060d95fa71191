//! sRGB (D65) to normalized CIELAB.

use super::{LabImage, PlanarImage};
use crate::error::Result;

/// Tag identifying the Lab convention; stored in calibration records.
pub const LAB_NORMALIZATION: &str = "cielab-d65;L/100;(ab+128)/255;clamped";

// IEC 61966-2-1 linear sRGB to XYZ.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124, 0.3576, 0.1805],
    [0.2126, 0.7152, 0.0722],
    [0.0193, 0.1192, 0.9505],
];

// The white point is taken from the matrix row sums so that sRGB white
// lands exactly on a = b = 0.
const WHITE: [f64; 3] = [
    RGB_TO_XYZ[0][0] + RGB_TO_XYZ[0][1] + RGB_TO_XYZ[0][2],
    RGB_TO_XYZ[1][0] + RGB_TO_XYZ[1][1] + RGB_TO_XYZ[1][2],
    RGB_TO_XYZ[2][0] + RGB_TO_XYZ[2][1] + RGB_TO_XYZ[2][2],
];

const EPSILON: f64 = 216.0 / 24389.0;
const KAPPA: f64 = 24389.0 / 27.0;

#[inline]
fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

#[inline]
fn lab_f(t: f64) -> f64 {
    if t > EPSILON {
        t.cbrt()
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

/// Converts one sRGB pixel in `[0, 1]` to unnormalized `(L, a, b)`.
pub fn srgb_pixel_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let mut xyz = [0.0; 3];
    for (row, out) in RGB_TO_XYZ.iter().zip(xyz.iter_mut()) {
        *out = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
    }
    let fx = lab_f(xyz[0] / WHITE[0]);
    let fy = lab_f(xyz[1] / WHITE[1]);
    let fz = lab_f(xyz[2] / WHITE[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Converts a 3-channel sRGB image to Lab with every channel mapped onto `[0, 1]`:
/// `L′ = L/100`, `a′ = (a+128)/255`, `b′ = (b+128)/255`, clamped.
pub fn srgb_to_lab_normalized(img: &PlanarImage) -> Result<LabImage> {
    img.ensure_channels(3)?;
    img.ensure_unit_range()?;
    let mut out = Vec::with_capacity(img.data().len());
    for px in img.data().chunks_exact(3) {
        let [l, a, b] = srgb_pixel_to_lab([px[0], px[1], px[2]]);
        out.push((l / 100.0).clamp(0.0, 1.0));
        out.push(((a + 128.0) / 255.0).clamp(0.0, 1.0));
        out.push(((b + 128.0) / 255.0).clamp(0.0, 1.0));
    }
    LabImage::from_normalized(PlanarImage::new(img.width(), img.height(), 3, out)?)
}
