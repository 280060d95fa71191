use super::PlanarImage;
use crate::error::{Error, Result};

/// Averages each `factor × factor` block, per channel.
pub fn downsample_box(img: &PlanarImage, factor: usize) -> Result<PlanarImage> {
    if factor == 0 || !img.width().is_multiple_of(factor) || !img.height().is_multiple_of(factor) {
        return Err(Error::InvalidArgument(format!(
            "{}x{} is not divisible by factor {factor}",
            img.width(),
            img.height()
        )));
    }
    let (w, h, ch) = (img.width() / factor, img.height() / factor, img.channels());
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; w * h * ch];
    for oy in 0..h {
        for ox in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += img.get(ox * factor + dx, oy * factor + dy, c);
                    }
                }
                out[(oy * w + ox) * ch + c] = acc * norm;
            }
        }
    }
    PlanarImage::new(w, h, ch, out)
}
