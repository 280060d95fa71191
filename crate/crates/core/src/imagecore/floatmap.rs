//! CFM1 float-map files.
//!
//! Layout: `b"CFM1"`, then `width`, `height`, `channels` as little-endian
//! `u32`, then `width * height * channels` little-endian `f32` samples,
//! row-major and channel-interleaved.

use std::fs;
use std::path::Path;

use super::PlanarImage;
use crate::error::{Error, Result};

pub const FLOATMAP_MAGIC: &[u8; 4] = b"CFM1";
const HEADER_LEN: usize = 16;

/// Serializes a raster. Samples are narrowed to `f32`.
pub fn encode_floatmap(img: &PlanarImage) -> Result<Vec<u8>> {
    let dim = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::Floatmap(format!("{what} {v} exceeds u32")))
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * img.data().len());
    out.extend_from_slice(FLOATMAP_MAGIC);
    out.extend_from_slice(&dim(img.width(), "width")?.to_le_bytes());
    out.extend_from_slice(&dim(img.height(), "height")?.to_le_bytes());
    out.extend_from_slice(&dim(img.channels(), "channels")?.to_le_bytes());
    for &v in img.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_floatmap(bytes: &[u8]) -> Result<PlanarImage> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Floatmap("truncated header".into()));
    }
    if &bytes[..4] != FLOATMAP_MAGIC {
        return Err(Error::Floatmap("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (width, height, channels) = (word(4), word(8), word(12));
    let count = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(channels))
        .and_then(|n| n.checked_mul(4).map(|b| (n, b)));
    let (count, payload_len) =
        count.ok_or_else(|| Error::Floatmap("dimension overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != payload_len {
        return Err(Error::Floatmap(format!(
            "payload has {} bytes, header implies {payload_len}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect::<Vec<_>>();
    debug_assert_eq!(data.len(), count);
    PlanarImage::new(width, height, channels, data)
        .map_err(|e| Error::Floatmap(e.to_string()))
}

pub fn save_floatmap(img: &PlanarImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_floatmap(img)?).map_err(|e| Error::io(path, e))
}

pub fn load_floatmap(path: impl AsRef<Path>) -> Result<PlanarImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_floatmap(&bytes)
}
