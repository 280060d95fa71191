use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use super::{BinaryMask, PlanarImage};
use crate::error::{Error, Result};

/// tEXt keyword recording mask polarity.
pub const MASK_POLARITY_KEY: &str = "mask-polarity";
pub const MASK_POLARITY_VALUE: &str = "255=trusted,0=untrusted";

/// Reads an 8- or 16-bit grayscale or RGB PNG, scaling samples to `[0, 1]`.
pub fn load_png(path: impl AsRef<Path>) -> Result<PlanarImage> {
    load_png_with_text(path).map(|(img, _)| img)
}

/// Like [`load_png`], also returning the `tEXt` chunks as `(keyword, text)`.
pub fn load_png_with_text(path: impl AsRef<Path>) -> Result<(PlanarImage, Vec<(String, String)>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(Transformations::IDENTITY);
    let mut reader = decoder.read_info()?;
    let (color, depth) = {
        let info = reader.info();
        (info.color_type, info.bit_depth)
    };
    let channels = match color {
        ColorType::Grayscale => 1,
        ColorType::Rgb => 3,
        other => return Err(Error::UnsupportedPng(format!("color type {other:?}"))),
    };
    if !matches!(depth, BitDepth::Eight | BitDepth::Sixteen) {
        return Err(Error::UnsupportedPng(format!("bit depth {depth:?}")));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::UnsupportedPng("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf)?;
    buf.truncate(frame.buffer_size());
    reader.finish()?;

    let data: Vec<f64> = match depth {
        BitDepth::Eight => buf.iter().map(|&b| b as f64 / 255.0).collect(),
        _ => buf
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
            .collect(),
    };
    let text = reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .map(|t| (t.keyword.clone(), t.text.clone()))
        .collect();
    let img = PlanarImage::new(frame.width as usize, frame.height as usize, channels, data)?;
    Ok((img, text))
}

/// Writes an 8-bit PNG. Samples are clamped to `[0, 1]` and rounded.
pub fn save_png(img: &PlanarImage, path: impl AsRef<Path>) -> Result<()> {
    save_png_with_text(img, path, 8, &[])
}

/// Writes an 8- or 16-bit PNG with optional `tEXt` chunks.
pub fn save_png_with_text(
    img: &PlanarImage,
    path: impl AsRef<Path>,
    bits: u8,
    text: &[(&str, &str)],
) -> Result<()> {
    let path = path.as_ref();
    let (width, height) = (
        u32::try_from(img.width()).map_err(|_| Error::InvalidImage("width exceeds u32".into()))?,
        u32::try_from(img.height()).map_err(|_| Error::InvalidImage("height exceeds u32".into()))?,
    );
    let color = match img.channels() {
        1 => ColorType::Grayscale,
        3 => ColorType::Rgb,
        c => return Err(Error::UnsupportedPng(format!("{c} channels"))),
    };
    let (depth, bytes): (BitDepth, Vec<u8>) = match bits {
        8 => (
            BitDepth::Eight,
            img.data()
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect(),
        ),
        16 => (
            BitDepth::Sixteen,
            img.data()
                .iter()
                .flat_map(|&v| ((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes())
                .collect(),
        ),
        other => return Err(Error::UnsupportedPng(format!("bit depth {other}"))),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width, height);
    encoder.set_color(color);
    encoder.set_depth(depth);
    for (k, v) in text {
        encoder.add_text_chunk(k.to_string(), v.to_string())?;
    }
    let mut writer = encoder.write_header()?;
    writer.write_image_data(&bytes)?;
    writer.finish()?;
    Ok(())
}

/// Writes a mask as 8-bit grayscale: 255 = trusted, 0 = untrusted.
pub fn save_mask_png(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let data = mask
        .bits()
        .iter()
        .map(|&b| if b { 1.0 } else { 0.0 })
        .collect();
    let img = PlanarImage::new(mask.width(), mask.height(), 1, data)?;
    save_png_with_text(&img, path, 8, &[(MASK_POLARITY_KEY, MASK_POLARITY_VALUE)])
}

/// Reads a mask written by [`save_mask_png`]. Only 0 and 255 are accepted.
pub fn load_mask_png(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let (img, text) = load_png_with_text(path)?;
    img.ensure_channels(1)?;
    if let Some((_, v)) = text.iter().find(|(k, _)| k == MASK_POLARITY_KEY) {
        if v != MASK_POLARITY_VALUE {
            return Err(Error::UnsupportedPng(format!("unknown mask polarity {v:?}")));
        }
    }
    let bits = img
        .data()
        .iter()
        .map(|&v| {
            if v == 1.0 {
                Ok(true)
            } else if v == 0.0 {
                Ok(false)
            } else {
                Err(Error::UnsupportedPng(format!("mask sample {v} is neither 0 nor 255")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    BinaryMask::new(img.width(), img.height(), bits)
}
