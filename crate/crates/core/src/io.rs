//! PFM images and 8-bit PNG masks.
//!
//! PFM files are written little-endian (scale `-1.0`) with rows stored
//! bottom-to-top, as the format prescribes. Reading accepts either byte order.

use std::fs;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::image::{ImageBuffer, MaskImage};

pub fn encode_pfm(img: &ImageBuffer) -> Result<Vec<u8>> {
    let magic = match img.channels() {
        3 => "PF",
        1 => "Pf",
        c => return Err(CoreError::Shape(format!("PFM stores 1 or 3 channels, not {c}"))),
    };
    let header = format!("{magic}\n{} {}\n-1.0\n", img.width(), img.height());
    let mut out = Vec::with_capacity(header.len() + img.data().len() * 4);
    out.extend_from_slice(header.as_bytes());
    let row_len = img.width() * img.channels();
    for y in (0..img.height()).rev() {
        for v in &img.data()[y * row_len..(y + 1) * row_len] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<ImageBuffer> {
    let err = |m: String| CoreError::format(path, m);
    // Three whitespace-separated header lines: magic, "w h", scale.
    let mut fields: Vec<&str> = Vec::with_capacity(4);
    let mut pos = 0usize;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated PFM header".into()));
        }
        let tok = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| err("non-ASCII PFM header".into()))?;
        fields.push(tok);
        if fields.len() == 1 && tok != "PF" && tok != "Pf" {
            return Err(err(format!("bad PFM magic {tok:?}")));
        }
    }
    if pos >= bytes.len() {
        return Err(err("missing PFM payload".into()));
    }
    // Exactly one whitespace byte separates the scale from the payload.
    pos += 1;
    let channels = if fields[0] == "PF" { 3 } else { 1 };
    let width: usize = fields[1]
        .parse()
        .map_err(|_| err(format!("bad PFM width {:?}", fields[1])))?;
    let height: usize = fields[2]
        .parse()
        .map_err(|_| err(format!("bad PFM height {:?}", fields[2])))?;
    let scale: f32 = fields[3]
        .parse()
        .map_err(|_| err(format!("bad PFM scale {:?}", fields[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(err(format!("bad PFM scale {scale}")));
    }
    let little = scale < 0.0;
    let payload = &bytes[pos..];
    let expected = width * height * channels * 4;
    if payload.len() < expected {
        return Err(err(format!(
            "truncated PFM payload: {} of {expected} bytes",
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(err(format!(
            "PFM payload has {} bytes, header declares {expected} ({channels} channel(s))",
            payload.len()
        )));
    }
    let row_len = width * channels;
    let mut data = vec![0.0f32; row_len * height];
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let file_row = i / row_len;
        let y = height - 1 - file_row;
        data[y * row_len + i % row_len] = v;
    }
    ImageBuffer::from_vec(width, height, channels, data)
}

pub fn write_pfm(path: impl AsRef<Path>, img: &ImageBuffer) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pfm(img)?;
    fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    decode_pfm(&bytes, path)
}

/// Reads a PFM and checks its channel count.
pub fn read_pfm_channels(path: impl AsRef<Path>, channels: usize) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let img = read_pfm(path)?;
    if img.channels() != channels {
        return Err(CoreError::format(
            path,
            format!("expected {channels} channel(s), found {}", img.channels()),
        ));
    }
    Ok(img)
}

pub fn encode_png_mask(mask: &MaskImage) -> Result<Vec<u8>> {
    let pixels: Vec<u8> = mask
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, pixels)
        .ok_or_else(|| CoreError::Shape("mask buffer size".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| CoreError::Invalid(format!("PNG encode: {e}")))?;
    Ok(out.into_inner())
}

pub fn decode_png_mask(bytes: &[u8], path: &Path) -> Result<MaskImage> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| CoreError::format(path, format!("PNG decode: {e}")))?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(CoreError::format(
                path,
                format!("mask must be 8-bit grayscale, found {:?}", other.color()),
            ))
        }
    };
    let (w, h) = gray.dimensions();
    let data = gray.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    MaskImage::from_vec(w as usize, h as usize, data)
}

pub fn write_png_mask(path: impl AsRef<Path>, mask: &MaskImage) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_png_mask(mask)?;
    fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

pub fn read_png_mask(path: impl AsRef<Path>) -> Result<MaskImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    decode_png_mask(&bytes, path)
}

/// Writes an 8-bit sRGB-ish preview (clamped, gamma 2.2) for eyeballing HDR images.
pub fn write_png_preview(path: impl AsRef<Path>, img: &ImageBuffer, exposure: f32) -> Result<()> {
    let path = path.as_ref();
    let to8 = |v: f32| ((v * exposure).clamp(0.0, 1.0).powf(1.0 / 2.2) * 255.0).round() as u8;
    let (w, h) = (img.width() as u32, img.height() as u32);
    let result = match img.channels() {
        1 => image::GrayImage::from_raw(w, h, img.data().iter().map(|&v| to8(v)).collect())
            .map(|g| g.save(path)),
        3 => image::RgbImage::from_raw(w, h, img.data().iter().map(|&v| to8(v)).collect())
            .map(|g| g.save(path)),
        c => return Err(CoreError::Shape(format!("preview of {c}-channel image"))),
    };
    result
        .ok_or_else(|| CoreError::Shape("preview buffer size".into()))?
        .map_err(|e| CoreError::format(path, format!("PNG encode: {e}")))
}
