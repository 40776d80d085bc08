//! File formats: value-exact JSON, PGM/raw-f32 images, and IDX datasets.
//!
//! Every float written by this crate goes through a 17-significant-digit
//! decimal formatter. 17 digits round-trip any f64 exactly, so documents can
//! be reloaded value-exactly and repeated runs produce byte-identical files.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};

/// Formats an f64 with 17 significant decimal digits (exact round-trip).
pub fn format_f64_17(value: f64) -> String {
    format!("{value:.16e}")
}

struct Sig17Formatter;

impl serde_json::ser::Formatter for Sig17Formatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{}", format_f64_17(value))
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        self.write_f64(writer, value as f64)
    }
}

/// Serializes to JSON with 17-significant-digit floats.
pub fn to_json_17sig<T: Serialize>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, Sig17Formatter);
    value.serialize(&mut ser)?;
    String::from_utf8(out).map_err(|_| Error::Format("serialized JSON was not UTF-8".into()))
}

/// Writes a value as 17-significant-digit JSON followed by a newline.
pub fn write_json_17sig<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = to_json_17sig(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Reads and deserializes a JSON file.
pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes an image as 8-bit binary PGM (P5); values are clamped to [0, 1]
/// and quantized to 0..255.
pub fn write_pgm(path: &Path, image: &Array2<f64>) -> Result<()> {
    let (h, w) = image.dim();
    let mut buf = Vec::with_capacity(32 + h * w);
    write!(buf, "P5\n{w} {h}\n255\n")?;
    for v in image.iter() {
        buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Reads an 8-bit binary PGM (P5) image back to floats in [0, 1].
pub fn read_pgm(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes)? != "P5" {
        return Err(Error::Format("not a binary PGM (P5) file".into()));
    }
    let w: usize = token(&bytes)?
        .parse()
        .map_err(|_| Error::Format("bad PGM width".into()))?;
    let h: usize = token(&bytes)?
        .parse()
        .map_err(|_| Error::Format("bad PGM height".into()))?;
    let maxval: f64 = token(&bytes)?
        .parse()
        .map_err(|_| Error::Format("bad PGM maxval".into()))?;
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + h * w {
        return Err(Error::Format("truncated PGM pixel data".into()));
    }
    let data: Vec<f64> = bytes[pos..pos + h * w]
        .iter()
        .map(|&b| b as f64 / maxval)
        .collect();
    Array2::from_shape_vec((h, w), data).map_err(|_| Error::Format("bad PGM shape".into()))
}

/// Magic bytes of the raw float image format.
pub const RAW_MAGIC: &[u8; 4] = b"MOPT";

/// Writes an image losslessly as little-endian f32 with a 16-byte header:
/// magic "MOPT", u32 height, u32 width, u32 reserved (zero).
pub fn write_raw_f32(path: &Path, image: &Array2<f64>) -> Result<()> {
    let (h, w) = image.dim();
    let mut buf = Vec::with_capacity(16 + 4 * h * w);
    buf.extend_from_slice(RAW_MAGIC);
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for v in image.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Reads the raw f32 image format written by [`write_raw_f32`].
pub fn read_raw_f32(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[0..4] != RAW_MAGIC {
        return Err(Error::Format("missing MOPT magic".into()));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 16 + 4 * h * w {
        return Err(Error::Format(format!(
            "raw image payload is {} bytes, expected {}",
            bytes.len() - 16,
            4 * h * w
        )));
    }
    let data: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Array2::from_shape_vec((h, w), data).map_err(|_| Error::Format("bad raw shape".into()))
}

/// Reads a big-endian IDX image file (magic 0x00000803) into an n × (rows·cols)
/// matrix with pixel values scaled to [0, 1].
pub fn read_idx_images(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return Err(Error::Format("truncated IDX image header".into()));
    }
    let magic = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
    if magic != 0x0000_0803 {
        return Err(Error::Format(format!(
            "IDX image magic {magic:#010x}, expected 0x00000803"
        )));
    }
    let n = u32::from_be_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let rows = u32::from_be_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_be_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + n * rows * cols {
        return Err(Error::Format("IDX image payload size mismatch".into()));
    }
    let data: Vec<f64> = bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    Array2::from_shape_vec((n, rows * cols), data)
        .map_err(|_| Error::Format("bad IDX shape".into()))
}

/// Reads a big-endian IDX label file (magic 0x00000801).
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 {
        return Err(Error::Format("truncated IDX label header".into()));
    }
    let magic = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
    if magic != 0x0000_0801 {
        return Err(Error::Format(format!(
            "IDX label magic {magic:#010x}, expected 0x00000801"
        )));
    }
    let n = u32::from_be_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + n {
        return Err(Error::Format("IDX label payload size mismatch".into()));
    }
    Ok(bytes[8..].to_vec())
}
