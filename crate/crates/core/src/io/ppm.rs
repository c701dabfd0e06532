//! Binary PPM (P6) images.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::Image;

/// Decodes a P6 image into `[0, 1]` floats. Max values up to 65535 are accepted.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Image> {
    let fail = |offset: usize, message: String| Error::Format {
        path: PathBuf::from(path),
        offset: offset as u64,
        message,
    };
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(fail(0, "not a binary PPM (expected P6)".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        let mut saw_space = false;
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => {
                    saw_space = true;
                    pos += 1;
                }
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if !saw_space || start == pos {
            return Err(fail(start, "expected a decimal header field".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fail(start, "header field out of range".into()))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(fail(pos, format!("empty image {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(fail(pos, format!("max value {maxval} outside 1..=65535")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(fail(pos, "expected one whitespace byte before the raster".into()));
    }
    pos += 1;
    let sample = if maxval < 256 { 1 } else { 2 };
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3 * sample))
        .ok_or_else(|| fail(pos, "raster size overflows".into()))?;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(fail(bytes.len(), format!("raster needs {need} bytes, found {}", raster.len())));
    }
    if raster.len() > need {
        return Err(fail(pos + need, "trailing bytes after the raster".into()));
    }
    let max = maxval as f32;
    let data = if sample == 1 {
        raster.iter().map(|&v| v as f32 / max).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / max)
            .collect()
    };
    Image::new(width, height, data)
}

/// Encodes with max value 255, rounding and clamping each channel.
pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}

pub fn write_ppm(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_ppm(image)).map_err(|e| Error::io(path, e))
}
