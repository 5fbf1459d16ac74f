//! Binary Netpbm images: P6 (RGB) and P5 (grayscale), maxval 255 only.

use std::path::Path;

use ras_core::data::RgbImage;

use crate::error::{Error, Result};

/// 8-bit grayscale, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

struct Header {
    width: usize,
    height: usize,
    /// Offset of the first pixel byte.
    data_start: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header, String> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(format!(
            "expected magic {:?}, found {found:?}",
            std::str::from_utf8(magic).unwrap()
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, name) in ["width", "height", "maxval"].iter().enumerate() {
        // whitespace and comments may separate header fields
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
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
        if start == pos {
            return Err(format!("header byte {start}: expected {name}"));
        }
        fields[k] = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| format!("header byte {start}: {name} out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(format!("header byte {pos}: expected whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format!("maxval {maxval} is not supported (only 255)"));
    }
    if width == 0 || height == 0 {
        return Err(format!("empty image {width}x{height}"));
    }
    Ok(Header {
        width,
        height,
        data_start: pos,
    })
}

fn pixel_data(bytes: &[u8], h: &Header, channels: usize) -> Result<Vec<u8>, String> {
    let expected = h.width * h.height * channels;
    let data = &bytes[h.data_start..];
    if data.len() < expected {
        return Err(format!(
            "{}x{} image needs {expected} pixel bytes, file has {}",
            h.width,
            h.height,
            data.len()
        ));
    }
    Ok(data[..expected].to_vec())
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage, String> {
    let h = parse_header(bytes, b"P6")?;
    let pixels = pixel_data(bytes, &h, 3)?;
    RgbImage::new(h.width, h.height, pixels).map_err(|e| e.to_string())
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage, String> {
    let h = parse_header(bytes, b"P5")?;
    let pixels = pixel_data(bytes, &h, 1)?;
    Ok(GrayImage {
        width: h.width,
        height: h.height,
        pixels,
    })
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(Error::io(path))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&read(path)?).map_err(|msg| Error::Pnm {
        path: path.into(),
        msg,
    })
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    decode_pgm(&read(path)?).map_err(|msg| Error::Pnm {
        path: path.into(),
        msg,
    })
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    std::fs::write(path, encode_ppm(img)).map_err(Error::io(path))
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    std::fs::write(path, encode_pgm(img)).map_err(Error::io(path))
}

/// Maps `[0, 1]` to bytes, rounding to nearest.
pub fn to_gray_bytes(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values
        .into_iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}
