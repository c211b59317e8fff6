//! Binary Netpbm images: PGM (P5) and PPM (P6), maxval 255 only.

use std::path::Path;

use super::LabelMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved `r, g, b` bytes, row-major.
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::invalid(
                "GrayImage",
                format!("{width}x{height} image cannot hold {} pixels", pixels.len()),
            ));
        }
        Ok(Self { width, height, pixels })
    }
}

pub const KIDNEY_RGB: [u8; 3] = [255, 0, 0];
pub const TUMOR_RGB: [u8; 3] = [0, 0, 255];

/// Grayscale replicated to RGB with kidney painted red and tumor blue.
pub fn overlay(image: &GrayImage, mask: &LabelMap) -> Result<RgbImage> {
    if (image.width, image.height) != (mask.width, mask.height) {
        return Err(Error::shape(
            "overlay",
            format!("image {}x{} vs mask {}x{}", image.width, image.height, mask.width, mask.height),
        ));
    }
    let mut pixels = Vec::with_capacity(image.pixels.len() * 3);
    for (&g, &label) in image.pixels.iter().zip(&mask.labels) {
        match label {
            1 => pixels.extend_from_slice(&KIDNEY_RGB),
            2 => pixels.extend_from_slice(&TUMOR_RGB),
            _ => pixels.extend_from_slice(&[g, g, g]),
        }
    }
    Ok(RgbImage {
        width: image.width,
        height: image.height,
        pixels,
    })
}

fn header(magic: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n255\n").into_bytes()
}

pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = header("P5", image.width, image.height);
    out.extend_from_slice(&image.pixels);
    out
}

pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = header("P6", image.width, image.height);
    out.extend_from_slice(&image.pixels);
    out
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl HeaderReader<'_> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::format(self.format, self.pos, detail)
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(if self.pos >= self.bytes.len() {
                self.err(format!("truncated header, expected {what}"))
            } else {
                self.err(format!("expected decimal {what}"))
            });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(self.format, start, format!("{what} out of range")))
    }
}

/// Parses a P5/P6 header and returns `(width, height, payload offset)`.
fn parse_header(bytes: &[u8], magic: &[u8; 2], format: &'static str) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 {
        return Err(Error::format(format, 0, "truncated magic number"));
    }
    if &bytes[..2] != magic {
        return Err(Error::format(
            format,
            0,
            format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(&bytes[..2]), std::str::from_utf8(magic).unwrap()),
        ));
    }
    let mut r = HeaderReader { bytes, pos: 2, format };
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval_at = r.pos;
    let maxval = r.number("maxval")?;
    if maxval != 255 {
        return Err(Error::format(format, maxval_at, format!("maxval {maxval} unsupported, expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(format, 2, format!("zero extent {width}x{height}")));
    }
    match bytes.get(r.pos) {
        Some(b) if b.is_ascii_whitespace() => Ok((width, height, r.pos + 1)),
        Some(_) => Err(r.err("expected single whitespace before raster")),
        None => Err(r.err("truncated header before raster")),
    }
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let (width, height, offset) = parse_header(bytes, b"P5", "PGM")?;
    let n = width * height;
    if bytes.len() < offset + n {
        return Err(Error::format("PGM", bytes.len(), format!("truncated raster: need {n} bytes from offset {offset}")));
    }
    Ok(GrayImage {
        width,
        height,
        pixels: bytes[offset..offset + n].to_vec(),
    })
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let (width, height, offset) = parse_header(bytes, b"P6", "PPM")?;
    let n = width * height * 3;
    if bytes.len() < offset + n {
        return Err(Error::format("PPM", bytes.len(), format!("truncated raster: need {n} bytes from offset {offset}")));
    }
    Ok(RgbImage {
        width,
        height,
        pixels: bytes[offset..offset + n].to_vec(),
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    decode_pgm(&read_bytes(path.as_ref())?)
}

pub fn write_pgm(path: impl AsRef<Path>, image: &GrayImage) -> Result<()> {
    write_bytes(path.as_ref(), &encode_pgm(image))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    decode_ppm(&read_bytes(path.as_ref())?)
}

pub fn write_ppm(path: impl AsRef<Path>, image: &RgbImage) -> Result<()> {
    write_bytes(path.as_ref(), &encode_ppm(image))
}

/// Writes `image` with `mask` painted over it as a P6 file.
pub fn write_ppm_overlay(path: impl AsRef<Path>, image: &GrayImage, mask: &LabelMap) -> Result<()> {
    write_ppm(path, &overlay(image, mask)?)
}
