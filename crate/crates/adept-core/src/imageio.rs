//! 8-bit RGB image I/O: binary PPM (P6) is decoded by hand, PNG through the
//! `image` crate. Format detection sniffs file content, not extensions.

use std::io::Cursor;
use std::path::Path;

use thiserror::Error;

use crate::dct::ImageRgb;

pub type Result<T> = std::result::Result<T, ImageIoError>;

/// Decoder guard against absurd dimensions (fuzz inputs, corrupt headers).
const MAX_DIM: usize = 1 << 15;
const MAX_PIXELS: usize = 1 << 24;

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("unsupported image format (expected PNG or binary PPM)")]
    UnsupportedFormat,
    #[error("ppm: {0}")]
    BadPpm(String),
    #[error("ppm: unsupported maxval {0} (only 255)")]
    UnsupportedMaxval(u64),
    #[error("ppm: pixel data truncated (expected {expected} bytes, found {found})")]
    Truncated { expected: usize, found: usize },
    #[error("png: {0}")]
    BadPng(String),
    #[error("image dimensions {width}x{height} exceed decoder limits")]
    TooLarge { width: usize, height: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Pixels(#[from] crate::dct::DctError),
}

fn check_dims(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(ImageIoError::BadPpm("zero dimension".into()));
    }
    if width > MAX_DIM
        || height > MAX_DIM
        || width.checked_mul(height).is_none_or(|p| p > MAX_PIXELS)
    {
        return Err(ImageIoError::TooLarge { width, height });
    }
    Ok(())
}

struct PpmScanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PpmScanner<'a> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => return,
            }
        }
    }

    fn integer(&mut self, what: &str) -> Result<u64> {
        self.skip_space_and_comments();
        let start = self.pos;
        let mut value: u64 = 0;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add(u64::from(self.bytes[self.pos] - b'0')))
                .ok_or_else(|| ImageIoError::BadPpm(format!("{what} overflows")))?;
            self.pos += 1;
        }
        if self.pos == start {
            return Err(ImageIoError::BadPpm(format!("missing {what}")));
        }
        Ok(value)
    }
}

/// Decode a binary PPM (P6) buffer. Maxval must be 255; a single whitespace
/// byte separates the header from the raw RGB triplets.
pub fn decode_ppm(bytes: &[u8]) -> Result<ImageRgb> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(ImageIoError::BadPpm("missing P6 magic".into()));
    }
    let mut scanner = PpmScanner { bytes, pos: 2 };
    let width = scanner.integer("width")? as usize;
    let height = scanner.integer("height")? as usize;
    let maxval = scanner.integer("maxval")?;
    check_dims(width, height)?;
    if maxval != 255 {
        return Err(ImageIoError::UnsupportedMaxval(maxval));
    }
    // exactly one whitespace byte before the raster
    match bytes.get(scanner.pos) {
        Some(b' ' | b'\t' | b'\r' | b'\n' | 0x0b | 0x0c) => scanner.pos += 1,
        _ => return Err(ImageIoError::BadPpm("missing raster separator".into())),
    }
    let expected = width * height * 3;
    let raster = &bytes[scanner.pos..];
    if raster.len() < expected {
        return Err(ImageIoError::Truncated {
            expected,
            found: raster.len(),
        });
    }
    Ok(ImageRgb::from_bytes(height, width, &raster[..expected])?)
}

fn quantize(img: &ImageRgb) -> Vec<u8> {
    img.pixels()
        .iter()
        .map(|&v| v.round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Encode as binary PPM (P6), rounding float pixels to 8 bits.
pub fn encode_ppm(img: &ImageRgb) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(&quantize(img));
    out
}

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', b'\r', b'\n', 0x1a, b'\n'];

/// Decode a PNG buffer to 8-bit RGB (alpha and palette variants are
/// converted).
pub fn decode_png(bytes: &[u8]) -> Result<ImageRgb> {
    let decoded = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| ImageIoError::BadPng(e.to_string()))?;
    let rgb = decoded.to_rgb8();
    let (width, height) = (rgb.width() as usize, rgb.height() as usize);
    check_dims(width, height)?;
    Ok(ImageRgb::from_bytes(height, width, rgb.as_raw())?)
}

/// Encode as PNG, rounding float pixels to 8 bits.
pub fn encode_png(img: &ImageRgb) -> Result<Vec<u8>> {
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, quantize(img))
        .expect("buffer length matches dimensions");
    let mut out = Vec::new();
    buf.write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png)
        .map_err(|e| ImageIoError::BadPng(e.to_string()))?;
    Ok(out)
}

/// Decode from bytes, detecting the format by signature.
pub fn decode_image(bytes: &[u8]) -> Result<ImageRgb> {
    if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else {
        Err(ImageIoError::UnsupportedFormat)
    }
}

/// Read and decode a PNG or binary-PPM file.
pub fn load_image_file(path: &Path) -> Result<ImageRgb> {
    decode_image(&std::fs::read(path)?)
}

/// Write an image as `.png` or `.ppm`, chosen by the path's extension.
pub fn save_image_file(path: &Path, img: &ImageRgb) -> Result<()> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    let bytes = match ext.as_deref() {
        Some("png") => encode_png(img)?,
        Some("ppm") => encode_ppm(img),
        _ => return Err(ImageIoError::UnsupportedFormat),
    };
    std::fs::write(path, bytes)?;
    Ok(())
}
