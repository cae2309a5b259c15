//! Frequency-domain view maps: YCbCr conversion, patch partition, per-patch
//! 2-D DCT, and assembly into a channels-first coefficient volume.
//!
//! The transform uses the JPEG normalization, `(2/N)·α_u·α_v` with
//! `α_0 = 1/√2` and `α_{u>0} = 1` (for N=8 the familiar `1/4` prefactor).
//! That choice makes the transform orthonormal, so Parseval holds with no
//! compensating factor and the inverse is the transpose.

use std::fmt::Write as _;

use thiserror::Error;

use crate::tensor::{matmul_nn, matmul_nt, matmul_tn};

pub type Result<T> = std::result::Result<T, DctError>;

#[derive(Debug, Error)]
pub enum DctError {
    #[error("pixel value {value} outside [0, 255]")]
    PixelOutOfRange { value: f64 },
    #[error("dimension {dim} is not a positive multiple of patch size {patch}")]
    NonDivisible { dim: usize, patch: usize },
    #[error("pixel buffer length {len} does not match {height}x{width}x3")]
    BadPixelLength {
        len: usize,
        height: usize,
        width: usize,
    },
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },
    #[error("patch buffer length {len}, expected {expected}")]
    BadPatchLength { len: usize, expected: usize },
    #[error("fraction {value} outside (0, 1]")]
    FractionOutOfRange { value: f64 },
    #[error("malformed header: {reason}")]
    BadHeader { reason: String },
    #[error("coefficient blob length {len} does not match header ({expected} values)")]
    BlobLengthMismatch { len: usize, expected: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Interleaved RGB image with float pixel values in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl ImageRgb {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<ImageRgb> {
        if pixels.len() != height * width * 3 {
            return Err(DctError::BadPixelLength {
                len: pixels.len(),
                height,
                width,
            });
        }
        for &v in &pixels {
            if !v.is_finite() {
                return Err(DctError::NonFinite { context: "ImageRgb" });
            }
            if !(0.0..=255.0).contains(&v) {
                return Err(DctError::PixelOutOfRange { value: v });
            }
        }
        Ok(ImageRgb {
            height,
            width,
            pixels,
        })
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<ImageRgb> {
        ImageRgb::new(height, width, bytes.iter().map(|&b| f64::from(b)).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Interleaved RGB, row-major.
    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let base = (y * self.width + x) * 3;
        [self.pixels[base], self.pixels[base + 1], self.pixels[base + 2]]
    }
}

/// Planar YCbCr image, full-range BT.601.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageYCbCr {
    pub height: usize,
    pub width: usize,
    pub y: Vec<f64>,
    pub cb: Vec<f64>,
    pub cr: Vec<f64>,
}

impl ImageYCbCr {
    pub fn plane(&self, channel: usize) -> &[f64] {
        match channel {
            0 => &self.y,
            1 => &self.cb,
            2 => &self.cr,
            _ => panic!("channel index {channel} out of range"),
        }
    }
}

/// Full-range BT.601 conversion, channels clamped to `[0, 255]`.
pub fn rgb_to_ycbcr(img: &ImageRgb) -> ImageYCbCr {
    let n = img.height * img.width;
    let mut y = Vec::with_capacity(n);
    let mut cb = Vec::with_capacity(n);
    let mut cr = Vec::with_capacity(n);
    for px in img.pixels.chunks_exact(3) {
        let (r, g, b) = (px[0], px[1], px[2]);
        y.push((0.299 * r + 0.587 * g + 0.114 * b).clamp(0.0, 255.0));
        cb.push((128.0 - 0.168_736 * r - 0.331_264 * g + 0.5 * b).clamp(0.0, 255.0));
        cr.push((128.0 + 0.5 * r - 0.418_688 * g - 0.081_312 * b).clamp(0.0, 255.0));
    }
    ImageYCbCr {
        height: img.height,
        width: img.width,
        y,
        cb,
        cr,
    }
}

/// Non-overlapping square tiles of each channel, row-major scan order.
/// `channels[c]` holds patch `p` at `p*patch*patch..`.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    pub patch: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: Vec<Vec<f64>>,
}

fn check_divisible(height: usize, width: usize, patch: usize) -> Result<(usize, usize)> {
    if patch == 0 || height == 0 || height % patch != 0 {
        return Err(DctError::NonDivisible {
            dim: height,
            patch,
        });
    }
    if width == 0 || width % patch != 0 {
        return Err(DctError::NonDivisible { dim: width, patch });
    }
    Ok((height / patch, width / patch))
}

fn extract_patch(plane: &[f64], width: usize, patch: usize, gy: usize, gx: usize, out: &mut [f64]) {
    for py in 0..patch {
        let src = (gy * patch + py) * width + gx * patch;
        out[py * patch..(py + 1) * patch].copy_from_slice(&plane[src..src + patch]);
    }
}

pub fn partition_patches(img: &ImageYCbCr, patch: usize) -> Result<PatchGrid> {
    let (grid_h, grid_w) = check_divisible(img.height, img.width, patch)?;
    let nn = patch * patch;
    let mut channels = Vec::with_capacity(3);
    for c in 0..3 {
        let plane = img.plane(c);
        let mut tiles = vec![0.0; grid_h * grid_w * nn];
        for gy in 0..grid_h {
            for gx in 0..grid_w {
                let p = gy * grid_w + gx;
                extract_patch(plane, img.width, patch, gy, gx, &mut tiles[p * nn..(p + 1) * nn]);
            }
        }
        channels.push(tiles);
    }
    Ok(PatchGrid {
        patch,
        grid_h,
        grid_w,
        channels,
    })
}

/// Reassemble one channel from its tiles; inverse of [`partition_patches`].
pub fn assemble_patches(grid: &PatchGrid, channel: usize) -> Vec<f64> {
    let n = grid.patch;
    let (h, w) = (grid.grid_h * n, grid.grid_w * n);
    let mut plane = vec![0.0; h * w];
    let tiles = &grid.channels[channel];
    for gy in 0..grid.grid_h {
        for gx in 0..grid.grid_w {
            let p = gy * grid.grid_w + gx;
            for py in 0..n {
                let dst = (gy * n + py) * w + gx * n;
                plane[dst..dst + n].copy_from_slice(&tiles[p * n * n + py * n..p * n * n + (py + 1) * n]);
            }
        }
    }
    plane
}

/// Precomputed orthonormal DCT-II basis for N×N patches.
pub struct Dct2 {
    n: usize,
    /// basis[u*n + x] = α'_u · cos((2x+1)uπ / 2N), α'_0 = √(1/N), α'_u = √(2/N)
    basis: Vec<f64>,
}

impl Dct2 {
    pub fn new(n: usize) -> Dct2 {
        assert!(n > 0, "patch size must be positive");
        let mut basis = vec![0.0; n * n];
        for u in 0..n {
            let alpha = if u == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            };
            for x in 0..n {
                basis[u * n + x] =
                    alpha * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / (2.0 * n as f64)).cos();
            }
        }
        Dct2 { n, basis }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    /// T = C · P · Cᵀ
    pub fn forward(&self, patch: &[f64]) -> Result<Vec<f64>> {
        self.check(patch, "dct input")?;
        let n = self.n;
        let tmp = matmul_nn(&self.basis, patch, n, n, n);
        Ok(matmul_nt(&tmp, &self.basis, n, n, n))
    }

    /// P = Cᵀ · T · C
    pub fn inverse(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        self.check(coeffs, "idct input")?;
        let n = self.n;
        let tmp = matmul_tn(&self.basis, coeffs, n, n, n);
        Ok(matmul_nn(&tmp, &self.basis, n, n, n))
    }

    fn check(&self, buf: &[f64], context: &'static str) -> Result<()> {
        if buf.len() != self.n * self.n {
            return Err(DctError::BadPatchLength {
                len: buf.len(),
                expected: self.n * self.n,
            });
        }
        if buf.iter().any(|v| !v.is_finite()) {
            return Err(DctError::NonFinite { context });
        }
        Ok(())
    }
}

/// One-off forward transform of a square patch.
pub fn dct2d_patch(patch: &[f64], n: usize) -> Result<Vec<f64>> {
    Dct2::new(n).forward(patch)
}

/// One-off inverse transform of a square coefficient block.
pub fn idct2d_patch(coeffs: &[f64], n: usize) -> Result<Vec<f64>> {
    Dct2::new(n).inverse(coeffs)
}

/// Channels-first DCT coefficient volume: `3·N²` frequency channels on the
/// patch grid. Channel `k = c·N² + u·N + v` (c: 0=Y, 1=Cb, 2=Cr).
#[derive(Debug, Clone, PartialEq)]
pub struct DctMap {
    pub patch: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// data[k * grid_h * grid_w + gy * grid_w + gx]
    pub data: Vec<f64>,
}

impl DctMap {
    pub fn channels(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn at(&self, k: usize, gy: usize, gx: usize) -> f64 {
        self.data[k * self.cells() + gy * self.grid_w + gx]
    }

    /// The 3·N² coefficient vector of one grid cell (Y block, Cb block, Cr
    /// block, each row-major).
    pub fn patch_vector(&self, gy: usize, gx: usize) -> Vec<f64> {
        let cells = self.cells();
        let idx = gy * self.grid_w + gx;
        (0..self.channels()).map(|k| self.data[k * cells + idx]).collect()
    }
}

/// Thread count for per-patch parallel work: `ADEPT_THREADS`, default 1.
pub fn configured_threads() -> usize {
    std::env::var("ADEPT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

pub fn build_dct_map(img: &ImageRgb, patch: usize) -> Result<DctMap> {
    build_dct_map_with_threads(img, patch, configured_threads())
}

/// Like [`build_dct_map`] with an explicit thread cap. The output is
/// bitwise identical for any thread count: patches are independent and each
/// writes a disjoint slice.
pub fn build_dct_map_with_threads(img: &ImageRgb, patch: usize, threads: usize) -> Result<DctMap> {
    let (grid_h, grid_w) = check_divisible(img.height, img.width, patch)?;
    let ycc = rgb_to_ycbcr(img);
    let dct = Dct2::new(patch);
    let nn = patch * patch;
    let cells = grid_h * grid_w;
    let stride = 3 * nn;

    // patch-major staging buffer: per cell, Y | Cb | Cr coefficient blocks
    let mut staged = vec![0.0; cells * stride];
    let compute_cell = |p: usize, out: &mut [f64], scratch: &mut Vec<f64>| -> Result<()> {
        let (gy, gx) = (p / grid_w, p % grid_w);
        for c in 0..3 {
            scratch.resize(nn, 0.0);
            extract_patch(ycc.plane(c), img.width, patch, gy, gx, scratch);
            let coeffs = dct.forward(scratch)?;
            out[c * nn..(c + 1) * nn].copy_from_slice(&coeffs);
        }
        Ok(())
    };

    let threads = threads.max(1).min(cells.max(1));
    if threads <= 1 {
        let mut scratch = Vec::new();
        for p in 0..cells {
            compute_cell(p, &mut staged[p * stride..(p + 1) * stride], &mut scratch)?;
        }
    } else {
        let chunk = cells.div_ceil(threads);
        let results: Vec<Result<()>> = std::thread::scope(|scope| {
            let handles: Vec<_> = staged
                .chunks_mut(chunk * stride)
                .enumerate()
                .map(|(ci, buf)| {
                    let compute_cell = &compute_cell;
                    scope.spawn(move || {
                        let mut scratch = Vec::new();
                        for (local, out) in buf.chunks_mut(stride).enumerate() {
                            compute_cell(ci * chunk + local, out, &mut scratch)?;
                        }
                        Ok(())
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        for r in results {
            r?;
        }
    }

    // scatter to channels-first layout
    let mut data = vec![0.0; stride * cells];
    for p in 0..cells {
        for k in 0..stride {
            data[k * cells + p] = staged[p * stride + k];
        }
    }
    Ok(DctMap {
        patch,
        grid_h,
        grid_w,
        data,
    })
}

/// Inverse of [`build_dct_map`]: reconstruct the three YCbCr planes.
pub fn invert_dct_map(map: &DctMap) -> Result<ImageYCbCr> {
    let n = map.patch;
    let nn = n * n;
    let dct = Dct2::new(n);
    let (h, w) = (map.grid_h * n, map.grid_w * n);
    let mut planes = vec![vec![0.0; h * w]; 3];
    let cells = map.cells();
    for gy in 0..map.grid_h {
        for gx in 0..map.grid_w {
            let idx = gy * map.grid_w + gx;
            for (c, plane) in planes.iter_mut().enumerate() {
                let coeffs: Vec<f64> = (0..nn).map(|j| map.data[(c * nn + j) * cells + idx]).collect();
                let pixels = dct.inverse(&coeffs)?;
                for py in 0..n {
                    let dst = (gy * n + py) * w + gx * n;
                    plane[dst..dst + n].copy_from_slice(&pixels[py * n..(py + 1) * n]);
                }
            }
        }
    }
    let mut iter = planes.into_iter();
    Ok(ImageYCbCr {
        height: h,
        width: w,
        y: iter.next().unwrap(),
        cb: iter.next().unwrap(),
        cr: iter.next().unwrap(),
    })
}

/// JPEG-style zigzag scan order for an N×N block: indices into the row-major
/// block, lowest frequencies first.
pub fn zigzag_order(n: usize) -> Vec<usize> {
    let mut order = Vec::with_capacity(n * n);
    for s in 0..=(2 * n).saturating_sub(2) {
        let lo = s.saturating_sub(n - 1);
        let hi = s.min(n - 1);
        if s % 2 == 0 {
            // even anti-diagonal: walk up-right (row decreasing)
            for u in (lo..=hi).rev() {
                order.push(u * n + (s - u));
            }
        } else {
            for u in lo..=hi {
                order.push(u * n + (s - u));
            }
        }
    }
    order
}

/// Share of squared-coefficient energy in the lowest-frequency
/// `ceil(fraction·N²)` zigzag slots, per color channel, averaged over all
/// (cell, channel) pairs. Zero-energy cells count as fully compacted.
///
/// Energy is measured after removing each frequency channel's mean over the
/// grid: a constant offset carried by every patch alike (the DC bias of
/// unsigned pixel encodings) says nothing about where image *structure*
/// lives, and would otherwise drown the statistic — white noise in [0, 255]
/// would score ~0.9 instead of its structureless baseline, the kept
/// fraction itself.
pub fn energy_compaction_stat(map: &DctMap, fraction: f64) -> Result<f64> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DctError::FractionOutOfRange { value: fraction });
    }
    let nn = map.patch * map.patch;
    let keep = ((fraction * nn as f64).ceil() as usize).min(nn);
    let zigzag = zigzag_order(map.patch);
    let cells = map.cells();
    let channel_means: Vec<f64> = (0..3 * nn)
        .map(|k| map.data[k * cells..(k + 1) * cells].iter().sum::<f64>() / cells as f64)
        .collect();
    let mut total_ratio = 0.0;
    let mut count = 0usize;
    for idx in 0..cells {
        for c in 0..3 {
            let mut low = 0.0;
            let mut total = 0.0;
            for (rank, &slot) in zigzag.iter().enumerate() {
                let k = c * nn + slot;
                let v = map.data[k * cells + idx] - channel_means[k];
                let e = v * v;
                total += e;
                if rank < keep {
                    low += e;
                }
            }
            total_ratio += if total == 0.0 { 1.0 } else { low / total };
            count += 1;
        }
    }
    Ok(total_ratio / count as f64)
}

/// Header describing a serialized coefficient volume.
#[derive(Debug, Clone, PartialEq)]
pub struct DctHeader {
    pub channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch: usize,
}

impl DctHeader {
    pub fn for_map(map: &DctMap) -> DctHeader {
        DctHeader {
            channels: map.channels(),
            grid_h: map.grid_h,
            grid_w: map.grid_w,
            patch: map.patch,
        }
    }

    pub fn expected_values(&self) -> usize {
        self.channels * self.grid_h * self.grid_w
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dctmap v1");
        let _ = writeln!(s, "channels {}", self.channels);
        let _ = writeln!(s, "grid {} {}", self.grid_h, self.grid_w);
        let _ = writeln!(s, "patch {}", self.patch);
        let _ = writeln!(s, "order Y Cb Cr");
        s
    }
}

/// Parse the text header that accompanies a coefficient blob.
pub fn parse_dct_header(text: &str) -> Result<DctHeader> {
    let bad = |reason: &str| DctError::BadHeader {
        reason: reason.to_string(),
    };
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("dctmap v1") {
        return Err(bad("missing 'dctmap v1' magic line"));
    }
    let mut channels = None;
    let mut grid = None;
    let mut patch = None;
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("channels") => {
                let v: usize = parts
                    .next()
                    .ok_or_else(|| bad("channels: missing value"))?
                    .parse()
                    .map_err(|_| bad("channels: not an integer"))?;
                channels = Some(v);
            }
            Some("grid") => {
                let h: usize = parts
                    .next()
                    .ok_or_else(|| bad("grid: missing height"))?
                    .parse()
                    .map_err(|_| bad("grid: height not an integer"))?;
                let w: usize = parts
                    .next()
                    .ok_or_else(|| bad("grid: missing width"))?
                    .parse()
                    .map_err(|_| bad("grid: width not an integer"))?;
                grid = Some((h, w));
            }
            Some("patch") => {
                let v: usize = parts
                    .next()
                    .ok_or_else(|| bad("patch: missing value"))?
                    .parse()
                    .map_err(|_| bad("patch: not an integer"))?;
                patch = Some(v);
            }
            Some("order") => {
                let order: Vec<&str> = parts.collect();
                if order != ["Y", "Cb", "Cr"] {
                    return Err(bad("order: expected 'Y Cb Cr'"));
                }
                continue;
            }
            Some(other) => return Err(bad(&format!("unknown field '{other}'"))),
            None => {}
        }
        if parts.next().is_some() {
            return Err(bad("trailing tokens on line"));
        }
    }
    let channels = channels.ok_or_else(|| bad("missing 'channels'"))?;
    let (grid_h, grid_w) = grid.ok_or_else(|| bad("missing 'grid'"))?;
    let patch = patch.ok_or_else(|| bad("missing 'patch'"))?;
    if patch == 0 || grid_h == 0 || grid_w == 0 {
        return Err(bad("zero dimension"));
    }
    if patch.checked_mul(patch).and_then(|v| v.checked_mul(3)) != Some(channels) {
        return Err(bad("channels must equal 3*patch*patch"));
    }
    let header = DctHeader {
        channels,
        grid_h,
        grid_w,
        patch,
    };
    if header
        .channels
        .checked_mul(header.grid_h)
        .and_then(|v| v.checked_mul(header.grid_w))
        .is_none()
    {
        return Err(bad("dimensions overflow"));
    }
    Ok(header)
}

/// Write `<stem>.f64` (little-endian float64 blob) and `<stem>.hdr` (text).
pub fn write_dct_blob(map: &DctMap, stem: &std::path::Path) -> Result<()> {
    let header = DctHeader::for_map(map);
    let mut bytes = Vec::with_capacity(map.data.len() * 8);
    for v in &map.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(stem.with_extension("f64"), bytes)?;
    std::fs::write(stem.with_extension("hdr"), header.to_text())?;
    Ok(())
}

/// Read a coefficient volume written by [`write_dct_blob`].
pub fn read_dct_blob(stem: &std::path::Path) -> Result<DctMap> {
    let header = parse_dct_header(&std::fs::read_to_string(stem.with_extension("hdr"))?)?;
    let bytes = std::fs::read(stem.with_extension("f64"))?;
    decode_dct_blob(&header, &bytes)
}

/// Decode a raw little-endian float64 blob against its header.
pub fn decode_dct_blob(header: &DctHeader, bytes: &[u8]) -> Result<DctMap> {
    if bytes.len() % 8 != 0 || bytes.len() / 8 != header.expected_values() {
        return Err(DctError::BlobLengthMismatch {
            len: bytes.len(),
            expected: header.expected_values(),
        });
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok(DctMap {
        patch: header.patch,
        grid_h: header.grid_h,
        grid_w: header.grid_w,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn solid_image(h: usize, w: usize, rgb: [f64; 3]) -> ImageRgb {
        let mut pixels = Vec::with_capacity(h * w * 3);
        for _ in 0..h * w {
            pixels.extend_from_slice(&rgb);
        }
        ImageRgb::new(h, w, pixels).unwrap()
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageRgb {
        let pixels: Vec<f64> = (0..h * w * 3).map(|_| rng.gen_range(0.0..=255.0)).collect();
        ImageRgb::new(h, w, pixels).unwrap()
    }

    /// Literal double-loop evaluation of the (2/N)·α_u·α_v transform.
    fn brute_force_dct(patch: &[f64], n: usize) -> Vec<f64> {
        let alpha = |u: usize| if u == 0 { 1.0 / 2.0_f64.sqrt() } else { 1.0 };
        let mut out = vec![0.0; n * n];
        for u in 0..n {
            for v in 0..n {
                let mut acc = 0.0;
                for x in 0..n {
                    for y in 0..n {
                        acc += patch[x * n + y]
                            * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI
                                / (2.0 * n as f64))
                                .cos()
                            * ((2 * y + 1) as f64 * v as f64 * std::f64::consts::PI
                                / (2.0 * n as f64))
                                .cos();
                    }
                }
                out[u * n + v] = (2.0 / n as f64) * alpha(u) * alpha(v) * acc;
            }
        }
        out
    }

    #[test]
    fn ycbcr_known_colors() {
        let img = solid_image(1, 3, [255.0, 255.0, 255.0]);
        let ycc = rgb_to_ycbcr(&img);
        assert!((ycc.y[0] - 255.0).abs() < 1e-9);
        assert!((ycc.cb[0] - 128.0).abs() < 1e-9);
        assert!((ycc.cr[0] - 128.0).abs() < 1e-9);

        let black = rgb_to_ycbcr(&solid_image(1, 1, [0.0, 0.0, 0.0]));
        assert_eq!(black.y[0], 0.0);
        assert_eq!(black.cb[0], 128.0);
        assert_eq!(black.cr[0], 128.0);

        // pure red: Cr saturates and clamps
        let red = rgb_to_ycbcr(&solid_image(1, 1, [255.0, 0.0, 0.0]));
        assert!((red.y[0] - 76.245).abs() < 1e-3);
        assert!((red.cb[0] - 84.972).abs() < 1e-3);
        assert_eq!(red.cr[0], 255.0);
    }

    #[test]
    fn image_rejects_out_of_range() {
        assert!(matches!(
            ImageRgb::new(1, 1, vec![0.0, -1.0, 0.0]),
            Err(DctError::PixelOutOfRange { .. })
        ));
        assert!(matches!(
            ImageRgb::new(1, 1, vec![0.0, 256.0, 0.0]),
            Err(DctError::PixelOutOfRange { .. })
        ));
        assert!(ImageRgb::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn partition_counts_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = rgb_to_ycbcr(&random_image(&mut rng, 16, 16));
        let grid = partition_patches(&img, 8).unwrap();
        assert_eq!((grid.grid_h, grid.grid_w), (2, 2));
        assert_eq!(grid.channels[0].len(), 4 * 64);

        let single = rgb_to_ycbcr(&random_image(&mut rng, 8, 8));
        let one = partition_patches(&single, 8).unwrap();
        assert_eq!(one.channels[0], single.y);
    }

    #[test]
    fn partition_reassembles_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = rgb_to_ycbcr(&random_image(&mut rng, 24, 16));
        let grid = partition_patches(&img, 8).unwrap();
        for c in 0..3 {
            assert_eq!(assemble_patches(&grid, c), img.plane(c).to_vec());
        }
    }

    #[test]
    fn partition_rejects_non_divisible() {
        let img = rgb_to_ycbcr(&solid_image(10, 16, [1.0, 2.0, 3.0]));
        assert!(matches!(
            partition_patches(&img, 8),
            Err(DctError::NonDivisible { dim: 10, patch: 8 })
        ));
    }

    #[test]
    fn constant_patch_is_dc_only() {
        let coeffs = dct2d_patch(&[1.0; 64], 8).unwrap();
        assert!((coeffs[0] - 8.0).abs() < 1e-12);
        for &c in &coeffs[1..] {
            assert!(c.abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_basis_maps_to_single_coefficient() {
        let n = 8;
        // pixel-domain copy of the (u=1, v=0) basis function
        let mut patch = vec![0.0; n * n];
        for x in 0..n {
            for y in 0..n {
                patch[x * n + y] =
                    ((2 * x + 1) as f64 * std::f64::consts::PI / (2.0 * n as f64)).cos();
            }
        }
        let coeffs = dct2d_patch(&patch, n).unwrap();
        for u in 0..n {
            for v in 0..n {
                let c = coeffs[u * n + v];
                if (u, v) == (1, 0) {
                    assert!(c.abs() > 1.0, "expected dominant coefficient, got {c}");
                } else {
                    assert!(c.abs() < 1e-10, "leak at ({u},{v}): {c}");
                }
            }
        }
    }

    #[test]
    fn matches_brute_force_reference() {
        for (seed, n) in [(1u64, 4usize), (2, 8), (3, 8), (4, 16)] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let patch: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-255.0..255.0)).collect();
            let fast = dct2d_patch(&patch, n).unwrap();
            let slow = brute_force_dct(&patch, n);
            for (f, s) in fast.iter().zip(&slow) {
                assert!((f - s).abs() < 1e-10, "mismatch: {f} vs {s}");
            }
        }
    }

    #[test]
    fn roundtrip_and_dc_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let patch: Vec<f64> = (0..64).map(|_| rng.gen_range(-100.0..100.0)).collect();
        let back = idct2d_patch(&dct2d_patch(&patch, 8).unwrap(), 8).unwrap();
        for (a, b) in patch.iter().zip(&back) {
            assert!((a - b).abs() < 1e-6);
        }

        let mut dc_only = vec![0.0; 64];
        dc_only[0] = 16.0;
        let flat = idct2d_patch(&dc_only, 8).unwrap();
        for &p in &flat {
            assert!((p - 2.0).abs() < 1e-12);
        }
        assert!(idct2d_patch(&[0.0; 64], 8).unwrap().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn transform_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let p: Vec<f64> = (0..64).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let q: Vec<f64> = (0..64).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let (a, b) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let mixed: Vec<f64> = p.iter().zip(&q).map(|(p, q)| a * p + b * q).collect();
            let lhs = dct2d_patch(&mixed, 8).unwrap();
            let tp = dct2d_patch(&p, 8).unwrap();
            let tq = dct2d_patch(&q, 8).unwrap();
            for i in 0..64 {
                assert!((lhs[i] - (a * tp[i] + b * tq[i])).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn parseval_energy_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let p: Vec<f64> = (0..64).map(|_| rng.gen_range(-255.0..255.0)).collect();
            let t = dct2d_patch(&p, 8).unwrap();
            let ep: f64 = p.iter().map(|v| v * v).sum();
            let et: f64 = t.iter().map(|v| v * v).sum();
            assert!((ep - et).abs() < 1e-8 * ep.max(1.0), "{ep} vs {et}");
        }
    }

    #[test]
    fn gray_image_map_is_dc_only() {
        let img = solid_image(8, 8, [128.0, 128.0, 128.0]);
        let map = build_dct_map(&img, 8).unwrap();
        assert_eq!((map.channels(), map.grid_h, map.grid_w), (192, 1, 1));
        // Y = Cb = Cr = 128 for neutral gray; DC = 8 * 128
        for c in 0..3 {
            assert!((map.at(c * 64, 0, 0) - 1024.0).abs() < 1e-9);
            for j in 1..64 {
                assert!(map.at(c * 64 + j, 0, 0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn map_shape_follows_geometry() {
        let img = solid_image(16, 16, [10.0, 20.0, 30.0]);
        let map = build_dct_map(&img, 8).unwrap();
        assert_eq!((map.channels(), map.grid_h, map.grid_w), (192, 2, 2));
        assert_eq!(map.data.len(), 192 * 4);
    }

    #[test]
    fn map_inversion_recovers_ycbcr_planes() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let img = random_image(&mut rng, 16, 24);
        let want = rgb_to_ycbcr(&img);
        let map = build_dct_map(&img, 8).unwrap();
        let got = invert_dct_map(&map).unwrap();
        for c in 0..3 {
            for (a, b) in got.plane(c).iter().zip(want.plane(c)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn patch_vector_orders_channels_y_cb_cr() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let img = random_image(&mut rng, 16, 16);
        let ycc = rgb_to_ycbcr(&img);
        let grid = partition_patches(&ycc, 8).unwrap();
        let map = build_dct_map(&img, 8).unwrap();
        let dct = Dct2::new(8);
        // cell (1,0) is patch index 2 in row-major order
        let vec192 = map.patch_vector(1, 0);
        for c in 0..3 {
            let direct = dct.forward(&grid.channels[c][2 * 64..3 * 64]).unwrap();
            assert_eq!(&vec192[c * 64..(c + 1) * 64], &direct[..]);
        }
    }

    #[test]
    fn map_is_deterministic_across_thread_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let img = random_image(&mut rng, 32, 32);
        let one = build_dct_map_with_threads(&img, 8, 1).unwrap();
        let four = build_dct_map_with_threads(&img, 8, 4).unwrap();
        let many = build_dct_map_with_threads(&img, 8, 64).unwrap();
        assert_eq!(one, four);
        assert_eq!(one, many);
    }

    #[test]
    fn zigzag_matches_published_prefix() {
        let zz = zigzag_order(8);
        let expected_uv = [
            (0, 0),
            (0, 1),
            (1, 0),
            (2, 0),
            (1, 1),
            (0, 2),
            (0, 3),
            (1, 2),
            (2, 1),
            (3, 0),
        ];
        for (i, &(u, v)) in expected_uv.iter().enumerate() {
            assert_eq!(zz[i], u * 8 + v, "position {i}");
        }
        // a permutation of all slots
        let mut sorted = zz.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..64).collect::<Vec<_>>());
    }

    #[test]
    fn compaction_is_total_for_constant_image() {
        let img = solid_image(16, 16, [200.0, 100.0, 50.0]);
        let map = build_dct_map(&img, 8).unwrap();
        for fraction in [0.1, 0.25, 0.5, 1.0] {
            assert!((energy_compaction_stat(&map, fraction).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn compaction_of_noise_matches_fraction() {
        // Monte Carlo: orthonormal transform of white noise spreads energy
        // uniformly, so the low-frequency share approaches the kept fraction.
        let mut total = 0.0;
        let runs = 100;
        for seed in 0..runs {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let img = random_image(&mut rng, 64, 64);
            let map = build_dct_map(&img, 8).unwrap();
            total += energy_compaction_stat(&map, 0.25).unwrap();
        }
        let mean = total / runs as f64;
        assert!(
            (mean - 0.25).abs() < 0.05,
            "white-noise compaction {mean} strays from 0.25"
        );
    }

    #[test]
    fn compaction_rejects_bad_fraction() {
        let img = solid_image(8, 8, [1.0, 1.0, 1.0]);
        let map = build_dct_map(&img, 8).unwrap();
        assert!(energy_compaction_stat(&map, 0.0).is_err());
        assert!(energy_compaction_stat(&map, 1.5).is_err());
    }

    #[test]
    fn zero_map_compaction_is_one() {
        let map = DctMap {
            patch: 8,
            grid_h: 1,
            grid_w: 1,
            data: vec![0.0; 192],
        };
        assert_eq!(energy_compaction_stat(&map, 0.25).unwrap(), 1.0);
    }

    #[test]
    fn header_roundtrip_and_rejects() {
        let header = DctHeader {
            channels: 192,
            grid_h: 2,
            grid_w: 3,
            patch: 8,
        };
        assert_eq!(parse_dct_header(&header.to_text()).unwrap(), header);

        assert!(parse_dct_header("").is_err());
        assert!(parse_dct_header("dctmap v2\nchannels 192\ngrid 2 3\npatch 8\n").is_err());
        assert!(parse_dct_header("dctmap v1\nchannels 100\ngrid 2 3\npatch 8\n").is_err());
        assert!(parse_dct_header("dctmap v1\nchannels 192\ngrid 2 3\n").is_err());
        assert!(parse_dct_header("dctmap v1\nchannels 192\ngrid 0 3\npatch 8\n").is_err());
        assert!(
            parse_dct_header("dctmap v1\nchannels 192\ngrid 2 3\npatch 8\norder Cr Cb Y\n")
                .is_err()
        );
        // patch large enough that 3*patch*patch would overflow usize
        assert!(
            parse_dct_header("dctmap v1\nchannels 3\ngrid 1 1\npatch 4294967296\n").is_err()
        );
    }

    #[test]
    fn blob_roundtrips_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let img = random_image(&mut rng, 16, 16);
        let map = build_dct_map(&img, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("view0");
        write_dct_blob(&map, &stem).unwrap();
        let back = read_dct_blob(&stem).unwrap();
        assert_eq!(map, back);
    }

    #[test]
    fn blob_length_is_validated() {
        let header = DctHeader {
            channels: 192,
            grid_h: 1,
            grid_w: 1,
            patch: 8,
        };
        assert!(matches!(
            decode_dct_blob(&header, &[0u8; 7]),
            Err(DctError::BlobLengthMismatch { .. })
        ));

        // expected byte count would overflow usize; must reject, not wrap
        let huge = DctHeader {
            channels: 3,
            grid_h: 1 << 62,
            grid_w: 1,
            patch: 1,
        };
        assert!(matches!(
            decode_dct_blob(&huge, &[0u8; 8]),
            Err(DctError::BlobLengthMismatch { .. })
        ));
    }
}
