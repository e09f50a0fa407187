//! Feature grids and the crate's two file formats.
//!
//! A [`FeatureGrid`] is a dense `H x W x C` array of finite scalars, row-major
//! with the channel index fastest. It stores images (C=3), latents (C=4),
//! depth maps and masks (C=1) alike.
//!
//! On disk a grid is an FGRID file: the ASCII header `FGRID 1\n<H> <W> <C>\n`
//! followed by `H*W*C` little-endian 32-bit floats in memory order. Values are
//! held as f64 in memory (the diffusion identities need the headroom) and
//! quantized to f32 at the file boundary; reading back a written file always
//! reproduces the file bit for bit. RGB grids can additionally be dumped as
//! binary PPM (P6, maxval 255) for eyeballing.

use crate::error::{MvError, Result};
use std::path::Path;

/// Sentinel depth for cells no surface covers. Finite so grids holding it
/// remain serializable.
pub const FAR_SENTINEL: f64 = 1.0e30;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(MvError::domain(format!(
                "grid dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(MvError::domain(format!(
                "data length {} != {height}*{width}*{channels}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(MvError::domain(format!("grid contains non-finite value {bad}")));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.idx(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        let i = self.idx(row, col, ch);
        self.data[i] = value;
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let i = self.idx(row, col, 0);
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &FeatureGrid) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Largest absolute elementwise difference; grids must share shape.
    pub fn max_abs_diff_grid(&self, other: &FeatureGrid) -> f64 {
        debug_assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    /// Bilinear sample at continuous pixel coordinates (align-corners domain:
    /// valid for `x in [0, W-1]`, `y in [0, H-1]`). Returns `None` outside.
    pub fn sample_bilinear(&self, x: f64, y: f64, out: &mut [f64]) -> Option<()> {
        if !(0.0..=(self.width as f64 - 1.0)).contains(&x)
            || !(0.0..=(self.height as f64 - 1.0)).contains(&y)
        {
            return None;
        }
        let x0 = (x.floor() as usize).min(self.width - 1);
        let y0 = (y.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        for ch in 0..self.channels {
            let v00 = self.get(y0, x0, ch);
            let v01 = self.get(y0, x1, ch);
            let v10 = self.get(y1, x0, ch);
            let v11 = self.get(y1, x1, ch);
            out[ch] = v00 * (1.0 - fx) * (1.0 - fy)
                + v01 * fx * (1.0 - fy)
                + v10 * (1.0 - fx) * fy
                + v11 * fx * fy;
        }
        Some(())
    }

    /// Extract a single channel as a C=1 grid.
    pub fn channel(&self, ch: usize) -> Result<FeatureGrid> {
        if ch >= self.channels {
            return Err(MvError::domain(format!(
                "channel {ch} out of range for C={}",
                self.channels
            )));
        }
        let mut data = Vec::with_capacity(self.height * self.width);
        for row in 0..self.height {
            for col in 0..self.width {
                data.push(self.get(row, col, ch));
            }
        }
        FeatureGrid::new(self.height, self.width, 1, data)
    }
}

const FGRID_MAGIC: &[u8] = b"FGRID 1\n";

/// Serialize a grid in FGRID format.
pub fn encode_grid(grid: &FeatureGrid) -> Result<Vec<u8>> {
    let mut bytes = Vec::with_capacity(32 + grid.data.len() * 4);
    bytes.extend_from_slice(FGRID_MAGIC);
    bytes.extend_from_slice(
        format!("{} {} {}\n", grid.height, grid.width, grid.channels).as_bytes(),
    );
    for &v in &grid.data {
        let f = v as f32;
        if !f.is_finite() {
            return Err(MvError::format(format!("value {v} not representable as finite f32")));
        }
        bytes.extend_from_slice(&f.to_le_bytes());
    }
    Ok(bytes)
}

pub fn decode_grid(bytes: &[u8]) -> Result<FeatureGrid> {
    let rest = bytes
        .strip_prefix(FGRID_MAGIC)
        .ok_or_else(|| MvError::format("missing FGRID 1 magic".to_string()))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| MvError::format("missing dimension line".to_string()))?;
    let dims_line = std::str::from_utf8(&rest[..nl])
        .map_err(|_| MvError::format("dimension line is not UTF-8".to_string()))?;
    let dims: Vec<usize> = dims_line
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|e| MvError::format(format!("bad dimension: {e}"))))
        .collect::<Result<_>>()?;
    if dims.len() != 3 {
        return Err(MvError::format(format!("expected 3 dimensions, got {}", dims.len())));
    }
    let (h, w, c) = (dims[0], dims[1], dims[2]);
    if h == 0 || w == 0 || c == 0 {
        return Err(MvError::format(format!("zero dimension in header {h}x{w}x{c}")));
    }
    let payload = &rest[nl + 1..];
    let expected = h * w * c * 4;
    if payload.len() != expected {
        return Err(MvError::format(format!(
            "payload is {} bytes, header {h}x{w}x{c} requires {expected}",
            payload.len()
        )));
    }
    let mut data = Vec::with_capacity(h * w * c);
    for chunk in payload.chunks_exact(4) {
        let f = f32::from_le_bytes(chunk.try_into().unwrap());
        if !f.is_finite() {
            return Err(MvError::format(format!("non-finite payload value {f}")));
        }
        data.push(f as f64);
    }
    FeatureGrid::new(h, w, c, data)
}

pub fn write_grid(grid: &FeatureGrid, path: &Path) -> Result<()> {
    std::fs::write(path, encode_grid(grid)?)?;
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<FeatureGrid> {
    decode_grid(&std::fs::read(path)?)
}

/// Dump an RGB (C=3) grid as binary PPM, clamping values to [0, 1].
pub fn write_ppm(grid: &FeatureGrid, path: &Path) -> Result<()> {
    if grid.channels != 3 {
        return Err(MvError::domain(format!("PPM needs C=3, got C={}", grid.channels)));
    }
    let mut bytes = format!("P6\n{} {}\n255\n", grid.width, grid.height).into_bytes();
    for row in 0..grid.height {
        for col in 0..grid.width {
            for ch in 0..3 {
                let v = grid.get(row, col, ch).clamp(0.0, 1.0);
                bytes.push((v * 255.0).round() as u8);
            }
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Bilinear resize with edge clamping (align-corners mapping, so an identity
/// resize is exact and affine ramps are reproduced exactly).
pub fn resize_bilinear(grid: &FeatureGrid, out_h: usize, out_w: usize) -> Result<FeatureGrid> {
    if out_h == 0 || out_w == 0 {
        return Err(MvError::domain(format!("resize target {out_h}x{out_w} must be >= 1x1")));
    }
    let src_coord = |i: usize, out_n: usize, in_n: usize| -> f64 {
        if out_n == 1 {
            (in_n as f64 - 1.0) / 2.0
        } else {
            i as f64 * (in_n as f64 - 1.0) / (out_n as f64 - 1.0)
        }
    };
    let c = grid.channels;
    let mut out = FeatureGrid::zeros(out_h, out_w, c);
    let mut sample = vec![0.0; c];
    for row in 0..out_h {
        let sy = src_coord(row, out_h, grid.height).clamp(0.0, grid.height as f64 - 1.0);
        for col in 0..out_w {
            let sx = src_coord(col, out_w, grid.width).clamp(0.0, grid.width as f64 - 1.0);
            grid.sample_bilinear(sx, sy, &mut sample).expect("clamped coordinate in range");
            for ch in 0..c {
                out.set(row, col, ch, sample[ch]);
            }
        }
    }
    Ok(out)
}
