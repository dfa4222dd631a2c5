//! Dense channel-major grids and the crop/uncrop pair used by patch inference.
//!
//! A [`Tensor3`] stores `channels × height × width` reals, channel-major and
//! row-major within each channel. Images, latents, noise fields and
//! uncertainty maps all share this representation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    pub const fn spatial_eq(&self, other: &Dims) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub const fn with_channels(&self, channels: usize) -> Dims {
        Dims::new(channels, self.height, self.width)
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// A rectangle on a latent grid: origin `(x, y)`, extent `w × h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl PatchBox {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Result<Self> {
        if w == 0 || h == 0 {
            return Err(Error::shape(format!("patch box {w}x{h} must be at least 1x1")));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn full(dims: Dims) -> Self {
        Self {
            x: 0,
            y: 0,
            w: dims.width,
            h: dims.height,
        }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    pub fn fits(&self, dims: Dims) -> bool {
        self.w >= 1 && self.h >= 1 && self.x + self.w <= dims.width && self.y + self.h <= dims.height
    }

    fn check_inside(&self, dims: Dims) -> Result<()> {
        if self.fits(dims) {
            Ok(())
        } else {
            Err(Error::Bounds(format!(
                "box ({}, {}, {}, {}) does not fit a {}x{} grid",
                self.x, self.y, self.w, self.h, dims.width, dims.height
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dims: Dims,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: Dims, value: f64) -> Self {
        Self {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::shape(format!(
                "{} values cannot fill a {dims} tensor",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite value at index {pos}")));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for c in 0..dims.channels {
            for y in 0..dims.height {
                for x in 0..dims.width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.dims.channels
    }

    pub fn height(&self) -> usize {
        self.dims.height
    }

    pub fn width(&self) -> usize {
        self.dims.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.dims.height + y) * self.dims.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        let i = self.index(c, y, x);
        self.data[i] = value;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.dims.plane();
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let plane = self.dims.plane();
        &mut self.data[c * plane..(c + 1) * plane]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor3 {
        Tensor3 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor3, f: impl Fn(f64, f64) -> f64) -> Result<Tensor3> {
        self.expect_dims(other.dims)?;
        Ok(Tensor3 {
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// `a·self + b·other`, elementwise.
    pub fn lincomb(&self, a: f64, other: &Tensor3, b: f64) -> Result<Tensor3> {
        self.zip_map(other, |x, y| a * x + b * y)
    }

    pub fn add(&self, other: &Tensor3) -> Result<Tensor3> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor3) -> Result<Tensor3> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Tensor3 {
        self.map(|v| v * k)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor3 {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> Result<f64> {
        self.expect_dims(other.dims)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn expect_dims(&self, dims: Dims) -> Result<()> {
        if self.dims == dims {
            Ok(())
        } else {
            Err(Error::shape(format!("expected {dims}, got {}", self.dims)))
        }
    }

    /// The `b.w × b.h` window of every channel at `(b.x, b.y)`.
    pub fn crop(&self, b: &PatchBox) -> Result<Tensor3> {
        b.check_inside(self.dims)?;
        let dims = Dims::new(self.dims.channels, b.h, b.w);
        let mut data = Vec::with_capacity(dims.len());
        for c in 0..self.dims.channels {
            for y in b.y..b.y + b.h {
                let start = self.index(c, y, b.x);
                data.extend_from_slice(&self.data[start..start + b.w]);
            }
        }
        Ok(Tensor3 { dims, data })
    }

    /// Places `self` at `b` on a zero canvas of spatial size `canvas`.
    pub fn uncrop(&self, b: &PatchBox, canvas: Dims) -> Result<Tensor3> {
        if self.dims != Dims::new(canvas.channels, b.h, b.w) {
            return Err(Error::shape(format!(
                "patch {} does not match box {}x{} with {} channels",
                self.dims, b.h, b.w, canvas.channels
            )));
        }
        b.check_inside(canvas)?;
        let mut out = Tensor3::zeros(canvas);
        out.paste(self, b)?;
        Ok(out)
    }

    /// Overwrites the window at `b` with `patch`.
    pub fn paste(&mut self, patch: &Tensor3, b: &PatchBox) -> Result<()> {
        b.check_inside(self.dims)?;
        if patch.dims != Dims::new(self.dims.channels, b.h, b.w) {
            return Err(Error::shape(format!(
                "patch {} does not match box {}x{}",
                patch.dims, b.h, b.w
            )));
        }
        for c in 0..self.dims.channels {
            for row in 0..b.h {
                let dst = self.index(c, b.y + row, b.x);
                let src = patch.index(c, row, 0);
                self.data[dst..dst + b.w].copy_from_slice(&patch.data[src..src + b.w]);
            }
        }
        Ok(())
    }

    /// Bilinear resampling with half-pixel centres, edge-clamped.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Tensor3> {
        self.check_target(height, width)?;
        let sy = self.dims.height as f64 / height as f64;
        let sx = self.dims.width as f64 / width as f64;
        let taps = |dst: usize, scale: f64, len: usize| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        };
        let xs: Vec<_> = (0..width).map(|x| taps(x, sx, self.dims.width)).collect();
        let ys: Vec<_> = (0..height).map(|y| taps(y, sy, self.dims.height)).collect();
        let dims = Dims::new(self.dims.channels, height, width);
        Ok(Tensor3::from_fn(dims, |c, y, x| {
            let (y0, y1, fy) = ys[y];
            let (x0, x1, fx) = xs[x];
            let top = self.get(c, y0, x0) * (1.0 - fx) + self.get(c, y0, x1) * fx;
            let bottom = self.get(c, y1, x0) * (1.0 - fx) + self.get(c, y1, x1) * fx;
            top * (1.0 - fy) + bottom * fy
        }))
    }

    /// Nearest-neighbour resampling (pixel centres).
    pub fn resize_nearest(&self, height: usize, width: usize) -> Result<Tensor3> {
        self.check_target(height, width)?;
        let pick = |dst: usize, src_len: usize, dst_len: usize| {
            (((dst as f64 + 0.5) * src_len as f64 / dst_len as f64) as usize).min(src_len - 1)
        };
        let dims = Dims::new(self.dims.channels, height, width);
        Ok(Tensor3::from_fn(dims, |c, y, x| {
            self.get(c, pick(y, self.dims.height, height), pick(x, self.dims.width, width))
        }))
    }

    /// Area-weighted downsampling: each output pixel averages the source
    /// region it covers, with fractional weights at the region borders.
    pub fn resize_area(&self, height: usize, width: usize) -> Result<Tensor3> {
        self.check_target(height, width)?;
        let wy = area_weights(self.dims.height, height);
        let wx = area_weights(self.dims.width, width);
        let dims = Dims::new(self.dims.channels, height, width);
        let mut out = Tensor3::zeros(dims);
        for c in 0..dims.channels {
            for (y, row) in wy.iter().enumerate() {
                for (x, col) in wx.iter().enumerate() {
                    let mut acc = 0.0;
                    let mut total = 0.0;
                    for &(sy, ky) in row {
                        for &(sx, kx) in col {
                            acc += ky * kx * self.get(c, sy, sx);
                            total += ky * kx;
                        }
                    }
                    out.set(c, y, x, acc / total);
                }
            }
        }
        Ok(out)
    }

    /// Edge-replicating pad on the bottom and right.
    pub fn pad_edge(&self, height: usize, width: usize) -> Result<Tensor3> {
        if height < self.dims.height || width < self.dims.width {
            return Err(Error::shape(format!(
                "cannot pad {} down to {height}x{width}",
                self.dims
            )));
        }
        let dims = Dims::new(self.dims.channels, height, width);
        Ok(Tensor3::from_fn(dims, |c, y, x| {
            self.get(c, y.min(self.dims.height - 1), x.min(self.dims.width - 1))
        }))
    }

    fn check_target(&self, height: usize, width: usize) -> Result<()> {
        if height == 0 || width == 0 || self.dims.is_empty() {
            return Err(Error::shape(format!(
                "cannot resample {} to {height}x{width}",
                self.dims
            )));
        }
        Ok(())
    }
}

fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let lo = d as f64 * scale;
            let hi = (d + 1) as f64 * scale;
            let mut taps = Vec::new();
            let mut s = lo.floor() as usize;
            while (s as f64) < hi && s < src {
                let overlap = (hi.min((s + 1) as f64) - lo.max(s as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((s, overlap));
                }
                s += 1;
            }
            taps
        })
        .collect()
}
