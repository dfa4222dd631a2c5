//! Pixel-domain buffers: colour/gray images and alpha mattes.

use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor3};

/// A 1- or 3-channel image with values clamped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pixels: Tensor3,
}

impl ImageBuffer {
    /// Clamps every value into `[0, 1]`.
    pub fn new(pixels: Tensor3) -> Result<Self> {
        let c = pixels.channels();
        if c != 1 && c != 3 {
            return Err(Error::shape(format!("images have 1 or 3 channels, got {c}")));
        }
        Ok(Self {
            pixels: pixels.clamp(0.0, 1.0),
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Tensor3::filled(Dims::new(channels, height, width), value))
    }

    pub fn tensor(&self) -> &Tensor3 {
        &self.pixels
    }

    pub fn into_tensor(self) -> Tensor3 {
        self.pixels
    }

    pub fn dims(&self) -> Dims {
        self.pixels.dims()
    }

    pub fn channels(&self) -> usize {
        self.pixels.channels()
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    /// Rec. 601 luma for colour images; identity for gray.
    pub fn luminance(&self) -> Tensor3 {
        if self.channels() == 1 {
            return self.pixels.clone();
        }
        let dims = self.dims().with_channels(1);
        Tensor3::from_fn(dims, |_, y, x| {
            0.299 * self.pixels.get(0, y, x) + 0.587 * self.pixels.get(1, y, x) + 0.114 * self.pixels.get(2, y, x)
        })
    }

    /// Gray images are replicated to three channels; colour images are kept.
    pub fn to_rgb(&self) -> ImageBuffer {
        if self.channels() == 3 {
            return self.clone();
        }
        let dims = self.dims().with_channels(3);
        ImageBuffer {
            pixels: Tensor3::from_fn(dims, |_, y, x| self.pixels.get(0, y, x)),
        }
    }
}

/// A single-channel opacity map in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaMatte {
    values: Tensor3,
}

impl AlphaMatte {
    /// Clamps every value into `[0, 1]`.
    pub fn new(values: Tensor3) -> Result<Self> {
        if values.channels() != 1 {
            return Err(Error::shape(format!(
                "a matte has one channel, got {}",
                values.channels()
            )));
        }
        Ok(Self {
            values: values.clamp(0.0, 1.0),
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            values: Tensor3::filled(Dims::new(1, height, width), value.clamp(0.0, 1.0)),
        }
    }

    pub fn tensor(&self) -> &Tensor3 {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor3 {
        self.values
    }

    pub fn values(&self) -> &[f64] {
        self.values.data()
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn dims(&self) -> Dims {
        self.values.dims()
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values.get(0, y, x)
    }
}

impl From<AlphaMatte> for ImageBuffer {
    fn from(m: AlphaMatte) -> Self {
        ImageBuffer { pixels: m.values }
    }
}

/// Smallest multiple of `f` that is `>= n`.
pub fn round_up(n: usize, f: usize) -> usize {
    n.div_ceil(f) * f
}

/// Edge-replicating pad of a tensor to multiples of `f` in both spatial axes.
pub fn pad_to_multiple(t: &Tensor3, f: usize) -> Result<Tensor3> {
    t.pad_edge(round_up(t.height(), f), round_up(t.width(), f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_clamps() {
        let t = Tensor3::from_vec(Dims::new(1, 1, 3), vec![-0.5, 0.5, 1.5]).unwrap();
        let img = ImageBuffer::new(t).unwrap();
        assert_eq!(img.tensor().data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn rejects_two_channels() {
        assert!(ImageBuffer::new(Tensor3::zeros(Dims::new(2, 1, 1))).is_err());
        assert!(AlphaMatte::new(Tensor3::zeros(Dims::new(3, 1, 1))).is_err());
    }

    #[test]
    fn luminance_of_white_is_one() {
        let img = ImageBuffer::filled(3, 2, 2, 1.0).unwrap();
        assert!(img.luminance().data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn padding_arithmetic() {
        let t = Tensor3::zeros(Dims::new(3, 97, 130));
        let p = pad_to_multiple(&t, 8).unwrap();
        assert_eq!((p.height(), p.width()), (104, 136));
        assert_eq!(round_up(64, 8), 64);
    }
}
