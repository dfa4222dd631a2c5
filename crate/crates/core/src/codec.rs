//! Exactly invertible latent codec.
//!
//! Encoding is space-to-depth by a factor `f` followed by a fixed orthonormal
//! mix of the `c·f²` resulting channels at every site. Within a site the
//! pre-mix layout is `channel·f² + dy·f + dx`. Because the map is linear and
//! orthonormal, latent arithmetic has an exact pixel-space meaning and
//! decoding is the transpose.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Dims, Tensor3};

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCodec {
    channels: usize,
    factor: usize,
    mix_seed: Option<u64>,
    /// Row-major `n × n`, `n = channels·factor²`.
    mix: Vec<f64>,
}

impl LatentCodec {
    /// Codec with a seeded orthonormal channel mix.
    pub fn new(channels: usize, factor: usize, mix_seed: u64) -> Result<Self> {
        Self::check(channels, factor)?;
        let n = channels * factor * factor;
        let mix = orthonormal_matrix(n, mix_seed);
        Ok(Self {
            channels,
            factor,
            mix_seed: Some(mix_seed),
            mix,
        })
    }

    /// Codec whose mix is the identity: pure space-to-depth.
    pub fn identity(channels: usize, factor: usize) -> Result<Self> {
        Self::check(channels, factor)?;
        let n = channels * factor * factor;
        let mut mix = vec![0.0; n * n];
        for i in 0..n {
            mix[i * n + i] = 1.0;
        }
        Ok(Self {
            channels,
            factor,
            mix_seed: None,
            mix,
        })
    }

    fn check(channels: usize, factor: usize) -> Result<()> {
        if channels == 0 || factor == 0 {
            return Err(Error::config(format!(
                "codec needs channels >= 1 and factor >= 1, got {channels}, {factor}"
            )));
        }
        Ok(())
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn image_channels(&self) -> usize {
        self.channels
    }

    pub fn latent_channels(&self) -> usize {
        self.channels * self.factor * self.factor
    }

    pub fn mix_seed(&self) -> Option<u64> {
        self.mix_seed
    }

    pub fn mix(&self) -> &[f64] {
        &self.mix
    }

    pub fn latent_dims(&self, image: Dims) -> Result<Dims> {
        if image.channels != self.channels {
            return Err(Error::shape(format!(
                "codec expects {} channels, image has {}",
                self.channels, image.channels
            )));
        }
        if !image.height.is_multiple_of(self.factor) || !image.width.is_multiple_of(self.factor) {
            return Err(Error::shape(format!(
                "image {}x{} is not divisible by factor {}",
                image.height, image.width, self.factor
            )));
        }
        Ok(Dims::new(
            self.latent_channels(),
            image.height / self.factor,
            image.width / self.factor,
        ))
    }

    pub fn image_dims(&self, latent: Dims) -> Result<Dims> {
        let per_block = self.factor * self.factor;
        if !latent.channels.is_multiple_of(per_block) || latent.channels != self.latent_channels() {
            return Err(Error::shape(format!(
                "latent has {} channels, codec expects {}",
                latent.channels,
                self.latent_channels()
            )));
        }
        Ok(Dims::new(
            self.channels,
            latent.height * self.factor,
            latent.width * self.factor,
        ))
    }

    pub fn encode(&self, img: &Tensor3) -> Result<Tensor3> {
        let ld = self.latent_dims(img.dims())?;
        let f = self.factor;
        let n = ld.channels;
        let mut out = Tensor3::zeros(ld);
        let mut v = vec![0.0; n];
        for ly in 0..ld.height {
            for lx in 0..ld.width {
                for ch in 0..self.channels {
                    for dy in 0..f {
                        for dx in 0..f {
                            v[ch * f * f + dy * f + dx] = img.get(ch, ly * f + dy, lx * f + dx);
                        }
                    }
                }
                for (k, row) in self.mix.chunks_exact(n).enumerate() {
                    let acc: f64 = row.iter().zip(&v).map(|(m, x)| m * x).sum();
                    out.set(k, ly, lx, acc);
                }
            }
        }
        Ok(out)
    }

    pub fn decode(&self, z: &Tensor3) -> Result<Tensor3> {
        let id = self.image_dims(z.dims())?;
        let f = self.factor;
        let n = z.channels();
        let mut out = Tensor3::zeros(id);
        let mut v = vec![0.0; n];
        for ly in 0..z.height() {
            for lx in 0..z.width() {
                v.iter_mut().for_each(|x| *x = 0.0);
                for (k, row) in self.mix.chunks_exact(n).enumerate() {
                    let zk = z.get(k, ly, lx);
                    for (acc, m) in v.iter_mut().zip(row) {
                        *acc += m * zk;
                    }
                }
                for ch in 0..self.channels {
                    for dy in 0..f {
                        for dx in 0..f {
                            out.set(ch, ly * f + dy, lx * f + dx, v[ch * f * f + dy * f + dx]);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Rows of a seeded Gaussian matrix orthonormalised by two passes of
/// modified Gram–Schmidt.
fn orthonormal_matrix(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = SeededRng::new(seed);
    loop {
        let mut m: Vec<f64> = (0..n * n).map(|_| rng.normal()).collect();
        if gram_schmidt(&mut m, n) && gram_schmidt(&mut m, n) {
            return m;
        }
    }
}

fn gram_schmidt(m: &mut [f64], n: usize) -> bool {
    for i in 0..n {
        for j in 0..i {
            let dot: f64 = (0..n).map(|k| m[i * n + k] * m[j * n + k]).sum();
            for k in 0..n {
                m[i * n + k] -= dot * m[j * n + k];
            }
        }
        let norm = (0..n).map(|k| m[i * n + k].powi(2)).sum::<f64>().sqrt();
        if norm < 1e-8 {
            return false;
        }
        for k in 0..n {
            m[i * n + k] /= norm;
        }
    }
    true
}
