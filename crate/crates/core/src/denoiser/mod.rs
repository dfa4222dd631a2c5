//! Noise-prediction models `ε_θ(z_t, z^(x), c_T, t)`.
//!
//! The [`Denoiser`] trait is the only thing the samplers see. Two analytic
//! oracles make every pipeline stage exactly checkable, and a small per-site
//! MLP is trainable with hand-written backprop.

mod mlp;
mod oracle;

pub use mlp::{FirstLayer, InputLayout, MlpDenoiser, MlpTape, TIME_EMBED_DIM};
pub use oracle::{
    luminance_band, luminance_threshold, AmbiguityFn, GaussianOracle, ProceduralOracle, TargetFn, ZeroDenoiser,
};

use crate::error::{Error, Result};
use crate::rng::{child_seed, seed_from_bytes, SeededRng};
use crate::schedule::DiffusionSchedule;
use crate::tensor::Tensor3;

/// One denoiser evaluation.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserInput<'a> {
    /// Noisy matte latent.
    pub z_t: &'a Tensor3,
    /// Image latent, same spatial size as `z_t`.
    pub cond: &'a Tensor3,
    pub t: usize,
    pub text: Option<&'a [f64]>,
}

impl DenoiserInput<'_> {
    pub fn validate(&self, schedule: &DiffusionSchedule) -> Result<()> {
        if !self.z_t.dims().spatial_eq(&self.cond.dims()) {
            return Err(Error::shape(format!(
                "noisy latent {} and condition {} differ spatially",
                self.z_t.dims(),
                self.cond.dims()
            )));
        }
        schedule.check_step(self.t)
    }
}

pub trait Denoiser: Send + Sync {
    fn predict_eps(&self, input: &DenoiserInput<'_>, schedule: &DiffusionSchedule) -> Result<Tensor3>;

    /// The trainable model behind this denoiser, if any.
    fn as_mlp(&self) -> Option<&MlpDenoiser> {
        None
    }
}

impl<D: Denoiser + ?Sized> Denoiser for std::sync::Arc<D> {
    fn predict_eps(&self, input: &DenoiserInput<'_>, schedule: &DiffusionSchedule) -> Result<Tensor3> {
        (**self).predict_eps(input, schedule)
    }

    fn as_mlp(&self) -> Option<&MlpDenoiser> {
        (**self).as_mlp()
    }
}

/// `ẑ0 = (z_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`.
pub fn predicted_z0(z_t: &Tensor3, eps_hat: &Tensor3, alpha_bar: f64) -> Result<Tensor3> {
    z_t.lincomb(
        1.0 / alpha_bar.sqrt(),
        eps_hat,
        -(1.0 - alpha_bar).sqrt() / alpha_bar.sqrt(),
    )
}

/// `ε̂ = (z_t − √ᾱ_t·ẑ0) / √(1−ᾱ_t)`.
pub fn implied_eps(z_t: &Tensor3, z0: &Tensor3, alpha_bar: f64) -> Result<Tensor3> {
    let s = (1.0 - alpha_bar).sqrt();
    z_t.lincomb(1.0 / s, z0, -alpha_bar.sqrt() / s)
}

/// Deterministic toy text encoder: every token maps to a seeded unit
/// vector and a token list embeds to the mean of its token vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl TextEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = SeededRng::new(child_seed(self.seed, seed_from_bytes(token.as_bytes())));
        let mut v: Vec<f64> = (0..self.dim).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }

    pub fn embed<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        if tokens.is_empty() {
            return acc;
        }
        for tok in tokens {
            for (a, v) in acc.iter_mut().zip(self.token_vector(tok.as_ref())) {
                *a += v;
            }
        }
        let n = tokens.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    pub fn embed_prompt(&self, prompt: &str) -> Vec<f64> {
        self.embed(&tokenize(prompt))
    }
}

/// Lower-cased alphanumeric runs.
pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Prompt used for high-resolution patches.
pub const DETAIL_PROMPT: &str = "enhance details";

/// Sinusoidal embedding of `t/T`: `sin(π·2^k·τ), cos(π·2^k·τ)` for k = 0..4.
pub fn time_embedding(t: usize, total: usize) -> [f64; TIME_EMBED_DIM] {
    let tau = t as f64 / total as f64;
    let mut out = [0.0; TIME_EMBED_DIM];
    for k in 0..TIME_EMBED_DIM / 2 {
        let w = std::f64::consts::PI * (1u32 << k) as f64;
        out[2 * k] = (w * tau).sin();
        out[2 * k + 1] = (w * tau).cos();
    }
    out
}
