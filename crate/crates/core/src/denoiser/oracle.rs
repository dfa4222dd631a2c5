use std::fmt;
use std::sync::Arc;

use super::{implied_eps, Denoiser, DenoiserInput};
use crate::codec::LatentCodec;
use crate::error::{Error, Result};
use crate::image::{AlphaMatte, ImageBuffer};
use crate::schedule::DiffusionSchedule;
use crate::tensor::Tensor3;

pub type TargetFn = Arc<dyn Fn(&ImageBuffer) -> AlphaMatte + Send + Sync>;
/// Marks pixels (value > 0.5) whose matte is left to the noise.
pub type AmbiguityFn = Arc<dyn Fn(&ImageBuffer) -> AlphaMatte + Send + Sync>;

/// Exact posterior-mean noise predictor for Gaussian data `z0 ~ N(μ, s²·I)`.
///
/// `μ` either matches the latent shape or is a per-channel `c×1×1` tensor
/// broadcast over space. Conditioning inputs are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianOracle {
    mu: Tensor3,
    s2: f64,
}

impl GaussianOracle {
    pub fn new(mu: Tensor3, s2: f64) -> Result<Self> {
        if !(s2 >= 0.0 && s2.is_finite()) {
            return Err(Error::config(format!("prior variance must be >= 0, got {s2}")));
        }
        Ok(Self { mu, s2 })
    }

    pub fn mu(&self) -> &Tensor3 {
        &self.mu
    }

    pub fn variance(&self) -> f64 {
        self.s2
    }

    fn mean_at(&self, c: usize, y: usize, x: usize) -> f64 {
        if self.mu.height() == 1 && self.mu.width() == 1 {
            self.mu.get(c, 0, 0)
        } else {
            self.mu.get(c, y, x)
        }
    }

    /// `E[z0 | z_t]`.
    pub fn posterior_mean(&self, z_t: &Tensor3, alpha_bar: f64) -> Result<Tensor3> {
        let d = z_t.dims();
        let broadcast = self.mu.height() == 1 && self.mu.width() == 1;
        if self.mu.channels() != d.channels || (!broadcast && !self.mu.dims().spatial_eq(&d)) {
            return Err(Error::shape(format!(
                "prior mean {} does not fit latent {d}",
                self.mu.dims()
            )));
        }
        let sa = alpha_bar.sqrt();
        let gain = sa * self.s2 / (alpha_bar * self.s2 + 1.0 - alpha_bar);
        Ok(Tensor3::from_fn(d, |c, y, x| {
            let m = self.mean_at(c, y, x);
            m + gain * (z_t.get(c, y, x) - sa * m)
        }))
    }
}

impl Denoiser for GaussianOracle {
    fn predict_eps(&self, input: &DenoiserInput<'_>, schedule: &DiffusionSchedule) -> Result<Tensor3> {
        input.validate(schedule)?;
        let a = schedule.alpha_bar(input.t);
        let z0 = self.posterior_mean(input.z_t, a)?;
        implied_eps(input.z_t, &z0, a)
    }
}

/// Denoiser whose clean-latent estimate is `encode(target(decode(cond)))`
/// at every step, so sampling reproduces the target function of the
/// conditioning image.
///
/// With an ambiguity rule, flagged pixels are decided by the sign of the
/// pixel-space residual `decode(z_t − √ᾱ_t·z0*)`, which makes them vary from
/// seed to seed while the rest of the matte stays exact.
#[derive(Clone)]
pub struct ProceduralOracle {
    target: TargetFn,
    ambiguity: Option<AmbiguityFn>,
    image_codec: LatentCodec,
    matte_codec: LatentCodec,
}

impl fmt::Debug for ProceduralOracle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProceduralOracle")
            .field("ambiguity", &self.ambiguity.is_some())
            .field("factor", &self.matte_codec.factor())
            .finish()
    }
}

impl ProceduralOracle {
    pub fn new(target: TargetFn, image_codec: LatentCodec, matte_codec: LatentCodec) -> Result<Self> {
        if image_codec.factor() != matte_codec.factor() {
            return Err(Error::config("image and matte codecs must share the factor"));
        }
        if matte_codec.image_channels() != 1 {
            return Err(Error::config("matte codec must be single-channel"));
        }
        Ok(Self {
            target,
            ambiguity: None,
            image_codec,
            matte_codec,
        })
    }

    pub fn with_ambiguity(mut self, rule: AmbiguityFn) -> Self {
        self.ambiguity = Some(rule);
        self
    }

    pub fn target(&self, image: &ImageBuffer) -> AlphaMatte {
        (self.target)(image)
    }

    /// The clean latent the oracle steers towards for this `(z_t, cond, t)`.
    pub fn clean_latent(&self, input: &DenoiserInput<'_>, alpha_bar: f64) -> Result<Tensor3> {
        let image = ImageBuffer::new(self.image_codec.decode(input.cond)?)?;
        let matte = (self.target)(&image);
        if !matte.dims().spatial_eq(&image.dims()) {
            return Err(Error::shape("target function changed the image size"));
        }
        let z0 = self.matte_codec.encode(matte.tensor())?;
        let Some(rule) = &self.ambiguity else {
            return Ok(z0);
        };
        let flags = rule(&image);
        if !flags.values().iter().any(|&v| v > 0.5) {
            return Ok(z0);
        }
        let residual = self
            .matte_codec
            .decode(&input.z_t.lincomb(1.0, &z0, -alpha_bar.sqrt())?)?;
        let mut values = matte.into_tensor();
        for ((v, &flag), &r) in values.data_mut().iter_mut().zip(flags.values()).zip(residual.data()) {
            if flag > 0.5 {
                *v = if r > 0.0 { 1.0 } else { 0.0 };
            }
        }
        self.matte_codec.encode(&values)
    }
}

impl Denoiser for ProceduralOracle {
    fn predict_eps(&self, input: &DenoiserInput<'_>, schedule: &DiffusionSchedule) -> Result<Tensor3> {
        input.validate(schedule)?;
        if input.z_t.channels() != self.matte_codec.latent_channels() {
            return Err(Error::shape(format!(
                "latent has {} channels, matte codec makes {}",
                input.z_t.channels(),
                self.matte_codec.latent_channels()
            )));
        }
        let a = schedule.alpha_bar(input.t);
        let z0 = self.clean_latent(input, a)?;
        implied_eps(input.z_t, &z0, a)
    }
}

/// Predicts zero noise everywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn predict_eps(&self, input: &DenoiserInput<'_>, schedule: &DiffusionSchedule) -> Result<Tensor3> {
        input.validate(schedule)?;
        Ok(Tensor3::zeros(input.z_t.dims()))
    }
}

/// `1` where luminance is at least `level`, else `0`.
pub fn luminance_threshold(level: f64) -> TargetFn {
    Arc::new(move |img: &ImageBuffer| {
        let lum = img.luminance().map(|v| if v >= level { 1.0 } else { 0.0 });
        AlphaMatte::new(lum).expect("luminance is single-channel")
    })
}

/// Flags pixels whose luminance lies strictly within `half_width` of `level`.
pub fn luminance_band(level: f64, half_width: f64) -> AmbiguityFn {
    Arc::new(move |img: &ImageBuffer| {
        let lum = img
            .luminance()
            .map(|v| if (v - level).abs() < half_width { 1.0 } else { 0.0 });
        AlphaMatte::new(lum).expect("luminance is single-channel")
    })
}
