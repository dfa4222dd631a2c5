//! The two-path matting pipeline.
//!
//! 1. Downsample the (padded) image and draw an ensemble of low-resolution
//!    mattes with different seeds.
//! 2. Their per-pixel standard deviation is the uncertainty map; uncertain
//!    regions become latent patch boxes.
//! 3. Boxes are re-sampled at full resolution from the upsampled LR latent,
//!    sharing one noise field per step and merging after every step.
//! 4. The refined latent is blended into the upsampled LR latent and decoded.

mod ensemble;
mod merge;
mod plan;
mod refine;

pub use ensemble::{guide_member, lr_ensemble, uncertainty, EnsembleResult};
pub use merge::{fuse_final, fusion_mask, merge_collage, patch_weights, MergeWeights};
pub use plan::{flagged_sites, select_patches, PatchPlan, PlanParams, TauPolicy};
pub use refine::{hr_refine, RefineInputs, RefineStats};

use serde::{Deserialize, Serialize};

use crate::codec::LatentCodec;
use crate::denoiser::{Denoiser, TextEmbedder, DETAIL_PROMPT};
use crate::error::{Error, Result};
use crate::guidance::{guide_latent, SpatialGuide};
use crate::image::{pad_to_multiple, round_up, AlphaMatte, ImageBuffer};
use crate::rng::child_seed;
use crate::sampler::{SampleInputs, SamplerConfig};
use crate::schedule::DiffusionSchedule;
use crate::tensor::{Dims, PatchBox, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentUpsample {
    #[default]
    Bilinear,
    Nearest,
}

impl LatentUpsample {
    pub fn apply(self, z: &Tensor3, height: usize, width: usize) -> Result<Tensor3> {
        match self {
            LatentUpsample::Bilinear => z.resize_bilinear(height, width),
            LatentUpsample::Nearest => z.resize_nearest(height, width),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HiresConfig {
    /// Run the high-resolution path at all.
    pub refine: bool,
    /// Ensemble size `L`.
    pub ensemble: usize,
    pub tau: TauPolicy,
    pub dilation: usize,
    pub patch_size: usize,
    pub overlap: usize,
    pub feather: usize,
    pub merge: MergeWeights,
    pub upsample: LatentUpsample,
    /// Long side of the low-resolution pass, in pixels.
    pub lr_long_side: usize,
    /// Copy known trimap/scribble pixels into the output.
    pub pin_known: bool,
}

impl Default for HiresConfig {
    fn default() -> Self {
        Self {
            refine: true,
            ensemble: 8,
            tau: TauPolicy::Auto,
            dilation: 3,
            patch_size: 64,
            overlap: 16,
            feather: 8,
            merge: MergeWeights::Feathered,
            upsample: LatentUpsample::Bilinear,
            lr_long_side: 512,
            pin_known: true,
        }
    }
}

impl HiresConfig {
    pub fn plan_params(&self) -> PlanParams {
        PlanParams {
            tau: self.tau,
            patch: self.patch_size,
            overlap: self.overlap,
            dilation: self.dilation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.plan_params().validate()?;
        if self.ensemble == 0 {
            return Err(Error::config("ensemble size must be at least 1"));
        }
        if self.refine && self.ensemble < 2 {
            return Err(Error::config("refinement needs an ensemble of at least 2"));
        }
        if self.lr_long_side == 0 {
            return Err(Error::config("low-resolution long side must be positive"));
        }
        if let TauPolicy::Fixed(t) = self.tau {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::config(format!("tau must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

/// Everything except the denoiser.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub schedule: DiffusionSchedule,
    pub image_codec: LatentCodec,
    pub matte_codec: LatentCodec,
    pub lr_sampler: SamplerConfig,
    pub hr_sampler: SamplerConfig,
    pub hires: HiresConfig,
    pub text: TextEmbedder,
}

/// Mix seeds of the default image and matte codecs.
pub const IMAGE_MIX_SEED: u64 = 0x1A6E;
pub const MATTE_MIX_SEED: u64 = 0xA1FA;
/// Default text-embedding width and table seed.
pub const TEXT_DIM: usize = 8;
pub const TEXT_SEED: u64 = 0x7E47;

impl Pipeline {
    /// Default schedule, codecs with factor `f`, 10 steps (η = 1 for the
    /// ensemble, η = 0 for patches) and default high-resolution settings.
    pub fn with_factor(f: usize) -> Result<Self> {
        let schedule = DiffusionSchedule::default();
        let lr_sampler = SamplerConfig::strided(10, &schedule, 1.0, Default::default())?;
        let hr_sampler = lr_sampler.clone().with_eta(0.0)?;
        Ok(Self {
            image_codec: LatentCodec::new(3, f, IMAGE_MIX_SEED)?,
            matte_codec: LatentCodec::new(1, f, MATTE_MIX_SEED)?,
            schedule,
            lr_sampler,
            hr_sampler,
            hires: HiresConfig::default(),
            text: TextEmbedder::new(TEXT_DIM, TEXT_SEED),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_codec.image_channels() != 3 || self.matte_codec.image_channels() != 1 {
            return Err(Error::config("image codec must be 3-channel and matte codec 1-channel"));
        }
        if self.image_codec.factor() != self.matte_codec.factor() {
            return Err(Error::config("image and matte codecs must share the factor"));
        }
        self.hires.validate()
    }

    pub fn factor(&self) -> usize {
        self.matte_codec.factor()
    }

    /// Low-resolution size for a padded `height × width` image.
    pub fn lr_dims(&self, height: usize, width: usize) -> (usize, usize) {
        let f = self.factor();
        let long = height.max(width);
        if long <= self.hires.lr_long_side {
            return (height, width);
        }
        let s = self.hires.lr_long_side as f64 / long as f64;
        let scale = |n: usize| round_up(((n as f64 * s).round() as usize).max(1), f);
        (scale(height), scale(width))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MatteRequest<'a> {
    pub image: &'a ImageBuffer,
    /// Must match the image size.
    pub guide: Option<&'a SpatialGuide>,
    pub prompt: Option<&'a str>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct MatteOutput {
    pub matte: AlphaMatte,
    /// Low-resolution uncertainty map (absent with a single member).
    pub uncertainty: Option<Tensor3>,
    pub plan: PatchPlan,
    pub padded: (usize, usize),
    pub lr: (usize, usize),
    pub guide_member: usize,
    pub ensemble_seeds: Vec<u64>,
    pub refine: Option<RefineStats>,
}

impl MatteOutput {
    pub fn boxes(&self) -> &[PatchBox] {
        self.plan.boxes()
    }
}

/// Full two-path matting of one image.
pub fn matte_hr(denoiser: &dyn Denoiser, pipeline: &Pipeline, req: &MatteRequest<'_>) -> Result<MatteOutput> {
    pipeline.validate()?;
    let f = pipeline.factor();
    let cfg = &pipeline.hires;
    let (h, w) = (req.image.height(), req.image.width());
    if let Some(g) = req.guide {
        if g.dims().height != h || g.dims().width != w {
            return Err(Error::shape(format!(
                "guide {}x{} does not match image {w}x{h}",
                g.dims().width,
                g.dims().height
            )));
        }
    }
    let padded = pad_to_multiple(req.image.to_rgb().tensor(), f)?;
    let (hp, wp) = (padded.height(), padded.width());
    let (hl, wl) = pipeline.lr_dims(hp, wp);
    let lr_image = if (hl, wl) == (hp, wp) {
        padded.clone()
    } else {
        padded.resize_area(hl, wl)?
    };
    let cond_lr = pipeline.image_codec.encode(&lr_image)?;
    let guide_lr = match req.guide {
        Some(g) => {
            let g = g.pad_edge(hp, wp)?;
            let g = if (hl, wl) == (hp, wp) { g } else { g.resize(hl, wl)? };
            Some(guide_latent(&g, &pipeline.matte_codec)?)
        }
        None => None,
    };
    let text_lr = req.prompt.map(|p| pipeline.text.embed_prompt(p));
    let text_hr = req.prompt.map(|_| pipeline.text.embed_prompt(DETAIL_PROMPT));

    let latent_channels = pipeline.matte_codec.latent_channels();
    let ens = lr_ensemble(
        denoiser,
        &SampleInputs {
            cond: &cond_lr,
            latent_channels,
            guide: guide_lr.as_ref(),
            text: text_lr.as_deref(),
        },
        &pipeline.matte_codec,
        &pipeline.lr_sampler,
        &pipeline.schedule,
        cfg.ensemble,
        child_seed(req.seed, 0),
    )?;
    let u = if ens.mattes.len() >= 2 {
        Some(uncertainty(&ens)?)
    } else {
        None
    };
    let member = guide_member(&ens)?;
    let hr_latent = Dims::new(latent_channels, hp / f, wp / f);
    let z_up = cfg
        .upsample
        .apply(&ens.latents[member], hr_latent.height, hr_latent.width)?;

    let plan = match (&u, cfg.refine) {
        (Some(u), true) => select_patches(u, hr_latent, f, &cfg.plan_params())?,
        _ => PatchPlan::empty(hr_latent, f, cfg.patch_size, cfg.overlap),
    };
    let (z_final, stats) = if plan.is_empty() {
        (z_up, None)
    } else {
        let cond_hr = pipeline.image_codec.encode(&padded)?;
        let (z_hr, stats) = hr_refine(
            denoiser,
            &RefineInputs {
                cond: &cond_hr,
                guide_up: &z_up,
                text: text_hr.as_deref(),
            },
            &plan,
            &pipeline.hr_sampler,
            &pipeline.schedule,
            cfg.merge,
            child_seed(req.seed, 1),
        )?;
        (fuse_final(&z_hr, &z_up, &plan, cfg.feather)?, Some(stats))
    };
    let decoded = pipeline.matte_codec.decode(&z_final)?.clamp(0.0, 1.0);
    let mut matte = decoded.crop(&PatchBox::new(0, 0, w, h)?)?;
    if let (Some(g), true) = (req.guide, cfg.pin_known) {
        if g.pins_known_pixels() {
            matte = g.pin(&matte)?;
        }
    }
    Ok(MatteOutput {
        matte: AlphaMatte::new(matte)?,
        uncertainty: u,
        plan,
        padded: (hp, wp),
        lr: (hl, wl),
        guide_member: member,
        ensemble_seeds: ens.seeds,
        refine: stats,
    })
}
