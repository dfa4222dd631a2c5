//! Training objectives and a plain SGD loop for [`MlpDenoiser`].
//!
//! Every pair draws its timestep first and its noise second, from one
//! [`SeededRng`], so a loss curve is a pure function of the seed.

use serde::{Deserialize, Serialize};

use crate::codec::LatentCodec;
use crate::denoiser::{predicted_z0, Denoiser, DenoiserInput, MlpDenoiser, TextEmbedder, DETAIL_PROMPT};
use crate::error::{Error, Result};
use crate::image::{AlphaMatte, ImageBuffer};
use crate::rng::SeededRng;
use crate::schedule::DiffusionSchedule;
use crate::tensor::{PatchBox, Tensor3};

/// A raw training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub image: ImageBuffer,
    pub alpha: AlphaMatte,
    pub prompt: Option<String>,
}

/// An encoded training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub cond: Tensor3,
    pub z0: Tensor3,
    /// Ground-truth matte at pixel resolution, for the pixel loss.
    pub alpha: Tensor3,
    pub text: Option<Vec<f64>>,
}

pub type TrainBatch = [Example];

/// Fixed parts of the objective.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub schedule: &'a DiffusionSchedule,
    pub matte_codec: &'a LatentCodec,
    /// Weight of the decoded-matte term.
    pub pixel_weight: f64,
}

/// Timestep and noise of one example.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub t: usize,
    pub eps: Tensor3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    /// Mean squared noise error per latent element, averaged over the batch.
    pub conditional: f64,
    /// Mean squared decoded-matte error per pixel, averaged over the batch.
    pub pixel: f64,
    /// `conditional + pixel_weight · pixel`.
    pub total: f64,
}

impl Example {
    pub fn encode(
        pair: &TrainPair,
        image_codec: &LatentCodec,
        matte_codec: &LatentCodec,
        text: Option<&TextEmbedder>,
    ) -> Result<Self> {
        let cond = image_codec.encode(pair.image.to_rgb().tensor())?;
        let z0 = matte_codec.encode(pair.alpha.tensor())?;
        Ok(Self {
            cond,
            z0,
            alpha: pair.alpha.tensor().clone(),
            text: text.map(|e| e.embed_prompt(pair.prompt.as_deref().unwrap_or(""))),
        })
    }

    /// Latent-aligned crop of `h × w` latent sites at latent offset `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize, f: usize) -> Result<Self> {
        let lb = PatchBox::new(x, y, w, h)?;
        let pb = PatchBox::new(x * f, y * f, w * f, h * f)?;
        Ok(Self {
            cond: self.cond.crop(&lb)?,
            z0: self.z0.crop(&lb)?,
            alpha: self.alpha.crop(&pb)?,
            text: self.text.clone(),
        })
    }
}

/// One draw per example: `t ~ U{1..T}` then `ε ~ N(0, I)`.
pub fn draw(batch: &TrainBatch, schedule: &DiffusionSchedule, rng: &mut SeededRng) -> Result<Vec<Draw>> {
    batch
        .iter()
        .map(|ex| {
            let t = rng.range_inclusive(1, schedule.steps());
            let eps = rng.randn(ex.z0.dims())?;
            Ok(Draw { t, eps })
        })
        .collect()
}

fn check(batch: &TrainBatch, draws: &[Draw], obj: &Objective<'_>) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::config("empty training batch"));
    }
    if batch.len() != draws.len() {
        return Err(Error::shape(format!(
            "{} examples but {} draws",
            batch.len(),
            draws.len()
        )));
    }
    for ex in batch {
        if obj.matte_codec.image_dims(ex.z0.dims())? != ex.alpha.dims() {
            return Err(Error::shape(format!(
                "matte {} does not match latent {}",
                ex.alpha.dims(),
                ex.z0.dims()
            )));
        }
    }
    Ok(())
}

struct Terms {
    cond: f64,
    pixel: f64,
    /// `dL/dε̂` for this example, channel-major.
    d_eps: Option<Tensor3>,
}

fn example_terms(
    ex: &Example,
    d: &Draw,
    eps_hat: &Tensor3,
    obj: &Objective<'_>,
    with_grad: bool,
    scale: f64,
) -> Result<Terms> {
    let a = obj.schedule.alpha_bar(d.t);
    let n = eps_hat.data().len() as f64;
    let diff = eps_hat.sub(&d.eps)?;
    let cond = diff.data().iter().map(|v| v * v).sum::<f64>() / n;
    let z_t = obj.schedule.q_sample(&ex.z0, d.t, &d.eps)?;
    let z0_hat = predicted_z0(&z_t, eps_hat, a)?;
    let r = obj.matte_codec.decode(&z0_hat)?.sub(&ex.alpha)?;
    let npx = r.data().len() as f64;
    let pixel = r.data().iter().map(|v| v * v).sum::<f64>() / npx;
    let d_eps = if with_grad {
        let mut g = diff.scale(2.0 / n * scale);
        if obj.pixel_weight != 0.0 {
            // decoding is orthonormal, so its adjoint is encoding
            let dz0 = obj.matte_codec.encode(&r.scale(2.0 / npx))?;
            let k = -((1.0 - a) / a).sqrt() * obj.pixel_weight * scale;
            g = g.lincomb(1.0, &dz0, k)?;
        }
        Some(g)
    } else {
        None
    };
    Ok(Terms { cond, pixel, d_eps })
}

fn summarize(terms: &[Terms], obj: &Objective<'_>) -> LossParts {
    let p = terms.len() as f64;
    let conditional = terms.iter().map(|t| t.cond).sum::<f64>() / p;
    let pixel = terms.iter().map(|t| t.pixel).sum::<f64>() / p;
    LossParts {
        conditional,
        pixel,
        total: conditional + obj.pixel_weight * pixel,
    }
}

/// Batch losses for fixed draws; works with any denoiser.
pub fn evaluate_losses(
    denoiser: &dyn Denoiser,
    batch: &TrainBatch,
    draws: &[Draw],
    obj: &Objective<'_>,
) -> Result<LossParts> {
    check(batch, draws, obj)?;
    let terms = batch
        .iter()
        .zip(draws)
        .map(|(ex, d)| {
            let z_t = obj.schedule.q_sample(&ex.z0, d.t, &d.eps)?;
            let eps_hat = denoiser.predict_eps(
                &DenoiserInput {
                    z_t: &z_t,
                    cond: &ex.cond,
                    t: d.t,
                    text: ex.text.as_deref(),
                },
                obj.schedule,
            )?;
            example_terms(ex, d, &eps_hat, obj, false, 1.0)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(&terms, obj))
}

/// Losses and the flat parameter gradient of `total` for fixed draws.
pub fn loss_and_grad(
    model: &MlpDenoiser,
    batch: &TrainBatch,
    draws: &[Draw],
    obj: &Objective<'_>,
) -> Result<(LossParts, Vec<f64>)> {
    check(batch, draws, obj)?;
    let mut grad = vec![0.0; model.num_params()];
    let scale = 1.0 / batch.len() as f64;
    let mut terms = Vec::with_capacity(batch.len());
    for (ex, d) in batch.iter().zip(draws) {
        let z_t = obj.schedule.q_sample(&ex.z0, d.t, &d.eps)?;
        let input = DenoiserInput {
            z_t: &z_t,
            cond: &ex.cond,
            t: d.t,
            text: ex.text.as_deref(),
        };
        let (feats, n) = model.features(&input, obj.schedule)?;
        let tape = model.forward_tape(&feats, n);
        let dims = z_t.dims();
        let (w, c) = (dims.width, dims.channels);
        let eps_hat = Tensor3::from_fn(dims, |ch, y, x| tape.output[(y * w + x) * c + ch]);
        let term = example_terms(ex, d, &eps_hat, obj, true, scale)?;
        let g = term.d_eps.as_ref().expect("gradient requested");
        let mut d_out = vec![0.0; n * c];
        for ch in 0..c {
            for y in 0..dims.height {
                for x in 0..w {
                    d_out[(y * w + x) * c + ch] = g.get(ch, y, x);
                }
            }
        }
        for (a, b) in grad.iter_mut().zip(model.backward(&tape, &d_out)) {
            *a += b;
        }
        terms.push(term);
    }
    Ok((summarize(&terms, obj), grad))
}

fn draw_and<T>(
    batch: &TrainBatch,
    obj: &Objective<'_>,
    rng: &mut SeededRng,
    f: impl FnOnce(&[Draw]) -> Result<T>,
) -> Result<T> {
    let draws = draw(batch, obj.schedule, rng)?;
    f(&draws)
}

/// Noise-prediction loss with fresh draws from `rng`.
pub fn loss_conditional(
    denoiser: &dyn Denoiser,
    batch: &TrainBatch,
    obj: &Objective<'_>,
    rng: &mut SeededRng,
) -> Result<f64> {
    draw_and(batch, obj, rng, |d| {
        Ok(evaluate_losses(denoiser, batch, d, obj)?.conditional)
    })
}

/// Decoded-matte loss with fresh draws from `rng`.
pub fn loss_pixel(
    denoiser: &dyn Denoiser,
    batch: &TrainBatch,
    obj: &Objective<'_>,
    rng: &mut SeededRng,
) -> Result<f64> {
    draw_and(batch, obj, rng, |d| Ok(evaluate_losses(denoiser, batch, d, obj)?.pixel))
}

/// Weighted sum of both losses with fresh draws from `rng`.
pub fn loss_combined(
    denoiser: &dyn Denoiser,
    batch: &TrainBatch,
    obj: &Objective<'_>,
    rng: &mut SeededRng,
) -> Result<f64> {
    draw_and(batch, obj, rng, |d| Ok(evaluate_losses(denoiser, batch, d, obj)?.total))
}

/// Gradient of the combined loss with fresh draws; only trainable models
/// have one.
pub fn grad_loss(
    denoiser: &dyn Denoiser,
    batch: &TrainBatch,
    obj: &Objective<'_>,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    let model = denoiser
        .as_mlp()
        .ok_or_else(|| Error::Capability("denoiser has no trainable parameters".into()))?;
    draw_and(batch, obj, rng, |d| Ok(loss_and_grad(model, batch, d, obj)?.1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub iters: usize,
    pub batch: usize,
    pub seed: u64,
    /// Feed prompt embeddings; half-scale crops get the detail prompt.
    pub use_text: bool,
    pub pixel_loss_weight: f64,
    /// Mix full images with half-scale crops.
    pub multi_scale: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            iters: 2000,
            batch: 4,
            seed: 0,
            use_text: false,
            pixel_loss_weight: 0.0,
            multi_scale: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if self.batch == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.pixel_loss_weight >= 0.0 && self.pixel_loss_weight.is_finite()) {
            return Err(Error::config("pixel loss weight must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpDenoiser,
    /// Batch loss (`total`) before each update.
    pub curve: Vec<f64>,
}

/// Encoded dataset plus what the loop needs to build crops.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub examples: Vec<Example>,
    pub factor: usize,
    /// Embedding of the detail prompt, when training with text.
    pub detail_text: Option<Vec<f64>>,
}

impl TrainSet {
    pub fn new(
        pairs: &[TrainPair],
        image_codec: &LatentCodec,
        matte_codec: &LatentCodec,
        text: Option<&TextEmbedder>,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        let examples = pairs
            .iter()
            .map(|p| Example::encode(p, image_codec, matte_codec, text))
            .collect::<Result<_>>()?;
        Ok(Self {
            examples,
            factor: matte_codec.factor(),
            detail_text: text.map(|e| e.embed_prompt(DETAIL_PROMPT)),
        })
    }

    fn pick(&self, rng: &mut SeededRng, multi_scale: bool) -> Result<Example> {
        let ex = &self.examples[rng.range_inclusive(0, self.examples.len() - 1)];
        if !(multi_scale && rng.uniform() < 0.5) {
            return Ok(ex.clone());
        }
        let (h, w) = (ex.z0.height(), ex.z0.width());
        let (ch, cw) = ((h / 2).max(1), (w / 2).max(1));
        let y = rng.range_inclusive(0, h - ch);
        let x = rng.range_inclusive(0, w - cw);
        let mut crop = ex.crop(y, x, ch, cw, self.factor)?;
        if crop.text.is_some() {
            crop.text = self.detail_text.clone();
        }
        Ok(crop)
    }
}

/// Plain SGD on the combined loss.
pub fn train(
    model: &MlpDenoiser,
    set: &TrainSet,
    cfg: &TrainConfig,
    schedule: &DiffusionSchedule,
    matte_codec: &LatentCodec,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let wants_text = model.layout().text > 0;
    if cfg.use_text != wants_text || set.detail_text.is_some() != cfg.use_text {
        return Err(Error::config(
            "text use must agree between model, data and configuration",
        ));
    }
    let obj = Objective {
        schedule,
        matte_codec,
        pixel_weight: cfg.pixel_loss_weight,
    };
    let mut model = model.clone();
    let mut params = model.params();
    let mut rng = SeededRng::new(cfg.seed);
    let mut curve = Vec::with_capacity(cfg.iters);
    for iter in 0..cfg.iters {
        let batch = (0..cfg.batch)
            .map(|_| set.pick(&mut rng, cfg.multi_scale))
            .collect::<Result<Vec<_>>>()?;
        let draws = draw(&batch, schedule, &mut rng)?;
        let (loss, grad) = loss_and_grad(&model, &batch, &draws, &obj)?;
        if !loss.total.is_finite() {
            return Err(Error::Training {
                iter,
                reason: format!("loss is {}", loss.total),
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                iter,
                reason: "non-finite gradient".into(),
            });
        }
        curve.push(loss.total);
        if cfg.lr != 0.0 {
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= cfg.lr * g;
            }
            model.set_params(&params)?;
        }
    }
    Ok(TrainOutcome { model, curve })
}

/// Mean conditional loss over `repeats` fixed draws per example.
pub fn held_out_loss(
    denoiser: &dyn Denoiser,
    set: &TrainSet,
    obj: &Objective<'_>,
    seed: u64,
    repeats: usize,
) -> Result<f64> {
    let mut rng = SeededRng::new(seed);
    let mut total = 0.0;
    for _ in 0..repeats.max(1) {
        total += loss_conditional(denoiser, &set.examples, obj, &mut rng)?;
    }
    Ok(total / repeats.max(1) as f64)
}
