use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use genmatte_core::denoiser::{FirstLayer, InputLayout, MlpDenoiser, TextEmbedder};
use genmatte_core::guidance::ScribbleDoc;
use genmatte_core::metrics::evaluate;
use genmatte_core::synthetic::{dataset, SceneKind};
use genmatte_core::trainer::{held_out_loss, train, Objective, TrainConfig, TrainPair, TrainSet};
use genmatte_core::AlphaMatte;

use crate::config::{DenoiserSection, EngineConfig};
use crate::engine::{Engine, GuideInput, Job};
use crate::error::AppError;
use crate::io::{load_gray, load_image, write_file};

#[derive(Debug, Parser)]
#[command(name = "genmatte", version, about = "Diffusion-based alpha matting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute the alpha matte of one image.
    Matte(MatteArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Train a small denoiser on synthetic scenes.
    Train(TrainArgs),
    /// Compare a predicted matte against ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OracleKind {
    Gaussian,
    Procedural,
}

#[derive(Debug, Args)]
pub struct MatteArgs {
    pub input: PathBuf,
    /// Output path; defaults to `<input stem>.matte.png` next to the input.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Ensemble size.
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    /// Refine uncertain regions at full resolution.
    #[arg(long, conflicts_with = "lr_only")]
    pub hr: bool,
    /// Skip the full-resolution pass.
    #[arg(long)]
    pub lr_only: bool,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub overlap: Option<usize>,
    #[arg(long, conflicts_with_all = ["mask", "scribbles"])]
    pub trimap: Option<PathBuf>,
    #[arg(long, conflicts_with = "scribbles")]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub scribbles: Option<PathBuf>,
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum)]
    pub oracle: Option<OracleKind>,
    /// Also write the uncertainty map and the patch plan.
    #[arg(long)]
    pub diagnostics: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub oracle: Option<OracleKind>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SceneArg {
    Threshold,
    Soft,
    Hair,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Weights file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Codec and text settings are taken from this configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "threshold")]
    pub scenes: SceneArg,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    /// Scene side in pixels.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [32, 32])]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    #[arg(long, default_value_t = 0.2)]
    pub lr: f64,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub text: bool,
    #[arg(long)]
    pub multi_scale: bool,
    #[arg(long, default_value_t = 0.0)]
    pub pixel_weight: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub json: bool,
}

fn apply_oracle(cfg: &mut EngineConfig, oracle: Option<OracleKind>) {
    match oracle {
        Some(OracleKind::Procedural) if !matches!(cfg.denoiser, DenoiserSection::Procedural { .. }) => {
            cfg.denoiser = DenoiserSection::default();
        }
        Some(OracleKind::Gaussian) if !matches!(cfg.denoiser, DenoiserSection::Gaussian { .. }) => {
            cfg.denoiser = DenoiserSection::Gaussian {
                mean: 0.5,
                variance: 0.04,
            };
        }
        _ => {}
    }
}

fn sibling(base: &Path, suffix: &str) -> PathBuf {
    let stem = base
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    base.with_file_name(format!("{stem}{suffix}"))
}

/// Runs `matte`; returns the files written.
pub fn run_matte(args: &MatteArgs) -> Result<Vec<PathBuf>, AppError> {
    let image = load_image(&args.input)?;
    let guide = match (&args.trimap, &args.mask, &args.scribbles) {
        (Some(p), _, _) => Some(GuideInput::Trimap(load_gray(p)?)),
        (_, Some(p), _) => Some(GuideInput::Mask(load_gray(p)?)),
        (_, _, Some(p)) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| AppError::Input(format!("cannot read {}: {e}", p.display())))?;
            let doc: ScribbleDoc =
                serde_json::from_str(&text).map_err(|e| AppError::Input(format!("invalid scribble file: {e}")))?;
            Some(GuideInput::Scribbles(doc))
        }
        _ => None,
    };
    let mut cfg = EngineConfig::resolve(args.config.as_deref())?;
    if let Some(s) = args.steps {
        cfg.sampler.steps = s;
    }
    if let Some(l) = args.seeds {
        cfg.hires.ensemble = l;
    }
    if let Some(e) = args.eta {
        cfg.sampler.eta = e;
    }
    if let Some(p) = args.patch_size {
        cfg.hires.patch_size = p;
    }
    if let Some(o) = args.overlap {
        cfg.hires.overlap = o;
    }
    apply_oracle(&mut cfg, args.oracle);
    let hr = if args.hr {
        Some(true)
    } else if args.lr_only {
        Some(false)
    } else {
        None
    };
    let engine = Engine::new(cfg)?;
    let result = engine.run(&Job {
        image,
        guide,
        prompt: args.prompt.clone(),
        seed: args.seed,
        hr,
    })?;
    let out = args.out.clone().unwrap_or_else(|| sibling(&args.input, ".matte.png"));
    write_file(&out, &result.alpha_png)?;
    let mut written = vec![out.clone()];
    if args.diagnostics {
        if let Some(u) = &result.uncertainty_png {
            let p = sibling(&out, ".uncertainty.png");
            write_file(&p, u)?;
            written.push(p);
        }
        let p = sibling(&out, ".plan.json");
        let json = serde_json::to_vec_pretty(&result.plan).map_err(|e| AppError::Internal(e.to_string()))?;
        write_file(&p, &json)?;
        written.push(p);
    }
    Ok(written)
}

pub fn run_train(args: &TrainArgs) -> Result<String, AppError> {
    let cfg = EngineConfig::resolve(args.config.as_deref())?;
    let pipeline = cfg.pipeline()?;
    let kind = match args.scenes {
        SceneArg::Threshold => SceneKind::ThresholdDiscs,
        SceneArg::Soft => SceneKind::SoftDiscs,
        SceneArg::Hair => SceneKind::Hair,
    };
    let scenes = dataset(&[kind], args.count, args.size, args.size, args.seed)?;
    let pairs: Vec<TrainPair> = scenes
        .into_iter()
        .map(|s| TrainPair {
            image: s.image,
            alpha: s.alpha,
            prompt: None,
        })
        .collect();
    let text: Option<TextEmbedder> = args.text.then_some(pipeline.text);
    let set = TrainSet::new(&pairs, &pipeline.image_codec, &pipeline.matte_codec, text.as_ref())?;
    let layout = InputLayout::conditional(
        pipeline.matte_codec.latent_channels(),
        pipeline.image_codec.latent_channels(),
        text.map_or(0, |t| t.dim),
    );
    let mut widths = vec![layout.site_width()];
    widths.extend(&args.hidden);
    widths.push(layout.latent);
    let model = MlpDenoiser::new(layout, &widths, FirstLayer::PerSite, args.seed)?;
    let tc = TrainConfig {
        lr: args.lr,
        iters: args.iters,
        batch: args.batch,
        seed: args.seed,
        use_text: args.text,
        pixel_loss_weight: args.pixel_weight,
        multi_scale: args.multi_scale,
    };
    let obj = Objective {
        schedule: &pipeline.schedule,
        matte_codec: &pipeline.matte_codec,
        pixel_weight: 0.0,
    };
    let before = held_out_loss(&model, &set, &obj, args.seed ^ 0xE7A1, 4)?;
    let out = train(&model, &set, &tc, &pipeline.schedule, &pipeline.matte_codec)?;
    let after = held_out_loss(&out.model, &set, &obj, args.seed ^ 0xE7A1, 4)?;
    write_file(&args.out, &out.model.to_bytes())?;
    Ok(serde_json::json!({
        "weights": args.out,
        "iters": args.iters,
        "initial_loss": before,
        "final_loss": after,
    })
    .to_string())
}

pub fn run_eval(args: &EvalArgs) -> Result<String, AppError> {
    let pred = AlphaMatte::new(load_gray(&args.pred)?)?;
    let gt = AlphaMatte::new(load_gray(&args.gt)?)?;
    let report = evaluate(&pred, &gt)?;
    if args.json {
        serde_json::to_string(&report).map_err(|e| AppError::Internal(e.to_string()))
    } else {
        Ok(report.to_string())
    }
}

pub fn run_serve(args: &ServeArgs) -> Result<(), AppError> {
    let mut cfg = EngineConfig::resolve(args.config.as_deref())?;
    apply_oracle(&mut cfg, args.oracle);
    let engine = Arc::new(Engine::new(cfg)?);
    let rt = tokio::runtime::Runtime::new().map_err(|e| AppError::Internal(e.to_string()))?;
    rt.block_on(crate::service::serve(engine, &args.bind))
}

/// Process exit code for `cli`.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Matte(a) => run_matte(a).map(|files| {
            for f in files {
                println!("{}", f.display());
            }
        }),
        Command::Serve(a) => run_serve(a),
        Command::Train(a) => run_train(a).map(|s| println!("{s}")),
        Command::Eval(a) => run_eval(a).map(|s| println!("{s}")),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("genmatte: {e}");
            e.exit_code()
        }
    }
}
