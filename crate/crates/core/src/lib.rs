//! Diffusion-based alpha matting.
//!
//! The engine samples a low-resolution ensemble of mattes, measures where the
//! ensemble disagrees, and re-samples only those regions at full resolution
//! with patches that share one noise field per step. Denoisers are pluggable;
//! two analytic oracles and a small trainable MLP ship with the crate.
//!
//! ```
//! use genmatte_core::{DiffusionSchedule, Tensor3, Dims, SeededRng};
//!
//! let schedule = DiffusionSchedule::default();
//! let z0 = Tensor3::filled(Dims::new(1, 2, 2), 0.5);
//! let eps = SeededRng::new(7).randn(z0.dims()).unwrap();
//! let zt = schedule.q_sample(&z0, 10, &eps).unwrap();
//! assert_eq!(zt.dims(), z0.dims());
//! ```

pub mod codec;
pub mod compositing;
pub mod denoiser;
pub mod error;
pub mod guidance;
pub mod hires;
pub mod image;
pub mod metrics;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use codec::LatentCodec;
pub use denoiser::{Denoiser, DenoiserInput};
pub use error::{Error, Result};
pub use image::{AlphaMatte, ImageBuffer};
pub use rng::SeededRng;
pub use schedule::{DiffusionSchedule, ScheduleKind};
pub use tensor::{Dims, PatchBox, Tensor3};
