//! Command-line tool and HTTP service around `genmatte-core`.
//!
//! The [`engine::Engine`] owns one configured pipeline and denoiser; the CLI
//! and the `/v1` service both submit [`engine::Job`]s to it.

pub mod cli;
pub mod config;
pub mod engine;
pub mod error;
pub mod io;
pub mod service;

pub use config::EngineConfig;
pub use engine::{Engine, Job};
pub use error::AppError;
