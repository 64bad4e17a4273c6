//! Semi-decoupled audio attention inside a miniature audio-driven
//! talking-face diffusion pipeline.
//!
//! The crate is organised bottom-up:
//!
//! - [`audio`]: synthetic audio and a deterministic per-frame featurizer.
//! - [`attention`]: multi-head cross-attention with analytic gradients.
//! - [`adapter`]: region masks, zero convolutions, the semi-decoupled module
//!   and the fully-decoupled baseline.
//! - [`diffusion`]: noise schedule, denoiser, training and DDIM sampling.
//! - [`faces`]: sprite-face video clips with known driving signals.
//! - [`metrics`]: smoothness, consistency and lip-sync proxies.
//! - [`pipeline`]: dataset → training pool → sampled clips → metrics.
//! - [`bench`]: MAC accounting and wall-clock comparison of adapter kinds.
//! - [`config`] and [`tensor_file`]: run configuration and on-disk formats.

pub mod adapter;
pub mod attention;
pub mod audio;
pub mod bench;
pub mod config;
pub mod diffusion;
mod error;
pub mod faces;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod tensor_file;

pub use error::{Error, Result};
