//! End-to-end physiological time-series classification toolkit.
//!
//! The crate covers the full experimental pipeline:
//!
//! - [`dataset`]: CSV ingestion of multichannel recordings, 10-second
//!   windowing against rating timelines, label grouping, fold construction,
//!   and a deterministic synthetic generator for desk-scale verification.
//! - [`dsp`]: Butterworth/notch design as stable biquad cascades, zero-phase
//!   filtering, and per-window normalization.
//! - [`augment`]: Gaussian-noise, time-warp, and amplitude-scale operators
//!   with a training-fold-only policy.
//! - [`nn`]: dense tensors with reverse-mode autodiff and the layer set the
//!   network requires.
//! - [`model`]: the network itself — parallel multi-kernel convolutions,
//!   strided residual blocks with channel/temporal attention, bidirectional
//!   GRU head, and intermediate multimodal fusion.
//! - [`train`]: AdamW, plateau LR scheduling, and the best-checkpoint
//!   training loop.
//! - [`eval`]: accuracy/macro-F1 metrics and the 10-fold / leave-one-subject-
//!   out cross-validation harness.
//! - [`config`]: the TOML experiment configuration shared with the CLI.

pub mod augment;
pub mod config;
pub mod dataset;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use rng::RngStream;
