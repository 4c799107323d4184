//! Synthesis and evaluation of vehicle speed micro-trips.
//!
//! The crate provides two generation engines over a shared trajectory core:
//!
//! * a second-order Markov chain with exact forward-backward bridge sampling
//!   that pins both endpoints at rest ([`markov`]), and
//! * a conditional denoising-diffusion engine with pluggable denoisers
//!   (1D conv U-Net and transformer encoder, both trained through the
//!   in-crate reverse-mode autodiff) plus physics-informed losses
//!   ([`diffusion`], [`neural`]).
//!
//! Around them sit ingest/segmentation ([`ingest`]), driving-regime
//! clustering and stratified splits ([`analysis`]), generation-side
//! condition sampling and post-processing ([`postgen`]), and a
//! distributional evaluation suite ([`metrics`]).

pub mod analysis;
pub mod diffusion;
pub mod error;
pub mod fixtures;
pub mod generate;
pub mod ingest;
pub mod markov;
pub mod metrics;
pub mod neural;
pub mod postgen;
pub mod rng;
pub mod trip;
pub mod util;

pub use error::{Error, Result};
pub use trip::{
    derive_acceleration, derive_jerk, pad_or_truncate, trip_stats, validate_micro_trip,
    AccelSeries, MicroTrip, PaddedWindow, SpeedTrajectory, TripStats, WINDOW_LEN,
};
