//! Channel-delay coordination analysis for multichannel behavioral feature streams.
//!
//! The crate covers the whole pipeline:
//!
//! - [`ingest`]: cohort manifests, feature-stream CSV files and utterance segmentation
//! - [`correlation`]: time-delay embedded correlation (TDEC) matrices and full
//!   channel-delay coordination (FVTC) maps
//! - [`eigen`]: Jacobi eigensolver, rank-ordered eigenspectra and group curves
//! - [`tensor`]: a small reverse-mode differentiation engine with the layers the
//!   classifiers need
//! - [`models`]: the TDEC-CNN, FVTC-CNN and two-branch fusion topologies
//! - [`train`]: leave-one-subject-out training, subject-level aggregation and metrics
//! - [`synth`]: seeded synthetic cohorts with controllable coordination complexity
//! - [`plot`]: SVG rendering of averaged eigenspectra and difference curves
//!
//! ```text
//! streams -> segments -> TDEC / FVTC -> CNN (per branch) -> fusion head -> subject label
//!                            |
//!                            +-> eigenspectra -> group averages -> difference curve
//! ```

pub mod correlation;
pub mod dataset;
pub mod eigen;
mod error;
pub mod ingest;
pub mod matrix;
pub mod models;
pub mod plot;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Semantic version of the library and CLI.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
