//! Flow-prompted audio-visual segmentation at desk scale.
//!
//! Motion-derived pre-masking, an intersection-label auxiliary loss, the
//! weighted training objective, a two-pass visual-textual alignment
//! encoder, segmentation metrics, and a synthetic-scene training harness,
//! all on a small reverse-mode differentiation engine.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod flow;
pub mod losses;
pub mod manifest;
pub mod mask;
pub mod metrics;
pub mod pgm;
pub mod report;
pub mod toy;
pub mod vta;

pub use error::{Error, Result};
