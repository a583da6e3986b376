//! Component-level audio anti-spoofing toolkit.
//!
//! An audio scene mixes speech with environmental sound, and either part can
//! be forged on its own. This crate builds the full workbench for that
//! threat model: corpus forging at controlled SNR, complex-mask speech
//! separation with an adaptive environment soft-mask, jointly trained
//! per-component detectors, fused five-class inference with majority voting,
//! and precision/recall/F1 evaluation. A small reverse-mode autodiff engine
//! keeps everything trainable without external ML dependencies.

pub mod autodiff;
pub mod detector;
pub mod dsp;
pub mod error;
pub mod forge;
pub mod infer;
pub mod model;
pub mod separation;
pub mod stft;
pub mod synth;
pub mod trainer;
pub mod wav;

pub use error::{Error, Result};

/// Artifact version, reported by the CLI next to the checkpoint format.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
