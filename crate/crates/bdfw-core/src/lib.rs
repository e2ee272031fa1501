//! Progressive black-box backdoor purification toolkit.
//!
//! The defense runs a suspicious image through three stages: locate and
//! inpaint conspicuous patch triggers, reconstruct and subtract blended
//! triggers, then noise-and-denoise residual low-visibility perturbations
//! with a small diffusion model. The crate also ships the attack
//! injection, surrogate-data synthesis, victim training, and evaluation
//! machinery needed to exercise the defense end to end at desk scale.

pub mod checkpoint;
pub mod error;
pub mod nn;
pub mod rng;
pub mod tensor;

pub mod data;
pub mod trigger;
pub mod victim;

pub mod decleaner;
pub mod diffusion;
pub mod inpainter;
pub mod locator;

pub mod config;
pub mod harness;
pub mod metrics;
pub mod pipeline;

pub use error::{BdfwError, Result};
pub use tensor::{clamp01, BinaryMask, ImageTensor, LabeledImage};
