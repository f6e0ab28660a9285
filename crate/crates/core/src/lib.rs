//! Deterministic desk-scale testbed for preference optimization over video
//! question answering.
//!
//! The crate builds a fully synthetic video world (symbol grids with scripted
//! appearance events), a tiny autoregressive QA model with exact gradients, a
//! family of clip augmentations for constructing rejected preference pairs,
//! the preference objectives themselves (response-contrast, clip-contrast,
//! and multi-candidate clip-contrast with prompt-aware weights), training
//! loops, and a benchmark harness (adversarial paired suite, held-out suite,
//! augmentation sweeps). Every stage is driven by a single root seed through
//! named sub-seeds, so reruns are byte-identical.

pub mod augment;
pub mod benchmark;
pub mod config;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod training;
pub mod world;
