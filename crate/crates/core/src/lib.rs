//! Parameter-efficient fine-tuning of a windowed Vision-Transformer
//! segmentation model for pixel-level crack detection.
//!
//! The crate is organised bottom-up:
//!
//! - [`numeric`]: dense arrays and a reverse-mode differentiation tape.
//! - [`model`]: the windowed ViT image encoder, adapter/LoRA deltas, the
//!   default prompt and the two-way-transformer mask decoder.
//! - [`train`]: CE + Dice loss, warm-up/poly schedule, AdamW, augmentation
//!   and the training loop with best-F1 checkpoint selection.
//! - [`eval`]: confusion counts, Pr/Re/F1/IoU and the two artificial noise
//!   pipelines used for robustness testing.
//! - [`data`]: dataset ingestion, the synthetic crack generator, the
//!   tensor archive and run configuration.
//! - [`cli`]: the `crackseg` command-line front end.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numeric;
pub mod params;
pub mod train;

pub use error::{Error, Result};
