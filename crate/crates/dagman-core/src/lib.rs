//! Attention-guided masked image modeling for 3D volumes with a noisy
//! EMA-teacher co-distillation objective (DAGMaN), plus the diagnostic
//! instruments used to study it: attention-distance entropy, attention
//! maps and feature-cluster separation.
//!
//! The crate is organised around the pretraining pipeline:
//!
//! * [`volume`] — synthetic 3D volumes, the `.vol` on-disk format,
//!   resampling and the two-view crop augmentation,
//! * [`tape`] — a small reverse-mode autodiff tape all model math runs on,
//! * [`encoder`] — the hierarchical windowed-attention backbone,
//! * [`sa`] — the semantic-attention block with its global `[CLS]` token,
//! * [`masking`] — attention-guided, random, blockwise and low-attention
//!   mask generators plus teacher patch dropout,
//! * [`distill`] — the four loss heads, sharpening/centering, EMA update,
//! * [`trainer`] — the pretraining loop, checkpointing, linear probing and
//!   fine-tuning,
//! * [`diagnostics`] — entropy reports, attention maps, cluster metrics.

pub mod diagnostics;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod masking;
pub mod num;
pub mod params;
pub mod rng;
pub mod sa;
pub mod tape;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use num::Scalar;
