//! Clip-wise video object detection with identity-consistent aggregation.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`tape`], [`gradcheck`], [`checkpoint`]: dense tensors with
//!   reverse-mode differentiation and a finite-difference checker.
//! - [`geometry`]: boxes, IoU/GIoU, logit-space box refinement, RoI sampling.
//! - [`matching`]: focal loss, Hungarian assignment and the set loss.
//! - [`model`]: backbone, adaptive queries, decoder layers and heads.
//! - [`ica`]: identity matching, contrastive loss and identity-consistent
//!   aggregation.
//! - [`synthvid`]: deterministic synthetic clips with ground-truth tracks.
//! - [`eval`]: VOC-style AP/mAP with the slow/medium/fast breakdown.
//! - [`optim`]: AdamW and the step learning-rate schedule.

// `!(x > y)` is used on purpose so that NaN fails range checks.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod ica;
pub mod init;
pub mod matching;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod synthvid;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{BoxDelta, NormBox};
pub use scalar::{Precision, Scalar};
pub use tape::{OpKind, Tape, Var};
pub use tensor::Tensor;
