//! Inner-geometry learning signals for camera-based BEV detectors, as
//! standalone differentiable kernels.
//!
//! * [`depth`]: continuous depth from categorical bins, per-target reference
//!   selection, the relative (inner) depth loss and the dense BCE depth loss.
//! * [`distill`]: keypoint sampling on BEV maps and the channel / keypoint Gram
//!   distillation losses, with gradients through bilinear sampling.
//! * [`geometry`]: cameras, boxes, BEV grid mapping, ground-truth depth maps.
//! * [`scenegen`]: seeded synthetic scenes and teacher BEV maps.
//! * [`harness`]: configuration, loss composition, gradient checks and the toy
//!   training loop behind the `tig` CLI.
//!
//! With the default `parallel` feature, per-target and per-view work runs on
//! rayon; results are always reduced in input order.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod depth;
pub mod distill;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod numerics;
pub mod oracle;
pub mod par;
pub mod scenegen;

pub use error::{Error, Result};
pub use numerics::{LossResult, Tensor};
