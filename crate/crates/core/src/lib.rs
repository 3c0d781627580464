//! Deformable-attention keypoint detection, description and two-view matching.
//!
//! The crate is organised bottom-up:
//!
//! * [`numeric`]: dense tensors, bilinear sampling, convolution and a
//!   reverse-mode tape.
//! * [`attention`]: single- and multi-scale deformable attention and the
//!   encoder stack.
//! * [`keypoint`]: score-map network, NMS and differentiable sub-pixel
//!   refinement.
//! * [`descriptor`]: backbone + encoder + fusion into descriptor and
//!   matchability maps.
//! * [`matcher`]: dual-softmax/MNN sparse matching and epipolar semi-dense
//!   refinement.
//! * [`geometry`]: synthetic two-view scenes, warping, fundamental/pose
//!   estimation and evaluation metrics.
//! * [`losses`] and [`train`]: training objectives and the two-stage loop.
//! * [`evaluate`]: pose AUC and homography accuracy over generated scenes.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod attention;
pub mod descriptor;
pub mod error;
pub mod evaluate;
pub mod geometry;
pub mod keypoint;
pub mod losses;
pub mod matcher;
pub mod model;
pub mod numeric;
pub mod params;
pub mod train;

pub use error::{Error, Result};
