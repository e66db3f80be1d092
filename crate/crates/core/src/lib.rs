//! Gait-severity classification from 2D pose sequences: pose preprocessing,
//! clinical gait features, an ST-GCN skeleton backbone, dual-stream fusion,
//! Grad-CAM keypoint attribution, training and evaluation.

// NaN inputs must fail range checks, so `!(x > 0.0)` style guards are deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attribution;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod features;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pose;
pub mod stgcn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
