#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Mixed real-synthetic LiDAR anomaly datasets, point-level anomaly scoring
//! and evaluation.

pub mod error;
pub mod feature_scoring;
pub mod insertion;
pub mod intensity_synth;
pub mod loss_forward;
pub mod mesh_bank;
pub mod metrics;
pub mod range_projection;
pub mod scan_io;
pub mod synthetic;

pub use error::{Error, Result};
