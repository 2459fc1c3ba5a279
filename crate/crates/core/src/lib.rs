//! Cascaded Dirichlet-process multiple instance learning.
//!
//! Instances inside each bag are clustered by a truncated variational DP
//! Gaussian mixture whose components are produced by small encoder
//! networks. The occupied clusters' centroids are then classified by a
//! second, supervised DP mixture at the bag level. The fitted mixtures
//! also provide patch scores and a likelihood-based OOD score.

pub mod cli;
pub mod data_io;
pub mod distributions;
pub mod dp_mixture;
pub mod encoder;
mod error;
pub mod evaluation;
pub mod pipeline;
pub mod special_math;
pub mod stick_breaking;
pub mod synth;
pub mod uncertainty;

pub use error::{Error, Result};
