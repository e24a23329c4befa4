//! Semantic enrichment of keypoint descriptors against perceptual aliasing,
//! with the matching, pose and evaluation stack needed to measure it on a
//! synthetic vineyard.

pub mod cli;
pub mod descriptor;
pub mod enrich;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod geom;
pub mod io;
pub mod mask;
pub mod maskenc;
pub mod matchcore;
pub mod posekit;
pub mod scenesim;

pub use error::{Error, Result};
