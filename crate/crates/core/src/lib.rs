//! Weakly-supervised segmentation from scribble annotations.
//!
//! A latent-variable generator learns dense label maps from sparse
//! scribbles; its pseudo-labels, merged with the scribbles, train a
//! dropout U-Net whose Monte-Carlo averaged predictions come with a
//! per-pixel entropy map.

pub mod dataio;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod maps;
pub mod metrics;
pub mod networks;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod pipeline;
pub mod weak_labels;

pub use error::{Error, Result};
pub use maps::{BinaryMask, Image, LabelMap, ProbMap, ScribbleMap, UnlabeledMask, UNLABELED};
