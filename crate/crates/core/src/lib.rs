//! Bagging-ensemble nuclei segmentation with test-time stain augmentation.
//!
//! An ensemble of weak segmenters, each trained on a random subset of the
//! training images, predicts every test image under several stain styles:
//! the original plus one normalization per representative template. The
//! resulting (styles x models) mask grid is fused by strict pixel-wise
//! majority vote, flat or hierarchically.
//!
//! | module | purpose |
//! |---|---|
//! | [`image`], [`tiling`] | rasters, PNG I/O, overlapping patch tiling and AND-merge |
//! | [`stain`] | optical density, sparse NMF stain fitting, normalization |
//! | [`templates`] | style features, k-means, template selection |
//! | [`ensemble`] | subset sampling, reference segmenter, model stack, tiled prediction |
//! | [`fusion`] | majority vote and the three fusion topologies |
//! | [`metrics`] | Dice, watershed instances, object F1, Wilcoxon signed-rank |
//! | [`harness`] | synthetic data, experiments, ablation sweeps, reports |

pub mod ensemble;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod image;
pub mod metrics;
pub mod rng;
pub mod stain;
pub mod templates;
pub mod tiling;

pub use crate::error::{Error, Result};
pub use crate::fusion::{MaskGrid, Topology};
pub use crate::image::{BinaryMask, RgbImage};
