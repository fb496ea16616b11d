//! Joint learning of dense feature extraction and cost aggregation for
//! correspondence, supervised by confidence-filtered winner-take-all pseudo
//! labels.
//!
//! The pipeline for one image pair:
//!
//! 1. [`feature::extract_features`] + [`feature::l2_normalize`] produce
//!    per-cell descriptors for source and target.
//! 2. [`cost_volume::correlate`] builds the raw cosine cost `C`.
//! 3. [`aggregation::aggregate`] refines it into `A` with a 4D convolution.
//! 4. [`consistency::mask_and_flows`] extracts pseudo flows and
//!    forward-backward confidence masks from each volume.
//! 5. [`loss::joint_loss`] scores both volumes against both label sets.
//!
//! [`trainer::train`] runs this end to end with hand-written reverse-mode
//! gradients and AdamW, and [`evaluation`] measures PCK against synthetic
//! ground truth.

pub mod aggregation;
pub mod consistency;
pub mod cost_volume;
pub mod error;
pub mod evaluation;
pub mod feature;
pub mod geometry;
pub mod gradcheck;
pub mod loss;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/grids.md")]
    mod grids {}
    #[doc = include_str!("../../../book/src/cost-volumes.md")]
    mod cost_volumes {}
    #[doc = include_str!("../../../book/src/pseudo-labels.md")]
    mod pseudo_labels {}
    #[doc = include_str!("../../../book/src/objective.md")]
    mod objective {}
    #[doc = include_str!("../../../book/src/aggregation.md")]
    mod aggregation {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/gradients.md")]
    mod gradients {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
