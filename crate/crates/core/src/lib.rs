//! Segmentation toolkit for polar intravascular PS-OCT cross-sections.
//!
//! Six exclusive classes (outside, lumen, intima, media, guidewire shadow,
//! plaque shadow) are predicted by a small residual U-Net trained with a
//! five-term loss: weighted cross-entropy, generalized Dice, a boundary
//! precision term, a frozen Wasserstein critic ("attending physician") and a
//! soft boundary-cardinality term. A synthetic vessel phantom generator stands
//! in for clinical data so the full pipeline runs on a desk CPU.
//!
//! Module map:
//! - [`data`]: image/label types, contour rasterisation, record files
//! - [`phantom`]: synthetic labelled cross-sections and label degradation
//! - [`losses`]: the five loss terms and their weighted combination
//! - [`critic`]: Wasserstein critic with gradient penalty
//! - [`segnet`]: the segmentation network
//! - [`augment`]: polar-domain augmentation
//! - [`postprocess`]: topology enforcement and boundary extraction
//! - [`metrics`]: accuracy, Dice, sensitivity/specificity, ADE, MHD
//! - [`trainer`]: splitting, training, lambda search, ablation

pub mod augment;
pub mod config;
pub mod critic;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod phantom;
pub mod postprocess;
pub mod segnet;
pub mod trainer;

pub use error::{Error, Result};
