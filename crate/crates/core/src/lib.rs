//! Training-free and lightly trained open-vocabulary segmentation from
//! image-level labels: enriched class text, attention recalibration of a
//! frozen ViT, class activation maps and pseudo labels.

pub mod dataset;
pub mod dynamic_calibration;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod fixtures;
pub mod netpbm;
pub mod numerics;
pub mod pipeline;
pub mod static_calibration;
pub mod store;
pub mod text_enrichment;
pub mod training;

pub use error::{Error, ErrorKind, Result};
pub use numerics::{Rng, Tensor};
