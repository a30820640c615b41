//! Multiple-instance learning with a bag-level pairwise ranking loss.
//!
//! A bag is a labeled group of instances; only bag labels are observed. The
//! engine scores a bag as the maximum instance score and trains any of three
//! built-in architectures by sampling positive/negative bag pairs and
//! minimizing a ranking hinge on the pair of bag scores. Because the loss
//! only constrains score differences, bag classification uses a threshold
//! learned from training scores.
//!
//! Module map:
//! - [`tensor`]: dense `f64` tensors and the numeric kernel.
//! - [`model`]: the three architectures as flat-parameter forward/backward.
//! - [`mil`]: bags, the pair loss, and the training loop.
//! - [`data`]: CSV/IDX ingestion, bag generators, feature normalization.
//! - [`eval`]: metrics, threshold selection, and cross-validation.

pub mod data;
pub mod error;
pub mod eval;
pub mod mil;
pub mod model;
pub mod tensor;

pub use data::{FeatureStats, MilDataset};
pub use error::{Error, Result};
pub use eval::CvReport;
pub use mil::{Bag, BagLabel, TrainConfig, TrainedModel};
pub use model::{ModelSpec, Parameters};
pub use tensor::{Activation, Tensor};
