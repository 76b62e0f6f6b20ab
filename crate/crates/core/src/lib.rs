//! Calibration-consistency metrics and calibration-aware margin training for
//! embeddings on the unit hypersphere.
//!
//! * [`metrics`]: utility curves, OPIS, epsilon-OPIS, recall@k.
//! * [`pairs`]: positive/negative pair construction and scoring.
//! * [`losses`]: the CAM regularizer, contrastive and triplet base losses, gradients.
//! * [`vmf`]: vMF concentration estimates and class-adaptive margins (AdaCAM).
//! * [`synth`]: vMF sampling and synthetic mixture datasets.
//! * [`trainer`]: the gradient-descent loop and AdaCAM fine-tuning.
//! * [`eval`]: one-call evaluation of an embedding set.

// `!(x < y)` is the idiom for rejecting NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod losses;
pub mod metrics;
pub mod pairs;
pub mod rng;
pub mod sphere;
pub mod synth;
pub mod trainer;
pub mod vmf;

pub use error::{CalmError, Result};
pub use sphere::EmbeddingSet;
