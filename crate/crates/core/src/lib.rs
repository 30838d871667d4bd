//! Worst-case affine-transform attacks on image classifiers, and training
//! loops that use them to harden models.
//!
//! The pipeline: [`warp`] applies parameterized affine transforms to
//! images, [`space`] bounds the parameters and gives searchers a normalized
//! box to move in, [`attack`] looks for the transform a classifier gets
//! most wrong, [`model`] is a small from-scratch CNN, and [`train`] ties
//! them together into standard, augmented, and adversarial training plus
//! evaluation under attack.

pub mod attack;
pub mod data;
pub mod error;
pub mod model;
pub mod space;
pub mod train;
pub mod warp;

pub use attack::{
    grid_search, worst_of_k, AttackOutcome, CandidateScore, EsState, EsStateStore, TraceRecord,
};
pub use error::{Error, Result};
pub use model::{predict, Classifier, Cnn, CnnConfig};
pub use space::{ConstraintSpace, NormalizedPoint};
pub use warp::{warp_image, Image, TransformParams};
