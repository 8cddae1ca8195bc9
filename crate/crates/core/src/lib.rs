//! Unsupervised coreset selection.
//!
//! A small contrastive encoder is trained on unlabeled images; every epoch the
//! cosine similarity between the two augmented views of each example is
//! subtracted from that example's running score. Examples whose views stay
//! dissimilar accumulate the highest scores and form the coreset. The crate
//! also carries the supervised baselines and the evaluation protocols used to
//! judge a selection.

pub mod augment;
pub mod baselines;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod rng;
pub mod scoring;
pub mod train;

pub use error::{Error, Result};
