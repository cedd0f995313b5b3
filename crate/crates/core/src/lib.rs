//! Text-driven counterfactual latent editing.
//!
//! A trainable mapper turns a target-text embedding and a source latent code
//! into a residual edit. It is trained against frozen backends with a
//! contrastive objective over embedding-space directions, computed on
//! perspective-augmented views of the edited image.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augmentation;
pub mod autodiff;
pub mod backends;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod mapper;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
