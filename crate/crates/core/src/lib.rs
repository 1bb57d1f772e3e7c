//! Object context pooling for semantic segmentation, on a small
//! reverse-mode autodiff tensor core.

pub mod context;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod ocp;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Element, Shape4, Tensor};
