//! Semi-supervised learning with a non-negative deep rendering mixture model.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod data;
pub mod error;
pub mod fixtures;
pub mod gradcheck;
pub mod model;
pub mod objective;
pub mod probe;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{ConvMode, Switch, Tape, Tensor, Var};
