//! Learned affine augmentation distributions trained jointly with a small
//! network on a reverse-mode autodiff tape.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod lie;
pub mod model;
pub mod network;
pub mod tensor;
pub mod warp;

pub use error::{Error, Result};
pub use model::{AugerinoModel, Mode, Target};
pub use tensor::{Tape, Tensor, Var};
