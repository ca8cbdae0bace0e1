//! Geometric-bottleneck motion transfer on dense tensors.

pub mod acceptance;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod gradcheck;
pub(crate) mod linalg;
pub mod modconv;
pub mod pipeline;
pub mod pnm;
pub mod synthbench;
pub mod tensor;

pub use error::{Error, Result};
