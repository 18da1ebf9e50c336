pub mod arch;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod network;
pub mod nn;
pub mod objects;
pub mod par;
pub mod seed;
pub mod stitch;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
