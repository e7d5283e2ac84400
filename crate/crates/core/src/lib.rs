pub mod attention;
pub mod complexity;
pub mod degradation;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod selfcheck;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Shape, Tape, Tensor, Var};
