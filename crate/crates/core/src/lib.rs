pub mod baselines;
pub mod binio;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod imgproc;
pub mod losses;
pub mod models;
pub mod nn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{Scalar, Tensor};
