pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod kid;
pub mod graph;
pub mod model;
pub mod params;
pub mod pose;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Activation, Graph, Padding, ReduceMode, Var};
pub use tensor::{Real, Tensor};
