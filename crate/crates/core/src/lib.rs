pub mod analyzer;
pub mod calib;
pub mod data;
pub mod error;
pub mod io;
pub mod model;
pub mod params;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
