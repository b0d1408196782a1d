pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod model;
pub mod skin;
pub mod stream;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
