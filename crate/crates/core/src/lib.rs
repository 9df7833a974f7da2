pub mod adaptive;
pub mod attacks;
pub mod autograd;
pub mod cli;
pub mod config;
pub mod data_io;
pub mod error;
pub mod evaluation;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod plot;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
