pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod naf;
pub mod rli;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{DlfError, Result};
