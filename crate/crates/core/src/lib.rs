pub mod alignment;
pub mod error;
pub mod executor;
pub mod likelihood;
pub mod model;
pub mod rng;
pub mod rollout;
pub mod seq;
pub mod tasks;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
