pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod heads;
pub mod model;
pub mod nn;
pub mod planner;
pub mod score;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
