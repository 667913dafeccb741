pub mod cli;
pub mod codegrid;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod sampling;
pub mod synthdata;

pub use error::{Error, Result};
