pub mod audio;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluator;
pub mod losses;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
