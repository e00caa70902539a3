pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod layout;
pub mod losses;
pub mod model;
pub mod task;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
