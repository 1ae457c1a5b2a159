pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod data;
pub mod model;
pub mod ndgrad;
pub mod train;

pub use error::{Error, Result};
