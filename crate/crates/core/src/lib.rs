pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod graph;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
