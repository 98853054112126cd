pub mod data;
pub mod dialogue;
pub mod encoder;
pub mod error;
pub mod masks;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
