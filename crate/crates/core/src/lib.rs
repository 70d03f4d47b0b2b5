pub mod error;
pub mod nn;
pub mod par;

pub use error::{Error, Result};
pub mod signal;
pub mod codec;
pub mod mask;
pub mod model;
pub mod cwt;
pub mod cache;
pub mod tasks;
pub mod probe;
pub mod experiment;
