pub mod data;
pub mod error;
pub mod eval;
pub mod geom;
pub mod nn;
pub mod regressor;
pub mod retrieval;
pub mod scale_recovery;
pub mod training;

pub use error::{Error, Result};
