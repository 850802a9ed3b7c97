pub mod dataio;
pub mod error;
pub mod eval;
pub mod membank;
pub mod model;
pub mod rng;
pub mod substrate;
pub mod training;

pub use error::{Error, Result};
