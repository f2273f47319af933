pub mod classifier;
pub mod error;
pub mod fisher;
pub mod gmm;
pub mod io;
pub mod model;
pub mod regression;
pub mod pipeline;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
