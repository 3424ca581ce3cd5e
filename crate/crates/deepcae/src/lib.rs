//! Contractive autoencoders with an exact multi-layer Jacobian
//! penalty, plus the training, preprocessing, and evaluation
//! machinery needed to benchmark them against stacked and standard
//! variants.

pub mod cli;
pub mod error;
pub mod eval;
pub mod ioutil;
pub mod models;
pub mod penalty;
pub mod preprocess;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
