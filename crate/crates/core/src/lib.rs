pub mod decoding;
pub mod error;
pub mod eval;
pub mod fixture;
pub mod io;
pub mod lm;
pub mod nn;
pub mod pipeline;
pub mod reward;
pub mod tokenizer;

pub use error::{Error, Result};
