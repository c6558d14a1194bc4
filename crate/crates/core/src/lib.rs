pub mod error;
pub mod eval;
pub mod filters;
pub mod harmonics;
pub mod ica;
pub mod io;
mod linalg;
pub mod nets;
pub mod pipeline;
pub mod signal;
pub mod source;
pub mod synth;

pub use error::{Error, Result};
