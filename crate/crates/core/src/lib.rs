//! Conformer encoder / transformer decoder speech recognizer with learned
//! ensembles over per-block outputs, trained with a hybrid CTC-attention
//! objective and decoded by CTC prefix search plus attention rescoring.

pub mod cli;
pub mod decoding;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
