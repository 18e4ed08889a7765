//! Monte-Carlo oracle, toy alignment task, file formats and command line
//! for stochastic clock attention. The numerical kernels live in
//! `clockattn-core`.

pub mod certify;
pub mod cli;
mod error;
pub mod io;
pub mod selftest;
pub mod mc_oracle;
pub mod toytask;

pub use error::{Error, Result};
