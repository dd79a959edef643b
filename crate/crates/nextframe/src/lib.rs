//! File formats, parallel experiment drivers and the command-line front end
//! for `nextframe-core`.

pub mod bfun;
pub mod checks;
pub mod config;
pub mod demo1d;
pub mod error;
pub mod experiments;
pub mod pgm;
pub mod report;
pub mod vseq;

pub use error::{FormatError, Result};
