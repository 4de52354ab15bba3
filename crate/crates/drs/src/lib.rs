//! File formats, run configuration and the `drs` command line for the dialogue response selection
//! toolkit in [`drs_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
mod error;
pub mod io;
pub mod pipeline;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
