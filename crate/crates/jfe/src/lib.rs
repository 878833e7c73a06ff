//! File formats, configuration and the command-line tool around
//! [`jfe_core`].

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod fenc;
pub mod pipeline;
pub mod records;
pub mod report;

pub use error::{JfeError, Result};
