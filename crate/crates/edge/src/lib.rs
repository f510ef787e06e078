//! Model files, image IO, latency measurement and the `cactus` command line
//! on top of `cactus-core`.

pub mod bench;
pub mod cli;
pub mod error;
pub mod format;
pub mod io;
pub mod report;

pub use error::{EdgeError, Result};
pub use format::{load_model, save_model, FormatError};
