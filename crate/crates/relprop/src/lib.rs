//! File formats and command-line plumbing around [`relprop_core`].
//!
//! Models are JSON, inputs are one-row CSV or binary PGM, relevance maps go
//! out as CSV and PPM heatmaps, and synthetic datasets live in a directory
//! of PGM images indexed by `manifest.csv`.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod image;
pub mod model_file;
pub mod report;
pub mod tensor_io;

pub use error::{FormatError, Result};
pub use model_file::{load_model, model_from_json, model_to_json, save_model};
