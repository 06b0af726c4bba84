//! File formats, the concept labeler, report writers and the end-to-end
//! pipeline around `cbm-core`.

pub mod config;
pub mod dataset;
pub mod dictionary;
pub mod emb;
pub mod error;
pub mod fixture;
pub mod labeler;
pub mod pipeline;
pub mod report;

pub use error::{Result, ToolError};
