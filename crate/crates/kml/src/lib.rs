//! File formats, pipeline stages and command-line plumbing for `kml-core`.

pub mod config;
pub mod formats;
pub mod pipeline;

pub use config::RunConfig;
