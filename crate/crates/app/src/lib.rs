//! Command line, SVG rendering and HTTP service around the traffic generator.

pub mod api;
pub mod cli;
pub mod error;
pub mod render;
pub mod server;

pub use error::{AppError, AppResult};
