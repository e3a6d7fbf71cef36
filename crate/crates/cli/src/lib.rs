//! Command-line front end and HTTP server for the suggestion toolkit.

pub mod app;
pub mod server;

pub use app::run;
