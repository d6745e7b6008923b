//! The lab service: one simulated apparatus behind an HTTP API, plus the
//! `nvlab` command line.

pub mod api;
pub mod cli;
pub mod config;
pub mod error;
pub mod lab;

pub use error::Error;
