//! Library surface of the pipeline driver, so integration tests can call
//! commands directly.

pub mod commands;
pub mod config;
pub mod manifest;
