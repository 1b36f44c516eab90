//! Command-line companion to the core crate: binary file formats, flat
//! key-value configuration, experiment drivers, and the acceptance suite.

pub mod acceptance;
pub mod commands;
pub mod config;
pub mod formats;
pub mod metrics;
pub mod pipeline;
