//! Command-line pipeline and HTTP review service for lab test harmonization.

pub mod cli;
pub mod commands;
pub mod config;
pub mod server;
