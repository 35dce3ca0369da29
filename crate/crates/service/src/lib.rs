//! HTTP service and command-line front end for the diagnosis pipeline.

pub mod api;
pub mod cli;
pub mod schemas;
pub mod store;
