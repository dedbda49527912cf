//! HTTP service and command-line front end for the alignment pipeline.

pub mod annotations;
pub mod api;
pub mod cli;
pub mod jobs;
pub mod store;
