//! File formats, corpus loading and the command-line front end for
//! `tinylm-core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod kv;
pub mod manifest;
pub mod study;
