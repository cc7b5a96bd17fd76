//! Library half of the `gfef` binary: commands and the HTTP service.

pub mod commands;
pub mod service;
