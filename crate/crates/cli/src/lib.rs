//! Command line tools and the interactive HTTP service built on
//! `rellie-core`.

pub mod commands;
pub mod service;
pub mod session;
