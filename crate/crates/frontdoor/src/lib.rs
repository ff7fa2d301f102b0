//! Command line tools and the local session service for the semcolor engine.

pub mod bench;
pub mod cli;
pub mod service;
pub mod visual;
