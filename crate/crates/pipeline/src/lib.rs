//! Orchestration around the core algorithms: configuration, on-disk
//! artifacts, the `ppm` command line and the HTTP session service.

pub mod cli;
pub mod config;
pub mod scenario;
pub mod service;
pub mod stages;
