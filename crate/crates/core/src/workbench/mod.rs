//! Runnable face of the crate: configuration, data generation and loading,
//! experiment drivers, checkpoints and run directories.

pub mod config;
pub mod gradcheck;
pub mod run;
pub mod splits;
pub mod synthetic;
