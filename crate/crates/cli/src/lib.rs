//! Support library for the `pixelfold` binary: run configuration and
//! the gradient check suites. Kept as a library so integration tests can
//! drive the same code paths the binary uses.

pub mod checks;
pub mod config;
