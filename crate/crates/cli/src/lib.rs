//! Library surface of the experiment runner, shared by the binary and the
//! acceptance tests.

pub mod raster;
pub mod runner;
