//! Invertible neural networks built from LU-factorized fully connected
//! layers, trained by exact maximum likelihood.

extern crate self as lunet;

pub mod activation;
pub mod data;
pub mod diagnostics;
pub mod experiment;
pub mod linalg;
pub mod model;
pub mod pgm;
pub mod train;

#[cfg(test)]
#[path = "../tests/common/oracle.rs"]
pub(crate) mod testutil;
