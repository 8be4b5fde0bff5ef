//! Minimal dense-tensor reverse-mode differentiation: enough for the fusion
//! blocks, heads and losses, with every gradient checkable against central
//! finite differences.

mod batchnorm;
mod gradcheck;
mod graph;
mod ops;
mod tensor;

pub use batchnorm::{batchnorm, BatchNormState, BnMode, RunningStatsUpdate};
pub use gradcheck::{grad_check, grad_check_sampled};
pub use graph::{Graph, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
