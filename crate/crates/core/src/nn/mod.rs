//! Minimal dense tensor engine with reverse-mode differentiation.

mod graph;
mod optim;
mod params;
mod scalar;

pub use graph::{Graph, NodeGrads, Var};
pub use optim::{AdamW, AdamWConfig, LinearSchedule};
pub use params::{Gradients, ParamEntry, ParamId, ParamStore};
pub use scalar::{gemm_into, matmul, MatRef, Scalar};

#[cfg(test)]
mod checks;
