//! Graph-guided fused lasso for spatiotemporal matrix regression.
//!
//! The single-task estimator penalizes a `t × s` coefficient matrix with an
//! `ℓ₁` term, a fused penalty on consecutive time rows, and a graph-guided
//! penalty on columns joined by spatial edges. The multi-task variant stacks
//! `m` such matrices and adds a group penalty across tasks. All variants are
//! solved by a restarted Halpern Peaceman–Rachford splitting ([`hpr`]).
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod harness;
pub mod hpr;
pub mod io;
pub mod linsolve;
pub mod model;
pub mod oracle;
pub mod prox;
pub mod synthetic;
pub mod tensor;

pub use error::{GgflError, Result};
pub use hpr::{solve, PrimalDualState, SolveReport, SolveStatus, SolverOptions};
pub use model::{build_grid_graph, Dims, Hyperparams, NormKind, ProblemData, SpatialGraph};
pub use tensor::{CoeffTensor, Tensor3};
