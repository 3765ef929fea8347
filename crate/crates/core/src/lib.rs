//! Hessian-based sensitivity analysis and dynamic LoRA rank allocation.
//!
//! The pipeline: probe the per-matrix Hessian diagonal of a model on a
//! calibration set ([`hessian`]), turn it into global and local sensitivity
//! metrics fused into allocation weights ([`metrics`]), convert the weights
//! into integer LoRA ranks under a conserved budget ([`alloc`]), then attach
//! and fine-tune adapters ([`lora`]). [`robustness`] measures how stable the
//! induced matrix orderings are.

// `!(x > 0.0)` is the NaN-rejecting form, used on purpose
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alloc;
pub mod hessian;
pub mod id;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod robustness;

pub use id::{MatrixRole, WeightMatrixId};
pub use numerics::DenseMatrix;
