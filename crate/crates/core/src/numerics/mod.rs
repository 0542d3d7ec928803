//! Dense tensors, reverse-mode autodiff, AdamW, cosine schedule, gradient
//! checking and checkpoints.

pub mod checkpoint;
pub mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod suite;
mod tensor;

pub use checkpoint::{Checkpoint, DType};
pub use gradcheck::{grad_check, grad_check_store, rel_error, GradCheckReport};
pub use graph::{Gradients, Graph, Var, MASK_NEG};
pub use optim::{adamw_step, adamw_step_store, clip_grad_norm, cosine_anneal_lr, AdamWConfig, OptimState};
pub use params::{Init, ParamId, ParamStore};
pub use suite::{primitive_suite, SuiteEntry};
pub use tensor::Tensor;
