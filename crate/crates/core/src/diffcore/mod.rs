//! Minimal differentiable-computation kernel: tensors, a parameter store,
//! a reverse-mode tape and a finite-difference checker. Everything is `f64`.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, GradEntry};
pub use graph::{Graph, NodeId};
pub use layers::{attend, attention, embed, project_kv, Attended, AttentionParams, Dense, Mlp};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::{softmax, Tensor};
