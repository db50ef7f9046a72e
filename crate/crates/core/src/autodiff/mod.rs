//! Reverse-mode automatic differentiation, parameter storage and optimisation.

mod graph;
mod optim;
mod params;
mod rowmap;

pub use graph::{gelu, softmax_in_place, AttentionSpec, Bound, Gradients, Graph, Var, MASKED_SCORE};
pub use optim::{AdamW, AdamWState, CosineSchedule};
pub use params::{trunc_normal, uniform, Param, ParamId, ParamStore};
pub use rowmap::RowMap;
