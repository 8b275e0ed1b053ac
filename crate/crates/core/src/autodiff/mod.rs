//! Dense tensors, reverse-mode differentiation and optimizers.

mod backend;
mod optim;
mod params;
mod tape;
mod tensor;

pub use backend::{Backend, Eager};
pub use optim::{clip_gradients, Adam, AdamConfig};
pub use params::{GradMap, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
