//! Minimal dense-tensor autodiff used by every trainable component.

pub mod check;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use optim::{adam_step, AdamConfig};
pub use params::{DType, Init, ParamTensor, ParameterStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
