//! Minimal CPU tensor and layer toolkit with explicit backward passes.

pub mod functional;
pub mod layers;
pub mod module;
pub mod optim;
pub mod tensor;

pub use layers::{BatchNorm2d, Conv2d, Linear, MaxPool2, Relu};
pub use module::{Entry, EntryMut, Mode, Module, Param};
pub use optim::{MultiStep, Optimizer, OptimizerKind, OptimizerSpec};
pub use tensor::{matmul, Real, Tensor};
