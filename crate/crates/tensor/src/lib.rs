//! Minimal dense tensor engine with reverse-mode automatic differentiation.
//!
//! Values are plain row-major [`Tensor`]s. A forward pass records operations
//! on a [`Tape`] through [`Var`] handles; [`Tape::backward`] fills gradient
//! buffers. Model weights live in a [`ParamStore`], are bound onto a fresh
//! tape each step, and are updated with [`AdamW`].

pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod kernels;
mod ops;
mod optim;
mod params;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use ops::MAXPOOL_PAD;
pub use optim::{AdamW, AdamWConfig};
pub use params::{Binding, Param, ParamId, ParamStore};
pub use tape::{ReduceKind, Tape, Var};
pub use tensor::{Real, Tensor};
