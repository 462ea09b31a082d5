//! Minimal dense-tensor engine for the cross-city adaptation stack.
//!
//! Values live in [`Tensor`]; differentiable computation is recorded on a
//! [`Tape`] and replayed backward once. Trainable weights are kept in a
//! [`ParamSet`] and updated with [`Adam`]. Every operation runs its loops in a
//! fixed row-major order, so identical inputs give bitwise-identical outputs.

mod adam;
mod error;
pub mod io;
mod kernels;
mod param;
mod scalar;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{NumError, Result};
pub use kernels::{conv_output_len, ConvSpec};
pub use param::{Binding, Param, ParamSet};
pub use scalar::{DType, Scalar};
pub use tape::{Gradients, LogSide, Tape, Var, CLAMP_EPS};
pub use tensor::Tensor;
