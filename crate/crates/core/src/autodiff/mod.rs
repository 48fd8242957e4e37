//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation of a forward pass. [`Tape::backward`]
//! returns gradients for the named parameters, while [`Tape::grad_graph`]
//! records the backward pass itself so that gradients can be differentiated
//! again (used for the invariance penalty and second-order meta-gradients).

mod tape;
mod tensor;

pub use tape::{sigmoid, GradientMap, Tape, Target, Var, SOFT_TARGET_TOL};
pub use tensor::{argmax, Tensor};
