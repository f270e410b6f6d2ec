//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records applications of a small, closed [`Primitive`] set;
//! [`Tape::backward`] replays them in reverse. Parameters live in a
//! [`ParamStore`] and are borrowed onto tapes, so many tapes can read the
//! same parameters at once.

mod gradcheck;
mod kernels;
mod ops;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, CoordinateCheck, GradCheckReport};
pub use optim::{Adam, AdamConfig};
pub use tape::{Gradients, ParamGrads, Primitive, Tape, Var, BCE_CLAMP, LAYER_NORM_EPS};
pub use tensor::{ParamId, ParamStore, Tensor};

pub(crate) use kernels::{sigmoid, softplus};
