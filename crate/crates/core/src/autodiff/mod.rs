//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] owns every tensor produced during a forward pass. Operations
//! return [`Var`] handles; [`Tape::backward`] walks the record in reverse and
//! deposits gradients on the leaves that asked for them.
//!
//! ```
//! use advseg::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::from_vec(&[1], vec![3.0]).unwrap());
//! let y = tape.mul(x, x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[6.0]);
//! ```

mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport};
pub use scalar::Scalar;
pub use tape::{BinaryKind, Fault, ReduceKind, Tape, UnaryKind, Var};
pub use tensor::Tensor;

/// Epsilon used by every instance normalisation layer.
pub const INSTANCE_NORM_EPS: f64 = 1e-5;
