//! Dense row-major tensors and a reverse-mode gradient tape.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar output walks the records in reverse and
//! returns a [`Grads`] table with one gradient per participating node.
//!
//! ```
//! use i2i_tensor::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::from_vec(vec![3], vec![1.0, -2.0, 3.0]).unwrap());
//! let loss = x.mul(x).unwrap().sum();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

mod error;
mod gradcheck;
mod ops;
mod scalar;
mod tape;
mod tensor;

pub use error::TensorError;
pub use ops::concat;
pub use gradcheck::{grad_check, GradCheckReport};
pub use scalar::Scalar;
pub use tape::{BackwardFn, Grads, Tape, Var};
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, TensorError>;
