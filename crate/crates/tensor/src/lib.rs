//! Reverse-mode automatic differentiation over dense n-d arrays.
//!
//! Build a [`Tape`], register leaves with [`Tape::param`] or
//! [`Tape::constant`], compose [`Var`] operations, then call
//! [`Tape::backward`] on a scalar result.
//!
//! ```
//! use bws_tensor::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap());
//! let loss = x.mul(x).unwrap().sum();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

mod denormal;
mod error;
pub mod gradcheck;
mod kernels;
mod real;
mod rng;
mod tape;
mod tensor;

pub use denormal::FlushDenormals;
pub use error::{Result, TensorError};
pub use gradcheck::{finite_difference_at, finite_difference_grad, relative_error};
pub use real::Real;
pub use rng::Rng;
pub use tape::{Gradients, NodeId, Record, Tape, Var, LOG_FLOOR};
pub use tensor::Tensor;
