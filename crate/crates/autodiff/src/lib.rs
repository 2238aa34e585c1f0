//! Minimal reverse-mode automatic differentiation over dense, row-major tensors.
//!
//! A [`Tape`] owns every tensor created during a forward pass. Operations are
//! methods on the tape and return lightweight [`Var`] handles; calling
//! [`Tape::backward`] on a scalar populates gradients for every tensor that
//! depends on a trainable leaf.
//!
//! ```
//! use dpfrl_autodiff::Tape;
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
//! let sq = tape.mul(x, x).unwrap();
//! let y = tape.sum_all(sq);
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
//! ```

mod backward;
mod error;
mod gradcheck;
mod optim;
mod scalar;
mod shape;
mod tape;

pub use error::AdError;
pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{clip_global_norm, global_norm, RmsProp, StepOutcome};
pub use scalar::Scalar;
pub use tape::{BatchNormMode, BatchStats, Tape, Var};

pub type Result<T, E = AdError> = std::result::Result<T, E>;
