//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Tapes are built eagerly and used once: push leaves and primitive ops,
//! call [`Tape::forward`] on the scalar loss, then [`Tape::backward`].
//! Softmax and log-probabilities go through max-shifted log-sum-exp.

mod array;
mod check;
mod error;
mod tape;

pub use array::Array;
pub use check::finite_diff_check;
pub use error::TapeError;
pub use tape::{log_sum_exp, softmax, Gradients, Tape, Var};
