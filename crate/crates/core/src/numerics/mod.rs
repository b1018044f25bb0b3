//! Tensor arithmetic, reverse-mode differentiation and optimization.

mod gradcheck;
mod optim;
mod real;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_grad, relative_error};
pub use optim::{Adam, AdamState, LrSchedule};
pub use real::Real;
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;

/// Layer normalization epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-5;

#[inline]
pub(crate) fn debug_assert_finite<T: Real>(v: &Var<'_, T>, what: &str) {
    debug_assert!(v.value().is_finite(), "non-finite values after {what}");
}
