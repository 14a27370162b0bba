//! Reverse-mode automatic differentiation over dense real arrays.

mod gradcheck;
mod kernels;
mod params;
mod real;
mod tape;
mod tensor;

pub use gradcheck::{
    grad_check, relative_error, roundoff_band, GradCheckOptions, GradCheckRow, REL_FLOOR, REL_TOL,
};
pub use params::{GradMap, ParamId, ParamStore, Parameter};
pub use real::{Precision, Real};
pub use tape::{Attrs, PrimitiveKind, Tape, Var, LEAKY_SLOPE};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
