//! Differentiable operators. Every function appends nodes to a [`Tape`] and returns a [`Var`].
//!
//! Contract: shape errors name the operator and offending shapes; backward closures are built
//! only when an input needs a gradient, so freezing a subgraph (constants) makes its gradients
//! exactly absent rather than numerically zero. Each operator's gradient is verified against
//! 64-bit central differences in `tests/gradients.rs`.

mod conv;
mod elementwise;
mod linalg;
mod loss;
mod norm;
mod shape;

pub use conv::conv1d;
pub use elementwise::{
    add, add_bias, add_scalar, gelu, mul, mul_scalar, silu, stop_grad, straight_through, sub,
};
pub use linalg::{matmul, sdpa};
pub use loss::{bce_with_logits, cosine_rows, cross_entropy, mse};
pub use norm::{group_norm, l2_normalize, rms_norm, softmax};
pub use shape::{
    concat_cols, concat_rows, gather_rows, mean_all, mean_axis0, narrow_cols, narrow_rows,
    reshape, sum_all, sum_axis1, transpose,
};

use super::{Tape, Var};
use crate::{Error, Result};

fn rank2(t: &Tape, op: &'static str, v: Var) -> Result<(usize, usize)> {
    match t.shape(v) {
        [n, d] => Ok((*n, *d)),
        other => Err(Error::shape(op, format!("expected rank-2 tensor, got shape {other:?}"))),
    }
}

fn same_shape(t: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if t.shape(a) != t.shape(b) {
        return Err(Error::shape(
            op,
            format!("operands differ: {:?} vs {:?}", t.shape(a), t.shape(b)),
        ));
    }
    Ok(())
}
