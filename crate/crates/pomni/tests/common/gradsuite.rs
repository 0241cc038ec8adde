//! The operator gradient suite: every differentiable operator checked against 64-bit
//! central differences at >= 20 random points. `tests/gradients.rs` runs entries as
//! individual tests; the acceptance gate runs and times the whole list.

use super::{check_grads, weighted_sum};
use pomni::numerics::ops;
use pomni::numerics::{Tape, Var};

pub struct Check {
    pub name: &'static str,
    pub run: fn(),
}

pub const POINTS: usize = 20;

fn scalarize(t: &mut Tape, v: Var) -> pomni::Result<Var> {
    Ok(weighted_sum(t, v))
}

fn check_add() {
    check_grads("add", &[&[3, 4], &[3, 4]], POINTS, 101, |t, l| {
        let y = ops::add(t, l[0], l[1])?;
        scalarize(t, y)
    });
}

fn check_sub() {
    check_grads("sub", &[&[3, 4], &[3, 4]], POINTS, 102, |t, l| {
        let y = ops::sub(t, l[0], l[1])?;
        scalarize(t, y)
    });
}

fn check_mul() {
    check_grads("mul", &[&[3, 4], &[3, 4]], POINTS, 103, |t, l| {
        let y = ops::mul(t, l[0], l[1])?;
        scalarize(t, y)
    });
}

fn check_add_scalar() {
    check_grads("add_scalar", &[&[2, 5]], POINTS, 104, |t, l| {
        let y = ops::add_scalar(t, l[0], 0.7)?;
        scalarize(t, y)
    });
}

fn check_mul_scalar() {
    check_grads("mul_scalar", &[&[2, 5]], POINTS, 105, |t, l| {
        let y = ops::mul_scalar(t, l[0], -1.3)?;
        scalarize(t, y)
    });
}

fn check_add_bias() {
    check_grads("add_bias", &[&[4, 3], &[3]], POINTS, 106, |t, l| {
        let y = ops::add_bias(t, l[0], l[1])?;
        scalarize(t, y)
    });
}

fn check_gelu() {
    check_grads("gelu", &[&[3, 5]], POINTS, 107, |t, l| {
        let y = ops::gelu(t, l[0])?;
        scalarize(t, y)
    });
}

fn check_silu() {
    check_grads("silu", &[&[3, 5]], POINTS, 108, |t, l| {
        let y = ops::silu(t, l[0])?;
        scalarize(t, y)
    });
}

fn check_concat_rows() {
    check_grads("concat_rows", &[&[2, 3], &[1, 3], &[3, 3]], POINTS, 109, |t, l| {
        let y = ops::concat_rows(t, &[l[0], l[1], l[2]])?;
        scalarize(t, y)
    });
}

fn check_narrow_rows() {
    check_grads("narrow_rows", &[&[5, 3]], POINTS, 110, |t, l| {
        let y = ops::narrow_rows(t, l[0], 1, 3)?;
        scalarize(t, y)
    });
}

fn check_concat_cols() {
    check_grads("concat_cols", &[&[3, 2], &[3, 4]], POINTS, 111, |t, l| {
        let y = ops::concat_cols(t, &[l[0], l[1]])?;
        scalarize(t, y)
    });
}

fn check_narrow_cols() {
    check_grads("narrow_cols", &[&[3, 6]], POINTS, 112, |t, l| {
        let y = ops::narrow_cols(t, l[0], 2, 3)?;
        scalarize(t, y)
    });
}

fn check_gather_rows() {
    check_grads("gather_rows", &[&[5, 3]], POINTS, 113, |t, l| {
        let y = ops::gather_rows(t, l[0], &[0, 2, 2, 4, 1, 2])?;
        scalarize(t, y)
    });
}

fn check_transpose() {
    check_grads("transpose", &[&[3, 4]], POINTS, 114, |t, l| {
        let y = ops::transpose(t, l[0])?;
        scalarize(t, y)
    });
}

fn check_reshape() {
    check_grads("reshape", &[&[2, 6]], POINTS, 115, |t, l| {
        let y = ops::reshape(t, l[0], &[3, 4])?;
        scalarize(t, y)
    });
}

fn check_mean_all() {
    check_grads("mean_all", &[&[3, 4]], POINTS, 116, |t, l| ops::mean_all(t, l[0]));
}

fn check_sum_all() {
    check_grads("sum_all", &[&[3, 4]], POINTS, 117, |t, l| ops::sum_all(t, l[0]));
}

fn check_mean_axis0() {
    check_grads("mean_axis0", &[&[4, 3]], POINTS, 118, |t, l| {
        let y = ops::mean_axis0(t, l[0])?;
        let y = ops::reshape(t, y, &[1, 3])?;
        scalarize(t, y)
    });
}

fn check_sum_axis1() {
    check_grads("sum_axis1", &[&[3, 4]], POINTS, 119, |t, l| {
        let y = ops::sum_axis1(t, l[0])?;
        let y = ops::reshape(t, y, &[3, 1])?;
        scalarize(t, y)
    });
}

fn check_matmul() {
    check_grads("matmul", &[&[3, 4], &[4, 2]], POINTS, 120, |t, l| {
        let y = ops::matmul(t, l[0], l[1])?;
        scalarize(t, y)
    });
}

fn check_sdpa_cross() {
    check_grads("sdpa_cross", &[&[2, 4], &[5, 4], &[5, 3]], POINTS, 121, |t, l| {
        let y = ops::sdpa(t, l[0], l[1], l[2])?;
        scalarize(t, y)
    });
}

fn check_sdpa_self() {
    // One leaf feeding q, k and v: exercises gradient accumulation through attention fan-out.
    check_grads("sdpa_self", &[&[4, 4]], POINTS, 122, |t, l| {
        let y = ops::sdpa(t, l[0], l[0], l[0])?;
        scalarize(t, y)
    });
}

fn check_conv1d() {
    check_grads("conv1d", &[&[2, 9], &[3, 2, 3], &[3]], POINTS, 123, |t, l| {
        let y = ops::conv1d(t, l[0], l[1], l[2], 2, 1)?;
        scalarize(t, y)
    });
}

fn check_l2_normalize() {
    check_grads("l2_normalize", &[&[3, 4]], POINTS, 124, |t, l| {
        let y = ops::l2_normalize(t, l[0])?;
        scalarize(t, y)
    });
}

fn check_rms_norm() {
    check_grads("rms_norm", &[&[3, 4], &[4]], POINTS, 125, |t, l| {
        let y = ops::rms_norm(t, l[0], l[1])?;
        scalarize(t, y)
    });
}

fn check_group_norm() {
    check_grads("group_norm", &[&[4, 6], &[4], &[4]], POINTS, 126, |t, l| {
        let y = ops::group_norm(t, l[0], 2, l[1], l[2])?;
        scalarize(t, y)
    });
}

fn check_softmax() {
    check_grads("softmax", &[&[3, 5]], POINTS, 127, |t, l| {
        let y = ops::softmax(t, l[0])?;
        scalarize(t, y)
    });
}

fn check_cross_entropy() {
    check_grads("cross_entropy", &[&[4, 6]], POINTS, 128, |t, l| {
        ops::cross_entropy(t, l[0], &[0, 3, 5, 2], 0.0)
    });
}

fn check_cross_entropy_smoothed() {
    check_grads("cross_entropy_smoothed", &[&[4, 6]], POINTS, 129, |t, l| {
        ops::cross_entropy(t, l[0], &[1, 1, 4, 0], 0.1)
    });
}

fn check_bce_with_logits() {
    check_grads("bce_with_logits", &[&[6]], POINTS, 130, |t, l| {
        ops::bce_with_logits(t, l[0], &[0.0, 1.0, 1.0, 0.0, 0.3, 1.0])
    });
}

fn check_mse() {
    check_grads("mse", &[&[3, 4], &[3, 4]], POINTS, 131, |t, l| ops::mse(t, l[0], l[1]));
}

fn check_cosine_rows() {
    check_grads("cosine_rows", &[&[3, 4], &[3, 4]], POINTS, 132, |t, l| {
        let y = ops::cosine_rows(t, l[0], l[1])?;
        let y = ops::reshape(t, y, &[3, 1])?;
        scalarize(t, y)
    });
}

/// Every differentiable operator in the crate. stop_grad and straight_through are excluded:
/// their whole point is to disagree with the true derivative, so they get exact-identity
/// tests in `tests/gradients.rs` instead.
pub fn all_checks() -> Vec<Check> {
    vec![
        Check { name: "add", run: check_add },
        Check { name: "sub", run: check_sub },
        Check { name: "mul", run: check_mul },
        Check { name: "add_scalar", run: check_add_scalar },
        Check { name: "mul_scalar", run: check_mul_scalar },
        Check { name: "add_bias", run: check_add_bias },
        Check { name: "gelu", run: check_gelu },
        Check { name: "silu", run: check_silu },
        Check { name: "concat_rows", run: check_concat_rows },
        Check { name: "narrow_rows", run: check_narrow_rows },
        Check { name: "concat_cols", run: check_concat_cols },
        Check { name: "narrow_cols", run: check_narrow_cols },
        Check { name: "gather_rows", run: check_gather_rows },
        Check { name: "transpose", run: check_transpose },
        Check { name: "reshape", run: check_reshape },
        Check { name: "mean_all", run: check_mean_all },
        Check { name: "sum_all", run: check_sum_all },
        Check { name: "mean_axis0", run: check_mean_axis0 },
        Check { name: "sum_axis1", run: check_sum_axis1 },
        Check { name: "matmul", run: check_matmul },
        Check { name: "sdpa_cross", run: check_sdpa_cross },
        Check { name: "sdpa_self", run: check_sdpa_self },
        Check { name: "conv1d", run: check_conv1d },
        Check { name: "l2_normalize", run: check_l2_normalize },
        Check { name: "rms_norm", run: check_rms_norm },
        Check { name: "group_norm", run: check_group_norm },
        Check { name: "softmax", run: check_softmax },
        Check { name: "cross_entropy", run: check_cross_entropy },
        Check { name: "cross_entropy_smoothed", run: check_cross_entropy_smoothed },
        Check { name: "bce_with_logits", run: check_bce_with_logits },
        Check { name: "mse", run: check_mse },
        Check { name: "cosine_rows", run: check_cosine_rows },
    ]
}
