//! Shared test support: the finite-difference gradient oracle and the full operator
//! check suite (also timed by the acceptance gate).

pub mod dsp;
pub mod gradsuite;

use pomni::numerics::{Precision, Rng, Tape, Tensor, Var};

/// Central-difference step. f64 tapes keep truncation + roundoff error well under the
/// comparison tolerance for desk-scale values.
pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Draws a value bounded away from zero so kinks and normalization poles (|x| ~ 0) are
/// never straddled by the difference stencil.
pub fn draw_value(rng: &mut Rng) -> f64 {
    let mag = rng.range(0.05, 1.5);
    if rng.uniform() < 0.5 {
        -mag
    } else {
        mag
    }
}

/// Deterministic distinct weights; reducing ops through them (rather than a plain mean)
/// catches element-routing mistakes that a symmetric reduction would hide.
pub fn weighted_sum(t: &mut Tape, v: Var) -> Var {
    let len = t.value(v).len();
    let shape = t.shape(v).to_vec();
    let weights: Vec<f64> =
        (0..len).map(|i| 0.217 + 0.11 * i as f64 - 0.007 * (i * i) as f64).collect();
    let w = t.constant_from(&shape, weights);
    let prod = pomni::numerics::ops::mul(t, v, w).expect("weighted_sum mul");
    pomni::numerics::ops::sum_all(t, prod).expect("weighted_sum sum")
}

/// Checks reverse-mode gradients of `build` against central differences at `points`
/// random points. `build` receives one differentiable leaf per entry of `shapes` and
/// must return a scalar loss. Panics with op/leaf/element context on mismatch.
pub fn check_grads(
    name: &str,
    shapes: &[&[usize]],
    points: usize,
    seed: u64,
    build: impl Fn(&mut Tape, &[Var]) -> pomni::Result<Var>,
) {
    let mut rng = Rng::seeded(seed);
    for point in 0..points {
        let values: Vec<Vec<f64>> = shapes
            .iter()
            .map(|s| (0..s.iter().product::<usize>()).map(|_| draw_value(&mut rng)).collect())
            .collect();

        let eval = |vals: &[Vec<f64>]| -> f64 {
            let mut t = Tape::with_precision(Precision::F64);
            let leaves: Vec<Var> = shapes
                .iter()
                .zip(vals)
                .map(|(s, v)| t.leaf(&Tensor::new(s, v.clone()).unwrap().with_grad()))
                .collect();
            let loss = build(&mut t, &leaves).unwrap_or_else(|e| panic!("{name}: build failed: {e}"));
            t.item(loss)
        };

        // Reverse-mode gradients at the point.
        let mut t = Tape::with_precision(Precision::F64);
        let leaves: Vec<Var> = shapes
            .iter()
            .zip(&values)
            .map(|(s, v)| t.leaf(&Tensor::new(s, v.clone()).unwrap().with_grad()))
            .collect();
        let loss = build(&mut t, &leaves).unwrap_or_else(|e| panic!("{name}: build failed: {e}"));
        let grads = t.backward(loss).unwrap_or_else(|e| panic!("{name}: backward failed: {e}"));

        for (li, leaf) in leaves.iter().enumerate() {
            let zero;
            let ad = match grads.get(*leaf) {
                Some(g) => g,
                None => {
                    zero = vec![0.0; values[li].len()];
                    &zero
                }
            };
            for ei in 0..values[li].len() {
                let mut plus = values.clone();
                plus[li][ei] += FD_STEP;
                let mut minus = values.clone();
                minus[li][ei] -= FD_STEP;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
                let diff = (ad[ei] - fd).abs();
                let scale = 1.0f64.max(ad[ei].abs()).max(fd.abs());
                assert!(
                    diff <= FD_TOL * scale,
                    "{name}: point {point}, leaf {li}, element {ei}: reverse {} vs central-difference {} (rel {})",
                    ad[ei],
                    fd,
                    diff / scale
                );
            }
        }
    }
}
