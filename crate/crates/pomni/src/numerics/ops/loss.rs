//! Training losses and similarity measures.

use super::{l2_normalize, mul, rank2, same_shape, sum_axis1};
use crate::numerics::ops::elementwise::sigmoid;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::Grads;
use crate::{Error, Result};

/// Mean softmax cross-entropy over rows with label smoothing: targets become
/// (1−ε)·onehot + ε/K.
pub fn cross_entropy(t: &mut Tape, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
    let (n, k) = rank2(t, "cross_entropy", logits)?;
    if targets.len() != n {
        return Err(Error::shape(
            "cross_entropy",
            format!("{n} logit rows vs {} targets", targets.len()),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&c| c >= k) {
        return Err(Error::shape("cross_entropy", format!("class {bad} out of {k}")));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::InvalidParameter(format!("label smoothing {smoothing} not in [0,1)")));
    }
    let xv = t.value(logits);
    let mut probs = Vec::with_capacity(xv.len());
    let mut loss = 0.0;
    for (row, &cls) in xv.chunks_exact(k).zip(targets) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let log_sum = sum.ln() + max;
        // −Σ_c q_c·log p_c with q = (1−ε)·onehot + ε/K
        let uniform = smoothing / k as f64;
        for (c, &x) in row.iter().enumerate() {
            let q = if c == cls { 1.0 - smoothing + uniform } else { uniform };
            loss -= q * (x - log_sum);
        }
        probs.extend(exps.into_iter().map(|e| e / sum));
    }
    loss /= n as f64;
    let ng = t.needs_grad(logits);
    let back = ng.then(|| {
        let targets = targets.to_vec();
        Box::new(move |g: &[f64], gr: &mut Grads| {
            let scale = g[0] / targets.len() as f64;
            let uniform = smoothing / k as f64;
            let mut dx = probs.clone();
            for (i, &cls) in targets.iter().enumerate() {
                for c in 0..k {
                    let q = if c == cls { 1.0 - smoothing + uniform } else { uniform };
                    dx[i * k + c] = (dx[i * k + c] - q) * scale;
                }
            }
            gr.add(logits, &dx);
        }) as _
    });
    Ok(t.push(vec![], vec![loss], ng, back))
}

/// Mean binary cross-entropy on logits, numerically stable:
/// ℓ = max(z,0) − z·t + ln(1 + e^{−|z|}).
pub fn bce_with_logits(t: &mut Tape, logits: Var, targets: &[f64]) -> Result<Var> {
    let n = t.value(logits).len();
    if targets.len() != n {
        return Err(Error::shape(
            "bce_with_logits",
            format!("{n} logits vs {} targets", targets.len()),
        ));
    }
    let zv = t.value(logits).to_vec();
    let loss = zv
        .iter()
        .zip(targets)
        .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
        .sum::<f64>()
        / n as f64;
    let ng = t.needs_grad(logits);
    let back = ng.then(|| {
        let targets = targets.to_vec();
        Box::new(move |g: &[f64], gr: &mut Grads| {
            let scale = g[0] / zv.len() as f64;
            let dx: Vec<f64> =
                zv.iter().zip(&targets).map(|(&z, &y)| (sigmoid(z) - y) * scale).collect();
            gr.add(logits, &dx);
        }) as _
    });
    Ok(t.push(vec![], vec![loss], ng, back))
}

/// Mean squared error over all elements; gradients flow to both sides.
pub fn mse(t: &mut Tape, a: Var, b: Var) -> Result<Var> {
    same_shape(t, "mse", a, b)?;
    let av = t.value(a).to_vec();
    let bv = t.value(b).to_vec();
    let n = av.len();
    if n == 0 {
        return Err(Error::shape("mse", "empty operands"));
    }
    let loss = av.iter().zip(&bv).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64;
    let (na, nb) = (t.needs_grad(a), t.needs_grad(b));
    let back = (na || nb).then(|| {
        Box::new(move |g: &[f64], gr: &mut Grads| {
            let scale = 2.0 * g[0] / av.len() as f64;
            if na {
                let da: Vec<f64> = av.iter().zip(&bv).map(|(x, y)| (x - y) * scale).collect();
                gr.add(a, &da);
            }
            if nb {
                let db: Vec<f64> = av.iter().zip(&bv).map(|(x, y)| (y - x) * scale).collect();
                gr.add(b, &db);
            }
        }) as _
    });
    Ok(t.push(vec![], vec![loss], na || nb, back))
}

/// Row-wise cosine similarity between two [n, d] tensors -> [n].
/// Composed from ℓ2 normalization and a dot product, so gradients come for free.
pub fn cosine_rows(t: &mut Tape, a: Var, b: Var) -> Result<Var> {
    same_shape(t, "cosine_rows", a, b)?;
    rank2(t, "cosine_rows", a)?;
    let an = l2_normalize(t, a)?;
    let bn = l2_normalize(t, b)?;
    let prod = mul(t, an, bn)?;
    sum_axis1(t, prod)
}
