//! Matrix multiply and attention.

use super::{mul_scalar, rank2, softmax};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::Grads;
use crate::{Error, Result};

/// Row-major [n,k] x [k,m] -> [n,m] with an ikj loop (b rows stream through cache).
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), n * m);
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * m..(kk + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[n,m] += a[n,k]ᵀ is not needed; backward uses explicit transposed loops instead so no
/// transposed copies are materialized.
fn matmul_at_b(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    // out[k,m] += aᵀ[k,n] x b[n,m]
    debug_assert_eq!(out.len(), k * m);
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * m..(i + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * m..(kk + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn matmul_a_bt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    // out[n,k] += a[n,m] x bᵀ[m,k] where b is [k,m]
    debug_assert_eq!(out.len(), n * k);
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        let orow = &mut out[i * k..(i + 1) * k];
        for (kk, o) in orow.iter_mut().enumerate() {
            let brow = &b[kk * m..(kk + 1) * m];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

pub fn matmul(t: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (n, k) = rank2(t, "matmul", a)?;
    let (kb, m) = rank2(t, "matmul", b)?;
    if k != kb {
        return Err(Error::shape(
            "matmul",
            format!("inner dims differ: [{n},{k}] x [{kb},{m}]"),
        ));
    }
    let av = t.value(a).to_vec();
    let bv = t.value(b).to_vec();
    let mut data = vec![0.0; n * m];
    matmul_raw(&av, &bv, n, k, m, &mut data);
    let (na, nb) = (t.needs_grad(a), t.needs_grad(b));
    let back = (na || nb).then(|| {
        Box::new(move |g: &[f64], gr: &mut Grads| {
            if na {
                // dA = G x Bᵀ
                gr.add_with(a, n * k, |slot| matmul_a_bt(g, &bv, n, k, m, slot));
            }
            if nb {
                // dB = Aᵀ x G
                gr.add_with(b, k * m, |slot| matmul_at_b(&av, g, n, k, m, slot));
            }
        }) as _
    });
    Ok(t.push(vec![n, m], data, na || nb, back))
}

/// Scaled dot-product attention: softmax(q·kᵀ/√dk)·v.
///
/// Composed from primitive ops, so the gradient needs no dedicated backward. Self- vs
/// cross-attention is the caller's choice of where q and k/v come from.
pub fn sdpa(t: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let (_, dk) = rank2(t, "sdpa", q)?;
    let (nk, dkk) = rank2(t, "sdpa", k)?;
    let (nv, _) = rank2(t, "sdpa", v)?;
    if dk != dkk || nk != nv {
        return Err(Error::shape(
            "sdpa",
            format!(
                "q {:?}, k {:?}, v {:?} are inconsistent",
                t.shape(q),
                t.shape(k),
                t.shape(v)
            ),
        ));
    }
    let kt = super::transpose(t, k)?;
    let scores = matmul(t, q, kt)?;
    let scaled = mul_scalar(t, scores, 1.0 / (dk as f64).sqrt())?;
    let weights = softmax(t, scaled)?;
    matmul(t, weights, v)
}
