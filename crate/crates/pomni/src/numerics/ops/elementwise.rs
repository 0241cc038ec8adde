//! Pointwise arithmetic and activations.

use super::{rank2, same_shape};
use crate::numerics::tape::{Tape, Var};
use crate::Result;

pub fn add(t: &mut Tape, a: Var, b: Var) -> Result<Var> {
    same_shape(t, "add", a, b)?;
    let data: Vec<f64> = t.value(a).iter().zip(t.value(b)).map(|(x, y)| x + y).collect();
    let shape = t.shape(a).to_vec();
    let (na, nb) = (t.needs_grad(a), t.needs_grad(b));
    let back = (na || nb).then(|| {
        Box::new(move |g: &[f64], gr: &mut crate::numerics::Grads| {
            if na {
                gr.add(a, g);
            }
            if nb {
                gr.add(b, g);
            }
        }) as _
    });
    Ok(t.push(shape, data, na || nb, back))
}

pub fn sub(t: &mut Tape, a: Var, b: Var) -> Result<Var> {
    same_shape(t, "sub", a, b)?;
    let data: Vec<f64> = t.value(a).iter().zip(t.value(b)).map(|(x, y)| x - y).collect();
    let shape = t.shape(a).to_vec();
    let (na, nb) = (t.needs_grad(a), t.needs_grad(b));
    let back = (na || nb).then(|| {
        Box::new(move |g: &[f64], gr: &mut crate::numerics::Grads| {
            if na {
                gr.add(a, g);
            }
            if nb {
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                gr.add(b, &neg);
            }
        }) as _
    });
    Ok(t.push(shape, data, na || nb, back))
}

pub fn mul(t: &mut Tape, a: Var, b: Var) -> Result<Var> {
    same_shape(t, "mul", a, b)?;
    let av = t.value(a).to_vec();
    let bv = t.value(b).to_vec();
    let data: Vec<f64> = av.iter().zip(&bv).map(|(x, y)| x * y).collect();
    let shape = t.shape(a).to_vec();
    let (na, nb) = (t.needs_grad(a), t.needs_grad(b));
    let back = (na || nb).then(|| {
        Box::new(move |g: &[f64], gr: &mut crate::numerics::Grads| {
            if na {
                let da: Vec<f64> = g.iter().zip(&bv).map(|(gi, y)| gi * y).collect();
                gr.add(a, &da);
            }
            if nb {
                let db: Vec<f64> = g.iter().zip(&av).map(|(gi, x)| gi * x).collect();
                gr.add(b, &db);
            }
        }) as _
    });
    Ok(t.push(shape, data, na || nb, back))
}

pub fn add_scalar(t: &mut Tape, a: Var, c: f64) -> Result<Var> {
    let data: Vec<f64> = t.value(a).iter().map(|x| x + c).collect();
    let shape = t.shape(a).to_vec();
    let ng = t.needs_grad(a);
    let back = ng.then(|| {
        Box::new(move |g: &[f64], gr: &mut crate::numerics::Grads| gr.add(a, g)) as _
    });
    Ok(t.push(shape, data, ng, back))
}

pub fn mul_scalar(t: &mut Tape, a: Var, c: f64) -> Result<Var> {
    let data: Vec<f64> = t.value(a).iter().map(|x| x * c).collect();
    let shape = t.shape(a).to_vec();
    let ng = t.needs_grad(a);
    let back = ng.then(|| {
        Box::new(move |g: &[f64], gr: &mut crate::numerics::Grads| {
            let da: Vec<f64> = g.iter().map(|gi| gi * c).collect();
            gr.add(a, &da);
        }) as _
    });
    Ok(t.push(shape, data, ng, back))
}

/// Adds a length-d bias to every row of an [n, d] matrix.
pub fn add_bias(t: &mut Tape, m: Var, bias: Var) -> Result<Var> {
    let (n, d) = rank2(t, "add_bias", m)?;
    if t.shape(bias) != [d] {
        return Err(crate::Error::shape(
            "add_bias",
            format!("bias shape {:?} does not match row width {d}", t.shape(bias)),
        ));
    }
    let bv = t.value(bias).to_vec();
    let data: Vec<f64> =
        t.value(m).chunks_exact(d).flat_map(|row| row.iter().zip(&bv).map(|(x, b)| x + b)).collect();
    let (nm, nb) = (t.needs_grad(m), t.needs_grad(bias));
    let back = (nm || nb).then(|| {
        Box::new(move |g: &[f64], gr: &mut crate::numerics::Grads| {
            if nm {
                gr.add(m, g);
            }
            if nb {
                gr.add_with(bias, d, |slot| {
                    for row in g.chunks_exact(d) {
                        for (s, gi) in slot.iter_mut().zip(row) {
                            *s += gi;
                        }
                    }
                });
            }
        }) as _
    });
    Ok(t.push(vec![n, d], data, nm || nb, back))
}

/// GELU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
pub fn gelu(t: &mut Tape, a: Var) -> Result<Var> {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044715;
    let xv = t.value(a).to_vec();
    let data: Vec<f64> =
        xv.iter().map(|&x| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())).collect();
    let shape = t.shape(a).to_vec();
    let ng = t.needs_grad(a);
    let back = ng.then(|| {
        Box::new(move |g: &[f64], gr: &mut crate::numerics::Grads| {
            let da: Vec<f64> = g
                .iter()
                .zip(&xv)
                .map(|(gi, &x)| {
                    let u = C * (x + A * x * x * x);
                    let th = u.tanh();
                    let sech2 = 1.0 - th * th;
                    gi * (0.5 * (1.0 + th) + 0.5 * x * sech2 * C * (1.0 + 3.0 * A * x * x))
                })
                .collect();
            gr.add(a, &da);
        }) as _
    });
    Ok(t.push(shape, data, ng, back))
}

/// SiLU / swish: x·σ(x).
pub fn silu(t: &mut Tape, a: Var) -> Result<Var> {
    let xv = t.value(a).to_vec();
    let data: Vec<f64> = xv.iter().map(|&x| x * sigmoid(x)).collect();
    let shape = t.shape(a).to_vec();
    let ng = t.needs_grad(a);
    let back = ng.then(|| {
        Box::new(move |g: &[f64], gr: &mut crate::numerics::Grads| {
            let da: Vec<f64> = g
                .iter()
                .zip(&xv)
                .map(|(gi, &x)| {
                    let s = sigmoid(x);
                    gi * (s * (1.0 + x * (1.0 - s)))
                })
                .collect();
            gr.add(a, &da);
        }) as _
    });
    Ok(t.push(shape, data, ng, back))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Identity forward with gradients cut: output needs no gradient and contributes none.
pub fn stop_grad(t: &mut Tape, a: Var) -> Var {
    let data = t.value(a).to_vec();
    let shape = t.shape(a).to_vec();
    t.push(shape, data, false, None)
}

/// Straight-through estimator: forwards `post`'s values, routes the gradient to `pre`.
///
/// Used by vector quantization: `post` is the looked-up code, `pre` the continuous embedding.
pub fn straight_through(t: &mut Tape, pre: Var, post: Var) -> Result<Var> {
    same_shape(t, "straight_through", pre, post)?;
    let data = t.value(post).to_vec();
    let shape = t.shape(pre).to_vec();
    let ng = t.needs_grad(pre);
    let back = ng.then(|| {
        Box::new(move |g: &[f64], gr: &mut crate::numerics::Grads| gr.add(pre, g)) as _
    });
    Ok(t.push(shape, data, ng, back))
}
