//! Normalizations and softmax.

use super::rank2;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::Grads;
use crate::{Error, Result};

const L2_EPS: f64 = 1e-12;
const NORM_EPS: f64 = 1e-5;

/// Unit-norms each row (last axis). Rank-1 input is treated as a single row.
pub fn l2_normalize(t: &mut Tape, v: Var) -> Result<Var> {
    let shape = t.shape(v).to_vec();
    let d = *shape.last().ok_or_else(|| Error::shape("l2_normalize", "scalar input"))?;
    let xv = t.value(v).to_vec();
    let mut data = Vec::with_capacity(xv.len());
    let mut norms = Vec::with_capacity(xv.len() / d);
    for row in xv.chunks_exact(d) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        let s = n + L2_EPS;
        norms.push((n, s));
        data.extend(row.iter().map(|x| x / s));
    }
    let ng = t.needs_grad(v);
    let back = ng.then(|| {
        Box::new(move |g: &[f64], gr: &mut Grads| {
            let mut dx = vec![0.0; xv.len()];
            for (r, ((row, grow), &(n, s))) in
                xv.chunks_exact(d).zip(g.chunks_exact(d)).zip(&norms).enumerate()
            {
                let dot: f64 = grow.iter().zip(row).map(|(gi, xi)| gi * xi).sum();
                let coef = dot / (s * s * n.max(L2_EPS));
                for (j, (gi, xi)) in grow.iter().zip(row).enumerate() {
                    dx[r * d + j] = gi / s - coef * xi;
                }
            }
            gr.add(v, &dx);
        }) as _
    });
    Ok(t.push(shape, data, ng, back))
}

/// RMSNorm over the last axis: y = gain ⊙ x / √(mean(x²) + ε).
pub fn rms_norm(t: &mut Tape, v: Var, gain: Var) -> Result<Var> {
    let (n, d) = rank2(t, "rms_norm", v)?;
    if t.shape(gain) != [d] {
        return Err(Error::shape(
            "rms_norm",
            format!("gain shape {:?} vs row width {d}", t.shape(gain)),
        ));
    }
    let xv = t.value(v).to_vec();
    let gv = t.value(gain).to_vec();
    let mut data = Vec::with_capacity(xv.len());
    let mut inv_rms = Vec::with_capacity(n);
    for row in xv.chunks_exact(d) {
        let ms = row.iter().map(|x| x * x).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + NORM_EPS).sqrt();
        inv_rms.push(r);
        data.extend(row.iter().zip(&gv).map(|(x, g)| x * g * r));
    }
    let (nv, ngain) = (t.needs_grad(v), t.needs_grad(gain));
    let back = (nv || ngain).then(|| {
        Box::new(move |g: &[f64], gr: &mut Grads| {
            if ngain {
                gr.add_with(gain, d, |slot| {
                    for (row, (grow, &r)) in xv.chunks_exact(d).zip(g.chunks_exact(d).zip(&inv_rms)) {
                        for j in 0..d {
                            slot[j] += grow[j] * row[j] * r;
                        }
                    }
                });
            }
            if nv {
                let mut dx = vec![0.0; xv.len()];
                for (i, (row, (grow, &r))) in
                    xv.chunks_exact(d).zip(g.chunks_exact(d).zip(&inv_rms)).enumerate()
                {
                    // dL/dx = r·(g⊙gain) − x·r³/d·Σ_j g_j·gain_j·x_j
                    let dot: f64 = (0..d).map(|j| grow[j] * gv[j] * row[j]).sum();
                    let coef = r * r * r * dot / d as f64;
                    for j in 0..d {
                        dx[i * d + j] = grow[j] * gv[j] * r - coef * row[j];
                    }
                }
                gr.add(v, &dx);
            }
        }) as _
    });
    Ok(t.push(vec![n, d], data, nv || ngain, back))
}

/// GroupNorm over [channels, time]: channels split into `groups` contiguous groups, each
/// normalized by its own mean/variance over (channels-in-group × time), then per-channel
/// affine (gamma, beta).
pub fn group_norm(t: &mut Tape, v: Var, groups: usize, gamma: Var, beta: Var) -> Result<Var> {
    let (c, time) = rank2(t, "group_norm", v)?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::shape(
            "group_norm",
            format!("{c} channels not divisible into {groups} groups"),
        ));
    }
    if t.shape(gamma) != [c] || t.shape(beta) != [c] {
        return Err(Error::shape(
            "group_norm",
            format!(
                "gamma {:?} / beta {:?} vs {c} channels",
                t.shape(gamma),
                t.shape(beta)
            ),
        ));
    }
    let per = c / groups;
    let gsize = per * time;
    let xv = t.value(v).to_vec();
    let gav = t.value(gamma).to_vec();
    let bev = t.value(beta).to_vec();

    let mut xhat = vec![0.0; xv.len()];
    let mut inv_std = vec![0.0; groups];
    for g in 0..groups {
        let span = g * per * time..(g + 1) * per * time;
        let vals = &xv[span.clone()];
        let mean = vals.iter().sum::<f64>() / gsize as f64;
        let var = vals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / gsize as f64;
        let istd = 1.0 / (var + NORM_EPS).sqrt();
        inv_std[g] = istd;
        for (dst, x) in xhat[span.clone()].iter_mut().zip(vals) {
            *dst = (x - mean) * istd;
        }
    }
    let mut data = vec![0.0; xv.len()];
    for ch in 0..c {
        for j in 0..time {
            data[ch * time + j] = xhat[ch * time + j] * gav[ch] + bev[ch];
        }
    }

    let (nx, ngamma, nbeta) = (t.needs_grad(v), t.needs_grad(gamma), t.needs_grad(beta));
    let ng = nx || ngamma || nbeta;
    let back = ng.then(|| {
        Box::new(move |g: &[f64], gr: &mut Grads| {
            if nbeta {
                gr.add_with(beta, c, |slot| {
                    for ch in 0..c {
                        slot[ch] += g[ch * time..(ch + 1) * time].iter().sum::<f64>();
                    }
                });
            }
            if ngamma {
                gr.add_with(gamma, c, |slot| {
                    for ch in 0..c {
                        slot[ch] += g[ch * time..(ch + 1) * time]
                            .iter()
                            .zip(&xhat[ch * time..(ch + 1) * time])
                            .map(|(gi, xh)| gi * xh)
                            .sum::<f64>();
                    }
                });
            }
            if nx {
                let mut dx = vec![0.0; xv.len()];
                for grp in 0..groups {
                    let span = grp * per * time..(grp + 1) * per * time;
                    // dxhat for the group, then the standard normalization backward.
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for ch in grp * per..(grp + 1) * per {
                        for j in 0..time {
                            let idx = ch * time + j;
                            let dxh = g[idx] * gav[ch];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xhat[idx];
                        }
                    }
                    let istd = inv_std[grp];
                    for ch in grp * per..(grp + 1) * per {
                        for j in 0..time {
                            let idx = ch * time + j;
                            let dxh = g[idx] * gav[ch];
                            dx[idx] = istd
                                * (dxh - sum_dxh / gsize as f64
                                    - xhat[idx] * sum_dxh_xh / gsize as f64);
                        }
                    }
                    let _ = span;
                }
                gr.add(v, &dx);
            }
        }) as _
    });
    Ok(t.push(vec![c, time], data, ng, back))
}

/// Row-wise softmax over the last axis of a rank-2 tensor.
pub fn softmax(t: &mut Tape, v: Var) -> Result<Var> {
    let (n, d) = rank2(t, "softmax", v)?;
    let xv = t.value(v);
    let mut data = Vec::with_capacity(xv.len());
    for row in xv.chunks_exact(d) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        data.extend(exps.into_iter().map(|e| e / sum));
    }
    let yv = data.clone();
    let ng = t.needs_grad(v);
    let back = ng.then(|| {
        Box::new(move |g: &[f64], gr: &mut Grads| {
            let mut dx = vec![0.0; yv.len()];
            for i in 0..yv.len() / d {
                let yrow = &yv[i * d..(i + 1) * d];
                let grow = &g[i * d..(i + 1) * d];
                let dot: f64 = yrow.iter().zip(grow).map(|(y, gi)| y * gi).sum();
                for j in 0..d {
                    dx[i * d + j] = yrow[j] * (grow[j] - dot);
                }
            }
            gr.add(v, &dx);
        }) as _
    });
    Ok(t.push(vec![n, d], data, ng, back))
}
