//! Shape manipulation and reductions.

use super::rank2;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::Grads;
use crate::{Error, Result};

/// Stacks rank-2 tensors with equal column counts along axis 0.
pub fn concat_rows(t: &mut Tape, parts: &[Var]) -> Result<Var> {
    if parts.is_empty() {
        return Err(Error::shape("concat_rows", "no inputs"));
    }
    let (_, d) = rank2(t, "concat_rows", parts[0])?;
    let mut rows = 0;
    let mut data = Vec::new();
    let mut spans = Vec::with_capacity(parts.len());
    for &p in parts {
        let (n, dp) = rank2(t, "concat_rows", p)?;
        if dp != d {
            return Err(Error::shape("concat_rows", format!("column mismatch: {dp} vs {d}")));
        }
        spans.push((p, rows * d, n * d, t.needs_grad(p)));
        rows += n;
        data.extend_from_slice(t.value(p));
    }
    let ng = spans.iter().any(|s| s.3);
    let back = ng.then(|| {
        let spans = spans.clone();
        Box::new(move |g: &[f64], gr: &mut Grads| {
            for &(p, off, len, needs) in &spans {
                if needs {
                    gr.add(p, &g[off..off + len]);
                }
            }
        }) as _
    });
    Ok(t.push(vec![rows, d], data, ng, back))
}

/// Rows [start, start+len) of a rank-2 tensor.
pub fn narrow_rows(t: &mut Tape, m: Var, start: usize, len: usize) -> Result<Var> {
    let (n, d) = rank2(t, "narrow_rows", m)?;
    if start + len > n {
        return Err(Error::shape("narrow_rows", format!("rows {start}..{} out of {n}", start + len)));
    }
    let data = t.value(m)[start * d..(start + len) * d].to_vec();
    let ng = t.needs_grad(m);
    let back = ng.then(|| {
        Box::new(move |g: &[f64], gr: &mut Grads| {
            gr.add_with(m, n * d, |slot| {
                for (s, gi) in slot[start * d..].iter_mut().zip(g) {
                    *s += gi;
                }
            });
        }) as _
    });
    Ok(t.push(vec![len, d], data, ng, back))
}

/// Concatenates rank-2 tensors with equal row counts along the last axis.
pub fn concat_cols(t: &mut Tape, parts: &[Var]) -> Result<Var> {
    if parts.is_empty() {
        return Err(Error::shape("concat_cols", "no inputs"));
    }
    let (n, _) = rank2(t, "concat_cols", parts[0])?;
    let mut widths = Vec::with_capacity(parts.len());
    let mut total = 0;
    for &p in parts {
        let (np, dp) = rank2(t, "concat_cols", p)?;
        if np != n {
            return Err(Error::shape("concat_cols", format!("row mismatch: {np} vs {n}")));
        }
        widths.push((p, total, dp, t.needs_grad(p)));
        total += dp;
    }
    let mut data = vec![0.0; n * total];
    for &(p, off, dp, _) in &widths {
        let src = t.value(p);
        for i in 0..n {
            data[i * total + off..i * total + off + dp].copy_from_slice(&src[i * dp..(i + 1) * dp]);
        }
    }
    let ng = widths.iter().any(|w| w.3);
    let back = ng.then(|| {
        let widths = widths.clone();
        Box::new(move |g: &[f64], gr: &mut Grads| {
            for &(p, off, dp, needs) in &widths {
                if !needs {
                    continue;
                }
                gr.add_with(p, n * dp, |slot| {
                    for i in 0..n {
                        for j in 0..dp {
                            slot[i * dp + j] += g[i * total + off + j];
                        }
                    }
                });
            }
        }) as _
    });
    Ok(t.push(vec![n, total], data, ng, back))
}

/// Columns [start, start+len) of a rank-2 tensor.
pub fn narrow_cols(t: &mut Tape, m: Var, start: usize, len: usize) -> Result<Var> {
    let (n, d) = rank2(t, "narrow_cols", m)?;
    if start + len > d {
        return Err(Error::shape("narrow_cols", format!("cols {start}..{} out of {d}", start + len)));
    }
    let src = t.value(m);
    let mut data = Vec::with_capacity(n * len);
    for i in 0..n {
        data.extend_from_slice(&src[i * d + start..i * d + start + len]);
    }
    let ng = t.needs_grad(m);
    let back = ng.then(|| {
        Box::new(move |g: &[f64], gr: &mut Grads| {
            gr.add_with(m, n * d, |slot| {
                for i in 0..n {
                    for j in 0..len {
                        slot[i * d + start + j] += g[i * len + j];
                    }
                }
            });
        }) as _
    });
    Ok(t.push(vec![n, len], data, ng, back))
}

/// Selects rows of a rank-2 tensor by index (repeats allowed). Backward scatter-adds,
/// which makes this double as embedding lookup and row broadcast.
pub fn gather_rows(t: &mut Tape, m: Var, indices: &[usize]) -> Result<Var> {
    let (n, d) = rank2(t, "gather_rows", m)?;
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(Error::shape("gather_rows", format!("index {bad} out of {n} rows")));
    }
    let src = t.value(m);
    let mut data = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        data.extend_from_slice(&src[i * d..(i + 1) * d]);
    }
    let ng = t.needs_grad(m);
    let out_rows = indices.len();
    let back = ng.then(|| {
        let indices = indices.to_vec();
        Box::new(move |g: &[f64], gr: &mut Grads| {
            gr.add_with(m, n * d, |slot| {
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..d {
                        slot[i * d + j] += g[k * d + j];
                    }
                }
            });
        }) as _
    });
    Ok(t.push(vec![out_rows, d], data, ng, back))
}

pub fn transpose(t: &mut Tape, m: Var) -> Result<Var> {
    let (n, d) = rank2(t, "transpose", m)?;
    let src = t.value(m);
    let mut data = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            data[j * n + i] = src[i * d + j];
        }
    }
    let ng = t.needs_grad(m);
    let back = ng.then(|| {
        Box::new(move |g: &[f64], gr: &mut Grads| {
            gr.add_with(m, n * d, |slot| {
                for i in 0..n {
                    for j in 0..d {
                        slot[i * d + j] += g[j * n + i];
                    }
                }
            });
        }) as _
    });
    Ok(t.push(vec![d, n], data, ng, back))
}

/// Reinterprets the value with a new shape of equal element count.
pub fn reshape(t: &mut Tape, v: Var, shape: &[usize]) -> Result<Var> {
    let want: usize = shape.iter().product();
    if want != t.value(v).len() {
        return Err(Error::shape(
            "reshape",
            format!("cannot view {:?} as {shape:?}", t.shape(v)),
        ));
    }
    let data = t.value(v).to_vec();
    let ng = t.needs_grad(v);
    let back = ng.then(|| Box::new(move |g: &[f64], gr: &mut Grads| gr.add(v, g)) as _);
    Ok(t.push(shape.to_vec(), data, ng, back))
}

pub fn sum_all(t: &mut Tape, v: Var) -> Result<Var> {
    let total: f64 = t.value(v).iter().sum();
    let n = t.value(v).len();
    let ng = t.needs_grad(v);
    let back = ng.then(|| {
        Box::new(move |g: &[f64], gr: &mut Grads| {
            gr.add_with(v, n, |slot| {
                for s in slot {
                    *s += g[0];
                }
            });
        }) as _
    });
    Ok(t.push(vec![], vec![total], ng, back))
}

pub fn mean_all(t: &mut Tape, v: Var) -> Result<Var> {
    let n = t.value(v).len();
    if n == 0 {
        return Err(Error::shape("mean_all", "empty tensor"));
    }
    let mean: f64 = t.value(v).iter().sum::<f64>() / n as f64;
    let ng = t.needs_grad(v);
    let back = ng.then(|| {
        Box::new(move |g: &[f64], gr: &mut Grads| {
            let gi = g[0] / n as f64;
            gr.add_with(v, n, |slot| {
                for s in slot {
                    *s += gi;
                }
            });
        }) as _
    });
    Ok(t.push(vec![], vec![mean], ng, back))
}

/// Column means of a rank-2 tensor: [n, d] -> [d].
pub fn mean_axis0(t: &mut Tape, m: Var) -> Result<Var> {
    let (n, d) = rank2(t, "mean_axis0", m)?;
    if n == 0 {
        return Err(Error::shape("mean_axis0", "no rows"));
    }
    let src = t.value(m);
    let mut data = vec![0.0; d];
    for row in src.chunks_exact(d) {
        for (acc, x) in data.iter_mut().zip(row) {
            *acc += x;
        }
    }
    for acc in &mut data {
        *acc /= n as f64;
    }
    let ng = t.needs_grad(m);
    let back = ng.then(|| {
        Box::new(move |g: &[f64], gr: &mut Grads| {
            gr.add_with(m, n * d, |slot| {
                for row in slot.chunks_exact_mut(d) {
                    for (s, gi) in row.iter_mut().zip(g) {
                        *s += gi / n as f64;
                    }
                }
            });
        }) as _
    });
    Ok(t.push(vec![d], data, ng, back))
}

/// Row sums of a rank-2 tensor: [n, d] -> [n].
pub fn sum_axis1(t: &mut Tape, m: Var) -> Result<Var> {
    let (n, d) = rank2(t, "sum_axis1", m)?;
    let data: Vec<f64> = t.value(m).chunks_exact(d).map(|row| row.iter().sum()).collect();
    let ng = t.needs_grad(m);
    let back = ng.then(|| {
        Box::new(move |g: &[f64], gr: &mut Grads| {
            gr.add_with(m, n * d, |slot| {
                for (i, row) in slot.chunks_exact_mut(d).enumerate() {
                    for s in row {
                        *s += g[i];
                    }
                }
            });
        }) as _
    });
    Ok(t.push(vec![n], data, ng, back))
}
