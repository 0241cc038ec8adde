//! 1-D convolution over [channels, time] with zero padding.

use super::rank2;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::Grads;
use crate::{Error, Result};

/// x: [c_in, time], w: [c_out, c_in, k], bias: [c_out] -> [c_out, t_out]
/// with t_out = (time + 2·pad − k)/stride + 1 (floor division, must be ≥ 1).
pub fn conv1d(t: &mut Tape, x: Var, w: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
    let (c_in, time) = rank2(t, "conv1d", x)?;
    let (c_out, c_in_w, k) = match t.shape(w) {
        [o, i, k] => (*o, *i, *k),
        other => return Err(Error::shape("conv1d", format!("weight must be rank 3, got {other:?}"))),
    };
    if c_in_w != c_in {
        return Err(Error::shape(
            "conv1d",
            format!("weight expects {c_in_w} input channels, signal has {c_in}"),
        ));
    }
    if t.shape(bias) != [c_out] {
        return Err(Error::shape("conv1d", format!("bias shape {:?} vs {c_out} filters", t.shape(bias))));
    }
    if stride == 0 {
        return Err(Error::shape("conv1d", "stride must be >= 1"));
    }
    let padded = time + 2 * pad;
    if padded < k {
        return Err(Error::shape(
            "conv1d",
            format!("kernel {k} longer than padded input {padded}"),
        ));
    }
    let t_out = (padded - k) / stride + 1;

    let xv = t.value(x).to_vec();
    let wv = t.value(w).to_vec();
    let bv = t.value(bias).to_vec();

    // xp(c, j) reads the zero-padded signal.
    let xp = move |xs: &[f64], c: usize, j: usize| -> f64 {
        if j < pad || j >= pad + time {
            0.0
        } else {
            xs[c * time + (j - pad)]
        }
    };

    let mut data = vec![0.0; c_out * t_out];
    for o in 0..c_out {
        for j in 0..t_out {
            let mut acc = bv[o];
            let base = j * stride;
            for c in 0..c_in {
                let wrow = &wv[(o * c_in + c) * k..(o * c_in + c + 1) * k];
                for (kk, &wkk) in wrow.iter().enumerate() {
                    acc += wkk * xp(&xv, c, base + kk);
                }
            }
            data[o * t_out + j] = acc;
        }
    }

    let (nx, nw, nb) = (t.needs_grad(x), t.needs_grad(w), t.needs_grad(bias));
    let ng = nx || nw || nb;
    let back = ng.then(|| {
        Box::new(move |g: &[f64], gr: &mut Grads| {
            if nb {
                gr.add_with(bias, c_out, |slot| {
                    for o in 0..c_out {
                        slot[o] += g[o * t_out..(o + 1) * t_out].iter().sum::<f64>();
                    }
                });
            }
            if nw {
                gr.add_with(w, c_out * c_in * k, |slot| {
                    for o in 0..c_out {
                        for j in 0..t_out {
                            let go = g[o * t_out + j];
                            if go == 0.0 {
                                continue;
                            }
                            let base = j * stride;
                            for c in 0..c_in {
                                for kk in 0..k {
                                    slot[(o * c_in + c) * k + kk] += go * xp(&xv, c, base + kk);
                                }
                            }
                        }
                    }
                });
            }
            if nx {
                gr.add_with(x, c_in * time, |slot| {
                    for o in 0..c_out {
                        for j in 0..t_out {
                            let go = g[o * t_out + j];
                            if go == 0.0 {
                                continue;
                            }
                            let base = j * stride;
                            for c in 0..c_in {
                                let wrow = &wv[(o * c_in + c) * k..(o * c_in + c + 1) * k];
                                for (kk, &wkk) in wrow.iter().enumerate() {
                                    let jp = base + kk;
                                    if jp >= pad && jp < pad + time {
                                        slot[c * time + (jp - pad)] += go * wkk;
                                    }
                                }
                            }
                        }
                    }
                });
            }
        }) as _
    });
    Ok(t.push(vec![c_out, t_out], data, ng, back))
}
