//! Shared neural building blocks: linear maps, multi-head attention, SwiGLU feed-forward
//! layers, and pre-norm transformer blocks.
//!
//! Every stateful layer follows one contract: `params`/`params_mut` enumerate named
//! tensors in a fixed order, and `lease` places the same tensors on a tape in that order,
//! so optimizer slots, checkpoints, and gradient extraction all align positionally.

use crate::numerics::{ops, Rng, Tape, Tensor, Var};
use crate::Result;

/// Weight init scale shared by all layers.
pub const INIT_STD: f64 = 0.02;
/// Truncation bound in units of sigma.
pub const INIT_CLIP: f64 = 2.0;

/// Truncated-normal weight tensor, gradient-enabled.
pub fn init_weight(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.trunc_normal(INIT_STD, INIT_CLIP)).collect();
    Tensor::new(shape, data).expect("init shape").with_grad()
}

/// Zero-filled gradient-enabled tensor, used for biases.
pub fn init_zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape).with_grad()
}

/// One-filled gradient-enabled tensor, used for norm gains.
pub fn init_ones(shape: &[usize]) -> Tensor {
    Tensor::full(shape, 1.0).with_grad()
}

/// Extracts gradients for leased vars in order; absent entries stay `None`.
pub fn take_grads(grads: &mut crate::numerics::Grads, vars: &[Var]) -> Vec<Option<Vec<f64>>> {
    vars.iter().map(|&v| grads.take(v)).collect()
}

/// Fills every named slot from `find`, preserving gradient flags. Errors name the
/// tensor that is missing or shaped differently.
pub fn load_named(
    slots: &mut [(String, &mut Tensor)],
    find: &dyn Fn(&str) -> Option<Tensor>,
) -> Result<()> {
    for (name, slot) in slots.iter_mut() {
        let src = find(name).ok_or_else(|| {
            crate::Error::Format(format!("checkpoint is missing tensor '{name}'"))
        })?;
        if src.shape() != slot.shape() {
            return Err(crate::Error::Format(format!(
                "tensor '{name}': checkpoint shape {:?} does not match model shape {:?}",
                src.shape(),
                slot.shape()
            )));
        }
        let grad = slot.requires_grad;
        **slot = src;
        slot.requires_grad = grad;
    }
    Ok(())
}

/// Affine map `x W + b`; `b` is optional.
#[derive(Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Option<Tensor>,
}

pub struct LinearVars {
    pub w: Var,
    pub b: Option<Var>,
}

impl Linear {
    pub fn init(input: usize, output: usize, bias: bool, rng: &mut Rng) -> Linear {
        Linear {
            w: init_weight(&[input, output], rng),
            b: bias.then(|| init_zeros(&[output])),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.w"), &self.w));
        if let Some(b) = &self.b {
            out.push((format!("{prefix}.b"), b));
        }
    }

    pub fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.w"), &mut self.w));
        if let Some(b) = &mut self.b {
            out.push((format!("{prefix}.b"), b));
        }
    }

    pub fn lease(&self, t: &mut Tape, trainable: bool) -> LinearVars {
        LinearVars {
            w: t.lease(&self.w, trainable),
            b: self.b.as_ref().map(|b| t.lease(b, trainable)),
        }
    }
}

impl LinearVars {
    pub fn vars(&self, out: &mut Vec<Var>) {
        out.push(self.w);
        if let Some(b) = self.b {
            out.push(b);
        }
    }

    /// `x: [n, input] -> [n, output]`.
    pub fn apply(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let y = ops::matmul(t, x, self.w)?;
        match self.b {
            Some(b) => ops::add_bias(t, y, b),
            None => Ok(y),
        }
    }
}

/// Bias-free multi-head attention over row-major token matrices.
#[derive(Clone)]
pub struct Attention {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub heads: usize,
}

pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    heads: usize,
}

impl Attention {
    pub fn init(dim: usize, heads: usize, rng: &mut Rng) -> Result<Attention> {
        if heads == 0 || dim % heads != 0 {
            return Err(crate::Error::InvalidParameter(format!(
                "attention: {heads} heads must divide width {dim}"
            )));
        }
        Ok(Attention {
            wq: init_weight(&[dim, dim], rng),
            wk: init_weight(&[dim, dim], rng),
            wv: init_weight(&[dim, dim], rng),
            wo: init_weight(&[dim, dim], rng),
            heads,
        })
    }

    pub fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.wq"), &self.wq));
        out.push((format!("{prefix}.wk"), &self.wk));
        out.push((format!("{prefix}.wv"), &self.wv));
        out.push((format!("{prefix}.wo"), &self.wo));
    }

    pub fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.wq"), &mut self.wq));
        out.push((format!("{prefix}.wk"), &mut self.wk));
        out.push((format!("{prefix}.wv"), &mut self.wv));
        out.push((format!("{prefix}.wo"), &mut self.wo));
    }

    pub fn lease(&self, t: &mut Tape, trainable: bool) -> AttentionVars {
        AttentionVars {
            wq: t.lease(&self.wq, trainable),
            wk: t.lease(&self.wk, trainable),
            wv: t.lease(&self.wv, trainable),
            wo: t.lease(&self.wo, trainable),
            heads: self.heads,
        }
    }
}

impl AttentionVars {
    pub fn vars(&self, out: &mut Vec<Var>) {
        out.extend([self.wq, self.wk, self.wv, self.wo]);
    }

    /// Attends queries derived from `x_q` over keys/values derived from `x_kv`.
    /// Self-attention passes the same var for both.
    pub fn apply(&self, t: &mut Tape, x_q: Var, x_kv: Var) -> Result<Var> {
        let q = ops::matmul(t, x_q, self.wq)?;
        let k = ops::matmul(t, x_kv, self.wk)?;
        let v = ops::matmul(t, x_kv, self.wv)?;
        let dim = t.shape(q)[1];
        let head_dim = dim / self.heads;
        let mut merged = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = ops::narrow_cols(t, q, h * head_dim, head_dim)?;
            let kh = ops::narrow_cols(t, k, h * head_dim, head_dim)?;
            let vh = ops::narrow_cols(t, v, h * head_dim, head_dim)?;
            merged.push(ops::sdpa(t, qh, kh, vh)?);
        }
        let heads = ops::concat_cols(t, &merged)?;
        ops::matmul(t, heads, self.wo)
    }
}

/// SwiGLU feed-forward: `(silu(x W1) * (x W3)) W2`.
#[derive(Clone)]
pub struct FeedForward {
    pub w1: Tensor,
    pub w2: Tensor,
    pub w3: Tensor,
}

pub struct FeedForwardVars {
    pub w1: Var,
    pub w2: Var,
    pub w3: Var,
}

impl FeedForward {
    pub fn init(dim: usize, hidden: usize, rng: &mut Rng) -> FeedForward {
        FeedForward {
            w1: init_weight(&[dim, hidden], rng),
            w2: init_weight(&[hidden, dim], rng),
            w3: init_weight(&[dim, hidden], rng),
        }
    }

    pub fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.w1"), &self.w1));
        out.push((format!("{prefix}.w2"), &self.w2));
        out.push((format!("{prefix}.w3"), &self.w3));
    }

    pub fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.w1"), &mut self.w1));
        out.push((format!("{prefix}.w2"), &mut self.w2));
        out.push((format!("{prefix}.w3"), &mut self.w3));
    }

    pub fn lease(&self, t: &mut Tape, trainable: bool) -> FeedForwardVars {
        FeedForwardVars {
            w1: t.lease(&self.w1, trainable),
            w2: t.lease(&self.w2, trainable),
            w3: t.lease(&self.w3, trainable),
        }
    }
}

impl FeedForwardVars {
    pub fn vars(&self, out: &mut Vec<Var>) {
        out.extend([self.w1, self.w2, self.w3]);
    }

    pub fn apply(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let gate = ops::matmul(t, x, self.w1)?;
        let gate = ops::silu(t, gate)?;
        let lin = ops::matmul(t, x, self.w3)?;
        let prod = ops::mul(t, gate, lin)?;
        ops::matmul(t, prod, self.w2)
    }
}

/// Mixture-of-experts feed-forward: per-token top-1 routing over SwiGLU experts,
/// output scaled by the selected expert's softmax gate probability.
#[derive(Clone)]
pub struct MoeFeedForward {
    pub gate: Linear,
    pub experts: Vec<FeedForward>,
}

pub struct MoeFeedForwardVars {
    pub gate: LinearVars,
    pub experts: Vec<FeedForwardVars>,
}

impl MoeFeedForward {
    pub fn init(dim: usize, hidden: usize, experts: usize, rng: &mut Rng) -> MoeFeedForward {
        MoeFeedForward {
            gate: Linear::init(dim, experts, false, rng),
            experts: (0..experts).map(|_| FeedForward::init(dim, hidden, rng)).collect(),
        }
    }

    pub fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.gate.params(&format!("{prefix}.gate"), out);
        for (i, e) in self.experts.iter().enumerate() {
            e.params(&format!("{prefix}.expert{i}"), out);
        }
    }

    pub fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.gate.params_mut(&format!("{prefix}.gate"), out);
        for (i, e) in self.experts.iter_mut().enumerate() {
            e.params_mut(&format!("{prefix}.expert{i}"), out);
        }
    }

    pub fn lease(&self, t: &mut Tape, trainable: bool) -> MoeFeedForwardVars {
        MoeFeedForwardVars {
            gate: self.gate.lease(t, trainable),
            experts: self.experts.iter().map(|e| e.lease(t, trainable)).collect(),
        }
    }
}

impl MoeFeedForwardVars {
    pub fn vars(&self, out: &mut Vec<Var>) {
        self.gate.vars(out);
        for e in &self.experts {
            e.vars(out);
        }
    }

    pub fn apply(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let n = t.shape(x)[0];
        let logits = self.gate.apply(t, x)?;
        let weights = ops::softmax(t, logits)?;
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let picked = {
                let row = &t.value(logits)[i * self.experts.len()..(i + 1) * self.experts.len()];
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(j, _)| j)
                    .unwrap()
            };
            let xi = ops::narrow_rows(t, x, i, 1)?;
            let yi = self.experts[picked].apply(t, xi)?;
            let wi = ops::narrow_rows(t, weights, i, 1)?;
            let wi = ops::narrow_cols(t, wi, picked, 1)?;
            let d = t.shape(yi)[1];
            let wi_full = broadcast_scalar_row(t, wi, d)?;
            rows.push(ops::mul(t, yi, wi_full)?);
        }
        ops::concat_rows(t, &rows)
    }
}

/// Tiles a `[1,1]` var to `[1,d]` so it can scale a row elementwise.
fn broadcast_scalar_row(t: &mut Tape, v: Var, d: usize) -> Result<Var> {
    let tr = ops::transpose(t, v)?;
    let ones = t.constant_from(&[1, d], vec![1.0; d]);
    let row = ops::matmul(t, tr, ones)?;
    ops::reshape(t, row, &[1, d])
}

/// Feed-forward flavor used inside a block.
#[derive(Clone)]
pub enum Ffn {
    Dense(FeedForward),
    Moe(MoeFeedForward),
}

pub enum FfnVars {
    Dense(FeedForwardVars),
    Moe(MoeFeedForwardVars),
}

impl Ffn {
    pub fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        match self {
            Ffn::Dense(f) => f.params(&format!("{prefix}.ffn"), out),
            Ffn::Moe(m) => m.params(&format!("{prefix}.moe"), out),
        }
    }

    pub fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        match self {
            Ffn::Dense(f) => f.params_mut(&format!("{prefix}.ffn"), out),
            Ffn::Moe(m) => m.params_mut(&format!("{prefix}.moe"), out),
        }
    }

    pub fn lease(&self, t: &mut Tape, trainable: bool) -> FfnVars {
        match self {
            Ffn::Dense(f) => FfnVars::Dense(f.lease(t, trainable)),
            Ffn::Moe(m) => FfnVars::Moe(m.lease(t, trainable)),
        }
    }
}

impl FfnVars {
    pub fn vars(&self, out: &mut Vec<Var>) {
        match self {
            FfnVars::Dense(f) => f.vars(out),
            FfnVars::Moe(m) => m.vars(out),
        }
    }

    pub fn apply(&self, t: &mut Tape, x: Var) -> Result<Var> {
        match self {
            FfnVars::Dense(f) => f.apply(t, x),
            FfnVars::Moe(m) => m.apply(t, x),
        }
    }
}

/// Pre-norm transformer block: `x + attn(norm(x))`, then `x + ffn(norm(x))`.
#[derive(Clone)]
pub struct Block {
    pub attn_norm: Tensor,
    pub attn: Attention,
    pub ffn_norm: Tensor,
    pub ffn: Ffn,
}

pub struct BlockVars {
    pub attn_norm: Var,
    pub attn: AttentionVars,
    pub ffn_norm: Var,
    pub ffn: FfnVars,
}

impl Block {
    pub fn init(dim: usize, heads: usize, hidden: usize, rng: &mut Rng) -> Result<Block> {
        Ok(Block {
            attn_norm: init_ones(&[dim]),
            attn: Attention::init(dim, heads, rng)?,
            ffn_norm: init_ones(&[dim]),
            ffn: Ffn::Dense(FeedForward::init(dim, hidden, rng)),
        })
    }

    pub fn init_moe(
        dim: usize,
        heads: usize,
        hidden: usize,
        experts: usize,
        rng: &mut Rng,
    ) -> Result<Block> {
        Ok(Block {
            attn_norm: init_ones(&[dim]),
            attn: Attention::init(dim, heads, rng)?,
            ffn_norm: init_ones(&[dim]),
            ffn: Ffn::Moe(MoeFeedForward::init(dim, hidden, experts, rng)),
        })
    }

    pub fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.attn_norm"), &self.attn_norm));
        self.attn.params(&format!("{prefix}.attn"), out);
        out.push((format!("{prefix}.ffn_norm"), &self.ffn_norm));
        self.ffn.params(prefix, out);
    }

    pub fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.attn_norm"), &mut self.attn_norm));
        self.attn.params_mut(&format!("{prefix}.attn"), out);
        out.push((format!("{prefix}.ffn_norm"), &mut self.ffn_norm));
        self.ffn.params_mut(prefix, out);
    }

    pub fn lease(&self, t: &mut Tape, trainable: bool) -> BlockVars {
        BlockVars {
            attn_norm: t.lease(&self.attn_norm, trainable),
            attn: self.attn.lease(t, trainable),
            ffn_norm: t.lease(&self.ffn_norm, trainable),
            ffn: self.ffn.lease(t, trainable),
        }
    }
}

impl BlockVars {
    pub fn vars(&self, out: &mut Vec<Var>) {
        out.push(self.attn_norm);
        self.attn.vars(out);
        out.push(self.ffn_norm);
        self.ffn.vars(out);
    }

    pub fn apply(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let normed = ops::rms_norm(t, x, self.attn_norm)?;
        let attended = self.attn.apply(t, normed, normed)?;
        let x = ops::add(t, x, attended)?;
        let normed = ops::rms_norm(t, x, self.ffn_norm)?;
        let fed = self.ffn.apply(t, normed)?;
        ops::add(t, x, fed)
    }
}
