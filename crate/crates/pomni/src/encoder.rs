//! Per-modality signal encoder: a three-layer temporal conv front end per patch,
//! learned channel and time-position embeddings, a pre-norm transformer stack, and a
//! split of each token into private and shared halves.

use crate::nn::{self, Block, BlockVars, Linear, LinearVars};
use crate::numerics::{ops, Rng, Tape, Tensor, Var};
use crate::sigproc::PatchGrid;
use crate::{Error, Modality, Result};

/// Channel width of every temporal conv layer.
pub const CONV_WIDTH: usize = 16;
/// GroupNorm group count in the temporal encoder.
pub const CONV_GROUPS: usize = 4;
pub const CONV_KERNELS: [usize; 3] = [15, 3, 3];
pub const CONV_STRIDES: [usize; 3] = [8, 1, 1];
pub const CONV_PADS: [usize; 3] = [7, 1, 1];

/// Output length of the conv chain for one patch.
pub fn conv_out_len(patch_len: usize) -> usize {
    let mut n = patch_len;
    for i in 0..3 {
        n = (n + 2 * CONV_PADS[i] - CONV_KERNELS[i]) / CONV_STRIDES[i] + 1;
    }
    n
}

#[derive(Clone, Debug)]
pub struct EncoderConfig {
    pub modality: Modality,
    pub patch_len: usize,
    /// Token width d, split into equal private and shared halves.
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Feed-forward hidden width.
    pub hidden: usize,
    /// Rows in the channel-embedding table.
    pub max_channels: usize,
    /// Rows in the time-position embedding table (patches per channel).
    pub max_time: usize,
}

impl EncoderConfig {
    /// Desk-scale defaults: EEG twice as wide as the other modalities.
    pub fn desk(modality: Modality, patch_len: usize, max_channels: usize, max_time: usize) -> EncoderConfig {
        let dim = if modality == Modality::Eeg { 64 } else { 32 };
        EncoderConfig {
            modality,
            patch_len,
            dim,
            layers: 2,
            heads: 4,
            hidden: 4 * dim,
            max_channels,
            max_time,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 2 != 0 {
            return Err(Error::InvalidParameter(format!(
                "{}: token width {} must be even and positive",
                self.modality, self.dim
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::InvalidParameter(format!(
                "{}: {} heads must divide width {}",
                self.modality, self.heads, self.dim
            )));
        }
        if self.patch_len < CONV_KERNELS[0] - 2 * CONV_PADS[0] || conv_out_len(self.patch_len) == 0 {
            return Err(Error::InvalidParameter(format!(
                "{}: patch length {} too short for the conv chain",
                self.modality, self.patch_len
            )));
        }
        if self.max_channels == 0 || self.max_time == 0 {
            return Err(Error::InvalidParameter(format!(
                "{}: embedding tables need at least one row",
                self.modality
            )));
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct EncoderState {
    pub cfg: EncoderConfig,
    conv_w: [Tensor; 3],
    conv_b: [Tensor; 3],
    gn_gamma: [Tensor; 3],
    gn_beta: [Tensor; 3],
    proj: Linear,
    spatial: Tensor,
    temporal: Tensor,
    blocks: Vec<Block>,
    final_norm: Tensor,
}

pub struct EncoderVars {
    conv_w: [Var; 3],
    conv_b: [Var; 3],
    gn_gamma: [Var; 3],
    gn_beta: [Var; 3],
    proj: LinearVars,
    spatial: Var,
    temporal: Var,
    blocks: Vec<BlockVars>,
    final_norm: Var,
}

/// Encoder output: full tokens plus the private/shared column halves.
pub struct Encoded {
    pub tokens: Var,
    pub private: Var,
    pub shared: Var,
}

impl EncoderState {
    pub fn init(cfg: EncoderConfig, rng: &mut Rng) -> Result<EncoderState> {
        cfg.validate()?;
        let conv_in = [1, CONV_WIDTH, CONV_WIDTH];
        let conv_w = std::array::from_fn(|i| {
            nn::init_weight(&[CONV_WIDTH, conv_in[i], CONV_KERNELS[i]], rng)
        });
        let conv_b = std::array::from_fn(|_| nn::init_zeros(&[CONV_WIDTH]));
        let gn_gamma = std::array::from_fn(|_| nn::init_ones(&[CONV_WIDTH]));
        let gn_beta = std::array::from_fn(|_| nn::init_zeros(&[CONV_WIDTH]));
        let flat = CONV_WIDTH * conv_out_len(cfg.patch_len);
        let proj = Linear::init(flat, cfg.dim, true, rng);
        let spatial = nn::init_weight(&[cfg.max_channels, cfg.dim], rng);
        let temporal = nn::init_weight(&[cfg.max_time, cfg.dim], rng);
        let blocks = (0..cfg.layers)
            .map(|_| Block::init(cfg.dim, cfg.heads, cfg.hidden, rng))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = nn::init_ones(&[cfg.dim]);
        Ok(EncoderState {
            cfg,
            conv_w,
            conv_b,
            gn_gamma,
            gn_beta,
            proj,
            spatial,
            temporal,
            blocks,
            final_norm,
        })
    }

    pub fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for i in 0..3 {
            out.push((format!("{prefix}.conv{i}.w"), &self.conv_w[i]));
            out.push((format!("{prefix}.conv{i}.b"), &self.conv_b[i]));
            out.push((format!("{prefix}.gn{i}.g"), &self.gn_gamma[i]));
            out.push((format!("{prefix}.gn{i}.b"), &self.gn_beta[i]));
        }
        self.proj.params(&format!("{prefix}.proj"), out);
        out.push((format!("{prefix}.spatial"), &self.spatial));
        out.push((format!("{prefix}.temporal"), &self.temporal));
        for (i, b) in self.blocks.iter().enumerate() {
            b.params(&format!("{prefix}.block{i}"), out);
        }
        out.push((format!("{prefix}.final_norm"), &self.final_norm));
    }

    pub fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, ((w, b), (g, beta))) in self
            .conv_w
            .iter_mut()
            .zip(self.conv_b.iter_mut())
            .zip(self.gn_gamma.iter_mut().zip(self.gn_beta.iter_mut()))
            .enumerate()
        {
            out.push((format!("{prefix}.conv{i}.w"), w));
            out.push((format!("{prefix}.conv{i}.b"), b));
            out.push((format!("{prefix}.gn{i}.g"), g));
            out.push((format!("{prefix}.gn{i}.b"), beta));
        }
        self.proj.params_mut(&format!("{prefix}.proj"), out);
        out.push((format!("{prefix}.spatial"), &mut self.spatial));
        out.push((format!("{prefix}.temporal"), &mut self.temporal));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.params_mut(&format!("{prefix}.block{i}"), out);
        }
        out.push((format!("{prefix}.final_norm"), &mut self.final_norm));
    }

    pub fn lease(&self, t: &mut Tape, trainable: bool) -> EncoderVars {
        EncoderVars {
            conv_w: std::array::from_fn(|i| t.lease(&self.conv_w[i], trainable)),
            conv_b: std::array::from_fn(|i| t.lease(&self.conv_b[i], trainable)),
            gn_gamma: std::array::from_fn(|i| t.lease(&self.gn_gamma[i], trainable)),
            gn_beta: std::array::from_fn(|i| t.lease(&self.gn_beta[i], trainable)),
            proj: self.proj.lease(t, trainable),
            spatial: t.lease(&self.spatial, trainable),
            temporal: t.lease(&self.temporal, trainable),
            blocks: self.blocks.iter().map(|b| b.lease(t, trainable)).collect(),
            final_norm: t.lease(&self.final_norm, trainable),
        }
    }
}

impl EncoderVars {
    pub fn vars(&self, out: &mut Vec<Var>) {
        for i in 0..3 {
            out.push(self.conv_w[i]);
            out.push(self.conv_b[i]);
            out.push(self.gn_gamma[i]);
            out.push(self.gn_beta[i]);
        }
        self.proj.vars(out);
        out.push(self.spatial);
        out.push(self.temporal);
        for b in &self.blocks {
            b.vars(out);
        }
        out.push(self.final_norm);
    }

    /// Conv front end for one grid: `[N, dim]` tokens, no position information yet.
    pub fn temporal_encode(&self, t: &mut Tape, cfg: &EncoderConfig, grid: &PatchGrid) -> Result<Var> {
        if grid.patch_len != cfg.patch_len {
            return Err(Error::shape(
                "temporal_encode",
                format!("grid patches are {} samples, encoder wants {}", grid.patch_len, cfg.patch_len),
            ));
        }
        let flat = CONV_WIDTH * conv_out_len(cfg.patch_len);
        let mut rows = Vec::with_capacity(grid.tokens());
        for token in 0..grid.tokens() {
            let mut x = t.constant_from(&[1, cfg.patch_len], grid.patch(token).to_vec());
            for layer in 0..3 {
                x = ops::conv1d(
                    t,
                    x,
                    self.conv_w[layer],
                    self.conv_b[layer],
                    CONV_STRIDES[layer],
                    CONV_PADS[layer],
                )?;
                x = ops::group_norm(t, x, CONV_GROUPS, self.gn_gamma[layer], self.gn_beta[layer])?;
                x = ops::gelu(t, x)?;
            }
            rows.push(ops::reshape(t, x, &[1, flat])?);
        }
        let stacked = ops::concat_rows(t, &rows)?;
        self.proj.apply(t, stacked)
    }

    /// Full encode: conv tokens (optionally corrupted), plus embeddings, transformer
    /// stack, final norm, and the half split. `corruption` gives a mask flag per token
    /// and a `[1, dim]` replacement token; embeddings are still added at masked slots.
    pub fn encode(
        &self,
        t: &mut Tape,
        cfg: &EncoderConfig,
        grid: &PatchGrid,
        corruption: Option<(&[bool], Var)>,
    ) -> Result<Encoded> {
        let n = grid.tokens();
        if let Some(&c) = grid.channel_idx.iter().max() {
            if c >= cfg.max_channels {
                return Err(Error::Config(format!(
                    "{}: channel index {c} outside embedding table of {} rows",
                    cfg.modality, cfg.max_channels
                )));
            }
        }
        if let Some(&w) = grid.time_idx.iter().max() {
            if w >= cfg.max_time {
                return Err(Error::Config(format!(
                    "{}: time index {w} outside embedding table of {} rows",
                    cfg.modality, cfg.max_time
                )));
            }
        }
        let mut tokens = self.temporal_encode(t, cfg, grid)?;
        if let Some((mask, mask_token)) = corruption {
            if mask.len() != n {
                return Err(Error::shape(
                    "encode",
                    format!("mask covers {} tokens, grid has {n}", mask.len()),
                ));
            }
            tokens = replace_masked_rows(t, tokens, mask, mask_token)?;
        }
        let spatial = ops::gather_rows(t, self.spatial, &grid.channel_idx)?;
        let temporal = ops::gather_rows(t, self.temporal, &grid.time_idx)?;
        let mut x = ops::add(t, tokens, spatial)?;
        x = ops::add(t, x, temporal)?;
        for b in &self.blocks {
            x = b.apply(t, x)?;
        }
        let x = ops::rms_norm(t, x, self.final_norm)?;
        let (private, shared) = split_halves(t, x)?;
        Ok(Encoded { tokens: x, private, shared })
    }
}

/// Splits `[N, d]` tokens into the private first half and shared second half of columns.
pub fn split_halves(t: &mut Tape, tokens: Var) -> Result<(Var, Var)> {
    let d = t.shape(tokens)[1];
    let private = ops::narrow_cols(t, tokens, 0, d / 2)?;
    let shared = ops::narrow_cols(t, tokens, d / 2, d / 2)?;
    Ok((private, shared))
}

/// Replaces masked rows of `[N, d]` by a broadcast `[1, d]` replacement row.
fn replace_masked_rows(t: &mut Tape, tokens: Var, mask: &[bool], replacement: Var) -> Result<Var> {
    let shape = t.shape(tokens).to_vec();
    let (n, d) = (shape[0], shape[1]);
    let mut keep = Vec::with_capacity(n * d);
    let mut fill = Vec::with_capacity(n * d);
    for &m in mask {
        keep.extend(std::iter::repeat(if m { 0.0 } else { 1.0 }).take(d));
        fill.extend(std::iter::repeat(if m { 1.0 } else { 0.0 }).take(d));
    }
    let keep = t.constant_from(&[n, d], keep);
    let fill = t.constant_from(&[n, d], fill);
    let broadcast = ops::gather_rows(t, replacement, &vec![0; n])?;
    let kept = ops::mul(t, tokens, keep)?;
    let filled = ops::mul(t, broadcast, fill)?;
    ops::add(t, kept, filled)
}
