//! Stage-1 multimodal tokenizer: per-modality encoders feeding a shared and a private
//! codebook, temporal alignment onto a common one-second scale, cross-modal alignment
//! from EEG anchor codes, per-modality decoders, and the combined training loss.

use crate::encoder::{EncoderConfig, EncoderState, EncoderVars};
use crate::nn::{self, Block, BlockVars, Linear, LinearVars};
use crate::numerics::{ops, round_slice, Precision, Rng, Tape, Tensor, Var};
use crate::sigproc::{self, ModalityLayout, PatchGrid};
use crate::{Error, Modality, Result};

/// Desk-scale codebook defaults.
pub const DESK_CODEBOOK_SIZE: usize = 128;
pub const DESK_CODE_DIM: usize = 16;

#[derive(Clone, Debug)]
pub struct TokenizerConfig {
    /// Modalities in canonical order; EEG first when present.
    pub modalities: Vec<Modality>,
    /// Codes per codebook (K).
    pub codebook_size: usize,
    /// Code width (D).
    pub code_dim: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub ema_decay: f64,
    /// Laplace smoothing for EMA cluster sizes.
    pub ema_eps: f64,
    /// Epochs a code may stay unassigned before revival.
    pub revive_after: u32,
    /// Weight of the cross-modal reconstruction loss.
    pub alpha_cross: f64,
    /// Weight of the disentanglement loss.
    pub alpha_disentangle: f64,
    pub use_shared_codebook: bool,
    pub use_cross_modal: bool,
    pub use_disentangle: bool,
}

impl TokenizerConfig {
    pub fn desk(modalities: Vec<Modality>) -> TokenizerConfig {
        TokenizerConfig {
            modalities,
            codebook_size: DESK_CODEBOOK_SIZE,
            code_dim: DESK_CODE_DIM,
            decoder_layers: 3,
            decoder_heads: 4,
            ema_decay: 0.99,
            ema_eps: 1e-5,
            revive_after: 2,
            alpha_cross: 1.0,
            alpha_disentangle: 0.1,
            use_shared_codebook: true,
            use_cross_modal: true,
            use_disentangle: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Config("tokenizer needs at least one modality".into()));
        }
        let mut seen = Vec::new();
        for &m in &self.modalities {
            if seen.contains(&m) {
                return Err(Error::Config(format!("modality {m} listed twice")));
            }
            seen.push(m);
        }
        if self.use_cross_modal && !self.modalities.contains(&Modality::Eeg) {
            return Err(Error::Config("cross-modal alignment needs the EEG anchor".into()));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook needs at least 2 codes".into()));
        }
        if self.code_dim == 0 {
            return Err(Error::Config("code width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("EMA decay {} outside [0,1)", self.ema_decay)));
        }
        if self.alpha_cross < 0.0 || self.alpha_disentangle < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Patches of modality j covering one patch of the anchor scale: the ratio of patch
/// durations. Errors unless the ratio is a positive whole number.
pub fn alignment_factor(
    rate_j: u32,
    patch_j: usize,
    rate_anchor: u32,
    patch_anchor: usize,
) -> Result<usize> {
    if rate_j == 0 || rate_anchor == 0 || patch_j == 0 || patch_anchor == 0 {
        return Err(Error::InvalidParameter("alignment factor needs positive rates and patch lengths".into()));
    }
    let num = rate_j as u64 * patch_anchor as u64;
    let den = rate_anchor as u64 * patch_j as u64;
    if num % den != 0 {
        return Err(Error::InvalidParameter(format!(
            "patch duration ratio {num}/{den} is not a whole number of patches"
        )));
    }
    Ok((num / den) as usize)
}

/// One codebook: unit-norm code rows updated by EMA cluster statistics instead of
/// gradient descent, with dead-code revival from recent embeddings.
pub struct Codebook {
    codes: Tensor,
    ema_size: Vec<f64>,
    ema_sum: Vec<f64>,
    unused_epochs: Vec<u32>,
    epoch_hits: Vec<u64>,
    decay: f64,
    eps: f64,
}

/// Quantization of one embedding matrix.
pub struct Quantized {
    /// Straight-through codes: code values forward, identity gradient to the embeddings.
    pub st: Var,
    /// The l2-normalized embeddings (commitment-loss side).
    pub normalized: Var,
    /// Selected code rows as constants (commitment-loss target).
    pub codes: Var,
    pub indices: Vec<usize>,
}

impl Codebook {
    pub fn init(k: usize, d: usize, decay: f64, eps: f64, rng: &mut Rng) -> Codebook {
        let mut codes = Vec::with_capacity(k * d);
        for _ in 0..k {
            let row: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            codes.extend(row.iter().map(|v| v / norm));
        }
        let mut cb = Codebook {
            codes: Tensor::new(&[k, d], codes.clone()).expect("codebook shape"),
            ema_size: vec![1.0; k],
            ema_sum: codes,
            unused_epochs: vec![0; k],
            epoch_hits: vec![0; k],
            decay,
            eps,
        };
        cb.round_state();
        cb
    }

    /// Keeps codes and EMA accumulators f32-representable at every step, so the
    /// f32 checkpoint encoding restores them exactly and resumed runs match.
    fn round_state(&mut self) {
        round_slice(Precision::F32, self.codes.data_mut());
        round_slice(Precision::F32, &mut self.ema_size);
        round_slice(Precision::F32, &mut self.ema_sum);
    }

    pub fn size(&self) -> usize {
        self.codes.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.codes.shape()[1]
    }

    pub fn codes(&self) -> &Tensor {
        &self.codes
    }

    /// Index of the nearest code by Euclidean distance; lowest index wins ties.
    /// On unit vectors this equals the cosine argmax.
    pub fn nearest(&self, v: &[f64]) -> usize {
        let d = self.dim();
        let data = self.codes.data();
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for k in 0..self.size() {
            let row = &data[k * d..(k + 1) * d];
            let dist: f64 = row.iter().zip(v).map(|(c, x)| (c - x) * (c - x)).sum();
            if dist < best_dist {
                best_dist = dist;
                best = k;
            }
        }
        best
    }

    /// Nearest-code index for every row of a flattened `[n, d]` embedding matrix.
    pub fn assign(&self, rows: &[f64]) -> Vec<usize> {
        let d = self.dim();
        rows.chunks_exact(d).map(|r| self.nearest(r)).collect()
    }

    /// Quantizes `[n, d]` embeddings: l2-normalize, nearest-code lookup, straight-through.
    pub fn quantize(&self, t: &mut Tape, emb: Var) -> Result<Quantized> {
        let shape = t.shape(emb).to_vec();
        if shape.len() != 2 || shape[1] != self.dim() {
            return Err(Error::shape(
                "quantize",
                format!("embeddings {shape:?} vs code width {}", self.dim()),
            ));
        }
        let normalized = ops::l2_normalize(t, emb)?;
        let indices = self.assign(t.value(normalized));
        let table = t.constant(&self.codes);
        let codes = ops::gather_rows(t, table, &indices)?;
        let st = ops::straight_through(t, normalized, codes)?;
        Ok(Quantized { st, normalized, codes, indices })
    }

    /// One EMA update from a batch of normalized embedding rows and their assignments.
    pub fn ema_update(&mut self, rows: &[f64], indices: &[usize]) {
        let (k, d) = (self.size(), self.dim());
        debug_assert_eq!(rows.len(), indices.len() * d);
        let mut count = vec![0.0; k];
        let mut sum = vec![0.0; k * d];
        for (i, &code) in indices.iter().enumerate() {
            count[code] += 1.0;
            for j in 0..d {
                sum[code * d + j] += rows[i * d + j];
            }
            self.epoch_hits[code] += 1;
        }
        let lambda = self.decay;
        for c in 0..k {
            self.ema_size[c] = lambda * self.ema_size[c] + (1.0 - lambda) * count[c];
            for j in 0..d {
                self.ema_sum[c * d + j] =
                    lambda * self.ema_sum[c * d + j] + (1.0 - lambda) * sum[c * d + j];
            }
        }
        let total: f64 = self.ema_size.iter().sum();
        let data = self.codes.data_mut();
        for c in 0..k {
            let smoothed = (self.ema_size[c] + self.eps) / (total + k as f64 * self.eps) * total;
            let row = &self.ema_sum[c * d..(c + 1) * d];
            let norm = row.iter().map(|v| (v / smoothed) * (v / smoothed)).sum::<f64>().sqrt();
            if norm < 1e-12 {
                continue;
            }
            let scale = 1.0 / (norm * smoothed);
            for j in 0..d {
                data[c * d + j] = row[j] * scale;
            }
        }
        self.round_state();
    }

    /// Assignment perplexity over the epoch so far: exp of the histogram entropy.
    pub fn epoch_perplexity(&self) -> f64 {
        perplexity(&self.epoch_hits)
    }

    /// Closes an epoch: ages unassigned codes, revives codes dead for `revive_after`
    /// epochs from random rows of `pool` (normalized embeddings), resets the histogram.
    pub fn end_epoch(&mut self, revive_after: u32, pool: &[f64], rng: &mut Rng) -> usize {
        let (k, d) = (self.size(), self.dim());
        let pool_rows = pool.len() / d.max(1);
        let mut revived = 0;
        for c in 0..k {
            if self.epoch_hits[c] > 0 {
                self.unused_epochs[c] = 0;
                continue;
            }
            self.unused_epochs[c] += 1;
            if self.unused_epochs[c] >= revive_after && pool_rows > 0 {
                let pick = rng.below(pool_rows);
                let row = &pool[pick * d..(pick + 1) * d];
                self.codes.data_mut()[c * d..(c + 1) * d].copy_from_slice(row);
                self.ema_sum[c * d..(c + 1) * d].copy_from_slice(row);
                self.ema_size[c] = 1.0;
                self.unused_epochs[c] = 0;
                revived += 1;
            }
        }
        self.epoch_hits.fill(0);
        if revived > 0 {
            self.round_state();
        }
        revived
    }

    /// Codebook state as named tensors for checkpointing.
    pub fn state_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let (k, d) = (self.size(), self.dim());
        vec![
            (format!("{prefix}.codes"), self.codes.clone()),
            (
                format!("{prefix}.ema_n"),
                Tensor::new(&[k], self.ema_size.clone()).expect("ema_n shape"),
            ),
            (
                format!("{prefix}.ema_m"),
                Tensor::new(&[k, d], self.ema_sum.clone()).expect("ema_m shape"),
            ),
            (
                format!("{prefix}.unused"),
                Tensor::new(&[k], self.unused_epochs.iter().map(|&u| u as f64).collect())
                    .expect("unused shape"),
            ),
        ]
    }

    pub fn load_state(&mut self, prefix: &str, find: &dyn Fn(&str) -> Option<Tensor>) -> Result<()> {
        let (k, d) = (self.size(), self.dim());
        let get = |suffix: &str| {
            find(&format!("{prefix}.{suffix}"))
                .ok_or_else(|| Error::Format(format!("checkpoint missing {prefix}.{suffix}")))
        };
        let codes = get("codes")?;
        if codes.shape() != [k, d] {
            return Err(Error::Format(format!(
                "{prefix}.codes has shape {:?}, expected [{k}, {d}]",
                codes.shape()
            )));
        }
        self.codes = codes;
        self.ema_size = get("ema_n")?.data().to_vec();
        self.ema_sum = get("ema_m")?.data().to_vec();
        self.unused_epochs = get("unused")?.data().iter().map(|&v| v as u32).collect();
        if self.ema_size.len() != k || self.ema_sum.len() != k * d || self.unused_epochs.len() != k {
            return Err(Error::Format(format!("{prefix} EMA state sizes do not match [{k}, {d}]")));
        }
        Ok(())
    }
}

/// Exponential of the entropy of an assignment histogram.
pub fn perplexity(hist: &[u64]) -> f64 {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let mut entropy = 0.0;
    for &h in hist {
        if h > 0 {
            let p = h as f64 / total as f64;
            entropy -= p * p.ln();
        }
    }
    entropy.exp()
}

/// Temporal alignment: one learned query cross-attends each run of `f` consecutive
/// tokens of a channel, producing one code-width output per run.
pub struct TemporalAlign {
    pub q: Tensor,
    pub wk: Linear,
    pub wv: Linear,
}

pub struct TemporalAlignVars {
    q: Var,
    wk: LinearVars,
    wv: LinearVars,
}

impl TemporalAlign {
    pub fn init(input_dim: usize, code_dim: usize, rng: &mut Rng) -> TemporalAlign {
        TemporalAlign {
            q: nn::init_weight(&[1, code_dim], rng),
            wk: Linear::init(input_dim, code_dim, false, rng),
            wv: Linear::init(input_dim, code_dim, false, rng),
        }
    }

    pub fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.q"), &self.q));
        self.wk.params(&format!("{prefix}.wk"), out);
        self.wv.params(&format!("{prefix}.wv"), out);
    }

    pub fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.q"), &mut self.q));
        self.wk.params_mut(&format!("{prefix}.wk"), out);
        self.wv.params_mut(&format!("{prefix}.wv"), out);
    }

    pub fn lease(&self, t: &mut Tape, trainable: bool) -> TemporalAlignVars {
        TemporalAlignVars {
            q: t.lease(&self.q, trainable),
            wk: self.wk.lease(t, trainable),
            wv: self.wv.lease(t, trainable),
        }
    }
}

impl TemporalAlignVars {
    pub fn vars(&self, out: &mut Vec<Var>) {
        out.push(self.q);
        self.wk.vars(out);
        self.wv.vars(out);
    }

    /// `z: [N, input_dim]` in channel-major order with `N % f == 0` -> `[N/f, code_dim]`.
    pub fn apply(&self, t: &mut Tape, z: Var, f: usize) -> Result<Var> {
        let n = t.shape(z)[0];
        if f == 0 || n % f != 0 {
            return Err(Error::shape(
                "temporal_align",
                format!("{n} tokens not divisible into runs of {f}"),
            ));
        }
        let keys = self.wk.apply(t, z)?;
        let values = self.wv.apply(t, z)?;
        let mut out = Vec::with_capacity(n / f);
        for g in 0..n / f {
            let k = ops::narrow_rows(t, keys, g * f, f)?;
            let v = ops::narrow_rows(t, values, g * f, f)?;
            out.push(ops::sdpa(t, self.q, k, v)?);
        }
        ops::concat_rows(t, &out)
    }
}

/// Cross-modal alignment: a learned `[f, D]` query bank cross-attends one anchor code
/// per window, expanding it to the f fine-scale shared slots of that window.
pub struct CrossModalAlign {
    pub q: Tensor,
    pub wk: Linear,
    pub wv: Linear,
}

pub struct CrossModalAlignVars {
    q: Var,
    wk: LinearVars,
    wv: LinearVars,
}

impl CrossModalAlign {
    pub fn init(factor: usize, code_dim: usize, rng: &mut Rng) -> CrossModalAlign {
        CrossModalAlign {
            q: nn::init_weight(&[factor, code_dim], rng),
            wk: Linear::init(code_dim, code_dim, false, rng),
            wv: Linear::init(code_dim, code_dim, false, rng),
        }
    }

    pub fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.q"), &self.q));
        self.wk.params(&format!("{prefix}.wk"), out);
        self.wv.params(&format!("{prefix}.wv"), out);
    }

    pub fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.q"), &mut self.q));
        self.wk.params_mut(&format!("{prefix}.wk"), out);
        self.wv.params_mut(&format!("{prefix}.wv"), out);
    }

    pub fn lease(&self, t: &mut Tape, trainable: bool) -> CrossModalAlignVars {
        CrossModalAlignVars {
            q: t.lease(&self.q, trainable),
            wk: self.wk.lease(t, trainable),
            wv: self.wv.lease(t, trainable),
        }
    }
}

impl CrossModalAlignVars {
    pub fn vars(&self, out: &mut Vec<Var>) {
        out.push(self.q);
        self.wk.vars(out);
        self.wv.vars(out);
    }

    /// `anchor: [W, D]` (one code per window) -> `[W*f, D]`.
    pub fn apply(&self, t: &mut Tape, anchor: Var) -> Result<Var> {
        let w = t.shape(anchor)[0];
        let keys = self.wk.apply(t, anchor)?;
        let values = self.wv.apply(t, anchor)?;
        let mut out = Vec::with_capacity(w);
        for i in 0..w {
            let k = ops::narrow_rows(t, keys, i, 1)?;
            let v = ops::narrow_rows(t, values, i, 1)?;
            out.push(ops::sdpa(t, self.q, k, v)?);
        }
        ops::concat_rows(t, &out)
    }
}

/// Per-modality decoder: code pairs to reconstruction targets.
pub struct Decoder {
    pub input: Linear,
    pub blocks: Vec<Block>,
    pub final_norm: Tensor,
    pub head: Linear,
}

pub struct DecoderVars {
    input: LinearVars,
    blocks: Vec<BlockVars>,
    final_norm: Var,
    head: LinearVars,
}

impl Decoder {
    pub fn init(
        code_dim: usize,
        hidden: usize,
        layers: usize,
        heads: usize,
        width: usize,
        rng: &mut Rng,
    ) -> Result<Decoder> {
        Ok(Decoder {
            input: Linear::init(2 * code_dim, hidden, true, rng),
            blocks: (0..layers)
                .map(|_| Block::init(hidden, heads, 4 * hidden, rng))
                .collect::<Result<Vec<_>>>()?,
            final_norm: nn::init_ones(&[hidden]),
            head: Linear::init(hidden, width, true, rng),
        })
    }

    pub fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.input.params(&format!("{prefix}.input"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.params(&format!("{prefix}.block{i}"), out);
        }
        out.push((format!("{prefix}.final_norm"), &self.final_norm));
        self.head.params(&format!("{prefix}.head"), out);
    }

    pub fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.input.params_mut(&format!("{prefix}.input"), out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.params_mut(&format!("{prefix}.block{i}"), out);
        }
        out.push((format!("{prefix}.final_norm"), &mut self.final_norm));
        self.head.params_mut(&format!("{prefix}.head"), out);
    }

    pub fn lease(&self, t: &mut Tape, trainable: bool) -> DecoderVars {
        DecoderVars {
            input: self.input.lease(t, trainable),
            blocks: self.blocks.iter().map(|b| b.lease(t, trainable)).collect(),
            final_norm: t.lease(&self.final_norm, trainable),
            head: self.head.lease(t, trainable),
        }
    }
}

impl DecoderVars {
    pub fn vars(&self, out: &mut Vec<Var>) {
        self.input.vars(out);
        for b in &self.blocks {
            b.vars(out);
        }
        out.push(self.final_norm);
        self.head.vars(out);
    }

    /// `pairs: [N, 2D]` -> `[N, width]`.
    pub fn apply(&self, t: &mut Tape, pairs: Var) -> Result<Var> {
        let mut x = self.input.apply(t, pairs)?;
        for b in &self.blocks {
            x = b.apply(t, x)?;
        }
        let x = ops::rms_norm(t, x, self.final_norm)?;
        self.head.apply(t, x)
    }
}

/// The full stage-1 model.
pub struct TokenizerModel {
    pub cfg: TokenizerConfig,
    pub enc_cfgs: Vec<EncoderConfig>,
    pub layouts: Vec<ModalityLayout>,
    pub factors: Vec<usize>,
    pub encoders: Vec<EncoderState>,
    pub priv_proj: Vec<Linear>,
    pub ta: Vec<TemporalAlign>,
    pub shared_proj: Vec<Linear>,
    pub cma: Vec<Option<CrossModalAlign>>,
    pub decoders: Vec<Decoder>,
    pub shared_cb: Codebook,
    pub private_cbs: Vec<Codebook>,
}

pub struct TokenizerVars {
    pub encoders: Vec<EncoderVars>,
    pub priv_proj: Vec<LinearVars>,
    pub ta: Vec<TemporalAlignVars>,
    pub shared_proj: Vec<LinearVars>,
    pub cma: Vec<Option<CrossModalAlignVars>>,
    pub decoders: Vec<DecoderVars>,
}

impl TokenizerModel {
    /// Builds the model. `enc_cfgs` and `layouts` must align with `cfg.modalities`;
    /// the anchor scale is EEG's (or the first modality's when EEG is absent).
    pub fn init(
        cfg: TokenizerConfig,
        enc_cfgs: Vec<EncoderConfig>,
        layouts: Vec<ModalityLayout>,
        seed_rng: &mut Rng,
    ) -> Result<TokenizerModel> {
        cfg.validate()?;
        if enc_cfgs.len() != cfg.modalities.len() || layouts.len() != cfg.modalities.len() {
            return Err(Error::Config("modality lists of config, encoders, layouts differ".into()));
        }
        for ((m, e), l) in cfg.modalities.iter().zip(&enc_cfgs).zip(&layouts) {
            if e.modality != *m || l.spec.modality != *m {
                return Err(Error::Config(format!("modality order mismatch at {m}")));
            }
            if e.patch_len != l.spec.patch_len {
                return Err(Error::Config(format!("{m}: encoder and layout patch lengths differ")));
            }
        }
        let anchor = cfg
            .modalities
            .iter()
            .position(|&m| m == Modality::Eeg)
            .unwrap_or(0);
        let aspec = &layouts[anchor].spec;
        let mut factors = Vec::with_capacity(layouts.len());
        for l in &layouts {
            factors.push(alignment_factor(
                l.spec.target_rate,
                l.spec.patch_len,
                aspec.target_rate,
                aspec.patch_len,
            )?);
        }
        for (l, &f) in layouts.iter().zip(&factors) {
            if l.patches_per_channel % f != 0 {
                return Err(Error::Config(format!(
                    "{}: {} patches per channel not divisible by alignment factor {f}",
                    l.spec.modality, l.patches_per_channel
                )));
            }
        }
        let mut rng = seed_rng.substream("tokenizer_init");
        let mut encoders = Vec::new();
        let mut priv_proj = Vec::new();
        let mut ta = Vec::new();
        let mut shared_proj = Vec::new();
        let mut cma = Vec::new();
        let mut decoders = Vec::new();
        let mut private_cbs = Vec::new();
        for (i, &m) in cfg.modalities.iter().enumerate() {
            let d = enc_cfgs[i].dim;
            encoders.push(EncoderState::init(enc_cfgs[i].clone(), &mut rng)?);
            priv_proj.push(Linear::init(d / 2, cfg.code_dim, true, &mut rng));
            ta.push(TemporalAlign::init(d / 2, cfg.code_dim, &mut rng));
            shared_proj.push(Linear::init(cfg.code_dim, cfg.code_dim, true, &mut rng));
            cma.push(if m != Modality::Eeg && cfg.use_cross_modal {
                Some(CrossModalAlign::init(factors[i], cfg.code_dim, &mut rng))
            } else {
                None
            });
            decoders.push(Decoder::init(
                cfg.code_dim,
                d,
                cfg.decoder_layers,
                cfg.decoder_heads,
                sigproc::target_width(m, enc_cfgs[i].patch_len),
                &mut rng,
            )?);
            private_cbs.push(Codebook::init(
                cfg.codebook_size,
                cfg.code_dim,
                cfg.ema_decay,
                cfg.ema_eps,
                &mut rng,
            ));
        }
        let shared_cb = Codebook::init(cfg.codebook_size, cfg.code_dim, cfg.ema_decay, cfg.ema_eps, &mut rng);
        Ok(TokenizerModel {
            cfg,
            enc_cfgs,
            layouts,
            factors,
            encoders,
            priv_proj,
            ta,
            shared_proj,
            cma,
            decoders,
            shared_cb,
            private_cbs,
        })
    }

    pub fn modality_index(&self, m: Modality) -> Option<usize> {
        self.cfg.modalities.iter().position(|&x| x == m)
    }

    pub fn params<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, &m) in self.cfg.modalities.iter().enumerate() {
            let p = m.name();
            self.encoders[i].params(&format!("tok.enc.{p}"), out);
            self.priv_proj[i].params(&format!("tok.priv_proj.{p}"), out);
            self.ta[i].params(&format!("tok.ta.{p}"), out);
            self.shared_proj[i].params(&format!("tok.shared_proj.{p}"), out);
            if let Some(c) = &self.cma[i] {
                c.params(&format!("tok.cma.{p}"), out);
            }
            self.decoders[i].params(&format!("tok.dec.{p}"), out);
        }
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        let modalities = self.cfg.modalities.clone();
        let mut encoders = self.encoders.iter_mut();
        let mut priv_proj = self.priv_proj.iter_mut();
        let mut ta = self.ta.iter_mut();
        let mut shared_proj = self.shared_proj.iter_mut();
        let mut cma = self.cma.iter_mut();
        let mut decoders = self.decoders.iter_mut();
        for &m in &modalities {
            let p = m.name();
            encoders.next().expect("encoder per modality").params_mut(&format!("tok.enc.{p}"), out);
            priv_proj.next().expect("proj per modality").params_mut(&format!("tok.priv_proj.{p}"), out);
            ta.next().expect("ta per modality").params_mut(&format!("tok.ta.{p}"), out);
            shared_proj
                .next()
                .expect("shared proj per modality")
                .params_mut(&format!("tok.shared_proj.{p}"), out);
            if let Some(c) = cma.next().expect("cma slot per modality") {
                c.params_mut(&format!("tok.cma.{p}"), out);
            }
            decoders.next().expect("decoder per modality").params_mut(&format!("tok.dec.{p}"), out);
        }
    }

    pub fn codebook_state(&self) -> Vec<(String, Tensor)> {
        let mut out = self.shared_cb.state_tensors("tok.codebook.shared");
        for (i, &m) in self.cfg.modalities.iter().enumerate() {
            out.extend(self.private_cbs[i].state_tensors(&format!("tok.codebook.{}", m.name())));
        }
        out
    }

    pub fn load_codebook_state(&mut self, find: &dyn Fn(&str) -> Option<Tensor>) -> Result<()> {
        self.shared_cb.load_state("tok.codebook.shared", find)?;
        for (i, m) in self.cfg.modalities.clone().iter().enumerate() {
            self.private_cbs[i].load_state(&format!("tok.codebook.{}", m.name()), find)?;
        }
        Ok(())
    }

    /// Every persistent tensor: trainable parameters plus codebook state.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut refs: Vec<(String, &Tensor)> = Vec::new();
        self.params(&mut refs);
        let mut out: Vec<(String, Tensor)> =
            refs.into_iter().map(|(n, t)| (n, t.clone())).collect();
        out.extend(self.codebook_state());
        out
    }

    /// Restores everything written by [`TokenizerModel::state_tensors`].
    pub fn load_state(&mut self, find: &dyn Fn(&str) -> Option<Tensor>) -> Result<()> {
        let mut slots: Vec<(String, &mut Tensor)> = Vec::new();
        self.params_mut(&mut slots);
        nn::load_named(&mut slots, find)?;
        self.load_codebook_state(find)
    }

    pub fn lease(&self, t: &mut Tape, trainable: bool) -> TokenizerVars {
        TokenizerVars {
            encoders: self.encoders.iter().map(|e| e.lease(t, trainable)).collect(),
            priv_proj: self.priv_proj.iter().map(|p| p.lease(t, trainable)).collect(),
            ta: self.ta.iter().map(|a| a.lease(t, trainable)).collect(),
            shared_proj: self.shared_proj.iter().map(|p| p.lease(t, trainable)).collect(),
            cma: self
                .cma
                .iter()
                .map(|c| c.as_ref().map(|c| c.lease(t, trainable)))
                .collect(),
            decoders: self.decoders.iter().map(|d| d.lease(t, trainable)).collect(),
        }
    }
}

impl TokenizerVars {
    pub fn vars(&self, model: &TokenizerModel, out: &mut Vec<Var>) {
        for i in 0..model.cfg.modalities.len() {
            self.encoders[i].vars(out);
            self.priv_proj[i].vars(out);
            self.ta[i].vars(out);
            self.shared_proj[i].vars(out);
            if let Some(c) = &self.cma[i] {
                c.vars(out);
            }
            self.decoders[i].vars(out);
        }
    }
}

/// One sample's inputs for the tokenizer: per-modality patch grids and flattened
/// reconstruction targets (`tokens x target_width`, row-major), aligned with the
/// model's modality order.
pub struct TokenizerItem<'a> {
    pub grids: &'a [PatchGrid],
    pub targets: &'a [Vec<f64>],
}

/// Per-modality quantization record from one forward pass, used for EMA updates.
pub struct AssignmentRecord {
    pub modality: Modality,
    pub private_indices: Vec<usize>,
    pub private_rows: Vec<f64>,
    pub shared_indices: Vec<usize>,
    pub shared_rows: Vec<f64>,
}

/// Scalar loss terms of one forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub total: f64,
    pub codebook: f64,
    pub cross: f64,
    pub disentangle: f64,
}

/// Everything one tokenizer forward pass produces.
pub struct TokenizerForward {
    pub loss: Var,
    pub terms: LossTerms,
    pub assignments: Vec<AssignmentRecord>,
}

/// Window-averaged anchor codes: `[G, D]` EEG shared codes in channel-major group
/// order -> `[W, D]` means over channels, one row per window.
fn average_windows(t: &mut Tape, codes: Var, channels: usize, windows: usize) -> Result<Var> {
    if channels == 1 {
        return Ok(codes);
    }
    let mut rows = Vec::with_capacity(windows);
    for w in 0..windows {
        let idx: Vec<usize> = (0..channels).map(|c| c * windows + w).collect();
        let picked = ops::gather_rows(t, codes, &idx)?;
        let mean = ops::mean_axis0(t, picked)?;
        let d = t.shape(mean)[0];
        rows.push(ops::reshape(t, mean, &[1, d])?);
    }
    ops::concat_rows(t, &rows)
}

/// Full stage-1 forward pass over one sample, producing the training loss.
///
/// `shuffle_windows` permutes the anchor window codes before cross-modal expansion;
/// training passes `None`, the shuffle-control probe passes a permutation.
pub fn forward(
    t: &mut Tape,
    model: &TokenizerModel,
    vars: &TokenizerVars,
    item: &TokenizerItem,
    shuffle_windows: Option<&[usize]>,
) -> Result<TokenizerForward> {
    let cfg = &model.cfg;
    let n_mod = cfg.modalities.len();
    if item.grids.len() != n_mod || item.targets.len() != n_mod {
        return Err(Error::shape(
            "tokenizer_forward",
            format!("sample has {} grids, model wants {n_mod}", item.grids.len()),
        ));
    }
    let mut assignments = Vec::with_capacity(n_mod);
    let mut codebook_terms: Vec<Var> = Vec::new();
    let mut cross_terms: Vec<Var> = Vec::new();
    let mut disentangle_terms: Vec<Var> = Vec::new();
    // Private straight-through codes and targets are kept for the cross pass.
    let mut priv_st: Vec<Var> = Vec::with_capacity(n_mod);
    let mut target_vars: Vec<Var> = Vec::with_capacity(n_mod);
    let mut anchor_windows: Option<Var> = None;
    let anchor_idx = model.modality_index(Modality::Eeg).unwrap_or(0);

    for (i, &m) in cfg.modalities.iter().enumerate() {
        let grid = &item.grids[i];
        let layout = &model.layouts[i];
        let f = model.factors[i];
        let width = sigproc::target_width(m, layout.spec.patch_len);
        let n = grid.tokens();
        if item.targets[i].len() != n * width {
            return Err(Error::shape(
                "tokenizer_forward",
                format!("{m}: target has {} values, expected {}", item.targets[i].len(), n * width),
            ));
        }
        let target = t.constant_from(&[n, width], item.targets[i].clone());
        target_vars.push(target);

        let enc = vars.encoders[i].encode(t, &model.enc_cfgs[i], grid, None)?;

        // Private path: project, quantize, keep straight-through codes.
        let p_emb = vars.priv_proj[i].apply(t, enc.private)?;
        let p_q = model.private_cbs[i].quantize(t, p_emb)?;
        let commit_p = ops::mse(t, p_q.normalized, p_q.codes)?;

        // Shared path: align runs of f tokens onto the anchor scale, project, quantize.
        let ta_out = vars.ta[i].apply(t, enc.shared, f)?;
        let s_emb = vars.shared_proj[i].apply(t, ta_out)?;
        let (shared_codes, commit_s, s_indices, s_rows) = if cfg.use_shared_codebook {
            let s_q = model.shared_cb.quantize(t, s_emb)?;
            let commit = ops::mse(t, s_q.normalized, s_q.codes)?;
            let rows = t.value(s_q.normalized).to_vec();
            (s_q.st, Some(commit), s_q.indices, rows)
        } else {
            (s_emb, None, Vec::new(), Vec::new())
        };

        // Duplicate each run's shared code back over its f tokens and reconstruct.
        let dup: Vec<usize> = (0..n).map(|tok| tok / f).collect();
        let shared_dup = ops::gather_rows(t, shared_codes, &dup)?;
        let pairs = ops::concat_cols(t, &[p_q.st, shared_dup])?;
        let decoded = vars.decoders[i].apply(t, pairs)?;
        let recon = ops::mse(t, decoded, target)?;

        let mut cb_term = ops::add(t, recon, commit_p)?;
        if let Some(c) = commit_s {
            cb_term = ops::add(t, cb_term, c)?;
        }
        codebook_terms.push(cb_term);

        if cfg.use_disentangle {
            let cos = ops::cosine_rows(t, enc.private, enc.shared)?;
            let sq = ops::mul(t, cos, cos)?;
            disentangle_terms.push(ops::mean_all(t, sq)?);
        }

        if i == anchor_idx && cfg.use_cross_modal {
            let windows = layout.patches_per_channel / f;
            anchor_windows = Some(average_windows(t, shared_codes, layout.channels, windows)?);
        }
        assignments.push(AssignmentRecord {
            modality: m,
            private_indices: p_q.indices,
            private_rows: t.value(p_q.normalized).to_vec(),
            shared_indices: s_indices,
            shared_rows: s_rows,
        });
        priv_st.push(p_q.st);
    }

    // Cross-modal pass: anchor window codes expanded into every other modality.
    if cfg.use_cross_modal {
        let mut anchor = anchor_windows.ok_or_else(|| {
            Error::shape("tokenizer_forward", "cross-modal pass without anchor codes")
        })?;
        if let Some(perm) = shuffle_windows {
            anchor = ops::gather_rows(t, anchor, perm)?;
        }
        for (i, &m) in cfg.modalities.iter().enumerate() {
            if m == Modality::Eeg {
                continue;
            }
            let Some(cma) = &vars.cma[i] else { continue };
            let layout = &model.layouts[i];
            let expanded = cma.apply(t, anchor)?;
            let ppc = layout.patches_per_channel;
            let n = item.grids[i].tokens();
            let tile: Vec<usize> = (0..n).map(|tok| tok % ppc).collect();
            let shared_fill = ops::gather_rows(t, expanded, &tile)?;
            let pairs = ops::concat_cols(t, &[priv_st[i], shared_fill])?;
            let decoded = vars.decoders[i].apply(t, pairs)?;
            let recon = ops::mse(t, decoded, target_vars[i])?;
            cross_terms.push(recon);
        }
    }

    let mut total = sum_vars(t, &codebook_terms)?;
    let codebook_val = t.item(total);
    let mut cross_val = 0.0;
    if !cross_terms.is_empty() {
        let cross = sum_vars(t, &cross_terms)?;
        cross_val = t.item(cross);
        let weighted = ops::mul_scalar(t, cross, cfg.alpha_cross)?;
        total = ops::add(t, total, weighted)?;
    }
    let mut disentangle_val = 0.0;
    if !disentangle_terms.is_empty() {
        let dis = sum_vars(t, &disentangle_terms)?;
        disentangle_val = t.item(dis);
        let weighted = ops::mul_scalar(t, dis, cfg.alpha_disentangle)?;
        total = ops::add(t, total, weighted)?;
    }
    let terms = LossTerms {
        total: t.item(total),
        codebook: codebook_val,
        cross: cross_val,
        disentangle: disentangle_val,
    };
    Ok(TokenizerForward { loss: total, terms, assignments })
}

fn sum_vars(t: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &v in &terms[1..] {
        acc = ops::add(t, acc, v)?;
    }
    Ok(acc)
}

/// Held-out cross-modal reconstruction error through the anchor-code path.
/// With `shuffle` the anchor window codes are permuted by a seeded non-identity
/// permutation per sample, giving the control error for the same inputs.
pub fn cross_modal_error(
    model: &TokenizerModel,
    items: &[TokenizerItem],
    shuffle: Option<&mut Rng>,
) -> Result<f64> {
    if !model.cfg.use_cross_modal {
        return Err(Error::Config("cross-modal path disabled".into()));
    }
    let anchor_idx = model.modality_index(Modality::Eeg).unwrap_or(0);
    let windows = model.layouts[anchor_idx].patches_per_channel / model.factors[anchor_idx];
    let mut rng = shuffle.map(|r| r.substream("window_shuffle"));
    let mut total = 0.0;
    let mut count = 0usize;
    for item in items {
        let perm = rng.as_mut().map(|r| non_identity_permutation(windows, r));
        let mut t = Tape::new();
        let vars = model.lease(&mut t, false);
        let fwd = forward(&mut t, model, &vars, item, perm.as_deref())?;
        total += fwd.terms.cross;
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidParameter("cross-modal probe needs at least one sample".into()));
    }
    Ok(total / count as f64)
}

/// Discrete token indices for one sample from a frozen tokenizer: per modality, the
/// private index of every token, and the shared index duplicated over each run of f
/// tokens. `shared` is `None` when the model was built without the shared codebook.
pub struct TokenIndices {
    pub private: Vec<usize>,
    pub shared: Option<Vec<usize>>,
}

/// Assigns codebook indices to every token of a sample without building loss graphs.
pub fn tokenize(model: &TokenizerModel, grids: &[PatchGrid]) -> Result<Vec<TokenIndices>> {
    if grids.len() != model.cfg.modalities.len() {
        return Err(Error::shape(
            "tokenize",
            format!("{} grids for {} modalities", grids.len(), model.cfg.modalities.len()),
        ));
    }
    let mut t = Tape::new();
    let vars = model.lease(&mut t, false);
    let mut out = Vec::with_capacity(grids.len());
    for i in 0..grids.len() {
        let f = model.factors[i];
        let n = grids[i].tokens();
        let enc = vars.encoders[i].encode(&mut t, &model.enc_cfgs[i], &grids[i], None)?;
        let p_emb = vars.priv_proj[i].apply(&mut t, enc.private)?;
        let p_norm = ops::l2_normalize(&mut t, p_emb)?;
        let private = model.private_cbs[i].assign(t.value(p_norm));
        let shared = if model.cfg.use_shared_codebook {
            let ta_out = vars.ta[i].apply(&mut t, enc.shared, f)?;
            let s_emb = vars.shared_proj[i].apply(&mut t, ta_out)?;
            let s_norm = ops::l2_normalize(&mut t, s_emb)?;
            let runs = model.shared_cb.assign(t.value(s_norm));
            Some((0..n).map(|tok| runs[tok / f]).collect())
        } else {
            None
        };
        out.push(TokenIndices { private, shared });
    }
    Ok(out)
}

/// Training settings for the stage-1 loop.
#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip: Option<f64>,
}

/// Scalars reported after each tokenizer epoch.
#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub codebook: f64,
    pub cross: f64,
    pub disentangle: f64,
    pub shared_perplexity: f64,
    pub private_perplexity: Vec<f64>,
    pub revived: usize,
    pub lr: f64,
}

/// Merges per-sample gradients into a batch mean. `None` survives only when no sample
/// touched the parameter, keeping ablated subgraphs exactly absent.
pub fn accumulate_grads(acc: &mut Vec<Option<Vec<f64>>>, sample: Vec<Option<Vec<f64>>>) {
    if acc.is_empty() {
        *acc = sample;
        return;
    }
    debug_assert_eq!(acc.len(), sample.len());
    for (a, s) in acc.iter_mut().zip(sample) {
        match (a.as_mut(), s) {
            (Some(a), Some(s)) => {
                for (x, y) in a.iter_mut().zip(s) {
                    *x += y;
                }
            }
            (None, Some(s)) => *a = Some(s),
            _ => {}
        }
    }
}

/// Scales every present gradient by `1 / n`.
pub fn scale_grads(grads: &mut [Option<Vec<f64>>], n: usize) {
    let inv = 1.0 / n as f64;
    for g in grads.iter_mut().flatten() {
        for v in g.iter_mut() {
            *v *= inv;
        }
    }
}

/// One optimizer step over a batch of samples. Returns the mean loss terms and the
/// learning rate used. EMA codebook updates fold the whole batch's assignments.
pub fn train_step(
    model: &mut TokenizerModel,
    opt: &mut crate::numerics::AdamW,
    batch: &[TokenizerItem],
    settings: &TrainSettings,
    pools: &mut RevivalPools,
) -> Result<(LossTerms, f64)> {
    let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
    let mut terms = LossTerms::default();
    let mut shared_rows: Vec<f64> = Vec::new();
    let mut shared_indices: Vec<usize> = Vec::new();
    let mut private_rows: Vec<Vec<f64>> = vec![Vec::new(); model.cfg.modalities.len()];
    let mut private_indices: Vec<Vec<usize>> = vec![Vec::new(); model.cfg.modalities.len()];
    for item in batch {
        let mut t = Tape::new();
        let vars = model.lease(&mut t, true);
        let fwd = forward(&mut t, model, &vars, item, None)?;
        if !fwd.terms.total.is_finite() {
            return Err(Error::NonFinite("tokenizer loss".into()));
        }
        terms.total += fwd.terms.total;
        terms.codebook += fwd.terms.codebook;
        terms.cross += fwd.terms.cross;
        terms.disentangle += fwd.terms.disentangle;
        let mut order = Vec::new();
        vars.vars(model, &mut order);
        let mut g = t.backward(fwd.loss)?;
        accumulate_grads(&mut grads, nn::take_grads(&mut g, &order));
        for (i, rec) in fwd.assignments.iter().enumerate() {
            private_rows[i].extend_from_slice(&rec.private_rows);
            private_indices[i].extend_from_slice(&rec.private_indices);
            shared_rows.extend_from_slice(&rec.shared_rows);
            shared_indices.extend_from_slice(&rec.shared_indices);
        }
    }
    let n = batch.len();
    terms.total /= n as f64;
    terms.codebook /= n as f64;
    terms.cross /= n as f64;
    terms.disentangle /= n as f64;
    scale_grads(&mut grads, n);
    if let Some(max) = settings.grad_clip {
        crate::numerics::clip_grad_norm(&mut grads, max);
    }
    let mut params = Vec::new();
    model.params_mut(&mut params);
    let lr = opt.apply(&mut params, &grads)?;
    for i in 0..model.cfg.modalities.len() {
        if !private_indices[i].is_empty() {
            model.private_cbs[i].ema_update(&private_rows[i], &private_indices[i]);
            pools.private[i] = std::mem::take(&mut private_rows[i]);
        }
    }
    if !shared_indices.is_empty() {
        model.shared_cb.ema_update(&shared_rows, &shared_indices);
        pools.shared = shared_rows;
    }
    Ok((terms, lr))
}

/// Most recent batch's normalized embeddings, the donor pool for dead-code revival.
pub struct RevivalPools {
    pub shared: Vec<f64>,
    pub private: Vec<Vec<f64>>,
}

impl RevivalPools {
    pub fn new(modalities: usize) -> RevivalPools {
        RevivalPools { shared: Vec::new(), private: vec![Vec::new(); modalities] }
    }
}

/// Runs one epoch: shuffles sample order, steps over batches, then closes the epoch
/// on every codebook (perplexity readout, aging, revival).
pub fn train_epoch(
    model: &mut TokenizerModel,
    opt: &mut crate::numerics::AdamW,
    items: &[TokenizerItem],
    settings: &TrainSettings,
    epoch: usize,
    rng: &mut Rng,
) -> Result<EpochStats> {
    if items.is_empty() {
        return Err(Error::InvalidParameter("tokenizer training needs at least one sample".into()));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut shuffle_rng = rng.substream_idx(epoch as u64);
    shuffle_rng.shuffle(&mut order);
    let mut pools = RevivalPools::new(model.cfg.modalities.len());
    let mut sums = LossTerms::default();
    let mut batches = 0usize;
    let mut last_lr = 0.0;
    for chunk in order.chunks(settings.batch_size.max(1)) {
        let batch: Vec<TokenizerItem> = chunk
            .iter()
            .map(|&i| TokenizerItem { grids: items[i].grids, targets: items[i].targets })
            .collect();
        let (terms, lr) = train_step(model, opt, &batch, settings, &mut pools)?;
        sums.total += terms.total;
        sums.codebook += terms.codebook;
        sums.cross += terms.cross;
        sums.disentangle += terms.disentangle;
        last_lr = lr;
        batches += 1;
    }
    let shared_perplexity = model.shared_cb.epoch_perplexity();
    let private_perplexity: Vec<f64> =
        model.private_cbs.iter().map(Codebook::epoch_perplexity).collect();
    let mut revive_rng = shuffle_rng.substream("revival");
    let mut revived = 0;
    if model.cfg.use_shared_codebook {
        revived += model.shared_cb.end_epoch(model.cfg.revive_after, &pools.shared, &mut revive_rng);
    }
    for (i, cb) in model.private_cbs.iter_mut().enumerate() {
        revived += cb.end_epoch(model.cfg.revive_after, &pools.private[i], &mut revive_rng);
    }
    Ok(EpochStats {
        epoch,
        loss: sums.total / batches as f64,
        codebook: sums.codebook / batches as f64,
        cross: sums.cross / batches as f64,
        disentangle: sums.disentangle / batches as f64,
        shared_perplexity,
        private_perplexity,
        revived,
        lr: last_lr,
    })
}

/// Uniform random permutation of 0..n that moves at least one element (for n > 1).
pub fn non_identity_permutation(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    if n < 2 {
        return perm;
    }
    loop {
        rng.shuffle(&mut perm);
        if perm.iter().enumerate().any(|(i, &p)| p != i) {
            return perm;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Precision;
    use crate::sigproc::{patchify, recon_target, ModalitySpec};

    fn tiny_layouts() -> (TokenizerConfig, Vec<EncoderConfig>, Vec<ModalityLayout>) {
        let modalities = vec![Modality::Eeg, Modality::Ecg];
        let cfg = TokenizerConfig {
            codebook_size: 8,
            code_dim: 4,
            decoder_layers: 1,
            ..TokenizerConfig::desk(modalities.clone())
        };
        let layouts = vec![
            ModalityLayout {
                spec: ModalitySpec { patch_len: 20, target_rate: 20, ..ModalitySpec::standard(Modality::Eeg, 50.0) },
                channels: 2,
                patches_per_channel: 2,
            },
            ModalityLayout {
                spec: ModalitySpec { patch_len: 20, target_rate: 100, ..ModalitySpec::standard(Modality::Ecg, 50.0) },
                channels: 1,
                patches_per_channel: 10,
            },
        ];
        let enc_cfgs = vec![
            EncoderConfig {
                modality: Modality::Eeg,
                patch_len: 20,
                dim: 8,
                layers: 1,
                heads: 2,
                hidden: 16,
                max_channels: 2,
                max_time: 2,
            },
            EncoderConfig {
                modality: Modality::Ecg,
                patch_len: 20,
                dim: 8,
                layers: 1,
                heads: 2,
                hidden: 16,
                max_channels: 1,
                max_time: 10,
            },
        ];
        (cfg, enc_cfgs, layouts)
    }

    fn tiny_item(seed: u64) -> (Vec<PatchGrid>, Vec<Vec<f64>>) {
        let mut rng = Rng::seeded(seed);
        let eeg: Vec<Vec<f64>> =
            (0..2).map(|_| (0..40).map(|_| rng.normal()).collect()).collect();
        let ecg: Vec<Vec<f64>> =
            (0..1).map(|_| (0..200).map(|_| rng.normal()).collect()).collect();
        let g_eeg = patchify(&eeg, Modality::Eeg, 20).unwrap();
        let g_ecg = patchify(&ecg, Modality::Ecg, 20).unwrap();
        let t_eeg: Vec<f64> = (0..g_eeg.tokens())
            .flat_map(|i| recon_target(Modality::Eeg, g_eeg.patch(i)))
            .collect();
        let t_ecg: Vec<f64> = (0..g_ecg.tokens())
            .flat_map(|i| recon_target(Modality::Ecg, g_ecg.patch(i)))
            .collect();
        (vec![g_eeg, g_ecg], vec![t_eeg, t_ecg])
    }

    #[test]
    fn alignment_factors_match_patch_durations() {
        assert_eq!(alignment_factor(200, 200, 200, 200).unwrap(), 1);
        assert_eq!(alignment_factor(200, 100, 200, 200).unwrap(), 2);
        assert_eq!(alignment_factor(500, 100, 200, 200).unwrap(), 5);
        assert_eq!(alignment_factor(300, 100, 200, 200).unwrap(), 3);
        assert!(alignment_factor(300, 200, 200, 200).is_err(), "1.5 patches per window");
        assert!(alignment_factor(0, 100, 200, 200).is_err());
    }

    #[test]
    fn quantize_matches_exhaustive_search_and_is_scale_invariant() {
        let mut rng = Rng::seeded(17);
        let cb = Codebook::init(16, 6, 0.99, 1e-5, &mut rng);
        let mut t = Tape::with_precision(Precision::F64);
        let rows: Vec<f64> = (0..5 * 6).map(|_| rng.normal()).collect();
        let emb = t.constant_from(&[5, 6], rows.clone());
        let q = cb.quantize(&mut t, emb).unwrap();
        let scaled = t.constant_from(&[5, 6], rows.iter().map(|v| v * 3.7).collect());
        let q2 = cb.quantize(&mut t, scaled).unwrap();
        assert_eq!(q.indices, q2.indices, "positive scaling keeps assignments");
        // Idempotence: quantizing a code row returns that row's index.
        for k in [0usize, 7, 15] {
            let row = cb.codes().row(k).to_vec();
            let v = t.constant_from(&[1, 6], row);
            let qk = cb.quantize(&mut t, v).unwrap();
            assert_eq!(qk.indices, vec![k]);
        }
    }

    #[test]
    fn straight_through_codes_carry_code_values_and_embedding_gradients() {
        let mut rng = Rng::seeded(21);
        let cb = Codebook::init(4, 3, 0.99, 1e-5, &mut rng);
        let emb_t = Tensor::new(&[2, 3], vec![0.3, -0.8, 0.1, 0.9, 0.2, -0.4])
            .unwrap()
            .with_grad();
        let mut t = Tape::with_precision(Precision::F64);
        let emb = t.lease(&emb_t, true);
        let q = cb.quantize(&mut t, emb).unwrap();
        for (row, &idx) in q.indices.iter().enumerate() {
            let got = &t.value(q.st)[row * 3..(row + 1) * 3];
            assert_eq!(got, cb.codes().row(idx), "forward equals the selected code");
        }
        let loss = ops::mean_all(&mut t, q.st).unwrap();
        let grads = t.backward(loss).unwrap();
        assert!(grads.get(emb).is_some(), "straight-through reaches the embeddings");
    }

    #[test]
    fn ema_update_converges_to_a_stationary_cluster() {
        let mut rng = Rng::seeded(33);
        let mut cb = Codebook::init(4, 3, 0.99, 1e-5, &mut rng);
        // One tight cluster around a fixed unit vector.
        let center = {
            let v = [0.6, -0.64, 0.48];
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            [v[0] / n, v[1] / n, v[2] / n]
        };
        let target_code = cb.nearest(&center);
        for _ in 0..500 {
            let mut rows = Vec::new();
            let mut indices = Vec::new();
            for _ in 0..8 {
                let raw: Vec<f64> = center.iter().map(|c| c + 0.01 * rng.normal()).collect();
                let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
                let unit: Vec<f64> = raw.iter().map(|x| x / n).collect();
                indices.push(cb.nearest(&unit));
                rows.extend(unit);
            }
            cb.ema_update(&rows, &indices);
        }
        let code = cb.codes().row(target_code);
        let dist: f64 = code
            .iter()
            .zip(&center)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(dist < 1e-3, "code should sit on the cluster mean, distance {dist}");
    }

    #[test]
    fn dead_codes_revive_after_two_idle_epochs() {
        let mut rng = Rng::seeded(5);
        let mut cb = Codebook::init(4, 2, 0.9, 1e-5, &mut rng);
        let pool = vec![1.0, 0.0, 0.0, 1.0];
        let hit = |cb: &mut Codebook| {
            let rows = vec![1.0, 0.0];
            let idx = vec![cb.nearest(&[1.0, 0.0])];
            cb.ema_update(&rows, &idx);
        };
        hit(&mut cb);
        assert_eq!(cb.end_epoch(2, &pool, &mut rng), 0, "first idle epoch only ages codes");
        hit(&mut cb);
        let revived = cb.end_epoch(2, &pool, &mut rng);
        assert!(revived >= 2, "codes idle for 2 epochs are reset, got {revived}");
    }

    #[test]
    fn perplexity_of_uniform_and_collapsed_histograms() {
        assert!((perplexity(&[5, 5, 5, 5]) - 4.0).abs() < 1e-12);
        assert!((perplexity(&[10, 0, 0, 0]) - 1.0).abs() < 1e-12);
        assert_eq!(perplexity(&[0, 0]), 0.0);
    }

    #[test]
    fn temporal_alignment_counts_follow_the_factor_law() {
        let mut rng = Rng::seeded(3);
        for _ in 0..100 {
            let f = 1 + rng.below(6);
            let groups = 1 + rng.below(8);
            let n = f * groups;
            let d_half = 2 * (1 + rng.below(4));
            let ta = TemporalAlign::init(d_half, 4, &mut rng);
            let mut t = Tape::new();
            let vars = ta.lease(&mut t, false);
            let z = t.constant_from(&[n, d_half], (0..n * d_half).map(|i| (i as f64).sin()).collect());
            let out = vars.apply(&mut t, z, f).unwrap();
            assert_eq!(t.shape(out), &[groups, 4]);
        }
    }

    #[test]
    fn cross_modal_counts_follow_the_factor_law() {
        let mut rng = Rng::seeded(4);
        for _ in 0..100 {
            let f = 1 + rng.below(6);
            let windows = 1 + rng.below(8);
            let cma = CrossModalAlign::init(f, 4, &mut rng);
            let mut t = Tape::new();
            let vars = cma.lease(&mut t, false);
            let anchor =
                t.constant_from(&[windows, 4], (0..windows * 4).map(|i| (i as f64).cos()).collect());
            let out = vars.apply(&mut t, anchor).unwrap();
            assert_eq!(t.shape(out), &[windows * f, 4]);
        }
    }

    #[test]
    fn forward_produces_finite_loss_and_full_assignments() {
        let (cfg, enc_cfgs, layouts) = tiny_layouts();
        let mut rng = Rng::seeded(77);
        let model = TokenizerModel::init(cfg, enc_cfgs, layouts, &mut rng).unwrap();
        assert_eq!(model.factors, vec![1, 5]);
        let (grids, targets) = tiny_item(1);
        let mut t = Tape::new();
        let vars = model.lease(&mut t, true);
        let fwd = forward(
            &mut t,
            &model,
            &vars,
            &TokenizerItem { grids: &grids, targets: &targets },
            None,
        )
        .unwrap();
        assert!(fwd.terms.total.is_finite());
        assert!(fwd.terms.codebook > 0.0);
        assert!(fwd.terms.cross > 0.0, "ECG gets a cross-modal term");
        assert_eq!(fwd.assignments.len(), 2);
        assert_eq!(fwd.assignments[0].private_indices.len(), 4);
        assert_eq!(fwd.assignments[0].shared_indices.len(), 4, "EEG: one window code per token");
        assert_eq!(fwd.assignments[1].private_indices.len(), 10);
        assert_eq!(fwd.assignments[1].shared_indices.len(), 2, "ECG: 10 tokens / factor 5");
    }

    #[test]
    fn every_tokenizer_parameter_receives_gradient() {
        let (cfg, enc_cfgs, layouts) = tiny_layouts();
        let mut rng = Rng::seeded(78);
        let model = TokenizerModel::init(cfg, enc_cfgs, layouts, &mut rng).unwrap();
        let (grids, targets) = tiny_item(2);
        let mut t = Tape::new();
        let vars = model.lease(&mut t, true);
        let fwd = forward(
            &mut t,
            &model,
            &vars,
            &TokenizerItem { grids: &grids, targets: &targets },
            None,
        )
        .unwrap();
        let mut grads = t.backward(fwd.loss).unwrap();
        let mut names = Vec::new();
        model.params(&mut names);
        let mut order = Vec::new();
        vars.vars(&model, &mut order);
        assert_eq!(names.len(), order.len());
        let g = nn::take_grads(&mut grads, &order);
        // Attention over a single key has a constant softmax, so the query and key
        // projections get identically zero gradients: every CMA (one averaged anchor
        // key per window) and any TA whose alignment factor is 1.
        let mut structurally_zero: Vec<String> = Vec::new();
        for (i, m) in model.cfg.modalities.iter().enumerate() {
            if model.factors[i] == 1 {
                structurally_zero.push(format!("tok.ta.{}.q", m.name()));
                structurally_zero.push(format!("tok.ta.{}.wk.w", m.name()));
            }
            if model.cma[i].is_some() {
                structurally_zero.push(format!("tok.cma.{}.q", m.name()));
                structurally_zero.push(format!("tok.cma.{}.wk.w", m.name()));
            }
        }
        for ((name, _), grad) in names.iter().zip(&g) {
            if structurally_zero.contains(name) {
                continue;
            }
            let grad = grad.as_ref().unwrap_or_else(|| panic!("no gradient for {name}"));
            assert!(grad.iter().any(|v| *v != 0.0), "zero gradient for {name}");
        }
    }

    #[test]
    fn ablation_flags_remove_their_loss_paths_entirely() {
        let (mut cfg, enc_cfgs, layouts) = tiny_layouts();
        cfg.use_cross_modal = false;
        cfg.use_disentangle = false;
        let mut rng = Rng::seeded(79);
        let model = TokenizerModel::init(cfg, enc_cfgs, layouts, &mut rng).unwrap();
        assert!(model.cma.iter().all(Option::is_none), "no cross-modal parameters at all");
        let (grids, targets) = tiny_item(3);
        let mut t = Tape::new();
        let vars = model.lease(&mut t, true);
        let fwd = forward(
            &mut t,
            &model,
            &vars,
            &TokenizerItem { grids: &grids, targets: &targets },
            None,
        )
        .unwrap();
        assert_eq!(fwd.terms.cross, 0.0);
        assert_eq!(fwd.terms.disentangle, 0.0);
    }

    #[test]
    fn no_shared_codebook_keeps_continuous_shared_path() {
        let (mut cfg, enc_cfgs, layouts) = tiny_layouts();
        cfg.use_shared_codebook = false;
        let mut rng = Rng::seeded(80);
        let model = TokenizerModel::init(cfg, enc_cfgs, layouts, &mut rng).unwrap();
        let (grids, targets) = tiny_item(4);
        let mut t = Tape::new();
        let vars = model.lease(&mut t, true);
        let fwd = forward(
            &mut t,
            &model,
            &vars,
            &TokenizerItem { grids: &grids, targets: &targets },
            None,
        )
        .unwrap();
        assert!(fwd.terms.total.is_finite());
        assert!(fwd.assignments.iter().all(|a| a.shared_indices.is_empty()));
        assert!(fwd.terms.cross > 0.0, "cross path runs on continuous embeddings");
    }

    #[test]
    fn window_shuffle_changes_the_cross_term_only() {
        let (cfg, enc_cfgs, layouts) = tiny_layouts();
        let mut rng = Rng::seeded(81);
        let model = TokenizerModel::init(cfg, enc_cfgs, layouts, &mut rng).unwrap();
        let (grids, targets) = tiny_item(5);
        let item = TokenizerItem { grids: &grids, targets: &targets };
        let mut t = Tape::new();
        let vars = model.lease(&mut t, false);
        let plain = forward(&mut t, &model, &vars, &item, None).unwrap();
        let perm = vec![1usize, 0];
        let shuffled = forward(&mut t, &model, &vars, &item, Some(&perm)).unwrap();
        assert_eq!(plain.terms.codebook, shuffled.terms.codebook);
        assert_eq!(plain.terms.disentangle, shuffled.terms.disentangle);
        assert!(
            (plain.terms.cross - shuffled.terms.cross).abs() > 1e-12,
            "swapping two distinct window codes must move the cross error"
        );
    }

    #[test]
    fn training_reduces_loss_and_keeps_codebooks_alive() {
        let (cfg, enc_cfgs, layouts) = tiny_layouts();
        let mut rng = Rng::seeded(90);
        let mut model = TokenizerModel::init(cfg, enc_cfgs, layouts, &mut rng).unwrap();
        let data: Vec<(Vec<PatchGrid>, Vec<Vec<f64>>)> = (0..6).map(|s| tiny_item(s as u64)).collect();
        let items: Vec<TokenizerItem> = data
            .iter()
            .map(|(g, t)| TokenizerItem { grids: g, targets: t })
            .collect();
        let mut params = Vec::new();
        model.params(&mut params);
        let opt_cfg = crate::numerics::OptimizerConfig {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 1e-4,
            schedule: crate::numerics::Schedule {
                peak_lr: 1e-3,
                min_lr: 1e-4,
                warmup_steps: 2,
                total_steps: 12,
            },
        };
        let mut opt =
            crate::numerics::AdamW::new(opt_cfg, &params, crate::numerics::default_precision());
        let settings = TrainSettings { epochs: 4, batch_size: 3, grad_clip: Some(3.0) };
        let mut train_rng = Rng::seeded(91);
        let mut first = 0.0;
        let mut last = 0.0;
        for epoch in 0..settings.epochs {
            let stats =
                train_epoch(&mut model, &mut opt, &items, &settings, epoch, &mut train_rng).unwrap();
            assert!(stats.loss.is_finite());
            assert!(stats.shared_perplexity > 1.0, "shared codes must not collapse to one");
            if epoch == 0 {
                first = stats.loss;
            }
            last = stats.loss;
        }
        assert!(last < first, "loss should drop over 4 tiny epochs: {first} -> {last}");
        let toks = tokenize(&model, &data[0].0).unwrap();
        assert_eq!(toks.len(), 2);
        assert_eq!(toks[0].private.len(), 4);
        assert_eq!(toks[0].shared.as_ref().unwrap().len(), 4);
        assert_eq!(toks[1].private.len(), 10);
        let shared = toks[1].shared.as_ref().unwrap();
        assert_eq!(shared.len(), 10);
        for run in shared.chunks(5) {
            assert!(run.iter().all(|&x| x == run[0]), "run of 5 tokens shares one window code");
        }
    }

    #[test]
    fn non_identity_permutations_always_move_something() {
        let mut rng = Rng::seeded(6);
        for n in 2..8 {
            for _ in 0..20 {
                let p = non_identity_permutation(n, &mut rng);
                assert!(p.iter().enumerate().any(|(i, &v)| v != i));
                let mut sorted = p.clone();
                sorted.sort_unstable();
                assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            }
        }
    }
}
