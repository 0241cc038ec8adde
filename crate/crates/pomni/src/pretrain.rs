//! Stage-2 masked signal modeling: corrupt whole patches with a learnable mask token,
//! run the encoders, and predict each masked token's private and shared code indices
//! against targets from the frozen stage-1 tokenizer.

use crate::encoder::{EncoderConfig, EncoderState, EncoderVars};
use crate::nn::{self, Linear, LinearVars};
use crate::numerics::{ops, AdamW, Rng, Tape, Tensor, Var};
use crate::sigproc::PatchGrid;
use crate::tokenizer::{self, TokenIndices, TokenizerModel};
use crate::{Error, Modality, Result};

/// Per-modality masking ratio.
pub fn mask_ratio(m: Modality) -> f64 {
    match m {
        Modality::Eeg | Modality::Emg => 0.5,
        Modality::Eog | Modality::Ecg => 0.7,
    }
}

/// Number of positions to mask: round(r*n), clamped to [1, n-1].
pub fn mask_count(ratio: f64, n: usize) -> usize {
    if n < 2 {
        return if n == 0 { 0 } else { 1 };
    }
    let raw = (ratio * n as f64).round() as usize;
    raw.clamp(1, n - 1)
}

/// Uniform sample without replacement: a boolean flag per token, exactly
/// `mask_count(ratio, n)` of them set.
pub fn mask_positions(ratio: f64, n: usize, rng: &mut Rng) -> Vec<bool> {
    let count = mask_count(ratio, n);
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    let mut mask = vec![false; n];
    for &i in &idx[..count] {
        mask[i] = true;
    }
    mask
}

/// The stage-2 model: per-modality encoders, mask tokens, and two index-prediction
/// heads per modality.
pub struct PretrainModel {
    pub modalities: Vec<Modality>,
    pub enc_cfgs: Vec<EncoderConfig>,
    pub codebook_size: usize,
    /// Shared heads exist only when the tokenizer quantized the shared stream.
    pub has_shared: bool,
    pub encoders: Vec<EncoderState>,
    pub mask_tokens: Vec<Tensor>,
    pub private_heads: Vec<Linear>,
    pub shared_heads: Vec<Linear>,
}

pub struct PretrainVars {
    pub encoders: Vec<EncoderVars>,
    pub mask_tokens: Vec<Var>,
    pub private_heads: Vec<LinearVars>,
    pub shared_heads: Vec<LinearVars>,
}

impl PretrainModel {
    /// Fresh initialization. `warm_start` copies encoder weights from the tokenizer
    /// instead of initializing them anew.
    pub fn init(
        enc_cfgs: Vec<EncoderConfig>,
        codebook_size: usize,
        has_shared: bool,
        warm_start: Option<&TokenizerModel>,
        seed_rng: &mut Rng,
    ) -> Result<PretrainModel> {
        if enc_cfgs.is_empty() {
            return Err(Error::Config("pretraining needs at least one modality".into()));
        }
        let mut rng = seed_rng.substream("pretrain_init");
        let modalities: Vec<Modality> = enc_cfgs.iter().map(|c| c.modality).collect();
        if let Some(tok) = warm_start {
            if tok.cfg.modalities != modalities {
                return Err(Error::Config("warm start modalities differ from stage-2 set".into()));
            }
        }
        let mut encoders = Vec::new();
        let mut mask_tokens = Vec::new();
        let mut private_heads = Vec::new();
        let mut shared_heads = Vec::new();
        for (i, cfg) in enc_cfgs.iter().enumerate() {
            let enc = match warm_start {
                Some(tok) => tok.encoders[i].clone(),
                None => EncoderState::init(cfg.clone(), &mut rng)?,
            };
            encoders.push(enc);
            mask_tokens.push(nn::init_weight(&[1, cfg.dim], &mut rng));
            private_heads.push(Linear::init(cfg.dim, codebook_size, true, &mut rng));
            shared_heads.push(Linear::init(cfg.dim, codebook_size, true, &mut rng));
        }
        Ok(PretrainModel {
            modalities,
            enc_cfgs,
            codebook_size,
            has_shared,
            encoders,
            mask_tokens,
            private_heads,
            shared_heads,
        })
    }

    pub fn params<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, &m) in self.modalities.iter().enumerate() {
            let p = m.name();
            self.encoders[i].params(&format!("pre.enc.{p}"), out);
            out.push((format!("pre.mask.{p}"), &self.mask_tokens[i]));
            self.private_heads[i].params(&format!("pre.head_priv.{p}"), out);
            if self.has_shared {
                self.shared_heads[i].params(&format!("pre.head_shared.{p}"), out);
            }
        }
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        let modalities = self.modalities.clone();
        let has_shared = self.has_shared;
        let mut encoders = self.encoders.iter_mut();
        let mut masks = self.mask_tokens.iter_mut();
        let mut priv_heads = self.private_heads.iter_mut();
        let mut shared_heads = self.shared_heads.iter_mut();
        for &m in &modalities {
            let p = m.name();
            encoders.next().expect("encoder per modality").params_mut(&format!("pre.enc.{p}"), out);
            out.push((format!("pre.mask.{p}"), masks.next().expect("mask per modality")));
            priv_heads
                .next()
                .expect("private head per modality")
                .params_mut(&format!("pre.head_priv.{p}"), out);
            let sh = shared_heads.next().expect("shared head per modality");
            if has_shared {
                sh.params_mut(&format!("pre.head_shared.{p}"), out);
            }
        }
    }

    pub fn lease(&self, t: &mut Tape, trainable: bool) -> PretrainVars {
        PretrainVars {
            encoders: self.encoders.iter().map(|e| e.lease(t, trainable)).collect(),
            mask_tokens: self.mask_tokens.iter().map(|m| t.lease(m, trainable)).collect(),
            private_heads: self.private_heads.iter().map(|h| h.lease(t, trainable)).collect(),
            shared_heads: self.shared_heads.iter().map(|h| h.lease(t, trainable)).collect(),
        }
    }

    /// Every persistent tensor (registered parameters).
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut refs: Vec<(String, &Tensor)> = Vec::new();
        self.params(&mut refs);
        refs.into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    /// Restores everything written by [`PretrainModel::state_tensors`].
    pub fn load_state(&mut self, find: &dyn Fn(&str) -> Option<Tensor>) -> Result<()> {
        let mut slots: Vec<(String, &mut Tensor)> = Vec::new();
        self.params_mut(&mut slots);
        nn::load_named(&mut slots, find)
    }
}

impl PretrainVars {
    pub fn vars(&self, model: &PretrainModel, out: &mut Vec<Var>) {
        for i in 0..model.modalities.len() {
            self.encoders[i].vars(out);
            out.push(self.mask_tokens[i]);
            self.private_heads[i].vars(out);
            if model.has_shared {
                self.shared_heads[i].vars(out);
            }
        }
    }
}

/// Masked positions and logits gathered at them, for one modality of one sample.
struct MaskedLogits {
    private: Var,
    shared: Option<Var>,
    private_targets: Vec<usize>,
    shared_targets: Vec<usize>,
}

/// One sample's masked forward pass for one modality.
fn masked_forward(
    t: &mut Tape,
    model: &PretrainModel,
    vars: &PretrainVars,
    i: usize,
    grid: &PatchGrid,
    targets: &TokenIndices,
    mask: &[bool],
) -> Result<MaskedLogits> {
    let n = grid.tokens();
    if mask.len() != n || targets.private.len() != n {
        return Err(Error::shape(
            "masked_forward",
            format!("mask {} / targets {} vs {n} tokens", mask.len(), targets.private.len()),
        ));
    }
    let enc =
        vars.encoders[i].encode(t, &model.enc_cfgs[i], grid, Some((mask, vars.mask_tokens[i])))?;
    let picked: Vec<usize> = (0..n).filter(|&j| mask[j]).collect();
    let masked_tokens = ops::gather_rows(t, enc.tokens, &picked)?;
    let private = vars.private_heads[i].apply(t, masked_tokens)?;
    let private_targets: Vec<usize> = picked.iter().map(|&j| targets.private[j]).collect();
    let (shared, shared_targets) = match (&targets.shared, model.has_shared) {
        (Some(sh), true) => {
            let logits = vars.shared_heads[i].apply(t, masked_tokens)?;
            (Some(logits), picked.iter().map(|&j| sh[j]).collect())
        }
        _ => (None, Vec::new()),
    };
    Ok(MaskedLogits { private, shared, private_targets, shared_targets })
}

/// Scalar pieces of one masked loss evaluation.
#[derive(Clone, Copy, Debug, Default)]
pub struct MaskedLoss {
    pub total: f64,
    pub masked_positions: usize,
    /// Top-1 index accuracy at masked positions, private and shared streams pooled.
    pub accuracy: f64,
}

/// Masked prediction loss over one sample: the mean over all masked positions of
/// CE(private) + CE(shared). Returns the loss node plus scalar readouts.
pub fn sample_loss(
    t: &mut Tape,
    model: &PretrainModel,
    vars: &PretrainVars,
    grids: &[PatchGrid],
    targets: &[TokenIndices],
    masks: &[Vec<bool>],
) -> Result<(Var, MaskedLoss)> {
    let n_mod = model.modalities.len();
    if grids.len() != n_mod || targets.len() != n_mod || masks.len() != n_mod {
        return Err(Error::shape(
            "pretrain_sample",
            format!("{} grids / {} targets / {} masks vs {n_mod} modalities", grids.len(), targets.len(), masks.len()),
        ));
    }
    // Per-modality CE terms are summed weighted by their masked counts, then divided
    // by the total masked count: a single global mean over masked positions.
    let mut weighted: Vec<Var> = Vec::new();
    let mut total_masked = 0usize;
    let mut hits = 0usize;
    let mut preds = 0usize;
    for i in 0..n_mod {
        let ml = masked_forward(t, model, vars, i, &grids[i], &targets[i], &masks[i])?;
        let count = ml.private_targets.len();
        total_masked += count;
        let ce_p = ops::cross_entropy(t, ml.private, &ml.private_targets, 0.0)?;
        weighted.push(ops::mul_scalar(t, ce_p, count as f64)?);
        hits += top1_hits(t, ml.private, &ml.private_targets);
        preds += count;
        if let Some(logits) = ml.shared {
            let ce_s = ops::cross_entropy(t, logits, &ml.shared_targets, 0.0)?;
            weighted.push(ops::mul_scalar(t, ce_s, count as f64)?);
            hits += top1_hits(t, logits, &ml.shared_targets);
            preds += count;
        }
    }
    let mut sum = weighted[0];
    for &v in &weighted[1..] {
        sum = ops::add(t, sum, v)?;
    }
    let loss = ops::mul_scalar(t, sum, 1.0 / total_masked as f64)?;
    let stats = MaskedLoss {
        total: t.item(loss),
        masked_positions: total_masked,
        accuracy: if preds == 0 { 0.0 } else { hits as f64 / preds as f64 },
    };
    Ok((loss, stats))
}

fn top1_hits(t: &Tape, logits: Var, targets: &[usize]) -> usize {
    let shape = t.shape(logits);
    let (n, k) = (shape[0], shape[1]);
    let data = t.value(logits);
    let mut hits = 0;
    for (row, &target) in targets.iter().enumerate() {
        let r = &data[row * k..(row + 1) * k];
        let mut best = 0;
        for j in 1..k {
            if r[j] > r[best] {
                best = j;
            }
        }
        if best == target {
            hits += 1;
        }
    }
    debug_assert_eq!(targets.len(), n);
    hits
}

/// One sample's precomputed inputs for stage 2.
pub struct PretrainItem<'a> {
    pub grids: &'a [PatchGrid],
    pub targets: &'a [TokenIndices],
}

/// Training settings for the stage-2 loop.
#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip: Option<f64>,
    /// Mask ratio per modality, aligned with the model's modality order; empty means
    /// the standard per-modality ratios.
    pub mask_ratios: Vec<f64>,
}

impl TrainSettings {
    /// Ratio for the model's i-th modality.
    pub fn ratio(&self, model: &PretrainModel, i: usize) -> f64 {
        self.mask_ratios.get(i).copied().unwrap_or_else(|| mask_ratio(model.modalities[i]))
    }
}

/// Scalars reported after each pretraining epoch.
#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

/// One optimizer step over a batch: fresh masks per sample, batch-mean gradients.
pub fn train_step(
    model: &mut PretrainModel,
    opt: &mut AdamW,
    batch: &[PretrainItem],
    settings: &TrainSettings,
    mask_rng: &mut Rng,
) -> Result<(f64, f64, f64)> {
    let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
    let mut loss_sum = 0.0;
    let mut acc_sum = 0.0;
    for item in batch {
        let masks: Vec<Vec<bool>> = item
            .grids
            .iter()
            .enumerate()
            .map(|(i, g)| mask_positions(settings.ratio(model, i), g.tokens(), mask_rng))
            .collect();
        let mut t = Tape::new();
        let vars = model.lease(&mut t, true);
        let (loss, stats) = sample_loss(&mut t, model, &vars, item.grids, item.targets, &masks)?;
        if !stats.total.is_finite() {
            return Err(Error::NonFinite("masked prediction loss".into()));
        }
        loss_sum += stats.total;
        acc_sum += stats.accuracy;
        let mut order = Vec::new();
        vars.vars(model, &mut order);
        let mut g = t.backward(loss)?;
        tokenizer::accumulate_grads(&mut grads, nn::take_grads(&mut g, &order));
    }
    let n = batch.len();
    tokenizer::scale_grads(&mut grads, n);
    if let Some(max) = settings.grad_clip {
        crate::numerics::clip_grad_norm(&mut grads, max);
    }
    let mut params = Vec::new();
    model.params_mut(&mut params);
    let lr = opt.apply(&mut params, &grads)?;
    Ok((loss_sum / n as f64, acc_sum / n as f64, lr))
}

/// Runs one epoch over shuffled samples.
pub fn train_epoch(
    model: &mut PretrainModel,
    opt: &mut AdamW,
    items: &[PretrainItem],
    settings: &TrainSettings,
    epoch: usize,
    rng: &mut Rng,
) -> Result<EpochStats> {
    if items.is_empty() {
        return Err(Error::InvalidParameter("pretraining needs at least one sample".into()));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut shuffle_rng = rng.substream_idx(epoch as u64);
    shuffle_rng.shuffle(&mut order);
    let mut mask_rng = shuffle_rng.substream("masks");
    let mut loss_sum = 0.0;
    let mut acc_sum = 0.0;
    let mut batches = 0usize;
    let mut last_lr = 0.0;
    for chunk in order.chunks(settings.batch_size.max(1)) {
        let batch: Vec<PretrainItem> = chunk
            .iter()
            .map(|&i| PretrainItem { grids: items[i].grids, targets: items[i].targets })
            .collect();
        let (loss, acc, lr) = train_step(model, opt, &batch, settings, &mut mask_rng)?;
        loss_sum += loss;
        acc_sum += acc;
        last_lr = lr;
        batches += 1;
    }
    Ok(EpochStats {
        epoch,
        loss: loss_sum / batches as f64,
        accuracy: acc_sum / batches as f64,
        lr: last_lr,
    })
}

/// Held-out masked-prediction accuracy with seeded masks.
pub fn evaluate(
    model: &PretrainModel,
    items: &[PretrainItem],
    settings: &TrainSettings,
    seed: u64,
) -> Result<MaskedLoss> {
    let mut rng = Rng::seeded(seed).substream("eval_masks");
    let mut agg = MaskedLoss::default();
    let mut acc_sum = 0.0;
    for item in items {
        let masks: Vec<Vec<bool>> = item
            .grids
            .iter()
            .enumerate()
            .map(|(i, g)| mask_positions(settings.ratio(model, i), g.tokens(), &mut rng))
            .collect();
        let mut t = Tape::new();
        let vars = model.lease(&mut t, false);
        let (_, stats) = sample_loss(&mut t, model, &vars, item.grids, item.targets, &masks)?;
        agg.total += stats.total;
        agg.masked_positions += stats.masked_positions;
        acc_sum += stats.accuracy;
    }
    let n = items.len().max(1) as f64;
    agg.total /= n;
    agg.accuracy = acc_sum / n;
    Ok(agg)
}
