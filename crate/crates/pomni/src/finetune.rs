//! Stage-3 resilient fine-tuning: harmonize each modality's token sequence onto a
//! common length and width, fuse through a shared block with per-modality aggregators,
//! pull fused features toward label prototypes, and predict from any non-empty subset
//! of modalities at inference time.

use crate::encoder::{EncoderConfig, EncoderState, EncoderVars};
use crate::nn::{self, Block, BlockVars, Linear, LinearVars};
use crate::numerics::{ops, AdamW, Rng, Tape, Tensor, Var};
use crate::sigproc::PatchGrid;
use crate::tokenizer::{accumulate_grads, scale_grads};
use crate::{Error, Modality, Result};

/// Desk-scale harmonized token count and width.
pub const DESK_TOKENS: usize = 16;
pub const DESK_WIDTH: usize = 32;

/// The downstream task determines head width, loss, and monitor metric.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// One logit, binary cross-entropy, AUROC monitor.
    Binary,
    /// Softmax cross-entropy with label smoothing 0.1, Cohen's kappa monitor.
    MultiClass { classes: usize },
    /// Mean squared error, coefficient-of-determination monitor.
    Regression { dim: usize },
}

impl Task {
    pub fn output_width(&self) -> usize {
        match *self {
            Task::Binary => 1,
            Task::MultiClass { classes } => classes,
            Task::Regression { dim } => dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Task::MultiClass { classes } if classes < 2 => {
                Err(Error::Config("multi-class task needs at least 2 classes".into()))
            }
            Task::Regression { dim } if dim == 0 => {
                Err(Error::Config("regression task needs at least 1 output".into()))
            }
            _ => Ok(()),
        }
    }
}

/// One sample's supervision target.
#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    Class(usize),
    Values(Vec<f64>),
}

impl Label {
    pub fn class(&self) -> Result<usize> {
        match self {
            Label::Class(c) => Ok(*c),
            Label::Values(_) => Err(Error::Config("expected a class label, found values".into())),
        }
    }

    pub fn values(&self) -> Result<&[f64]> {
        match self {
            Label::Values(v) => Ok(v),
            Label::Class(_) => Err(Error::Config("expected value targets, found a class".into())),
        }
    }
}

/// Loss weights; a zero removes the term's influence without removing its parameters.
#[derive(Clone, Debug)]
pub struct LossWeights {
    pub main: f64,
    pub align: f64,
    /// Per modality, aligned with the model's modality order.
    pub spec: Vec<f64>,
}

impl LossWeights {
    pub fn desk(modalities: usize) -> LossWeights {
        LossWeights { main: 1.0, align: 1.0, spec: vec![0.5; modalities] }
    }

    pub fn validate(&self, modalities: usize) -> Result<()> {
        if self.spec.len() != modalities {
            return Err(Error::Config(format!(
                "{} per-modality loss weights for {modalities} modalities",
                self.spec.len()
            )));
        }
        if self.main < 0.0 || self.align < 0.0 || self.spec.iter().any(|&g| g < 0.0) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Structural options for stage 3.
#[derive(Clone, Debug)]
pub struct FinetuneConfig {
    pub task: Task,
    /// Harmonized token count per modality.
    pub tokens: usize,
    /// Harmonized feature width.
    pub width: usize,
    pub prototype_count: usize,
    pub weights: LossWeights,
    pub freeze_encoders: bool,
    /// Mixture-of-experts feed-forward inside the shared fuser block.
    pub moe_fuser: bool,
    /// Prototype alignment term; off removes the prototypes entirely.
    pub use_prototypes: bool,
    /// Per-modality specific heads; off removes those heads entirely.
    pub use_spec_heads: bool,
}

impl FinetuneConfig {
    pub fn desk(task: Task, modalities: usize) -> FinetuneConfig {
        let prototype_count = match task {
            Task::Binary => 2,
            Task::MultiClass { classes } => classes,
            Task::Regression { .. } => 16,
        };
        FinetuneConfig {
            task,
            tokens: DESK_TOKENS,
            width: DESK_WIDTH,
            prototype_count,
            weights: LossWeights::desk(modalities),
            freeze_encoders: false,
            moe_fuser: false,
            use_prototypes: true,
            use_spec_heads: true,
        }
    }

    pub fn validate(&self, modalities: usize) -> Result<()> {
        self.task.validate()?;
        self.weights.validate(modalities)?;
        if self.tokens == 0 || self.width == 0 {
            return Err(Error::Config("harmonized shape must be positive".into()));
        }
        if self.use_prototypes {
            if self.prototype_count == 0 {
                return Err(Error::Config("prototype count must be at least 1".into()));
            }
            match self.task {
                Task::Binary if self.prototype_count != 2 => {
                    return Err(Error::Config("binary task needs exactly 2 prototypes".into()))
                }
                Task::MultiClass { classes } if self.prototype_count != classes => {
                    return Err(Error::Config(format!(
                        "{} prototypes for {classes} classes",
                        self.prototype_count
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Per-modality harmonization: tokenwise map to `tokens` slots, column-normalized
/// softmax resampling, then a width map to the common `width`.
pub struct Harmonizer {
    pub slots: Linear,
    pub embed: Linear,
}

pub struct HarmonizerVars {
    slots: LinearVars,
    embed: LinearVars,
}

impl Harmonizer {
    pub fn init(input_dim: usize, tokens: usize, width: usize, rng: &mut Rng) -> Harmonizer {
        Harmonizer {
            slots: Linear::init(input_dim, tokens, true, rng),
            embed: Linear::init(input_dim, width, true, rng),
        }
    }

    pub fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.slots.params(&format!("{prefix}.slots"), out);
        self.embed.params(&format!("{prefix}.embed"), out);
    }

    pub fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.slots.params_mut(&format!("{prefix}.slots"), out);
        self.embed.params_mut(&format!("{prefix}.embed"), out);
    }

    pub fn lease(&self, t: &mut Tape, trainable: bool) -> HarmonizerVars {
        HarmonizerVars { slots: self.slots.lease(t, trainable), embed: self.embed.lease(t, trainable) }
    }
}

impl HarmonizerVars {
    pub fn vars(&self, out: &mut Vec<Var>) {
        self.slots.vars(out);
        self.embed.vars(out);
    }

    /// `z: [n_j, d_j]` -> `[tokens, width]`; every output row pre-embed is a convex
    /// combination of input rows.
    pub fn apply(&self, t: &mut Tape, z: Var) -> Result<Var> {
        let scores = self.slots.apply(t, z)?;
        let tr = ops::transpose(t, scores)?;
        let weights = ops::softmax(t, tr)?;
        let mixed = ops::matmul(t, weights, z)?;
        self.embed.apply(t, mixed)
    }

    /// The convex-combination weights alone: `[tokens, n_j]`, rows sum to 1.
    pub fn weights(&self, t: &mut Tape, z: Var) -> Result<Var> {
        let scores = self.slots.apply(t, z)?;
        let tr = ops::transpose(t, scores)?;
        ops::softmax(t, tr)
    }
}

/// Full-length depthwise convolution over the token axis: a learned weighted sum per
/// feature, collapsing `[tokens, width]` to a single `[1, width]` vector.
pub struct Aggregator {
    pub w: Tensor,
    pub b: Tensor,
}

pub struct AggregatorVars {
    w: Var,
    b: Var,
}

impl Aggregator {
    pub fn init(tokens: usize, width: usize, rng: &mut Rng) -> Aggregator {
        Aggregator { w: nn::init_weight(&[tokens, width], rng), b: nn::init_zeros(&[width]) }
    }

    pub fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.w"), &self.w));
        out.push((format!("{prefix}.b"), &self.b));
    }

    pub fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.w"), &mut self.w));
        out.push((format!("{prefix}.b"), &mut self.b));
    }

    pub fn lease(&self, t: &mut Tape, trainable: bool) -> AggregatorVars {
        AggregatorVars { w: t.lease(&self.w, trainable), b: t.lease(&self.b, trainable) }
    }
}

impl AggregatorVars {
    pub fn vars(&self, out: &mut Vec<Var>) {
        out.push(self.w);
        out.push(self.b);
    }

    pub fn apply(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let n = t.shape(x)[0];
        let prod = ops::mul(t, x, self.w)?;
        let mean = ops::mean_axis0(t, prod)?;
        let summed = ops::mul_scalar(t, mean, n as f64)?;
        let d = t.shape(summed)[0];
        let row = ops::reshape(t, summed, &[1, d])?;
        ops::add_bias(t, row, self.b)
    }
}

/// The stage-3 model.
pub struct FinetuneModel {
    pub cfg: FinetuneConfig,
    pub modalities: Vec<Modality>,
    pub enc_cfgs: Vec<EncoderConfig>,
    pub encoders: Vec<EncoderState>,
    pub harmonizers: Vec<Harmonizer>,
    pub fuser: Block,
    pub aggregators: Vec<Aggregator>,
    pub main_head: Linear,
    pub spec_heads: Vec<Linear>,
    pub prototypes: Option<Tensor>,
}

pub struct FinetuneVars {
    pub encoders: Vec<EncoderVars>,
    pub harmonizers: Vec<HarmonizerVars>,
    pub fuser: BlockVars,
    pub aggregators: Vec<AggregatorVars>,
    pub main_head: LinearVars,
    pub spec_heads: Vec<LinearVars>,
    pub prototypes: Option<Var>,
}

impl FinetuneModel {
    /// Builds stage 3 around existing encoders (normally the stage-2 result).
    pub fn init(
        cfg: FinetuneConfig,
        enc_cfgs: Vec<EncoderConfig>,
        encoders: Vec<EncoderState>,
        seed_rng: &mut Rng,
    ) -> Result<FinetuneModel> {
        cfg.validate(enc_cfgs.len())?;
        if enc_cfgs.len() != encoders.len() || enc_cfgs.is_empty() {
            return Err(Error::Config("encoder configs and states must align".into()));
        }
        let mut rng = seed_rng.substream("finetune_init");
        let modalities: Vec<Modality> = enc_cfgs.iter().map(|c| c.modality).collect();
        let out_w = cfg.task.output_width();
        let harmonizers = enc_cfgs
            .iter()
            .map(|c| Harmonizer::init(c.dim, cfg.tokens, cfg.width, &mut rng))
            .collect();
        let fuser = if cfg.moe_fuser {
            Block::init_moe(cfg.width, 4, 4 * cfg.width, 4, &mut rng)?
        } else {
            Block::init(cfg.width, 4, 4 * cfg.width, &mut rng)?
        };
        let aggregators = modalities
            .iter()
            .map(|_| Aggregator::init(cfg.tokens, cfg.width, &mut rng))
            .collect();
        let main_head = Linear::init(cfg.width, out_w, true, &mut rng);
        let spec_heads = if cfg.use_spec_heads {
            modalities.iter().map(|_| Linear::init(cfg.width, out_w, true, &mut rng)).collect()
        } else {
            Vec::new()
        };
        let prototypes = cfg
            .use_prototypes
            .then(|| nn::init_weight(&[cfg.prototype_count, cfg.width], &mut rng));
        Ok(FinetuneModel {
            cfg,
            modalities,
            enc_cfgs,
            encoders,
            harmonizers,
            fuser,
            aggregators,
            main_head,
            spec_heads,
            prototypes,
        })
    }

    pub fn modality_index(&self, m: Modality) -> Option<usize> {
        self.modalities.iter().position(|&x| x == m)
    }

    /// Trainable parameters; frozen encoders are excluded entirely.
    pub fn params<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, &m) in self.modalities.iter().enumerate() {
            let p = m.name();
            if !self.cfg.freeze_encoders {
                self.encoders[i].params(&format!("ft.enc.{p}"), out);
            }
            self.harmonizers[i].params(&format!("ft.hrm.{p}"), out);
        }
        self.fuser.params("ft.fuser", out);
        for (i, &m) in self.modalities.iter().enumerate() {
            self.aggregators[i].params(&format!("ft.agg.{}", m.name()), out);
        }
        self.main_head.params("ft.head_main", out);
        for (i, &m) in self.modalities.iter().enumerate() {
            if i < self.spec_heads.len() {
                self.spec_heads[i].params(&format!("ft.head_spec.{}", m.name()), out);
            }
        }
        if let Some(u) = &self.prototypes {
            out.push(("ft.prototypes".into(), u));
        }
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        let modalities = self.modalities.clone();
        let freeze = self.cfg.freeze_encoders;
        let mut encoders = self.encoders.iter_mut();
        let mut harmonizers = self.harmonizers.iter_mut();
        for &m in &modalities {
            let p = m.name();
            let enc = encoders.next().expect("encoder per modality");
            if !freeze {
                enc.params_mut(&format!("ft.enc.{p}"), out);
            }
            harmonizers.next().expect("harmonizer per modality").params_mut(&format!("ft.hrm.{p}"), out);
        }
        self.fuser.params_mut("ft.fuser", out);
        for (agg, &m) in self.aggregators.iter_mut().zip(&modalities) {
            agg.params_mut(&format!("ft.agg.{}", m.name()), out);
        }
        self.main_head.params_mut("ft.head_main", out);
        for (head, &m) in self.spec_heads.iter_mut().zip(&modalities) {
            head.params_mut(&format!("ft.head_spec.{}", m.name()), out);
        }
        if let Some(u) = &mut self.prototypes {
            out.push(("ft.prototypes".into(), u));
        }
    }

    /// All persistent tensors including frozen encoders, for checkpointing.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        self.params(&mut out);
        let mut named: Vec<(String, Tensor)> =
            out.into_iter().map(|(n, t)| (n, t.clone())).collect();
        if self.cfg.freeze_encoders {
            let mut frozen: Vec<(String, &Tensor)> = Vec::new();
            for (i, &m) in self.modalities.iter().enumerate() {
                self.encoders[i].params(&format!("ft.enc.{}", m.name()), &mut frozen);
            }
            named.extend(frozen.into_iter().map(|(n, t)| (n, t.clone())));
        }
        named
    }

    /// Restores everything written by [`FinetuneModel::state_tensors`].
    pub fn load_state(&mut self, find: &dyn Fn(&str) -> Option<Tensor>) -> Result<()> {
        let freeze = self.cfg.freeze_encoders;
        {
            let mut slots: Vec<(String, &mut Tensor)> = Vec::new();
            self.params_mut(&mut slots);
            nn::load_named(&mut slots, find)?;
        }
        if freeze {
            let modalities = self.modalities.clone();
            let mut slots: Vec<(String, &mut Tensor)> = Vec::new();
            for (e, m) in self.encoders.iter_mut().zip(&modalities) {
                e.params_mut(&format!("ft.enc.{}", m.name()), &mut slots);
            }
            nn::load_named(&mut slots, find)?;
        }
        Ok(())
    }

    pub fn lease(&self, t: &mut Tape, trainable: bool) -> FinetuneVars {
        let enc_trainable = trainable && !self.cfg.freeze_encoders;
        FinetuneVars {
            encoders: self.encoders.iter().map(|e| e.lease(t, enc_trainable)).collect(),
            harmonizers: self.harmonizers.iter().map(|h| h.lease(t, trainable)).collect(),
            fuser: self.fuser.lease(t, trainable),
            aggregators: self.aggregators.iter().map(|a| a.lease(t, trainable)).collect(),
            main_head: self.main_head.lease(t, trainable),
            spec_heads: self.spec_heads.iter().map(|h| h.lease(t, trainable)).collect(),
            prototypes: self.prototypes.as_ref().map(|u| t.lease(u, trainable)),
        }
    }
}

impl FinetuneVars {
    /// Trainable vars in `params` order; frozen encoders are skipped to match.
    pub fn vars(&self, model: &FinetuneModel, out: &mut Vec<Var>) {
        for i in 0..model.modalities.len() {
            if !model.cfg.freeze_encoders {
                self.encoders[i].vars(out);
            }
            self.harmonizers[i].vars(out);
        }
        self.fuser.vars(out);
        for a in &self.aggregators {
            a.vars(out);
        }
        self.main_head.vars(out);
        for h in &self.spec_heads {
            h.vars(out);
        }
        if let Some(u) = self.prototypes {
            out.push(u);
        }
    }

    /// Fused feature `h^j: [1, width]` for one modality.
    pub fn feature(
        &self,
        t: &mut Tape,
        model: &FinetuneModel,
        i: usize,
        grid: &PatchGrid,
    ) -> Result<Var> {
        let enc = self.encoders[i].encode(t, &model.enc_cfgs[i], grid, None)?;
        let harmonized = self.harmonizers[i].apply(t, enc.tokens)?;
        let fused = self.fuser.apply(t, harmonized)?;
        self.aggregators[i].apply(t, fused)
    }
}

/// Mean of the available features, then the main head: the test-time prediction path.
pub fn predict_main(
    t: &mut Tape,
    vars: &FinetuneVars,
    features: &[Var],
) -> Result<Var> {
    if features.is_empty() {
        return Err(Error::Usage("prediction needs at least one modality".into()));
    }
    let stacked = ops::concat_rows(t, features)?;
    let mean = ops::mean_axis0(t, stacked)?;
    let d = t.shape(mean)[0];
    let row = ops::reshape(t, mean, &[1, d])?;
    vars.main_head.apply(t, row)
}

/// Task loss of logits/outputs `[1, out]` against one label.
fn task_loss(t: &mut Tape, task: Task, logits: Var, label: &Label) -> Result<Var> {
    match task {
        Task::Binary => {
            let y = label.class()?;
            if y > 1 {
                return Err(Error::Config(format!("binary task saw class {y}")));
            }
            ops::bce_with_logits(t, logits, &[y as f64])
        }
        Task::MultiClass { classes } => {
            let y = label.class()?;
            if y >= classes {
                return Err(Error::Config(format!("class {y} outside {classes}-way task")));
            }
            ops::cross_entropy(t, logits, &[y], 0.1)
        }
        Task::Regression { dim } => {
            let v = label.values()?;
            if v.len() != dim {
                return Err(Error::shape(
                    "regression_loss",
                    format!("{} target values for {dim} outputs", v.len()),
                ));
            }
            let target = t.constant_from(&[1, dim], v.to_vec());
            ops::mse(t, logits, target)
        }
    }
}

/// Index of the prototype nearest to `h` by cosine over l2-normalized vectors.
pub fn nearest_prototype(h: &[f64], prototypes: &Tensor) -> usize {
    let (k, d) = (prototypes.shape()[0], prototypes.shape()[1]);
    let hn = {
        let n = h.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        h.iter().map(|v| v / n).collect::<Vec<f64>>()
    };
    let data = prototypes.data();
    let mut best = 0;
    let mut best_cos = f64::NEG_INFINITY;
    for c in 0..k {
        let row = &data[c * d..(c + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let cos: f64 = row.iter().zip(&hn).map(|(a, b)| a / norm * b).sum();
        if cos > best_cos {
            best_cos = cos;
            best = c;
        }
    }
    best
}

/// Squared Euclidean pull of one feature toward one prototype row.
fn attraction(t: &mut Tape, h: Var, u: Var, index: usize) -> Result<Var> {
    let proto = ops::gather_rows(t, u, &[index])?;
    let diff = ops::sub(t, h, proto)?;
    let sq = ops::mul(t, diff, diff)?;
    ops::sum_all(t, sq)
}

/// Scalar loss pieces of one fine-tuning forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct FinetuneTerms {
    pub total: f64,
    pub main: f64,
    pub spec: f64,
    pub align: f64,
}

/// Full training loss for one sample with all modalities present.
pub fn sample_loss(
    t: &mut Tape,
    model: &FinetuneModel,
    vars: &FinetuneVars,
    grids: &[PatchGrid],
    label: &Label,
) -> Result<(Var, FinetuneTerms)> {
    let n_mod = model.modalities.len();
    if grids.len() != n_mod {
        return Err(Error::shape(
            "finetune_sample",
            format!("{} grids for {n_mod} modalities", grids.len()),
        ));
    }
    let w = &model.cfg.weights;
    let mut features = Vec::with_capacity(n_mod);
    for i in 0..n_mod {
        features.push(vars.feature(t, model, i, &grids[i])?);
    }
    let logits = predict_main(t, vars, &features)?;
    let main = task_loss(t, model.cfg.task, logits, label)?;
    let mut total = ops::mul_scalar(t, main, w.main)?;
    let mut spec_val = 0.0;
    if !vars.spec_heads.is_empty() {
        for i in 0..n_mod {
            let spec_logits = vars.spec_heads[i].apply(t, features[i])?;
            let spec = task_loss(t, model.cfg.task, spec_logits, label)?;
            spec_val += t.item(spec);
            let weighted = ops::mul_scalar(t, spec, w.spec[i])?;
            total = ops::add(t, total, weighted)?;
        }
    }
    let mut align_val = 0.0;
    if let (Some(u), Some(proto)) = (vars.prototypes, &model.prototypes) {
        let mut align_terms = Vec::with_capacity(n_mod);
        for &h in &features {
            let index = match (model.cfg.task, label) {
                (Task::Regression { .. }, _) => nearest_prototype(t.value(h), proto),
                (_, label) => label.class()?,
            };
            align_terms.push(attraction(t, h, u, index)?);
        }
        let mut align = align_terms[0];
        for &v in &align_terms[1..] {
            align = ops::add(t, align, v)?;
        }
        align_val = t.item(align);
        let weighted = ops::mul_scalar(t, align, w.align)?;
        total = ops::add(t, total, weighted)?;
    }
    let terms = FinetuneTerms {
        total: t.item(total),
        main: t.item(main),
        spec: spec_val,
        align: align_val,
    };
    Ok((total, terms))
}

/// Prediction for a subset of modalities: probabilities for classification tasks
/// (binary gets `[p0, p1]`), raw outputs for regression. Only the named modalities
/// are encoded; `grids[i]` may be anything for modalities outside the subset.
pub fn infer(
    model: &FinetuneModel,
    grids: &[PatchGrid],
    subset: &[Modality],
) -> Result<Vec<f64>> {
    if subset.is_empty() {
        return Err(Error::Usage("inference needs a non-empty modality subset".into()));
    }
    let mut t = Tape::new();
    let vars = model.lease(&mut t, false);
    let mut features = Vec::new();
    let mut seen = Vec::new();
    for &m in subset {
        if seen.contains(&m) {
            continue;
        }
        seen.push(m);
        let i = model
            .modality_index(m)
            .ok_or_else(|| Error::Usage(format!("model was not trained on {m}")))?;
        if i >= grids.len() {
            return Err(Error::shape("infer", format!("no grid for {m}")));
        }
        features.push(vars.feature(&mut t, model, i, &grids[i])?);
    }
    let logits = predict_main(&mut t, &vars, &features)?;
    let out = t.value(logits).to_vec();
    Ok(match model.cfg.task {
        Task::Binary => {
            let p = 1.0 / (1.0 + (-out[0]).exp());
            vec![1.0 - p, p]
        }
        Task::MultiClass { .. } => {
            let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = out.iter().map(|x| (x - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / sum).collect()
        }
        Task::Regression { .. } => out,
    })
}

/// One sample's stage-3 inputs.
pub struct FinetuneItem<'a> {
    pub grids: &'a [PatchGrid],
    pub label: &'a Label,
}

/// Training settings for the stage-3 loop.
#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip: Option<f64>,
}

/// Scalars reported after each fine-tuning epoch.
#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub main: f64,
    pub spec: f64,
    pub align: f64,
    pub lr: f64,
}

/// One optimizer step over a batch with batch-mean gradients.
pub fn train_step(
    model: &mut FinetuneModel,
    opt: &mut AdamW,
    batch: &[FinetuneItem],
    settings: &TrainSettings,
) -> Result<(FinetuneTerms, f64)> {
    let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
    let mut sums = FinetuneTerms::default();
    for item in batch {
        let mut t = Tape::new();
        let vars = model.lease(&mut t, true);
        let (loss, terms) = sample_loss(&mut t, model, &vars, item.grids, item.label)?;
        if !terms.total.is_finite() {
            return Err(Error::NonFinite("fine-tuning loss".into()));
        }
        sums.total += terms.total;
        sums.main += terms.main;
        sums.spec += terms.spec;
        sums.align += terms.align;
        let mut order = Vec::new();
        vars.vars(model, &mut order);
        let mut g = t.backward(loss)?;
        accumulate_grads(&mut grads, nn::take_grads(&mut g, &order));
    }
    let n = batch.len();
    sums.total /= n as f64;
    sums.main /= n as f64;
    sums.spec /= n as f64;
    sums.align /= n as f64;
    scale_grads(&mut grads, n);
    if let Some(max) = settings.grad_clip {
        crate::numerics::clip_grad_norm(&mut grads, max);
    }
    let mut params = Vec::new();
    model.params_mut(&mut params);
    let lr = opt.apply(&mut params, &grads)?;
    Ok((sums, lr))
}

/// Runs one epoch over shuffled samples.
pub fn train_epoch(
    model: &mut FinetuneModel,
    opt: &mut AdamW,
    items: &[FinetuneItem],
    settings: &TrainSettings,
    epoch: usize,
    rng: &mut Rng,
) -> Result<EpochStats> {
    if items.is_empty() {
        return Err(Error::InvalidParameter("fine-tuning needs at least one sample".into()));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut shuffle_rng = rng.substream_idx(epoch as u64);
    shuffle_rng.shuffle(&mut order);
    let mut sums = FinetuneTerms::default();
    let mut batches = 0usize;
    let mut last_lr = 0.0;
    for chunk in order.chunks(settings.batch_size.max(1)) {
        let batch: Vec<FinetuneItem> = chunk
            .iter()
            .map(|&i| FinetuneItem { grids: items[i].grids, label: items[i].label })
            .collect();
        let (terms, lr) = train_step(model, opt, &batch, settings)?;
        sums.total += terms.total;
        sums.main += terms.main;
        sums.spec += terms.spec;
        sums.align += terms.align;
        last_lr = lr;
        batches += 1;
    }
    Ok(EpochStats {
        epoch,
        loss: sums.total / batches as f64,
        main: sums.main / batches as f64,
        spec: sums.spec / batches as f64,
        align: sums.align / batches as f64,
        lr: last_lr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{default_precision, OptimizerConfig, Precision, Schedule};
    use crate::sigproc::patchify;

    fn tiny_cfgs() -> Vec<EncoderConfig> {
        vec![
            EncoderConfig {
                modality: Modality::Eeg,
                patch_len: 20,
                dim: 8,
                layers: 1,
                heads: 2,
                hidden: 16,
                max_channels: 2,
                max_time: 4,
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
        ]
    }

    fn tiny_model(task: Task, seed: u64) -> FinetuneModel {
        let cfgs = tiny_cfgs();
        let mut rng = Rng::seeded(seed);
        let encoders: Vec<EncoderState> = cfgs
            .iter()
            .map(|c| EncoderState::init(c.clone(), &mut rng).unwrap())
            .collect();
        let mut cfg = FinetuneConfig::desk(task, cfgs.len());
        cfg.tokens = 4;
        cfg.width = 8;
        if matches!(task, Task::Regression { .. }) {
            cfg.prototype_count = 5;
        }
        FinetuneModel::init(cfg, cfgs, encoders, &mut rng).unwrap()
    }

    fn tiny_grids(seed: u64) -> Vec<PatchGrid> {
        let mut rng = Rng::seeded(seed);
        let eeg: Vec<Vec<f64>> = (0..2).map(|_| (0..80).map(|_| rng.normal()).collect()).collect();
        let ecg: Vec<Vec<f64>> = vec![(0..200).map(|_| rng.normal()).collect()];
        vec![
            patchify(&eeg, Modality::Eeg, 20).unwrap(),
            patchify(&ecg, Modality::Ecg, 20).unwrap(),
        ]
    }

    #[test]
    fn harmonizer_outputs_convex_combinations_at_target_shape() {
        let mut rng = Rng::seeded(1);
        for (n_in, d_in) in [(1usize, 6usize), (5, 6), (9, 4)] {
            let h = Harmonizer::init(d_in, 4, 8, &mut rng);
            let mut t = Tape::with_precision(Precision::F64);
            let vars = h.lease(&mut t, false);
            let z = t.constant_from(&[n_in, d_in], (0..n_in * d_in).map(|i| (i as f64).sin()).collect());
            let out = vars.apply(&mut t, z).unwrap();
            assert_eq!(t.shape(out), &[4, 8]);
            let w = vars.weights(&mut t, z).unwrap();
            assert_eq!(t.shape(w), &[4, n_in]);
            for row in t.value(w).chunks_exact(n_in) {
                assert!(row.iter().all(|&x| x >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5, "weights sum to 1");
            }
        }
    }

    #[test]
    fn single_input_token_is_copied_to_every_slot() {
        let mut rng = Rng::seeded(2);
        let h = Harmonizer::init(6, 4, 8, &mut rng);
        let mut t = Tape::with_precision(Precision::F64);
        let vars = h.lease(&mut t, false);
        let z = t.constant_from(&[1, 6], vec![0.3; 6]);
        let out = vars.apply(&mut t, z).unwrap();
        let rows: Vec<&[f64]> = t.value(out).chunks_exact(8).collect();
        for r in &rows[1..] {
            assert_eq!(*r, rows[0], "n_j=1 means every slot is e_m of the same token");
        }
    }

    #[test]
    fn aggregator_is_a_learned_weighted_sum() {
        let mut rng = Rng::seeded(3);
        let agg = Aggregator::init(3, 2, &mut rng);
        let mut t = Tape::with_precision(Precision::F64);
        let vars = agg.lease(&mut t, false);
        let x = t.constant_from(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = vars.apply(&mut t, x).unwrap();
        assert_eq!(t.shape(out), &[1, 2]);
        let w = agg.w.data();
        let b = agg.b.data();
        let want0 = w[0] * 1.0 + w[2] * 3.0 + w[4] * 5.0 + b[0];
        let want1 = w[1] * 2.0 + w[3] * 4.0 + w[5] * 6.0 + b[1];
        let got = t.value(out);
        assert!((got[0] - want0).abs() < 1e-12);
        assert!((got[1] - want1).abs() < 1e-12);
    }

    #[test]
    fn alignment_loss_is_summed_squared_distance() {
        let mut model = tiny_model(Task::MultiClass { classes: 3 }, 4);
        // Place prototypes at known points; distance-1 features per modality -> loss 2.
        let proto = model.prototypes.as_mut().unwrap();
        proto.data_mut().fill(0.0);
        let mut t = Tape::with_precision(Precision::F64);
        let u = t.lease(model.prototypes.as_ref().unwrap(), true);
        let h1 = t.constant_from(&[1, 8], {
            let mut v = vec![0.0; 8];
            v[0] = 1.0;
            v
        });
        let h2 = t.constant_from(&[1, 8], {
            let mut v = vec![0.0; 8];
            v[3] = -1.0;
            v
        });
        let a1 = attraction(&mut t, h1, u, 1).unwrap();
        let a2 = attraction(&mut t, h2, u, 1).unwrap();
        let total = ops::add(&mut t, a1, a2).unwrap();
        assert!((t.item(total) - 2.0).abs() < 1e-12, "two modalities at distance 1 cost 2");
    }

    #[test]
    fn nearest_prototype_matches_brute_force_cosine() {
        let mut rng = Rng::seeded(5);
        let protos = nn::init_weight(&[7, 6], &mut rng);
        for _ in 0..50 {
            let h: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let got = nearest_prototype(&h, &protos);
            let hn: f64 = h.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut best = 0;
            let mut best_cos = f64::NEG_INFINITY;
            for c in 0..7 {
                let row = protos.row(c);
                let rn: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                let cos: f64 =
                    row.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>() / (rn * hn);
                if cos > best_cos {
                    best_cos = cos;
                    best = c;
                }
            }
            assert_eq!(got, best);
        }
    }

    #[test]
    fn every_finetune_parameter_receives_gradient() {
        let mut model = tiny_model(Task::MultiClass { classes: 3 }, 6);
        // Nudge prototypes away from features so alignment gradients are nonzero.
        model.prototypes.as_mut().unwrap().data_mut().iter_mut().for_each(|v| *v += 0.5);
        let grids = tiny_grids(7);
        let label = Label::Class(1);
        let mut t = Tape::new();
        let vars = model.lease(&mut t, true);
        let (loss, _) = sample_loss(&mut t, &model, &vars, &grids, &label).unwrap();
        let mut grads = t.backward(loss).unwrap();
        let mut names = Vec::new();
        model.params(&mut names);
        let mut order = Vec::new();
        vars.vars(&model, &mut order);
        assert_eq!(names.len(), order.len());
        for ((name, _), g) in names.iter().zip(nn::take_grads(&mut grads, &order)) {
            let g = g.unwrap_or_else(|| panic!("no gradient for {name}"));
            assert!(g.iter().any(|v| *v != 0.0), "zero gradient for {name}");
        }
    }

    #[test]
    fn prototype_rows_get_gradient_only_for_present_classes() {
        let model = tiny_model(Task::MultiClass { classes: 3 }, 8);
        let grids = tiny_grids(9);
        let label = Label::Class(2);
        let mut t = Tape::new();
        let vars = model.lease(&mut t, true);
        let (loss, _) = sample_loss(&mut t, &model, &vars, &grids, &label).unwrap();
        let grads = t.backward(loss).unwrap();
        let g = grads.get(vars.prototypes.unwrap()).expect("prototypes touched");
        let w = model.cfg.width;
        for c in 0..3 {
            let row = &g[c * w..(c + 1) * w];
            if c == 2 {
                assert!(row.iter().any(|v| *v != 0.0), "class 2 prototype must move");
            } else {
                assert!(row.iter().all(|v| *v == 0.0), "class {c} prototype untouched");
            }
        }
    }

    #[test]
    fn frozen_encoders_are_excluded_from_training() {
        let cfgs = tiny_cfgs();
        let mut rng = Rng::seeded(10);
        let encoders: Vec<EncoderState> = cfgs
            .iter()
            .map(|c| EncoderState::init(c.clone(), &mut rng).unwrap())
            .collect();
        let mut cfg = FinetuneConfig::desk(Task::MultiClass { classes: 3 }, cfgs.len());
        cfg.tokens = 4;
        cfg.width = 8;
        cfg.freeze_encoders = true;
        let model = FinetuneModel::init(cfg, cfgs, encoders, &mut rng).unwrap();
        let mut names = Vec::new();
        model.params(&mut names);
        assert!(names.iter().all(|(n, _)| !n.starts_with("ft.enc.")));
        let grids = tiny_grids(11);
        let mut t = Tape::new();
        let vars = model.lease(&mut t, true);
        let (loss, _) = sample_loss(&mut t, &model, &vars, &grids, &Label::Class(0)).unwrap();
        let grads = t.backward(loss).unwrap();
        let mut enc_vars = Vec::new();
        for e in &vars.encoders {
            e.vars(&mut enc_vars);
        }
        assert!(
            enc_vars.iter().all(|&v| grads.get(v).is_none()),
            "frozen encoders receive no gradients"
        );
        // Checkpoint state still carries the frozen encoders.
        let state = model.state_tensors();
        assert!(state.iter().any(|(n, _)| n.starts_with("ft.enc.")));
    }

    #[test]
    fn ablation_flags_drop_terms_and_parameters() {
        let cfgs = tiny_cfgs();
        let mut rng = Rng::seeded(12);
        let encoders: Vec<EncoderState> = cfgs
            .iter()
            .map(|c| EncoderState::init(c.clone(), &mut rng).unwrap())
            .collect();
        let mut cfg = FinetuneConfig::desk(Task::MultiClass { classes: 3 }, cfgs.len());
        cfg.tokens = 4;
        cfg.width = 8;
        cfg.use_prototypes = false;
        cfg.use_spec_heads = false;
        let model = FinetuneModel::init(cfg, cfgs, encoders, &mut rng).unwrap();
        let mut names = Vec::new();
        model.params(&mut names);
        assert!(names.iter().all(|(n, _)| !n.contains("prototypes")));
        assert!(names.iter().all(|(n, _)| !n.contains("head_spec")));
        let grids = tiny_grids(13);
        let mut t = Tape::new();
        let vars = model.lease(&mut t, true);
        let (_, terms) = sample_loss(&mut t, &model, &vars, &grids, &Label::Class(1)).unwrap();
        assert_eq!(terms.spec, 0.0);
        assert_eq!(terms.align, 0.0);
        assert!((terms.total - terms.main).abs() < 1e-12, "only the main term remains");
    }

    #[test]
    fn inference_covers_every_subset_and_ignores_other_modalities() {
        let model = tiny_model(Task::MultiClass { classes: 3 }, 14);
        let grids = tiny_grids(15);
        let subsets: [&[Modality]; 3] = [
            &[Modality::Eeg],
            &[Modality::Ecg],
            &[Modality::Eeg, Modality::Ecg],
        ];
        for subset in subsets {
            let p = infer(&model, &grids, subset).unwrap();
            assert_eq!(p.len(), 3);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6, "probabilities sum to 1");
        }
        // Corrupting the ECG grid must not change the EEG-only prediction.
        let clean = infer(&model, &grids, &[Modality::Eeg]).unwrap();
        let mut corrupted = tiny_grids(16);
        corrupted[0] = grids[0].clone();
        let dirty = infer(&model, &corrupted, &[Modality::Eeg]).unwrap();
        assert_eq!(clean, dirty, "subset prediction independent of unused grids");
        // Order of the subset list does not matter.
        let ab = infer(&model, &grids, &[Modality::Eeg, Modality::Ecg]).unwrap();
        let ba = infer(&model, &grids, &[Modality::Ecg, Modality::Eeg]).unwrap();
        for (x, y) in ab.iter().zip(&ba) {
            assert!((x - y).abs() < 1e-9, "averaging is order-invariant");
        }
        assert!(infer(&model, &grids, &[]).is_err(), "empty subset is a usage error");
    }

    #[test]
    fn binary_and_regression_paths_run() {
        let model = tiny_model(Task::Binary, 17);
        let grids = tiny_grids(18);
        let mut t = Tape::new();
        let vars = model.lease(&mut t, true);
        let (_, terms) = sample_loss(&mut t, &model, &vars, &grids, &Label::Class(1)).unwrap();
        assert!(terms.total.is_finite());
        let p = infer(&model, &grids, &[Modality::Eeg, Modality::Ecg]).unwrap();
        assert_eq!(p.len(), 2);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-9);

        let model = tiny_model(Task::Regression { dim: 2 }, 19);
        let mut t = Tape::new();
        let vars = model.lease(&mut t, true);
        let (loss, terms) =
            sample_loss(&mut t, &model, &vars, &grids, &Label::Values(vec![0.5, -0.2])).unwrap();
        assert!(terms.total.is_finite());
        assert!(terms.align > 0.0, "regression alignment pulls to nearest prototype");
        let grads = t.backward(loss).unwrap();
        assert!(grads.get(vars.prototypes.unwrap()).is_some());
        let out = infer(&model, &grids, &[Modality::Ecg]).unwrap();
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn training_separates_a_separable_task() {
        // Class 0: strong low tone on both modalities; class 1: strong high tone.
        let make = |class: usize, seed: u64| -> (Vec<PatchGrid>, Label) {
            let mut rng = Rng::seeded(seed);
            let freq = if class == 0 { 2.0 } else { 8.0 };
            let eeg: Vec<Vec<f64>> = (0..2)
                .map(|c| {
                    (0..80)
                        .map(|i| {
                            let t = i as f64 / 20.0;
                            (2.0 * std::f64::consts::PI * freq * t + c as f64).sin()
                                + 0.1 * rng.normal()
                        })
                        .collect()
                })
                .collect();
            let ecg: Vec<Vec<f64>> = vec![(0..200)
                .map(|i| {
                    let t = i as f64 / 100.0;
                    (2.0 * std::f64::consts::PI * freq * t).sin() + 0.1 * rng.normal()
                })
                .collect()];
            (
                vec![
                    patchify(&eeg, Modality::Eeg, 20).unwrap(),
                    patchify(&ecg, Modality::Ecg, 20).unwrap(),
                ],
                Label::Class(class),
            )
        };
        let data: Vec<(Vec<PatchGrid>, Label)> =
            (0..8).map(|i| make(i % 2, 40 + i as u64)).collect();
        let items: Vec<FinetuneItem> = data
            .iter()
            .map(|(g, l)| FinetuneItem { grids: g, label: l })
            .collect();
        let mut model = tiny_model(Task::MultiClass { classes: 2 }, 20);
        let mut params = Vec::new();
        model.params(&mut params);
        let mut opt = AdamW::new(
            OptimizerConfig {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.05,
                schedule: Schedule {
                    peak_lr: 3e-3,
                    min_lr: 3e-4,
                    warmup_steps: 4,
                    total_steps: 40,
                },
            },
            &params,
            default_precision(),
        );
        let settings = TrainSettings { epochs: 10, batch_size: 4, grad_clip: Some(1.0) };
        let mut rng = Rng::seeded(21);
        for epoch in 0..settings.epochs {
            train_epoch(&mut model, &mut opt, &items, &settings, epoch, &mut rng).unwrap();
        }
        let mut correct = 0;
        for (grids, label) in &data {
            let p = infer(&model, grids, &[Modality::Eeg, Modality::Ecg]).unwrap();
            let pred = if p[1] > p[0] { 1 } else { 0 };
            if pred == label.class().unwrap() {
                correct += 1;
            }
        }
        assert!(correct >= 7, "trained model should fit 2 tones, got {correct}/8");
    }
}
