//! Command-line driver: dataset generation, the three training stages, and evaluation.
//!
//! Exit codes: 0 success, 2 usage/config/data errors, 3 missing upstream checkpoint,
//! 4 non-finite loss (the last finished epoch's checkpoint stays on disk), 1 internal.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::datagen::{self, io_err};
use crate::dataset::{self, PreparedDataset, Sample};
use crate::encoder::EncoderConfig;
use crate::finetune::{self, FinetuneConfig, FinetuneModel, Label, LossWeights, Task};
use crate::metrics::Report;
use crate::numerics::{default_precision, AdamW, Rng, Tensor};
use crate::pretrain::{self, PretrainModel};
use crate::tokenizer::{self, TokenIndices, TokenizerConfig, TokenizerModel};
use crate::{Error, Modality, Result};

#[derive(Parser)]
#[command(
    name = "pomni",
    version,
    about = "Multimodal physiological-signal pipeline: decoupled tokenizer, masked pretraining, missing-modality-resilient fine-tuning"
)]
pub struct Cli {
    /// Config file: `key = value` lines under [section] headers.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for datasets, checkpoints, and logs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; falls back to POMNI_THREADS, then all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multimodal dataset plus manifest.
    GenData {
        /// Generator spec file (same format as --config).
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Stage 1: train the decoupled shared/private tokenizer.
    TrainTokenizer(StageArgs),
    /// Stage 2: masked code prediction against frozen tokenizer targets.
    Pretrain(StageArgs),
    /// Stage 3: supervised fine-tuning with prototype alignment.
    Finetune(StageArgs),
    /// Metrics over the test split for a modality subset.
    Evaluate {
        /// Fine-tuned checkpoint; defaults to OUT/finetune_best.pock.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Manifest override.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated subset, e.g. "eeg,ecg"; defaults to all trained modalities.
        #[arg(long)]
        modalities: Option<String>,
        /// Sweep every non-empty subset of the trained modalities.
        #[arg(long)]
        all_subsets: bool,
    },
}

#[derive(Args)]
struct StageArgs {
    /// Manifest override (default: config [data] manifest, then OUT/data/manifest.tsv).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Upstream checkpoint override (previous stage's output).
    #[arg(long)]
    from: Option<PathBuf>,
    /// Continue from this stage's latest checkpoint.
    #[arg(long)]
    resume: bool,
    /// Drop the cross-modal reconstruction loss.
    #[arg(long)]
    no_cross_modal: bool,
    /// Drop the shared/private disentanglement penalty.
    #[arg(long)]
    no_disentangle: bool,
    /// Keep the shared path continuous (no shared-code quantization).
    #[arg(long)]
    no_shared_codebook: bool,
    /// Drop the prototype alignment loss.
    #[arg(long)]
    no_prototype_align: bool,
    /// Drop the per-modality auxiliary heads.
    #[arg(long)]
    no_spec_loss: bool,
    /// Freeze encoders during fine-tuning.
    #[arg(long)]
    freeze_encoders: bool,
    /// Mixture-of-experts fuser block.
    #[arg(long)]
    moe_fuser: bool,
}

impl StageArgs {
    fn merge_into(&self, cfg: &mut RunConfig) {
        cfg.flags.no_cross_modal |= self.no_cross_modal;
        cfg.flags.no_disentangle |= self.no_disentangle;
        cfg.flags.no_shared_codebook |= self.no_shared_codebook;
        cfg.flags.no_prototype_align |= self.no_prototype_align;
        cfg.flags.no_spec_loss |= self.no_spec_loss;
        cfg.finetune.freeze_encoders |= self.freeze_encoders;
        cfg.finetune.moe_fuser |= self.moe_fuser;
    }
}

/// Entry point; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_threads(cli.threads);
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn init_threads(flag: Option<usize>) {
    let n = flag.or_else(|| {
        std::env::var("POMNI_THREADS").ok().and_then(|v| v.parse().ok())
    });
    if let Some(n) = n {
        if n > 0 {
            // A second init in one process keeps the first pool; that is fine.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::desk(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    match cli.cmd {
        Cmd::GenData { spec } => {
            if let Some(path) = &spec {
                cfg = RunConfig::from_file(path)?;
                if let Some(seed) = cli.seed {
                    cfg.seed = seed;
                }
                if let Some(out) = &cli.out {
                    cfg.out = Some(out.clone());
                }
            }
            cmd_gen_data(&cfg)
        }
        Cmd::TrainTokenizer(args) => {
            args.merge_into(&mut cfg);
            cmd_train_tokenizer(&cfg, &args)
        }
        Cmd::Pretrain(args) => {
            args.merge_into(&mut cfg);
            cmd_pretrain(&cfg, &args)
        }
        Cmd::Finetune(args) => {
            args.merge_into(&mut cfg);
            cmd_finetune(&cfg, &args)
        }
        Cmd::Evaluate { checkpoint, data, modalities, all_subsets } => {
            cmd_evaluate(&cfg, checkpoint, data, modalities, all_subsets)
        }
    }
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from("run"))
}

fn manifest_path(cfg: &RunConfig, args: &StageArgs) -> PathBuf {
    args.data
        .clone()
        .or_else(|| cfg.data.manifest.clone())
        .unwrap_or_else(|| out_dir(cfg).join("data").join("manifest.tsv"))
}

/// Append-only plain-text log plus a tab-separated mirror, echoed to stdout.
struct Logger {
    log: fs::File,
    tsv: fs::File,
}

impl Logger {
    fn new(dir: &Path, stage: &str, tsv_header: &str) -> Result<Logger> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let log_path = dir.join(format!("{stage}.log"));
        let tsv_path = dir.join(format!("{stage}.tsv"));
        let log = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| io_err(&log_path, e))?;
        let fresh = fs::metadata(&tsv_path).map(|m| m.len() == 0).unwrap_or(true);
        let mut tsv = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&tsv_path)
            .map_err(|e| io_err(&tsv_path, e))?;
        if fresh {
            writeln!(tsv, "{tsv_header}").map_err(|e| io_err(&tsv_path, e))?;
        }
        Ok(Logger { log, tsv })
    }

    fn line(&mut self, text: &str, tsv: &str) -> Result<()> {
        println!("{text}");
        writeln!(self.log, "{text}").map_err(Error::Io)?;
        writeln!(self.tsv, "{tsv}").map_err(Error::Io)?;
        Ok(())
    }
}

fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let spec = cfg.gen_spec()?;
    let recs = datagen::generate(&spec)?;
    let dir = out_dir(cfg).join("data");
    let manifest = dataset::write_dataset(&recs, &dir)?;
    let count = |s: datagen::Split| recs.iter().filter(|r| r.split == s).count();
    let mods: Vec<&str> = spec.modalities.iter().map(|m| m.name()).collect();
    println!(
        "wrote {} recordings ({} train / {} valid / {} test), modalities {}, to {}",
        recs.len(),
        count(datagen::Split::Train),
        count(datagen::Split::Valid),
        count(datagen::Split::Test),
        mods.join(","),
        dir.display()
    );
    println!("manifest {}", manifest.display());
    Ok(())
}

fn build_enc_cfgs(cfg: &RunConfig, ds: &PreparedDataset) -> Vec<EncoderConfig> {
    ds.modalities
        .iter()
        .zip(&ds.layouts)
        .map(|(&m, l)| {
            let dim = if m == Modality::Eeg { cfg.model.eeg_dim } else { cfg.model.other_dim };
            EncoderConfig {
                modality: m,
                patch_len: l.spec.patch_len,
                dim,
                layers: cfg.model.layers,
                heads: cfg.model.heads,
                hidden: 4 * dim,
                max_channels: l.channels,
                max_time: l.patches_per_channel,
            }
        })
        .collect()
}

fn build_tok_cfg(cfg: &RunConfig) -> TokenizerConfig {
    TokenizerConfig {
        modalities: cfg.data.modalities.clone(),
        codebook_size: cfg.model.codebook_size,
        code_dim: cfg.model.code_dim,
        decoder_layers: cfg.model.decoder_layers,
        decoder_heads: cfg.model.decoder_heads,
        ema_decay: cfg.tokenizer.ema_decay,
        ema_eps: cfg.tokenizer.ema_eps,
        revive_after: cfg.tokenizer.revive_after as u32,
        alpha_cross: if cfg.flags.no_cross_modal { 0.0 } else { cfg.tokenizer.alpha_cross },
        alpha_disentangle: if cfg.flags.no_disentangle {
            0.0
        } else {
            cfg.tokenizer.alpha_disentangle
        },
        use_shared_codebook: !cfg.flags.no_shared_codebook,
        use_cross_modal: !cfg.flags.no_cross_modal,
        use_disentangle: !cfg.flags.no_disentangle,
    }
}

/// Loads a checkpoint that a later stage depends on; missing file maps to exit 3.
fn load_upstream(path: &Path, what: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(format!(
            "{what} checkpoint not found at {} (run the earlier stage or pass --from)",
            path.display()
        )));
    }
    Checkpoint::load(path)
}

/// Epochs already completed, stored in the checkpoint as a scalar.
fn stored_epoch(ck: &Checkpoint) -> Result<usize> {
    Ok(ck.tensor("run.epoch")?.data()[0] as usize)
}

fn epoch_tensor(done: usize) -> (String, Tensor) {
    ("run.epoch".to_string(), Tensor::new(&[1], vec![done as f64]).expect("scalar"))
}

fn save_stage(
    dir: &Path,
    stage: &str,
    epoch_done: usize,
    mut tensors: Vec<(String, Tensor)>,
    opt: &AdamW,
    config_text: &str,
) -> Result<()> {
    tensors.extend(opt.state_tensors());
    tensors.push(epoch_tensor(epoch_done));
    let ck = Checkpoint::new(tensors, config_text);
    ck.save(&dir.join(format!("{stage}_epoch_{epoch_done}.pock")))?;
    ck.save(&dir.join(format!("{stage}.pock")))
}

fn cmd_train_tokenizer(cfg: &RunConfig, args: &StageArgs) -> Result<()> {
    cfg.validate()?;
    let manifest = manifest_path(cfg, args);
    let ds = dataset::prepare(&manifest, &cfg.data.modalities, cfg.data.mains_hz)?;
    let dir = out_dir(cfg);
    let enc_cfgs = build_enc_cfgs(cfg, &ds);
    let tok_cfg = build_tok_cfg(cfg);
    let mut seed_rng = Rng::seeded(cfg.seed);
    let mut model = TokenizerModel::init(tok_cfg, enc_cfgs, ds.layouts.clone(), &mut seed_rng)?;
    let mut named: Vec<(String, &Tensor)> = Vec::new();
    model.params(&mut named);
    let opt_cfg = cfg.tokenizer.optim.optimizer_config(ds.train.len());
    let mut opt = AdamW::new(opt_cfg, &named, default_precision());
    let mut start_epoch = 0usize;
    if args.resume {
        let ck = load_upstream(&dir.join("tokenizer.pock"), "tokenizer")?;
        model.load_state(&ck.finder())?;
        opt.load_state(&ck.tensors)?;
        start_epoch = stored_epoch(&ck)?;
    }
    let items: Vec<tokenizer::TokenizerItem> = ds
        .train
        .iter()
        .map(|s| tokenizer::TokenizerItem { grids: &s.grids, targets: &s.recon_targets })
        .collect();
    let settings = tokenizer::TrainSettings {
        epochs: cfg.tokenizer.optim.epochs,
        batch_size: cfg.tokenizer.optim.batch_size,
        grad_clip: cfg.tokenizer.optim.clip(),
    };
    let mut log = Logger::new(
        &dir,
        "tokenizer",
        "epoch\tsplit\tloss\tcodebook\tcross\tdisentangle\tshared_ppl\tprivate_ppl\trevived\tlr",
    )?;
    let mut rng = Rng::seeded(cfg.seed).substream("tokenizer_train");
    let snapshot = cfg.to_text();
    for epoch in start_epoch..settings.epochs {
        let stats = tokenizer::train_epoch(&mut model, &mut opt, &items, &settings, epoch, &mut rng)?;
        let priv_ppl = stats.private_perplexity.iter().sum::<f64>()
            / stats.private_perplexity.len().max(1) as f64;
        log.line(
            &format!(
                "epoch {} split train loss {:.6} codebook {:.6} cross {:.6} disentangle {:.6} shared_ppl {:.3} private_ppl {:.3} revived {} lr {:.6e}",
                epoch + 1,
                stats.loss,
                stats.codebook,
                stats.cross,
                stats.disentangle,
                stats.shared_perplexity,
                priv_ppl,
                stats.revived,
                stats.lr
            ),
            &format!(
                "{}\ttrain\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.6}\t{:.6}\t{}\t{:.9e}",
                epoch + 1,
                stats.loss,
                stats.codebook,
                stats.cross,
                stats.disentangle,
                stats.shared_perplexity,
                priv_ppl,
                stats.revived,
                stats.lr
            ),
        )?;
        save_stage(&dir, "tokenizer", epoch + 1, model.state_tensors(), &opt, &snapshot)?;
    }
    println!("tokenizer done: {}", dir.join("tokenizer.pock").display());
    Ok(())
}

/// Rebuilds the stage-1 model from its checkpoint (config snapshot plus tensors).
fn restore_tokenizer(ck: &Checkpoint, ds: &PreparedDataset) -> Result<(RunConfig, TokenizerModel)> {
    let snap = RunConfig::parse(&ck.config)
        .map_err(|e| Error::Format(format!("tokenizer checkpoint config: {e}")))?;
    if snap.data.modalities != ds.modalities {
        return Err(Error::Config(format!(
            "checkpoint was trained on {:?}, dataset has {:?}",
            snap.data.modalities, ds.modalities
        )));
    }
    let enc_cfgs = build_enc_cfgs(&snap, ds);
    let tok_cfg = build_tok_cfg(&snap);
    let mut rng = Rng::seeded(snap.seed);
    let mut model = TokenizerModel::init(tok_cfg, enc_cfgs, ds.layouts.clone(), &mut rng)?;
    model.load_state(&ck.finder())?;
    Ok((snap, model))
}

fn cmd_pretrain(cfg: &RunConfig, args: &StageArgs) -> Result<()> {
    cfg.validate()?;
    let manifest = manifest_path(cfg, args);
    let ds = dataset::prepare(&manifest, &cfg.data.modalities, cfg.data.mains_hz)?;
    let dir = out_dir(cfg);
    let tok_path = args.from.clone().unwrap_or_else(|| dir.join("tokenizer.pock"));
    let tok_ck = load_upstream(&tok_path, "tokenizer")?;
    let (tok_snap, tok_model) = restore_tokenizer(&tok_ck, &ds)?;
    let has_shared = !(cfg.flags.no_shared_codebook || tok_snap.flags.no_shared_codebook);
    // Frozen token targets for every split, computed once.
    let targets: Result<Vec<Vec<TokenIndices>>> =
        ds.train.iter().map(|s| tokenizer::tokenize(&tok_model, &s.grids)).collect();
    let targets = targets?;
    let enc_cfgs = build_enc_cfgs(cfg, &ds);
    let mut seed_rng = Rng::seeded(cfg.seed);
    let warm = cfg.pretrain.warm_start_encoders.then_some(&tok_model);
    let mut model = PretrainModel::init(
        enc_cfgs,
        cfg.model.codebook_size,
        has_shared,
        warm,
        &mut seed_rng,
    )?;
    let mut named: Vec<(String, &Tensor)> = Vec::new();
    model.params(&mut named);
    let mut opt =
        AdamW::new(cfg.pretrain.optim.optimizer_config(ds.train.len()), &named, default_precision());
    let mut start_epoch = 0usize;
    if args.resume {
        let ck = load_upstream(&dir.join("pretrain.pock"), "pretrain")?;
        model.load_state(&ck.finder())?;
        opt.load_state(&ck.tensors)?;
        start_epoch = stored_epoch(&ck)?;
    }
    let items: Vec<pretrain::PretrainItem> = ds
        .train
        .iter()
        .zip(&targets)
        .map(|(s, t)| pretrain::PretrainItem { grids: &s.grids, targets: t })
        .collect();
    let settings = pretrain::TrainSettings {
        epochs: cfg.pretrain.optim.epochs,
        batch_size: cfg.pretrain.optim.batch_size,
        grad_clip: cfg.pretrain.optim.clip(),
        mask_ratios: ds.modalities.iter().map(|&m| cfg.pretrain.mask_ratio(m)).collect(),
    };
    let mut log =
        Logger::new(&dir, "pretrain", "epoch\tsplit\tloss\ttop1_accuracy\tlr")?;
    let mut rng = Rng::seeded(cfg.seed).substream("pretrain_train");
    let snapshot = cfg.to_text();
    for epoch in start_epoch..settings.epochs {
        let stats = pretrain::train_epoch(&mut model, &mut opt, &items, &settings, epoch, &mut rng)?;
        log.line(
            &format!(
                "epoch {} split train loss {:.6} top1 {:.4} lr {:.6e}",
                epoch + 1,
                stats.loss,
                stats.accuracy,
                stats.lr
            ),
            &format!(
                "{}\ttrain\t{:.9}\t{:.9}\t{:.9e}",
                epoch + 1,
                stats.loss,
                stats.accuracy,
                stats.lr
            ),
        )?;
        save_stage(&dir, "pretrain", epoch + 1, model.state_tensors(), &opt, &snapshot)?;
    }
    println!("pretrain done: {}", dir.join("pretrain.pock").display());
    Ok(())
}

/// Task inferred from the labels the dataset carries.
fn task_from(ds: &PreparedDataset) -> Result<Task> {
    if let Some(k) = ds.class_count() {
        return Ok(if k == 2 { Task::Binary } else { Task::MultiClass { classes: k } });
    }
    if let Some(dim) = ds.regression_dim() {
        return Ok(Task::Regression { dim });
    }
    Err(Error::Usage("fine-tuning needs labeled recordings".into()))
}

fn build_ft_cfg(cfg: &RunConfig, task: Task, n_modalities: usize) -> FinetuneConfig {
    let prototype_count = if cfg.model.prototypes > 0 {
        cfg.model.prototypes
    } else {
        match task {
            Task::Binary => 2,
            Task::MultiClass { classes } => classes,
            Task::Regression { .. } => 16,
        }
    };
    FinetuneConfig {
        task,
        tokens: cfg.model.tokens,
        width: cfg.model.width,
        prototype_count,
        weights: LossWeights {
            main: cfg.finetune.gamma_main,
            align: cfg.finetune.gamma_align,
            spec: vec![cfg.finetune.gamma_spec; n_modalities],
        },
        freeze_encoders: cfg.finetune.freeze_encoders,
        moe_fuser: cfg.finetune.moe_fuser,
        use_prototypes: !cfg.flags.no_prototype_align,
        use_spec_heads: !cfg.flags.no_spec_loss,
    }
}

/// Test- or valid-split report for one modality subset.
fn subset_report(
    model: &FinetuneModel,
    samples: &[Sample],
    subset: &[Modality],
) -> Result<Report> {
    let mut preds_class: Vec<usize> = Vec::new();
    let mut labels_class: Vec<usize> = Vec::new();
    let mut scores: Vec<f64> = Vec::new();
    let mut preds_reg: Vec<f64> = Vec::new();
    let mut targets_reg: Vec<f64> = Vec::new();
    let mut reg_dim = 0usize;
    for s in samples {
        let label = s.label.as_ref().ok_or_else(|| {
            Error::Usage("evaluation split contains unlabeled recordings".into())
        })?;
        let out = finetune::infer(model, &s.grids, subset)?;
        match label {
            Label::Class(c) => {
                let (best, _) = out
                    .iter()
                    .enumerate()
                    .fold((0usize, f64::MIN), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });
                preds_class.push(best);
                labels_class.push(*c);
                if out.len() == 2 {
                    scores.push(out[1]);
                }
            }
            Label::Values(v) => {
                reg_dim = v.len();
                preds_reg.extend_from_slice(&out);
                targets_reg.extend_from_slice(v);
            }
        }
    }
    if !preds_reg.is_empty() {
        Report::regression(&preds_reg, &targets_reg, reg_dim)
    } else {
        let s = (scores.len() == preds_class.len()).then_some(scores.as_slice());
        Report::classification(&preds_class, &labels_class, s)
    }
}

fn cmd_finetune(cfg: &RunConfig, args: &StageArgs) -> Result<()> {
    cfg.validate()?;
    let manifest = manifest_path(cfg, args);
    let ds = dataset::prepare(&manifest, &cfg.data.modalities, cfg.data.mains_hz)?;
    let dir = out_dir(cfg);
    let pre_path = args.from.clone().unwrap_or_else(|| dir.join("pretrain.pock"));
    let pre_ck = load_upstream(&pre_path, "pretrain")?;
    let pre_snap = RunConfig::parse(&pre_ck.config)
        .map_err(|e| Error::Format(format!("pretrain checkpoint config: {e}")))?;
    if pre_snap.data.modalities != ds.modalities {
        return Err(Error::Config(format!(
            "checkpoint was trained on {:?}, dataset has {:?}",
            pre_snap.data.modalities, ds.modalities
        )));
    }
    // Rebuild stage 2 to recover its trained encoders.
    let pre_enc_cfgs = build_enc_cfgs(&pre_snap, &ds);
    let pre_has_shared = !pre_snap.flags.no_shared_codebook;
    let mut pre_rng = Rng::seeded(pre_snap.seed);
    let mut pre_model =
        PretrainModel::init(pre_enc_cfgs.clone(), pre_snap.model.codebook_size, pre_has_shared, None, &mut pre_rng)?;
    pre_model.load_state(&pre_ck.finder())?;
    let task = task_from(&ds)?;
    let ft_cfg = build_ft_cfg(cfg, task, ds.modalities.len());
    let mut seed_rng = Rng::seeded(cfg.seed);
    let mut model =
        FinetuneModel::init(ft_cfg, pre_enc_cfgs, pre_model.encoders.clone(), &mut seed_rng)?;
    let mut named: Vec<(String, &Tensor)> = Vec::new();
    model.params(&mut named);
    let mut opt =
        AdamW::new(cfg.finetune.optim.optimizer_config(ds.train.len()), &named, default_precision());
    let mut start_epoch = 0usize;
    let mut best_monitor = f64::NEG_INFINITY;
    if args.resume {
        let ck = load_upstream(&dir.join("finetune.pock"), "finetune")?;
        model.load_state(&ck.finder())?;
        opt.load_state(&ck.tensors)?;
        start_epoch = stored_epoch(&ck)?;
        if let Ok(best) = Checkpoint::load(&dir.join("finetune_best.pock")) {
            best_monitor = best.tensor("run.monitor")?.data()[0];
        }
    }
    let items: Result<Vec<finetune::FinetuneItem>> = ds
        .train
        .iter()
        .map(|s| {
            s.label
                .as_ref()
                .map(|label| finetune::FinetuneItem { grids: &s.grids, label })
                .ok_or_else(|| Error::Usage("training split contains unlabeled recordings".into()))
        })
        .collect();
    let items = items?;
    let settings = finetune::TrainSettings {
        epochs: cfg.finetune.optim.epochs,
        batch_size: cfg.finetune.optim.batch_size,
        grad_clip: cfg.finetune.optim.clip(),
    };
    let mut log = Logger::new(
        &dir,
        "finetune",
        "epoch\tsplit\tloss\tmain\tspec\talign\tmonitor\tlr",
    )?;
    let mut rng = Rng::seeded(cfg.seed).substream("finetune_train");
    let snapshot = cfg.to_text();
    for epoch in start_epoch..settings.epochs {
        let stats = finetune::train_epoch(&mut model, &mut opt, &items, &settings, epoch, &mut rng)?;
        let report = subset_report(&model, &ds.valid, &ds.modalities)?;
        // f32 round so the stored value and a resumed comparison agree exactly.
        let monitor = report.monitor() as f32 as f64;
        log.line(
            &format!(
                "epoch {} split train loss {:.6} main {:.6} spec {:.6} align {:.6} lr {:.6e}",
                epoch + 1,
                stats.loss,
                stats.main,
                stats.spec,
                stats.align,
                stats.lr
            ),
            &format!(
                "{}\ttrain\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t\t{:.9e}",
                epoch + 1,
                stats.loss,
                stats.main,
                stats.spec,
                stats.align,
                stats.lr
            ),
        )?;
        let metric_text: String = report
            .rows()
            .iter()
            .map(|(k, v)| format!("{k} {v:.4}"))
            .collect::<Vec<_>>()
            .join(" ");
        log.line(
            &format!("epoch {} split valid {metric_text}", epoch + 1),
            &format!("{}\tvalid\t\t\t\t\t{monitor:.9}\t", epoch + 1),
        )?;
        let mut tensors = model.state_tensors();
        tensors.push(("run.monitor".to_string(), Tensor::new(&[1], vec![monitor]).expect("scalar")));
        tensors.extend(opt.state_tensors());
        tensors.push(epoch_tensor(epoch + 1));
        let ck = Checkpoint::new(tensors, snapshot.clone());
        ck.save(&dir.join(format!("finetune_epoch_{}.pock", epoch + 1)))?;
        ck.save(&dir.join("finetune.pock"))?;
        if monitor > best_monitor {
            best_monitor = monitor;
            ck.save(&dir.join("finetune_best.pock"))?;
        }
    }
    println!(
        "finetune done: best monitor {:.4}, {}",
        best_monitor,
        dir.join("finetune_best.pock").display()
    );
    Ok(())
}

/// Rebuilds the fine-tuned model from its checkpoint against a prepared dataset.
fn restore_finetune(ck: &Checkpoint, ds: &PreparedDataset) -> Result<FinetuneModel> {
    let snap = RunConfig::parse(&ck.config)
        .map_err(|e| Error::Format(format!("finetune checkpoint config: {e}")))?;
    if snap.data.modalities != ds.modalities {
        return Err(Error::Config(format!(
            "checkpoint was trained on {:?}, dataset has {:?}",
            snap.data.modalities, ds.modalities
        )));
    }
    let task = task_from(ds)?;
    let ft_cfg = build_ft_cfg(&snap, task, ds.modalities.len());
    let enc_cfgs = build_enc_cfgs(&snap, ds);
    let mut rng = Rng::seeded(snap.seed);
    let encoders: Result<Vec<_>> = enc_cfgs
        .iter()
        .map(|c| crate::encoder::EncoderState::init(c.clone(), &mut rng))
        .collect();
    let mut model = FinetuneModel::init(ft_cfg, enc_cfgs, encoders?, &mut rng)?;
    model.load_state(&ck.finder())?;
    Ok(model)
}

fn cmd_evaluate(
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
    data: Option<PathBuf>,
    modalities: Option<String>,
    all_subsets: bool,
) -> Result<()> {
    let dir = out_dir(cfg);
    let ck_path = checkpoint.unwrap_or_else(|| dir.join("finetune_best.pock"));
    let ck = load_upstream(&ck_path, "finetune")?;
    let snap = RunConfig::parse(&ck.config)
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let manifest = data
        .or_else(|| cfg.data.manifest.clone())
        .unwrap_or_else(|| dir.join("data").join("manifest.tsv"));
    let ds = dataset::prepare(&manifest, &snap.data.modalities, snap.data.mains_hz)?;
    let model = restore_finetune(&ck, &ds)?;
    if all_subsets {
        let m = ds.modalities.len();
        let mut header = vec!["subset".to_string()];
        let first = subset_report(&model, &ds.test, &ds.modalities)?;
        header.extend(first.rows().iter().map(|(k, _)| k.to_string()));
        println!("{}", header.join("\t"));
        for bits in 1u32..(1 << m) {
            let subset: Vec<Modality> = ds
                .modalities
                .iter()
                .enumerate()
                .filter(|(i, _)| bits & (1 << i) != 0)
                .map(|(_, &m)| m)
                .collect();
            let report = subset_report(&model, &ds.test, &subset)?;
            let name: Vec<&str> = subset.iter().map(|m| m.name()).collect();
            println!("{}\t{}", name.join("+"), report.tsv_line());
        }
        return Ok(());
    }
    let subset = match &modalities {
        Some(list) => Modality::parse_set(list)?,
        None => ds.modalities.clone(),
    };
    for m in &subset {
        if !ds.modalities.contains(m) {
            return Err(Error::Usage(format!(
                "modality {m} was not part of training ({:?})",
                ds.modalities
            )));
        }
    }
    let report = subset_report(&model, &ds.test, &subset)?;
    let names: Vec<&str> = subset.iter().map(|m| m.name()).collect();
    println!("subset {}", names.join("+"));
    print!("{}", report.text());
    Ok(())
}
