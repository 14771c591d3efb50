//! Experiment flows: original training, one-shot and iterative
//! prune→retrain, soft-filter-pruning training, and scratch baselines.

use crate::arch::{build_architecture, Architecture};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{self, ModelCost};
use crate::nn;
use crate::optim::{self, OptimConfig};
use crate::prune::{self, LayerPolicy, Mask, PruneMethod, PruneSpec};
use crate::rng;
use crate::schedule::{self, Profile, Schedule, ScheduleKind};
use crate::store::ParamStore;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    Train,
    Oneshot,
    Iterative,
    Sfp,
    ScratchE,
    ScratchB,
}

impl std::fmt::Display for PipelineMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PipelineMode::Train => "train",
            PipelineMode::Oneshot => "oneshot",
            PipelineMode::Iterative => "iterative",
            PipelineMode::Sfp => "sfp",
            PipelineMode::ScratchE => "scratch_e",
            PipelineMode::ScratchB => "scratch_b",
        };
        f.write_str(s)
    }
}

/// Everything one pipeline run needs besides the datasets and the seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mode: PipelineMode,
    pub arch: String,
    pub classes: usize,
    pub profile: Profile,
    /// Original-training budget; the profile's step schedule is scaled to it.
    pub train_epochs: usize,
    pub retrain_kind: ScheduleKind,
    pub retrain_epochs: usize,
    pub warmup_frac: f64,
    /// Peak rate for CLR; None means the original schedule's largest rate.
    pub lr_max: Option<f64>,
    pub lr_min: f64,
    /// Choose the CLR peak by the rewinding heuristic instead (with a 0.01
    /// floor for sub-45-epoch budgets on the imagenet profile).
    pub lr_max_from_lrw: bool,
    pub prune_method: PruneMethod,
    pub prune_ratio: f64,
    pub layer_policy: LayerPolicy,
    pub rounds: usize,
    /// Per-epoch soft-pruning rate for SFP mode.
    pub sfp_rate: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    pub reset_momentum: bool,
    pub best_val: bool,
    pub augment: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mode: PipelineMode::Oneshot,
            arch: "resnet20".into(),
            classes: 10,
            profile: Profile::Cifar,
            train_epochs: 160,
            retrain_kind: ScheduleKind::Clr,
            retrain_epochs: 40,
            warmup_frac: 0.1,
            lr_max: None,
            lr_min: schedule::CLR_ALPHA_MIN_DEFAULT,
            lr_max_from_lrw: false,
            prune_method: PruneMethod::L1Filter,
            prune_ratio: 0.3,
            layer_policy: LayerPolicy::UniformPerBlock,
            rounds: 1,
            sfp_rate: 0.3,
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 1e-4,
            nesterov: true,
            reset_momentum: true,
            best_val: false,
            augment: false,
        }
    }
}

impl PipelineConfig {
    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            nesterov: self.nesterov,
        }
    }

    pub fn prune_spec(&self) -> PruneSpec {
        PruneSpec {
            method: self.prune_method,
            ratio: self.prune_ratio,
            policy: self.layer_policy.clone(),
            seed: 0, // filled per run from the run seed
            rounds: self.rounds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optim().validate()?;
        if self.mode == PipelineMode::Iterative && self.rounds < 2 {
            return Err(Error::Config("iterative pruning needs rounds >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.prune_ratio) {
            return Err(Error::Config(format!(
                "prune_ratio {} not in [0, 1)",
                self.prune_ratio
            )));
        }
        if !(0.0..1.0).contains(&self.sfp_rate) {
            return Err(Error::Config(format!("sfp_rate {} not in [0, 1)", self.sfp_rate)));
        }
        Ok(())
    }
}

/// Datasets for one run.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub test_acc: f64,
    pub params: usize,
    pub flops: usize,
    pub sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub epochs: Vec<EpochRow>,
    #[serde(rename = "final")]
    pub final_metrics: FinalMetrics,
    pub wall_seconds: f64,
}

/// Top-1 accuracy of the store on a dataset in eval mode.
pub fn eval_accuracy(
    store: &ParamStore<f32>,
    arch: &Architecture,
    ds: &Dataset,
    batch_size: usize,
) -> Result<f64> {
    metrics::accuracy(store, arch, data::eval_batches(ds, batch_size))
}

/// One training phase under a schedule. Returns one row per epoch; the
/// observer runs after each epoch with the row and the current store.
#[allow(clippy::too_many_arguments)]
pub fn train_phase(
    store: &mut ParamStore<f32>,
    arch: &Architecture,
    sched: &Schedule,
    train: &Dataset,
    val: Option<&Dataset>,
    optim_cfg: &OptimConfig,
    seed: u64,
    phase: &str,
    augment: bool,
    sfp_rate: Option<f64>,
    mut observe: impl FnMut(&EpochRow, &ParamStore<f32>) -> Result<()>,
) -> Result<Vec<EpochRow>> {
    let spe = data::steps_per_epoch(train.n, optim_cfg.batch_size);
    if sched.steps_per_epoch != spe {
        return Err(Error::Usage(format!(
            "schedule built for {} steps/epoch, data yields {spe}",
            sched.steps_per_epoch
        )));
    }
    let data_seed = rng::derive(seed, &format!("phase/{phase}"));
    let mut rows = Vec::with_capacity(sched.budget_epochs);
    for epoch in 0..sched.budget_epochs {
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for (bi, batch) in data::batches(train, optim_cfg.batch_size, data_seed, epoch, augment)?
            .enumerate()
        {
            let lr = sched.lr_at(epoch * spe + bi);
            let (logits, cache) = nn::forward_train(store, arch, &batch.images)?;
            let (loss, grad) = nn::cross_entropy(&logits, &batch.labels)?;
            nn::backward(store, arch, &cache, &grad)?;
            optim::step(store, optim_cfg, lr)?;
            let n = batch.labels.len();
            loss_sum += loss as f64 * n as f64;
            for (row, &label) in logits.data().chunks(arch.classes).zip(&batch.labels) {
                let mut best = 0usize;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                if best == label as usize {
                    correct += 1;
                }
            }
            seen += n;
        }
        if let Some(rate) = sfp_rate {
            prune::sfp_epoch_hook(store, arch, rate)?;
        }
        let val_acc = match val {
            Some(v) => Some(eval_accuracy(store, arch, v, optim_cfg.batch_size)?),
            None => None,
        };
        let row = EpochRow {
            epoch,
            lr: sched.lr_at_epoch(epoch),
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            val_acc,
        };
        observe(&row, store)?;
        rows.push(row);
    }
    Ok(rows)
}

fn original_schedule(cfg: &PipelineConfig, spe: usize) -> Result<Schedule> {
    schedule::build_original_scaled(cfg.profile, cfg.train_epochs, spe)
}

/// Resolve the retraining schedule against the original one.
pub fn retrain_schedule(cfg: &PipelineConfig, original: &Schedule) -> Result<Schedule> {
    let t = cfg.retrain_epochs;
    match cfg.retrain_kind {
        ScheduleKind::Step => Ok(original.clone()),
        ScheduleKind::Ft => schedule::build_ft(original, t),
        ScheduleKind::Lrw => schedule::build_lrw(original, t),
        ScheduleKind::Slr => schedule::build_slr(original, t, cfg.warmup_frac),
        ScheduleKind::Clr => {
            let lr_max = match (cfg.lr_max, cfg.lr_max_from_lrw) {
                (Some(v), _) => Some(v),
                (None, true) => {
                    let mut h = schedule::restart_lr_heuristic(original, t.min(original.budget_epochs))?;
                    if cfg.profile == Profile::Imagenet && t < 45 {
                        h = h.max(0.01);
                    }
                    Some(h)
                }
                (None, false) => None,
            };
            schedule::build_clr(original, t, cfg.warmup_frac, lr_max, cfg.lr_min)
        }
    }
}

fn dense_final(
    store: &ParamStore<f32>,
    arch: &Architecture,
    ctx: &RunContext,
    batch_size: usize,
) -> Result<FinalMetrics> {
    let cost = metrics::count_cost(arch)?;
    Ok(FinalMetrics {
        test_acc: eval_accuracy(store, arch, &ctx.test, batch_size)?,
        params: cost.params,
        flops: cost.flops,
        sparsity: store.sparsity(),
    })
}

/// Final metrics after a structured prune: cost of the shrunk network.
fn structured_final(
    store: &ParamStore<f32>,
    arch: &Architecture,
    mask: &prune::FilterMask,
    ctx: &RunContext,
    batch_size: usize,
) -> Result<FinalMetrics> {
    let (_, small_arch) = prune::shrink_structured(store, arch, mask)?;
    let cost = metrics::count_cost(&small_arch)?;
    Ok(FinalMetrics {
        test_acc: eval_accuracy(store, arch, &ctx.test, batch_size)?,
        params: cost.params,
        flops: cost.flops,
        sparsity: store.sparsity(),
    })
}

fn finish(seed: u64, rows: Vec<EpochRow>, fin: FinalMetrics, started: Instant) -> RunRecord {
    RunRecord {
        config_hash: String::new(),
        seed,
        epochs: rows,
        final_metrics: fin,
        wall_seconds: started.elapsed().as_secs_f64(),
    }
}

/// Train the unpruned network under the (scaled) original schedule.
pub fn train_original(
    cfg: &PipelineConfig,
    ctx: &RunContext,
    seed: u64,
) -> Result<(ParamStore<f32>, RunRecord)> {
    cfg.validate()?;
    let started = Instant::now();
    let arch = build_architecture(&cfg.arch, cfg.classes)?;
    let mut store = ParamStore::<f32>::init(&arch, seed)?;
    let rows = if cfg.train_epochs == 0 {
        Vec::new()
    } else {
        let spe = data::steps_per_epoch(ctx.train.n, cfg.batch_size);
        let sched = original_schedule(cfg, spe)?;
        train_phase(
            &mut store,
            &arch,
            &sched,
            &ctx.train,
            ctx.val.as_ref(),
            &cfg.optim(),
            seed,
            "train",
            cfg.augment,
            None,
            |_, _| Ok(()),
        )?
    };
    let fin = dense_final(&store, &arch, ctx, cfg.batch_size)?;
    Ok((store, finish(seed, rows, fin, started)))
}

fn taylor_batches(
    cfg: &PipelineConfig,
    ctx: &RunContext,
    seed: u64,
) -> Result<Vec<(Tensor<f32>, Vec<u16>)>> {
    let mut out = Vec::new();
    for b in data::batches(
        &ctx.train,
        cfg.batch_size,
        rng::derive(seed, "prune/taylor"),
        0,
        false,
    )?
    .take(2)
    {
        out.push((b.images, b.labels));
    }
    Ok(out)
}

struct PruneOutcome {
    mask: Mask,
    warnings: Vec<String>,
}

fn prune_once(
    cfg: &PipelineConfig,
    ctx: &RunContext,
    store: &mut ParamStore<f32>,
    arch: &Architecture,
    ratio: f64,
    seed: u64,
) -> Result<PruneOutcome> {
    let mut spec = cfg.prune_spec();
    spec.ratio = ratio;
    spec.seed = rng::derive(seed, "prune");
    let batches = if cfg.prune_method == PruneMethod::TaylorFo {
        taylor_batches(cfg, ctx, seed)?
    } else {
        Vec::new()
    };
    let (mask, warnings) = prune::score_and_mask(store, arch, &spec, &batches)?;
    prune::apply_mask(store, arch, &mask)?;
    Ok(PruneOutcome { mask, warnings })
}

/// Prune once at the target ratio, then retrain under the chosen schedule.
/// With `pretrained`, the training phase is skipped.
pub fn oneshot(
    cfg: &PipelineConfig,
    ctx: &RunContext,
    seed: u64,
    pretrained: Option<ParamStore<f32>>,
) -> Result<(ParamStore<f32>, RunRecord)> {
    cfg.validate()?;
    let started = Instant::now();
    let arch = build_architecture(&cfg.arch, cfg.classes)?;
    let mut store = match pretrained {
        Some(s) => {
            if s.arch_id != arch.id {
                return Err(Error::Usage(format!(
                    "pretrained store is for '{}', config wants '{}'",
                    s.arch_id, arch.id
                )));
            }
            s
        }
        None => train_original(cfg, ctx, seed)?.0,
    };
    let outcome = prune_once(cfg, ctx, &mut store, &arch, cfg.prune_ratio, seed)?;
    if cfg.reset_momentum {
        optim::reset_state(&mut store);
    }
    let spe = data::steps_per_epoch(ctx.train.n, cfg.batch_size);
    let original = original_schedule(cfg, spe)?;
    let sched = retrain_schedule(cfg, &original)?;
    let mut best: Option<(f64, ParamStore<f32>)> = None;
    let track_best = cfg.best_val && ctx.val.is_some();
    let rows = train_phase(
        &mut store,
        &arch,
        &sched,
        &ctx.train,
        ctx.val.as_ref(),
        &cfg.optim(),
        seed,
        "retrain",
        cfg.augment,
        None,
        |row, st| {
            if track_best {
                let acc = row.val_acc.unwrap_or(0.0);
                if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                    best = Some((acc, st.clone()));
                }
            }
            Ok(())
        },
    )?;
    let report_store = match best {
        Some((_, s)) => s,
        None => store.clone(),
    };
    let fin = match &outcome.mask {
        Mask::Filter(fm) => structured_final(&report_store, &arch, fm, ctx, cfg.batch_size)?,
        Mask::Weight(_) => dense_final(&report_store, &arch, ctx, cfg.batch_size)?,
    };
    for w in &outcome.warnings {
        eprintln!("prune warning: {w}");
    }
    Ok((store, finish(seed, rows, fin, started)))
}

/// Alternate prune and retrain over `rounds`, interpolating geometrically
/// toward the final ratio.
pub fn iterative(
    cfg: &PipelineConfig,
    ctx: &RunContext,
    seed: u64,
) -> Result<(ParamStore<f32>, RunRecord)> {
    cfg.validate()?;
    if cfg.rounds < 2 {
        return Err(Error::Config("iterative pruning needs rounds >= 2".into()));
    }
    let started = Instant::now();
    let arch = build_architecture(&cfg.arch, cfg.classes)?;
    let (mut store, _) = train_original(cfg, ctx, seed)?;
    let spe = data::steps_per_epoch(ctx.train.n, cfg.batch_size);
    let original = original_schedule(cfg, spe)?;
    let sched = retrain_schedule(cfg, &original)?;
    let mut rows: Vec<EpochRow> = Vec::new();
    let mut last_mask = None;
    for round in 1..=cfg.rounds {
        // keep fraction follows (1-r)^(round/rounds)
        let keep = (1.0 - cfg.prune_ratio).powf(round as f64 / cfg.rounds as f64);
        let outcome = prune_once(cfg, ctx, &mut store, &arch, 1.0 - keep, seed)?;
        last_mask = Some(outcome.mask);
        if cfg.reset_momentum {
            optim::reset_state(&mut store);
        }
        let offset = rows.len();
        let round_rows = train_phase(
            &mut store,
            &arch,
            &sched,
            &ctx.train,
            ctx.val.as_ref(),
            &cfg.optim(),
            seed,
            &format!("retrain/round{round}"),
            cfg.augment,
            None,
            |_, _| Ok(()),
        )?;
        rows.extend(round_rows.into_iter().map(|mut r| {
            r.epoch += offset;
            r
        }));
    }
    let fin = match &last_mask {
        Some(Mask::Filter(fm)) => structured_final(&store, &arch, fm, ctx, cfg.batch_size)?,
        _ => dense_final(&store, &arch, ctx, cfg.batch_size)?,
    };
    Ok((store, finish(seed, rows, fin, started)))
}

/// Train with per-epoch soft filter pruning, hard-prune the still-zero
/// filters at the end, then optionally retrain.
pub fn sfp_train(
    cfg: &PipelineConfig,
    ctx: &RunContext,
    seed: u64,
) -> Result<(ParamStore<f32>, RunRecord)> {
    cfg.validate()?;
    let started = Instant::now();
    let arch = build_architecture(&cfg.arch, cfg.classes)?;
    let mut store = ParamStore::<f32>::init(&arch, seed)?;
    let spe = data::steps_per_epoch(ctx.train.n, cfg.batch_size);
    let sched = original_schedule(cfg, spe)?;
    let mut rows = train_phase(
        &mut store,
        &arch,
        &sched,
        &ctx.train,
        ctx.val.as_ref(),
        &cfg.optim(),
        seed,
        "train",
        cfg.augment,
        Some(cfg.sfp_rate),
        |_, _| Ok(()),
    )?;
    let mask = prune::sfp_final_mask(&store, &arch, cfg.sfp_rate)?;
    prune::apply_mask(&mut store, &arch, &Mask::Filter(mask.clone()))?;
    if cfg.retrain_epochs > 0 {
        if cfg.reset_momentum {
            optim::reset_state(&mut store);
        }
        let retrain = retrain_schedule(cfg, &sched)?;
        let offset = rows.len();
        let extra = train_phase(
            &mut store,
            &arch,
            &retrain,
            &ctx.train,
            ctx.val.as_ref(),
            &cfg.optim(),
            seed,
            "retrain",
            cfg.augment,
            None,
            |_, _| Ok(()),
        )?;
        rows.extend(extra.into_iter().map(|mut r| {
            r.epoch += offset;
            r
        }));
    }
    let fin = dense_final(&store, &arch, ctx, cfg.batch_size)?;
    Ok((store, finish(seed, rows, fin, started)))
}

/// The structure a prune spec produces, independent of training: keep counts
/// at per-block policies do not depend on scores, so the shrunk architecture
/// can be derived from seed-driven scores on a fresh store.
pub fn pruned_architecture(cfg: &PipelineConfig, seed: u64) -> Result<(Architecture, ModelCost, ModelCost)> {
    let arch = build_architecture(&cfg.arch, cfg.classes)?;
    let full_cost = metrics::count_cost(&arch)?;
    if !cfg.prune_method.is_structured() {
        return Err(Error::Config(
            "scratch baselines need a structured prune method".into(),
        ));
    }
    let mut fresh = ParamStore::<f32>::init(&arch, seed)?;
    let mut spec = cfg.prune_spec();
    spec.seed = rng::derive(seed, "prune");
    spec.method = PruneMethod::RandomFilter;
    let (mask, _) = prune::score_and_mask(&fresh, &arch, &spec, &[])?;
    let Mask::Filter(fm) = &mask else { unreachable!() };
    prune::apply_mask(&mut fresh, &arch, &mask)?;
    let (_, small) = prune::shrink_structured(&fresh, &arch, fm)?;
    let small_cost = metrics::count_cost(&small)?;
    Ok((small, full_cost, small_cost))
}

/// Epoch budget for a scratch baseline. Scratch-E trains for original +
/// retraining epochs; Scratch-B scales that by the FLOPs ratio.
pub fn scratch_epochs(
    mode: PipelineMode,
    train_epochs: usize,
    retrain_epochs: usize,
    unpruned: &ModelCost,
    pruned: &ModelCost,
) -> Result<usize> {
    let epochs_e = train_epochs + retrain_epochs;
    match mode {
        PipelineMode::ScratchE => Ok(epochs_e),
        PipelineMode::ScratchB => {
            if pruned.flops == 0 {
                return Err(Error::Config("pruned network has zero FLOPs".into()));
            }
            Ok((epochs_e as f64 * unpruned.flops as f64 / pruned.flops as f64).round() as usize)
        }
        other => Err(Error::Usage(format!("{other} is not a scratch mode"))),
    }
}

/// Train the pruned architecture from scratch with the stretched original
/// schedule (Scratch-E: same epochs; Scratch-B: same compute).
pub fn scratch_baseline(
    cfg: &PipelineConfig,
    ctx: &RunContext,
    seed: u64,
) -> Result<(ParamStore<f32>, RunRecord)> {
    cfg.validate()?;
    let started = Instant::now();
    let (small_arch, full_cost, small_cost) = pruned_architecture(cfg, seed)?;
    let epochs = scratch_epochs(
        cfg.mode,
        cfg.train_epochs,
        cfg.retrain_epochs,
        &full_cost,
        &small_cost,
    )?;
    let mut store = ParamStore::<f32>::init(&small_arch, seed)?;
    let spe = data::steps_per_epoch(ctx.train.n, cfg.batch_size);
    let sched = schedule::build_original_scaled(cfg.profile, epochs, spe)?;
    let rows = train_phase(
        &mut store,
        &small_arch,
        &sched,
        &ctx.train,
        ctx.val.as_ref(),
        &cfg.optim(),
        seed,
        "scratch",
        cfg.augment,
        None,
        |_, _| Ok(()),
    )?;
    let fin = FinalMetrics {
        test_acc: eval_accuracy(&store, &small_arch, &ctx.test, cfg.batch_size)?,
        params: small_cost.params,
        flops: small_cost.flops,
        sparsity: 0.0,
    };
    Ok((store, finish(seed, rows, fin, started)))
}

/// Dispatch one run by mode.
pub fn run_pipeline(cfg: &PipelineConfig, ctx: &RunContext, seed: u64) -> Result<RunRecord> {
    match cfg.mode {
        PipelineMode::Train => train_original(cfg, ctx, seed).map(|(_, r)| r),
        PipelineMode::Oneshot => oneshot(cfg, ctx, seed, None).map(|(_, r)| r),
        PipelineMode::Iterative => iterative(cfg, ctx, seed).map(|(_, r)| r),
        PipelineMode::Sfp => sfp_train(cfg, ctx, seed).map(|(_, r)| r),
        PipelineMode::ScratchE | PipelineMode::ScratchB => {
            scratch_baseline(cfg, ctx, seed).map(|(_, r)| r)
        }
    }
}
