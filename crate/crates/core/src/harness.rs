//! Experiment harness: flat JSON configs, seeded repeats, aggregation
//! (mean ± sample std) and flat-file persistence.
//!
//! Unknown config keys are hard errors: a silently ignored typo would turn a
//! schedule comparison into a lie.

use crate::data::{self, SplitSpec};
use crate::error::{Error, Result};
use crate::pipeline::{self, PipelineConfig, PipelineMode, RunRecord};
use crate::rng;
use crate::schedule::{Profile, ScheduleKind};
use crate::prune::{LayerPolicy, PruneMethod};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

/// Flat experiment description. Every field of [`PipelineConfig`] plus the
/// harness-level ones (dataset selection, repeats, output, tags).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: PipelineMode,
    /// "cifar10", "two-spirals", "gaussian-blobs" or "tiny-images".
    pub dataset: String,
    /// Subset of the training set to use; 0 means all of it.
    #[serde(default)]
    pub dataset_size: usize,
    /// Synthetic datasets: how many records to generate.
    #[serde(default = "default_synthetic_n")]
    pub synthetic_train: usize,
    #[serde(default = "default_synthetic_test")]
    pub synthetic_test: usize,
    /// Fraction of the training set held out for validation; 0 disables.
    #[serde(default)]
    pub val_frac: f64,
    pub arch: String,
    #[serde(default = "default_classes")]
    pub classes: usize,
    pub profile: Profile,
    pub train_epochs: usize,
    #[serde(default = "default_retrain_kind")]
    pub retrain_kind: ScheduleKind,
    #[serde(default)]
    pub retrain_epochs: usize,
    #[serde(default = "default_warmup_frac")]
    pub warmup_frac: f64,
    #[serde(default)]
    pub lr_max: Option<f64>,
    #[serde(default = "default_lr_min")]
    pub lr_min: f64,
    #[serde(default)]
    pub lr_max_from_lrw: bool,
    #[serde(default = "default_prune_method")]
    pub prune_method: PruneMethod,
    #[serde(default)]
    pub prune_ratio: f64,
    #[serde(default = "default_layer_policy")]
    pub layer_policy: LayerPolicy,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default)]
    pub sfp_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_true")]
    pub nesterov: bool,
    #[serde(default = "default_true")]
    pub reset_momentum: bool,
    #[serde(default)]
    pub best_val: bool,
    #[serde(default)]
    pub augment: bool,
    pub seed: u64,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub tags: Vec<String>,
}

fn default_synthetic_n() -> usize {
    4000
}
fn default_synthetic_test() -> usize {
    1000
}
fn default_classes() -> usize {
    10
}
fn default_retrain_kind() -> ScheduleKind {
    ScheduleKind::Clr
}
fn default_warmup_frac() -> f64 {
    0.1
}
fn default_lr_min() -> f64 {
    crate::schedule::CLR_ALPHA_MIN_DEFAULT
}
fn default_prune_method() -> PruneMethod {
    PruneMethod::L1Filter
}
fn default_layer_policy() -> LayerPolicy {
    LayerPolicy::UniformPerBlock
}
fn default_rounds() -> usize {
    1
}
fn default_batch_size() -> usize {
    64
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_true() -> bool {
    true
}
fn default_repeats() -> usize {
    3
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be >= 1".into()));
        }
        if self.val_frac < 0.0 || self.val_frac >= 1.0 {
            return Err(Error::Config(format!("val_frac {} not in [0, 1)", self.val_frac)));
        }
        self.pipeline().validate()
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            mode: self.mode,
            arch: self.arch.clone(),
            classes: self.classes,
            profile: self.profile,
            train_epochs: self.train_epochs,
            retrain_kind: self.retrain_kind,
            retrain_epochs: self.retrain_epochs,
            warmup_frac: self.warmup_frac,
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            lr_max_from_lrw: self.lr_max_from_lrw,
            prune_method: self.prune_method,
            prune_ratio: self.prune_ratio,
            layer_policy: self.layer_policy.clone(),
            rounds: self.rounds,
            sfp_rate: self.sfp_rate,
            batch_size: self.batch_size,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            nesterov: self.nesterov,
            reset_momentum: self.reset_momentum,
            best_val: self.best_val,
            augment: self.augment,
        }
    }

    /// Canonical-form hash: serialize, round-trip through a sorted-key JSON
    /// value, and digest. Any field change changes the hash.
    pub fn config_hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canon = serde_json::to_string(&value).expect("canonical form");
        let mut h = Sha256::new();
        h.update(canon.as_bytes());
        let out = h.finalize();
        out.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Load the datasets a config names and build the per-repeat run context.
pub fn load_context(cfg: &ExperimentConfig, data_dir: Option<&Path>, seed: u64) -> Result<pipeline::RunContext> {
    let (mut train, test) = match cfg.dataset.as_str() {
        "cifar10" => {
            let dir = data_dir
                .map(|p| p.to_path_buf())
                .or_else(|| std::env::var(data::DATA_DIR_ENV).ok().map(Into::into))
                .ok_or_else(|| {
                    Error::Config(format!(
                        "cifar10 needs --data-dir or {}",
                        data::DATA_DIR_ENV
                    ))
                })?;
            data::load_cifar10(&dir)?
        }
        name => {
            let kind = data::SyntheticKind::parse(name)?;
            let train = data::make_synthetic(kind, cfg.synthetic_train, rng::derive(cfg.seed, "dataset/train"))?;
            let test = data::make_synthetic(kind, cfg.synthetic_test, rng::derive(cfg.seed, "dataset/test"))?;
            (train, test)
        }
    };
    if cfg.dataset_size > 0 && cfg.dataset_size < train.n {
        train = train.subset(cfg.dataset_size, rng::derive(cfg.seed, "dataset/subset"))?;
    }
    let (train, val) = if cfg.val_frac > 0.0 {
        let (t, v) = train.split(SplitSpec {
            train_frac: 1.0 - cfg.val_frac,
            seed: rng::derive(seed, "split"),
        })?;
        (t, Some(v))
    } else {
        (train, None)
    };
    Ok(pipeline::RunContext { train, val, test })
}

/// Aggregate statistics over repeats: mean and sample std (n−1 denominator);
/// std is absent for a single record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: Option<f64>,
    pub n: usize,
}

pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(Error::Data("cannot aggregate zero records".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = (n > 1).then(|| {
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        (ss / (n - 1) as f64).sqrt()
    });
    Ok(Aggregate { mean, std, n })
}

/// Columns of the aggregate CSV, one row per experiment config.
pub const AGGREGATE_HEADER: &str =
    "method,schedule,budget_epochs,ratio,params_down_pct,flops_down_pct,acc_mean,acc_std,n,config_hash";

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub method: String,
    pub schedule: String,
    pub budget_epochs: usize,
    pub ratio: f64,
    pub params_down_pct: f64,
    pub flops_down_pct: f64,
    pub acc_mean: f64,
    pub acc_std: Option<f64>,
    pub n: usize,
    pub config_hash: String,
}

impl AggregateRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.method,
            self.schedule,
            self.budget_epochs,
            self.ratio,
            self.params_down_pct,
            self.flops_down_pct,
            self.acc_mean,
            self.acc_std.map(|s| s.to_string()).unwrap_or_default(),
            self.n,
            self.config_hash
        )
    }

    pub fn parse_csv_line(line: &str) -> Result<AggregateRow> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(Error::Data(format!("aggregate row needs 10 fields: '{line}'")));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::Data(format!("bad number '{s}' in '{line}'")))
        };
        Ok(AggregateRow {
            method: f[0].into(),
            schedule: f[1].into(),
            budget_epochs: f[2]
                .parse()
                .map_err(|_| Error::Data(format!("bad epoch count '{}'", f[2])))?,
            ratio: num(f[3])?,
            params_down_pct: num(f[4])?,
            flops_down_pct: num(f[5])?,
            acc_mean: num(f[6])?,
            acc_std: if f[7].is_empty() { None } else { Some(num(f[7])?) },
            n: f[8]
                .parse()
                .map_err(|_| Error::Data(format!("bad n '{}'", f[8])))?,
            config_hash: f[9].into(),
        })
    }
}

/// Everything `run` produced for one config.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<RunRecord>,
    pub row: AggregateRow,
}

/// Execute `repeats` seeded runs of the config (seeds base+0..repeats−1, in
/// parallel), aggregate the final test accuracies, and persist one RunRecord
/// JSON per repeat plus an aggregate CSV row under `out_dir`.
///
/// On partial failure the completed records are still written and the first
/// error is returned.
pub fn run(cfg: &ExperimentConfig, data_dir: Option<&Path>, out_dir: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    let hash = cfg.config_hash();
    let pcfg = cfg.pipeline();
    let results: Vec<(u64, Result<RunRecord>)> = (0..cfg.repeats)
        .into_par_iter()
        .map(|i| {
            let seed = cfg.seed + i as u64;
            let rec = load_context(cfg, data_dir, seed)
                .and_then(|ctx| pipeline::run_pipeline(&pcfg, &ctx, seed));
            (seed, rec)
        })
        .collect();

    fs::create_dir_all(out_dir)?;
    let mut records = Vec::new();
    let mut first_err = None;
    for (seed, result) in results {
        match result {
            Ok(mut rec) => {
                rec.config_hash = hash.clone();
                let path = out_dir.join(format!("run_{hash}_{seed}.json"));
                fs::write(&path, serde_json::to_string_pretty(&rec)?)?;
                records.push(rec);
            }
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }

    let accs: Vec<f64> = records.iter().map(|r| r.final_metrics.test_acc).collect();
    let agg = aggregate(&accs)?;
    let full_cost = crate::metrics::count_cost(&crate::arch::build_architecture(
        &cfg.arch,
        cfg.classes,
    )?)?;
    let params_down = records
        .iter()
        .map(|r| (full_cost.params as f64 - r.final_metrics.params as f64) / full_cost.params as f64 * 100.0)
        .sum::<f64>()
        / records.len() as f64;
    let flops_down = records
        .iter()
        .map(|r| (full_cost.flops as f64 - r.final_metrics.flops as f64) / full_cost.flops as f64 * 100.0)
        .sum::<f64>()
        / records.len() as f64;
    let row = AggregateRow {
        method: pcfg.prune_method.to_string(),
        schedule: match cfg.mode {
            PipelineMode::Train => "original".into(),
            PipelineMode::ScratchE => "scratch_e".into(),
            PipelineMode::ScratchB => "scratch_b".into(),
            _ => pcfg.retrain_kind.to_string(),
        },
        budget_epochs: match cfg.mode {
            PipelineMode::Train | PipelineMode::ScratchE | PipelineMode::ScratchB => cfg.train_epochs,
            _ => cfg.retrain_epochs,
        },
        ratio: cfg.prune_ratio,
        params_down_pct: params_down,
        flops_down_pct: flops_down,
        acc_mean: agg.mean,
        acc_std: agg.std,
        n: agg.n,
        config_hash: hash,
    };
    append_aggregate_row(&out_dir.join("aggregate.csv"), &row)?;
    Ok(RunOutput { records, row })
}

pub fn append_aggregate_row(path: &Path, row: &AggregateRow) -> Result<()> {
    let mut text = if path.exists() {
        fs::read_to_string(path)?
    } else {
        format!("{AGGREGATE_HEADER}\n")
    };
    text.push_str(&row.to_csv_line());
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_aggregate_csv(path: &Path) -> Result<Vec<AggregateRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == AGGREGATE_HEADER => {}
        other => {
            return Err(Error::Data(format!(
                "bad aggregate header: {other:?}"
            )))
        }
    }
    lines.map(AggregateRow::parse_csv_line).collect()
}
