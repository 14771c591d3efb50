//! prunelab command line: training, pruning, retraining, full experiment
//! pipelines, schedule tables, cost reports and figure emission.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use prunelab::arch::build_architecture;
use prunelab::harness::{self, ExperimentConfig};
use prunelab::pipeline::{self, PipelineConfig, RunContext};
use prunelab::prune::{LayerPolicy, Mask, PruneMethod, PruneSpec};
use prunelab::schedule::{self, Profile, Schedule, ScheduleKind};
use prunelab::{checkpoint, data, metrics, plot, prune, rng};
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Parser)]
#[command(name = "prunelab", version, about = "Pruning and retraining laboratory")]
struct Cli {
    /// Base RNG seed.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Directory holding dataset files (else $PRUNELAB_DATA_DIR).
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Output directory for records, checkpoints and figures.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct DatasetArgs {
    /// cifar10 | two-spirals | gaussian-blobs | tiny-images
    #[arg(long, default_value = "tiny-images")]
    dataset: String,
    /// Records to generate for synthetic datasets.
    #[arg(long, default_value_t = 4000)]
    synthetic_train: usize,
    #[arg(long, default_value_t = 1000)]
    synthetic_test: usize,
    /// Use only this many training records (0 = all).
    #[arg(long, default_value_t = 0)]
    subset: usize,
    /// Validation fraction held out of the training set (0 disables).
    #[arg(long, default_value_t = 0.0)]
    val_frac: f64,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train an unpruned network and write a checkpoint.
    Train {
        #[arg(long, default_value = "resnet20")]
        arch: String,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value = "cifar")]
        profile: String,
        #[arg(long, default_value_t = 40)]
        epochs: usize,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long)]
        augment: bool,
        #[command(flatten)]
        data: DatasetArgs,
        /// Checkpoint path to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score and mask a trained checkpoint.
    Prune {
        #[arg(long, default_value = "l1_filter")]
        method: String,
        #[arg(long, default_value_t = 0.3)]
        ratio: f64,
        /// uniform_per_block | global
        #[arg(long, default_value = "uniform_per_block")]
        policy: String,
        #[arg(long, value_name = "CKPT")]
        r#in: PathBuf,
        #[arg(long, value_name = "CKPT")]
        out: PathBuf,
        /// Optional JSON report (keep counts, sparsity, cost before/after).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Dataset for Taylor scoring.
        #[command(flatten)]
        data: DatasetArgs,
    },
    /// Retrain a pruned checkpoint under a schedule.
    Retrain {
        #[arg(long, value_name = "CKPT")]
        r#in: PathBuf,
        #[arg(long, value_name = "CKPT")]
        out: PathBuf,
        /// ft | lrw | slr | clr
        #[arg(long, default_value = "clr")]
        schedule: String,
        #[arg(long, default_value_t = 20)]
        budget: usize,
        #[arg(long, default_value = "cifar")]
        profile: String,
        /// Epoch budget the original training used (for rewinding).
        #[arg(long, default_value_t = 40)]
        train_epochs: usize,
        #[arg(long, default_value_t = 0.1)]
        warmup_frac: f64,
        #[arg(long)]
        lr_max: Option<f64>,
        #[arg(long, default_value_t = 1e-5)]
        lr_min: f64,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long)]
        augment: bool,
        #[command(flatten)]
        data: DatasetArgs,
        /// Optional RunRecord JSON path.
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Run a full experiment config (JSON) with seeded repeats.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
    },
    /// Emit a schedule as CSV rows (epoch, step, lr).
    Schedule {
        /// step | ft | lrw | slr | clr
        #[arg(long, default_value = "clr")]
        kind: String,
        #[arg(long, default_value = "cifar")]
        profile: String,
        #[arg(long, default_value_t = 72)]
        epochs: usize,
        #[arg(long, default_value_t = 1)]
        steps_per_epoch: usize,
        #[arg(long, default_value_t = 0.1)]
        warmup_frac: f64,
        #[arg(long)]
        lr_max: Option<f64>,
        #[arg(long, default_value_t = 1e-5)]
        lr_min: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Model cost report as JSON.
    Report {
        /// Architecture name, or use --in for a checkpoint.
        #[arg(long)]
        arch: Option<String>,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, value_name = "CKPT")]
        r#in: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render figures from schedule or aggregate CSVs.
    Plot {
        /// schedule | acc_vs_budget | acc_vs_sparsity
        #[arg(long)]
        kind: String,
        /// Input CSV files.
        #[arg(long, required = true, num_args = 1..)]
        r#in: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_datasets(args: &DatasetArgs, cli_seed: u64, data_dir: Option<&Path>) -> Result<RunContext> {
    let (mut train, test) = match args.dataset.as_str() {
        "cifar10" => {
            let dir = data_dir
                .map(Path::to_path_buf)
                .or_else(|| std::env::var(data::DATA_DIR_ENV).ok().map(Into::into))
                .ok_or_else(|| anyhow!("cifar10 needs --data-dir or ${}", data::DATA_DIR_ENV))?;
            data::load_cifar10(&dir)?
        }
        name => {
            let kind = data::SyntheticKind::parse(name)?;
            (
                data::make_synthetic(kind, args.synthetic_train, rng::derive(cli_seed, "dataset/train"))?,
                data::make_synthetic(kind, args.synthetic_test, rng::derive(cli_seed, "dataset/test"))?,
            )
        }
    };
    if args.subset > 0 && args.subset < train.n {
        train = train.subset(args.subset, rng::derive(cli_seed, "dataset/subset"))?;
    }
    let (train, val) = if args.val_frac > 0.0 {
        let (t, v) = train.split(data::SplitSpec {
            train_frac: 1.0 - args.val_frac,
            seed: rng::derive(cli_seed, "split"),
        })?;
        (t, Some(v))
    } else {
        (train, None)
    };
    Ok(RunContext { train, val, test })
}

fn parse_policy(s: &str) -> Result<LayerPolicy> {
    match s {
        "uniform_per_block" => Ok(LayerPolicy::UniformPerBlock),
        "global" => Ok(LayerPolicy::Global),
        other => bail!("unknown layer policy '{other}' (use uniform_per_block or global)"),
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .ok();
    }
    std::fs::create_dir_all(&cli.out_dir).ok();

    match &cli.cmd {
        Cmd::Train {
            arch,
            classes,
            profile,
            epochs,
            batch_size,
            augment,
            data,
            out,
        } => {
            let ctx = load_datasets(data, cli.seed, cli.data_dir.as_deref())?;
            let cfg = PipelineConfig {
                mode: pipeline::PipelineMode::Train,
                arch: arch.clone(),
                classes: *classes,
                profile: Profile::from_str(profile)?,
                train_epochs: *epochs,
                batch_size: *batch_size,
                augment: *augment,
                ..PipelineConfig::default()
            };
            let (store, record) = pipeline::train_original(&cfg, &ctx, cli.seed)?;
            checkpoint::save(&store, *classes, out)?;
            println!(
                "trained {} for {} epochs: test acc {:.4} ({:.1}s)",
                arch,
                epochs,
                record.final_metrics.test_acc,
                record.wall_seconds
            );
        }
        Cmd::Prune {
            method,
            ratio,
            policy,
            r#in,
            out,
            report,
            data,
        } => {
            let (mut store, arch, classes) = checkpoint::load::<f32>(r#in)?;
            let spec = PruneSpec {
                method: PruneMethod::from_str(method)?,
                ratio: *ratio,
                policy: parse_policy(policy)?,
                seed: rng::derive(cli.seed, "prune"),
                rounds: 1,
            };
            let batches: Vec<_> = if spec.method == PruneMethod::TaylorFo {
                let ctx = load_datasets(data, cli.seed, cli.data_dir.as_deref())?;
                data::batches(&ctx.train, 64, rng::derive(cli.seed, "prune/taylor"), 0, false)?
                    .take(2)
                    .map(|b| (b.images, b.labels))
                    .collect()
            } else {
                Vec::new()
            };
            let cost_before = metrics::count_cost(&arch)?;
            let (mask, warnings) = prune::score_and_mask(&store, &arch, &spec, &batches)?;
            prune::apply_mask(&mut store, &arch, &mask)?;
            checkpoint::save(&store, classes, out)?;
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            if let Some(report_path) = report {
                let (keep_counts, cost_after) = match &mask {
                    Mask::Filter(fm) => {
                        let (_, small) = prune::shrink_structured(&store, &arch, fm)?;
                        (Some(fm.keep_counts()), metrics::count_cost(&small)?)
                    }
                    Mask::Weight(_) => (None, cost_before.clone()),
                };
                let (params_down, flops_down) = metrics::reduction(&cost_before, &cost_after);
                let report = serde_json::json!({
                    "method": method,
                    "ratio": ratio,
                    "sparsity": store.sparsity(),
                    "keep_counts": keep_counts.map(|kc| kc
                        .into_iter()
                        .map(|(name, kept, total)| serde_json::json!({
                            "layer": name, "kept": kept, "total": total
                        }))
                        .collect::<Vec<_>>()),
                    "params_before": cost_before.params,
                    "params_after": cost_after.params,
                    "flops_before": cost_before.flops,
                    "flops_after": cost_after.flops,
                    "params_down_pct": params_down,
                    "flops_down_pct": flops_down,
                    "convention": metrics::FLOPS_CONVENTION,
                    "warnings": warnings,
                });
                std::fs::write(report_path, serde_json::to_string_pretty(&report)?)?;
            }
            println!("pruned {} at ratio {}: sparsity {:.4}", method, ratio, store.sparsity());
        }
        Cmd::Retrain {
            r#in,
            out,
            schedule: kind,
            budget,
            profile,
            train_epochs,
            warmup_frac,
            lr_max,
            lr_min,
            batch_size,
            augment,
            data,
            record,
        } => {
            let (mut store, arch, classes) = checkpoint::load::<f32>(r#in)?;
            let ctx = load_datasets(data, cli.seed, cli.data_dir.as_deref())?;
            let cfg = PipelineConfig {
                arch: arch.id.clone(),
                classes,
                profile: Profile::from_str(profile)?,
                train_epochs: *train_epochs,
                retrain_kind: ScheduleKind::from_str(kind)?,
                retrain_epochs: *budget,
                warmup_frac: *warmup_frac,
                lr_max: *lr_max,
                lr_min: *lr_min,
                batch_size: *batch_size,
                augment: *augment,
                ..PipelineConfig::default()
            };
            let spe = data::steps_per_epoch(ctx.train.n, cfg.batch_size);
            let original = schedule::build_original_scaled(cfg.profile, cfg.train_epochs, spe)?;
            let sched = pipeline::retrain_schedule(&cfg, &original)?;
            prunelab::optim::reset_state(&mut store);
            let rows = pipeline::train_phase(
                &mut store,
                &arch,
                &sched,
                &ctx.train,
                ctx.val.as_ref(),
                &cfg.optim(),
                cli.seed,
                "retrain",
                cfg.augment,
                None,
                |row, _| {
                    println!(
                        "epoch {:>3}  lr {:.5}  loss {:.4}  acc {:.4}",
                        row.epoch, row.lr, row.train_loss, row.train_acc
                    );
                    Ok(())
                },
            )?;
            checkpoint::save(&store, classes, out)?;
            let test_acc = pipeline::eval_accuracy(&store, &arch, &ctx.test, cfg.batch_size)?;
            println!("retrained with {kind} for {budget} epochs: test acc {test_acc:.4}");
            if let Some(path) = record {
                let rec = serde_json::json!({
                    "schedule": kind,
                    "budget_epochs": budget,
                    "epochs": rows,
                    "test_acc": test_acc,
                });
                std::fs::write(path, serde_json::to_string_pretty(&rec)?)?;
            }
        }
        Cmd::Pipeline { config } => {
            let text = std::fs::read_to_string(config)
                .with_context(|| format!("reading {}", config.display()))?;
            let cfg = ExperimentConfig::from_json(&text)?;
            let out = harness::run(&cfg, cli.data_dir.as_deref(), &cli.out_dir)?;
            println!("{}", harness::AGGREGATE_HEADER);
            println!("{}", out.row.to_csv_line());
            println!(
                "{} records written to {}",
                out.records.len(),
                cli.out_dir.display()
            );
        }
        Cmd::Schedule {
            kind,
            profile,
            epochs,
            steps_per_epoch,
            warmup_frac,
            lr_max,
            lr_min,
            out,
        } => {
            let sched = build_schedule_cli(
                kind,
                profile,
                *epochs,
                *steps_per_epoch,
                *warmup_frac,
                *lr_max,
                *lr_min,
            )?;
            let mut buf = Vec::new();
            sched.write_csv(&mut buf)?;
            std::fs::write(out, buf)?;
            println!("wrote {} rows to {}", sched.total_steps(), out.display());
        }
        Cmd::Report {
            arch,
            classes,
            r#in,
            out,
        } => {
            let architecture = match (arch, r#in) {
                (Some(name), None) => build_architecture(name, *classes)?,
                (None, Some(path)) => checkpoint::load::<f32>(path)?.1,
                _ => bail!("report needs exactly one of --arch or --in"),
            };
            let cost = metrics::count_cost(&architecture)?;
            let json = serde_json::to_string_pretty(&cost)?;
            match out {
                Some(path) => std::fs::write(path, &json)?,
                None => println!("{json}"),
            }
        }
        Cmd::Plot { kind, r#in, out } => {
            let svg = render_plot(kind, r#in)?;
            std::fs::write(out, svg)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn build_schedule_cli(
    kind: &str,
    profile: &str,
    epochs: usize,
    steps_per_epoch: usize,
    warmup_frac: f64,
    lr_max: Option<f64>,
    lr_min: f64,
) -> Result<Schedule> {
    let profile = Profile::from_str(profile)?;
    let original = schedule::build_original(profile, steps_per_epoch)?;
    Ok(match ScheduleKind::from_str(kind)? {
        ScheduleKind::Step => schedule::build_original_scaled(profile, epochs, steps_per_epoch)?,
        ScheduleKind::Ft => schedule::build_ft(&original, epochs)?,
        ScheduleKind::Lrw => schedule::build_lrw(&original, epochs)?,
        ScheduleKind::Slr => schedule::build_slr(&original, epochs, warmup_frac)?,
        ScheduleKind::Clr => schedule::build_clr(&original, epochs, warmup_frac, lr_max, lr_min)?,
    })
}

fn parse_schedule_csv(path: &Path) -> Result<plot::Series> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("epoch,step,lr") => {}
        other => bail!("{}: bad schedule header {other:?}", path.display()),
    }
    let mut pts = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            bail!("{}: bad row '{line}'", path.display());
        }
        let step: f64 = f[1].parse()?;
        let lr: f64 = f[2].parse()?;
        pts.push((step, lr));
    }
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "schedule".into());
    Ok(plot::Series::new(label, pts))
}

fn render_plot(kind: &str, inputs: &[PathBuf]) -> Result<String> {
    Ok(match plot::PlotKind::from_str(kind)? {
        plot::PlotKind::Schedule => {
            let series: Vec<plot::Series> = inputs
                .iter()
                .map(|p| parse_schedule_csv(p))
                .collect::<Result<_>>()?;
            plot::render_svg("learning rate schedules", "step", "learning rate", &series, None)?
        }
        plot::PlotKind::AccVsBudget | plot::PlotKind::AccVsSparsity => {
            let mut rows = Vec::new();
            for p in inputs {
                rows.extend(harness::read_aggregate_csv(p)?);
            }
            if rows.is_empty() {
                bail!("no aggregate rows found");
            }
            let budget_kind = plot::PlotKind::from_str(kind)? == plot::PlotKind::AccVsBudget;
            let mut by_schedule: std::collections::BTreeMap<String, Vec<&harness::AggregateRow>> =
                Default::default();
            for r in &rows {
                by_schedule.entry(r.schedule.clone()).or_default().push(r);
            }
            let mut series = Vec::new();
            let mut xs: Vec<f64> = Vec::new();
            for (label, rows) in by_schedule {
                let mut pts: Vec<(f64, f64, f64)> = rows
                    .iter()
                    .map(|r| {
                        let x = if budget_kind {
                            r.budget_epochs as f64
                        } else {
                            r.ratio
                        };
                        (x, r.acc_mean, r.acc_std.unwrap_or(0.0))
                    })
                    .collect();
                pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
                xs.extend(pts.iter().map(|p| p.0));
                let mut s = plot::Series::new(label, pts.iter().map(|p| (p.0, p.1)).collect());
                s.err = pts.iter().map(|p| p.2).collect();
                series.push(s);
            }
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            xs.dedup();
            if budget_kind {
                plot::plot_acc_vs_budget(&series, &xs)?
            } else {
                plot::plot_acc_vs_sparsity(&series)?
            }
        }
    })
}
