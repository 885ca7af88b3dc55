//! Command-line driver.
//!
//! One subcommand per workflow stage: `gen-data` writes a synthetic corpus,
//! `pretrain`/`finetune` train and checkpoint, `eval` scores a checkpoint,
//! `bench` measures step cost, `ablate` sweeps one config axis. Every run
//! writes its fully resolved config next to its outputs. Exit codes: 0 ok,
//! 1 runtime failure, 2 bad usage or malformed config.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use clipsparse_core::data::{generate_corpus, Dataset};
use clipsparse_core::model::Params;
use clipsparse_core::profile::{bench_step, max_batch_search, records_to_csv, BenchAxis};
use clipsparse_core::rng::Rng;
use clipsparse_core::train::{
    evaluate_itm_accuracy, evaluate_qa, evaluate_retrieval, train, EvalReport, InitMode, RunConfig,
    StepLog, Task,
};
use clipsparse_core::model::HeadKind;

/// Default dataset root when `--data` is not given.
const DATA_DIR_ENV: &str = "CLIPSPARSE_DATA_DIR";

#[derive(Parser)]
#[command(name = "clipsparse", version, about = "Sparse-clip video/text learning at toy scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory from the config's data section.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Dataset output directory.
        #[arg(long)]
        out: PathBuf,
        /// Override a config key after file parsing, e.g. --set seed=7.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Image-text pretraining (masked words + matched/not-matched pairs).
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory; defaults to $CLIPSPARSE_DATA_DIR.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Train the configured downstream task (retrieval or qa).
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Initialize from a pretraining checkpoint.
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Score a checkpoint on a held-out split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Split to evaluate (val or test).
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Measure per-step wall time and accounted peak memory.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Sweep axis: clips or frames.
        #[arg(long)]
        axis: String,
        /// Ascending axis values, comma separated.
        #[arg(long)]
        values: String,
        /// Output directory for bench.csv.
        #[arg(long)]
        out: PathBuf,
        /// Scalar width: f64 (default) or f32.
        #[arg(long, default_value = "f64")]
        precision: String,
        /// Peak-bytes budget; records above it are marked infeasible.
        #[arg(long)]
        memory_budget: Option<u64>,
        /// Also search the largest batch fitting this budget.
        #[arg(long)]
        max_batch_budget: Option<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Train and evaluate once per value of one config axis.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Axis name (n_train, t, n_test, aggregation, fusion, strategy,
        /// freeze, lr) or any dotted config path.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        #[arg(long)]
        out: PathBuf,
        /// Grid points trained in parallel.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
}

/// Failures that should exit 2 (bad usage / malformed config) vs 1.
enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(msg) => eprintln!("error: {msg}"),
                CliError::Runtime(err) => eprintln!("error: {err:#}"),
            }
            ExitCode::from(e.code())
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::GenData { config, out, sets } => {
            let cfg = load_config(&config, &sets)?;
            std::fs::create_dir_all(&out).context("creating output directory")?;
            write_frozen_config(&out, &cfg)?;
            generate_corpus(&cfg.data, cfg.seed, &out)?;
            println!(
                "dataset written to {} ({} train / {} val / {} test)",
                out.display(),
                cfg.data.train_examples,
                cfg.data.val_examples,
                cfg.data.test_examples
            );
            Ok(())
        }
        Command::Pretrain { config, data, out, sets } => {
            let mut cfg = load_config(&config, &sets)?;
            cfg.task = Task::Pretrain;
            run_training(cfg, data, &out)
        }
        Command::Finetune { config, data, out, init_checkpoint, sets } => {
            let mut cfg = load_config(&config, &sets)?;
            if matches!(cfg.task, Task::Pretrain) {
                return Err(usage(
                    "finetune expects task retrieval or qa; use the pretrain subcommand instead",
                ));
            }
            if let Some(path) = init_checkpoint {
                cfg.init = InitMode::PretrainedCheckpoint { path };
            }
            run_training(cfg, data, &out)
        }
        Command::Eval { config, data, checkpoint, out, split, sets } => {
            let cfg = load_config(&config, &sets)?;
            let data_dir = resolve_data_dir(data)?;
            let dataset = Dataset::open(&data_dir)?;
            std::fs::create_dir_all(&out).context("creating output directory")?;
            write_frozen_config(&out, &cfg)?;

            let mut init_rng = Rng::new(cfg.seed).derive(0x1217);
            let mut params = Params::<f64>::init(&cfg.model, cfg.fusion, &mut init_rng)?;
            let missing = params.load_from(&checkpoint)?;
            if !missing.is_empty() {
                return Err(CliError::Runtime(anyhow::anyhow!(
                    "checkpoint does not cover {} parameters (first: {})",
                    missing.len(),
                    missing[0]
                )));
            }
            let mut report = EvalReport {
                task: cfg.task,
                steps_run: 0,
                final_loss: 0.0,
                itm_accuracy: None,
                qa_accuracy: None,
                retrieval: None,
                loss_curve: Vec::new(),
            };
            match cfg.task {
                Task::Qa => {
                    report.qa_accuracy = Some(evaluate_qa(
                        &params, &cfg.model, cfg.fusion, cfg.aggregation, &dataset, &split,
                        &cfg.sampling,
                    )?);
                }
                Task::Retrieval => {
                    report.itm_accuracy = Some(evaluate_itm_accuracy(
                        &params, &cfg.model, cfg.fusion, cfg.aggregation, &dataset, &split,
                        &cfg.sampling, HeadKind::Retrieval, 4, cfg.seed ^ 0xe7a1,
                    )?);
                    report.retrieval = Some(evaluate_retrieval(
                        &params, &cfg.model, cfg.fusion, cfg.aggregation, &dataset, &split,
                        &cfg.sampling,
                    )?);
                }
                Task::Pretrain => {
                    report.itm_accuracy = Some(evaluate_itm_accuracy(
                        &params, &cfg.model, cfg.fusion, cfg.aggregation, &dataset, &split,
                        &cfg.sampling, HeadKind::Itm, 4, cfg.seed ^ 0xe7a1,
                    )?);
                }
            }
            write_report(&out, &report)?;
            print_report(&report);
            Ok(())
        }
        Command::Bench {
            config,
            axis,
            values,
            out,
            precision,
            memory_budget,
            max_batch_budget,
            sets,
        } => {
            let cfg = parse_config(load_config_value(&config, &sets)?)?;
            let axis = BenchAxis::parse(&axis).map_err(|e| usage(e.to_string()))?;
            let values = parse_values(&values)?;
            std::fs::create_dir_all(&out).context("creating output directory")?;
            write_frozen_config(&out, &cfg)?;
            let records = match precision.as_str() {
                "f64" => bench_step::<f64>(&cfg, axis, &values, memory_budget)?,
                "f32" => bench_step::<f32>(&cfg, axis, &values, memory_budget)?,
                other => return Err(usage(format!("unknown precision `{other}`"))),
            };
            let csv = records_to_csv(&records);
            std::fs::write(out.join("bench.csv"), &csv)?;
            print!("{csv}");
            if let Some(budget) = max_batch_budget {
                let best = match precision.as_str() {
                    "f32" => max_batch_search::<f32>(&cfg, budget)?,
                    _ => max_batch_search::<f64>(&cfg, budget)?,
                };
                let line = if best == 0 {
                    format!("max_batch,0,budget {budget} below the parameter footprint\n")
                } else {
                    format!("max_batch,{best},budget {budget}\n")
                };
                std::fs::write(out.join("max_batch.csv"), &line)?;
                print!("{line}");
            }
            Ok(())
        }
        Command::Ablate { config, data, axis, values, out, workers, sets } => {
            let base = load_config_value(&config, &sets)?;
            let data_dir = resolve_data_dir(data)?;
            let raw_values: Vec<String> =
                values.split(',').map(|s| s.trim().to_string()).collect();
            if raw_values.is_empty() {
                return Err(usage("no ablation values given"));
            }
            std::fs::create_dir_all(&out).context("creating output directory")?;

            // resolve every grid point's config up front so config errors
            // exit 2 before any training starts
            let mut points = Vec::new();
            for raw in &raw_values {
                let mut value = base.clone();
                apply_axis(&mut value, &axis, raw)?;
                let cfg = finalize_config(value)?;
                points.push((raw.clone(), cfg));
            }

            let results: Vec<CliResult<()>> = if workers <= 1 {
                points
                    .iter()
                    .map(|(raw, cfg)| run_grid_point(&out, &axis, raw, cfg.clone(), &data_dir))
                    .collect()
            } else {
                std::thread::scope(|scope| {
                    let handles: Vec<_> = points
                        .iter()
                        .map(|(raw, cfg)| {
                            let out = &out;
                            let axis = &axis;
                            let data_dir = &data_dir;
                            scope.spawn(move || {
                                run_grid_point(out, axis, raw, cfg.clone(), data_dir)
                            })
                        })
                        .collect();
                    handles.into_iter().map(|h| h.join().unwrap()).collect()
                })
            };
            for r in results {
                r?;
            }
            println!("{} grid points written under {}", raw_values.len(), out.display());
            Ok(())
        }
    }
}

fn run_grid_point(
    out: &Path,
    axis: &str,
    raw: &str,
    cfg: RunConfig,
    data_dir: &Path,
) -> CliResult<()> {
    let dir = out.join(format!("{axis}={raw}"));
    std::fs::create_dir_all(&dir).context("creating grid point directory")?;
    write_frozen_config(&dir, &cfg)?;
    let output = train(cfg, data_dir, Some(&dir))?;
    write_report(&dir, &output.report)?;
    write_log(&dir, &output.log)?;
    Ok(())
}

fn run_training(cfg: RunConfig, data: Option<PathBuf>, out: &Path) -> CliResult<()> {
    let data_dir = resolve_data_dir(data)?;
    std::fs::create_dir_all(out).context("creating output directory")?;
    write_frozen_config(out, &cfg)?;
    let output = train(cfg, &data_dir, Some(out))?;
    write_report(out, &output.report)?;
    write_log(out, &output.log)?;
    print_report(&output.report);
    Ok(())
}

fn resolve_data_dir(flag: Option<PathBuf>) -> CliResult<PathBuf> {
    if let Some(dir) = flag {
        return Ok(dir);
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) => Ok(PathBuf::from(dir)),
        None => Err(usage(format!("no --data directory and {DATA_DIR_ENV} is not set"))),
    }
}

fn parse_values(raw: &str) -> CliResult<Vec<usize>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| usage(format!("`{s}` is not a count")))
        })
        .collect()
}

/// Reads the config file, applies every --set override onto the JSON tree,
/// and returns the tree (strict struct parsing happens in
/// [`finalize_config`]).
fn load_config_value(path: &Path, sets: &[String]) -> CliResult<serde_json::Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config `{}`: {e}", path.display())))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| usage(format!("malformed config `{}`: {e}", path.display())))?;
    for set in sets {
        let (key, raw) = set
            .split_once('=')
            .ok_or_else(|| usage(format!("--set needs KEY=VALUE, got `{set}`")))?;
        apply_set(&mut value, key, raw)?;
    }
    Ok(value)
}

fn finalize_config(value: serde_json::Value) -> CliResult<RunConfig> {
    let cfg = parse_config(value)?;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

/// Strict parse without run-level validation; benchmarking does not pair
/// examples, so the batch-size rules do not apply.
fn parse_config(value: serde_json::Value) -> CliResult<RunConfig> {
    serde_json::from_value(value).map_err(|e| usage(format!("malformed config: {e}")))
}

fn load_config(path: &Path, sets: &[String]) -> CliResult<RunConfig> {
    finalize_config(load_config_value(path, sets)?)
}

/// Sets a dotted-path key, creating intermediate objects as needed. The
/// value is parsed as JSON when possible and kept as a string otherwise.
fn apply_set(root: &mut serde_json::Value, key: &str, raw: &str) -> CliResult<()> {
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cursor
            .as_object_mut()
            .ok_or_else(|| usage(format!("config key `{key}`: `{part}` is not an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        cursor = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Err(usage(format!("empty config key in --set `{key}`")))
}

/// Maps friendly ablation axis names onto config paths; unknown names are
/// treated as dotted paths directly.
fn apply_axis(value: &mut serde_json::Value, axis: &str, raw: &str) -> CliResult<()> {
    match axis {
        "n_train" => apply_set(value, "sampling.train_clips", raw),
        "t" | "frames" => apply_set(value, "sampling.frames_per_clip", raw),
        "n_test" => apply_set(value, "sampling.test_clips", raw),
        "aggregation" | "g" => apply_set(value, "aggregation", raw),
        "fusion" | "m" => apply_set(value, "fusion", raw),
        "strategy" => apply_set(value, "sampling.strategy", raw),
        "lr" => apply_set(value, "optimizer.lr", raw),
        "seed" => apply_set(value, "seed", raw),
        "freeze" => {
            let (vision, text) = match raw {
                "none" => (false, false),
                "vision" => (true, false),
                "text" => (false, true),
                "both" => (true, true),
                other => {
                    return Err(usage(format!(
                        "freeze axis takes none|vision|text|both, got `{other}`"
                    )))
                }
            };
            apply_set(value, "freeze.vision", if vision { "true" } else { "false" })?;
            apply_set(value, "freeze.text", if text { "true" } else { "false" })
        }
        path => apply_set(value, path, raw),
    }
}

fn write_frozen_config(dir: &Path, cfg: &RunConfig) -> CliResult<()> {
    let text = serde_json::to_string_pretty(cfg).context("serializing config")?;
    std::fs::write(dir.join("config.json"), text + "\n").context("writing frozen config")?;
    Ok(())
}

fn write_report(dir: &Path, report: &EvalReport) -> CliResult<()> {
    let json = serde_json::to_string_pretty(report).context("serializing report")?;
    std::fs::write(dir.join("report.json"), json + "\n")?;
    let mut csv = String::from("metric,value\n");
    csv.push_str(&format!("task,{:?}\n", report.task));
    csv.push_str(&format!("steps_run,{}\n", report.steps_run));
    csv.push_str(&format!("final_loss,{}\n", report.final_loss));
    if let Some(acc) = report.itm_accuracy {
        csv.push_str(&format!("itm_accuracy,{acc}\n"));
    }
    if let Some(acc) = report.qa_accuracy {
        csv.push_str(&format!("qa_accuracy,{acc}\n"));
    }
    if let Some(r) = &report.retrieval {
        csv.push_str(&format!("r1,{}\nr5,{}\nr10,{}\nmdr,{}\n", r.r1, r.r5, r.r10, r.mdr));
    }
    std::fs::write(dir.join("report.csv"), csv)?;
    Ok(())
}

fn write_log(dir: &Path, log: &[StepLog]) -> CliResult<()> {
    let mut out = String::new();
    for entry in log {
        out.push_str(&serde_json::to_string(entry).context("serializing log line")?);
        out.push('\n');
    }
    std::fs::write(dir.join("log.jsonl"), out)?;
    Ok(())
}

fn print_report(report: &EvalReport) {
    println!("task: {:?}, steps: {}", report.task, report.steps_run);
    if let Some(acc) = report.itm_accuracy {
        println!("itm_accuracy: {acc:.4}");
    }
    if let Some(acc) = report.qa_accuracy {
        println!("qa_accuracy: {acc:.4}");
    }
    if let Some(r) = &report.retrieval {
        println!("r1: {:.4}  r5: {:.4}  r10: {:.4}  mdr: {:.1}", r.r1, r.r5, r.r10, r.mdr);
    }
}
