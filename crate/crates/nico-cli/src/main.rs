//! `nico`: dataset generation, training, improvement runs, refinement,
//! variability studies, and report aggregation for the 2-opt improvement
//! policy toolkit.
//!
//! Exit codes: 0 success, 2 usage/config error, 3 data error, 4 checkpoint
//! error.

mod engine;
mod report;

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use nico_core::search::Decode;
use nico_core::training::{load_policy, Stage, TrainConfig};
use nico_core::tsp::io::write_instances_jsonl;
use nico_core::tsp::{exact_optimum, generate_uniform_indexed, tour_cost};
use nico_core::Error as CoreError;

use engine::{execute_run, Method, RunOptions, VariabilityOptions};

#[derive(Parser)]
#[command(
    name = "nico",
    version,
    about = "Neural and classical 2-opt improvement search for Euclidean TSP"
)]
struct Cli {
    /// Base RNG seed (overrides the config file's seed for `train`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for instance-level parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output path: the dataset file for `generate`, a directory otherwise.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(ValueEnum, Clone, Copy)]
enum MethodArg {
    #[value(name = "nico")]
    Nico,
    #[value(name = "greedy2opt")]
    Greedy2Opt,
    #[value(name = "greedy3opt")]
    Greedy3Opt,
    #[value(name = "tabu")]
    Tabu,
    #[value(name = "random_policy")]
    RandomPolicy,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Method {
        match m {
            MethodArg::Nico => Method::Nico,
            MethodArg::Greedy2Opt => Method::Greedy2Opt,
            MethodArg::Greedy3Opt => Method::Greedy3Opt,
            MethodArg::Tabu => Method::Tabu,
            MethodArg::RandomPolicy => Method::RandomPolicy,
        }
    }
}

#[derive(ValueEnum, Clone, Copy)]
enum DecodeArg {
    Sample,
    Greedy,
}

impl From<DecodeArg> for Decode {
    fn from(d: DecodeArg) -> Decode {
        match d {
            DecodeArg::Sample => Decode::Sample,
            DecodeArg::Greedy => Decode::Greedy,
        }
    }
}

#[derive(ValueEnum, Clone, Copy)]
enum StageArg {
    Il,
    Rl,
}

#[derive(Args)]
struct RunArgs {
    /// Dataset: JSONL instances, or a single TSPLIB `.tsp` file.
    #[arg(long)]
    data: PathBuf,

    #[arg(long, value_enum)]
    method: MethodArg,

    /// Trained policy checkpoint (required for method `nico`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,

    /// Improvement steps per restart (default: 10n per instance).
    #[arg(long)]
    budget: Option<usize>,

    /// Independent restarts per instance; the report keeps the best.
    #[arg(long, default_value_t = 1)]
    restarts: usize,

    #[arg(long, value_enum, default_value_t = DecodeArg::Greedy)]
    decode: DecodeArg,

    /// Wall-clock cap in seconds per restart (nico/random_policy stop
    /// mid-run; classical baselines finish their restart).
    #[arg(long)]
    time_cap: Option<f64>,

    /// Tabu tenure in steps.
    #[arg(long, default_value_t = 8)]
    tenure: usize,

    /// Also write each instance's initial edge-feature matrix as CSV.
    #[arg(long)]
    dump_features: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a JSONL dataset of uniform random instances.
    Generate {
        /// Cities per instance.
        #[arg(long)]
        n: usize,
        /// Number of instances.
        #[arg(long)]
        count: usize,
        /// Annotate each instance with its exact optimum (small n only).
        #[arg(long)]
        with_optimum: bool,
    },
    /// Train a policy (imitation or reinforcement stage).
    Train {
        /// TOML training config; missing fields take the imitation-stage
        /// defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Stage override (also picks the stage's defaults when no config
        /// file is given).
        #[arg(long, value_enum)]
        stage: Option<StageArg>,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Epoch-count override.
        #[arg(long)]
        epochs: Option<u64>,
    },
    /// Run improvement search from random starting tours.
    Improve {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run improvement search from supplied starting tours.
    Refine {
        #[command(flatten)]
        run: RunArgs,
        /// JSONL tour records; restart r uses the r-th tour of its
        /// instance id (cycling when fewer tours than restarts).
        #[arg(long)]
        tours: PathBuf,
    },
    /// Training/inference variability study over checkpoints and seeds.
    Variability {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoints to compare (≥ 1 for method `nico`).
        #[arg(long, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = MethodArg::Nico)]
        method: MethodArg,
        /// Number of sampling seeds for the fixed-checkpoint column.
        #[arg(long, default_value_t = 20)]
        inference_seeds: u64,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long, default_value_t = 1)]
        restarts: usize,
        #[arg(long, value_enum, default_value_t = DecodeArg::Sample)]
        decode: DecodeArg,
        #[arg(long, default_value_t = 8)]
        tenure: usize,
    },
    /// Merge finished run directories into plot CSVs and a summary table.
    Report {
        /// Run directories, each holding a report.json.
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
    },
    /// Inspect a checkpoint: architecture, counters, parameter count.
    PolicyInfo {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Config(_) => 2,
                CoreError::Checkpoint(_) => 4,
                _ => 3,
            };
        }
    }
    3
}

fn main() {
    // Die quietly when a downstream pipe closes, like any other filter.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if t > 0 {
            // Ignore the error from double initialization in tests.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
        }
    }
    if let Err(err) = dispatch(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code(&err));
    }
}

fn out_dir(out: &Option<PathBuf>, default: &str) -> PathBuf {
    out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match cli.cmd {
        Cmd::Generate { n, count, with_optimum } => {
            let path = out_dir(&cli.out, "instances.jsonl");
            cmd_generate(n, count, seed, with_optimum, &path)
        }
        Cmd::Train { config, stage, resume, epochs } => {
            let dir = out_dir(&cli.out, "train-out");
            cmd_train(config, stage, resume, epochs, cli.seed, &dir)
        }
        Cmd::Improve { run } => {
            let dir = out_dir(&cli.out, "run-out");
            cmd_run(run, None, seed, &dir)
        }
        Cmd::Refine { run, tours } => {
            let dir = out_dir(&cli.out, "run-out");
            cmd_run(run, Some(tours), seed, &dir)
        }
        Cmd::Variability {
            data,
            checkpoints,
            method,
            inference_seeds,
            budget,
            restarts,
            decode,
            tenure,
        } => {
            let dir = out_dir(&cli.out, "variability-out");
            let opts = VariabilityOptions {
                checkpoints,
                dataset: data,
                method: method.into(),
                inference_seeds,
                budget,
                restarts,
                decode: decode.into(),
                tenure,
                seed,
            };
            let table = engine::run_variability(&opts, &dir)?;
            print!("{table}");
            println!("written: {}", dir.display());
            Ok(())
        }
        Cmd::Report { run_dirs } => {
            let dir = out_dir(&cli.out, "report-out");
            let table = report::merge_runs(&run_dirs, &dir)?;
            print!("{table}");
            println!("written: {}", dir.display());
            Ok(())
        }
        Cmd::PolicyInfo { checkpoint } => cmd_policy_info(&checkpoint),
    }
}

fn cmd_generate(
    n: usize,
    count: usize,
    seed: u64,
    with_optimum: bool,
    path: &Path,
) -> anyhow::Result<()> {
    if count < 1 {
        return Err(CoreError::Config("count must be at least 1".into()).into());
    }
    use rayon::prelude::*;
    let instances = (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let inst = generate_uniform_indexed(n, seed, i)?;
            if with_optimum {
                let (_, tour) = exact_optimum(&inst)?;
                // Annotate with the tour-sum cost so downstream gap checks
                // compare like against like.
                let cost = tour_cost(&inst, &tour)?;
                Ok(inst.with_opt_cost(cost))
            } else {
                Ok(inst)
            }
        })
        .collect::<nico_core::Result<Vec<_>>>()?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    write_instances_jsonl(path, &instances)?;
    println!("wrote {count} instances (n={n}) to {}", path.display());
    Ok(())
}

fn cmd_train(
    config: Option<PathBuf>,
    stage: Option<StageArg>,
    resume: Option<PathBuf>,
    epochs: Option<u64>,
    seed_override: Option<u64>,
    out: &Path,
) -> anyhow::Result<()> {
    let mut cfg = match &config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str::<TrainConfig>(&text)
                .map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?
        }
        None => match stage {
            Some(StageArg::Rl) => TrainConfig::rl_default(),
            _ => TrainConfig::il_default(),
        },
    };
    if let Some(s) = stage {
        cfg.stage = match s {
            StageArg::Il => Stage::Il,
            StageArg::Rl => Stage::Rl,
        };
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(s) = seed_override {
        cfg.seed = s;
    }
    cfg.validate()?;

    if let Some(path) = &resume {
        // Surface unreadable checkpoints with the checkpoint exit code
        // before any training work starts.
        load_policy(path).map_err(|e| match e {
            e @ CoreError::Checkpoint(_) => e,
            other => CoreError::Checkpoint(format!("cannot load {}: {other}", path.display())),
        })?;
    }

    std::fs::create_dir_all(out)?;
    std::fs::write(
        out.join("config.toml"),
        toml::to_string_pretty(&cfg).map_err(|e| CoreError::Config(e.to_string()))?,
    )?;

    let stage_name = |s: Stage| match s {
        Stage::Il => "il",
        Stage::Rl => "rl",
    };
    println!(
        "training stage {} for {} epoch(s), {} batch(es)/epoch, batch size {}, seed {}",
        stage_name(cfg.stage), cfg.epochs, cfg.batches_per_epoch, cfg.batch_size, cfg.seed
    );
    nico_core::training::train(&cfg, resume.as_deref(), out, |m| {
        let extra = match (m.mean_reward, m.mean_best_cost) {
            (Some(r), Some(c)) => format!("  reward {r:.4}  best-cost {c:.4}"),
            _ => String::new(),
        };
        println!(
            "epoch {:>4} [{}]  loss {:<10.6}  lr {:.3e}  grad {:.3}{extra}  {:.1}s",
            m.epoch,
            stage_name(m.stage),
            m.loss,
            m.learning_rate,
            m.grad_norm,
            m.seconds
        );
    })?;
    println!("checkpoints and metrics.jsonl written to {}", out.display());
    Ok(())
}

fn cmd_run(
    args: RunArgs,
    tours: Option<PathBuf>,
    seed: u64,
    out: &Path,
) -> anyhow::Result<()> {
    let mut opts = RunOptions::new(args.method.into(), args.data, seed);
    opts.checkpoint = args.checkpoint;
    opts.budget = args.budget;
    opts.restarts = args.restarts;
    opts.decode = args.decode.into();
    opts.time_cap = args.time_cap;
    opts.tenure = args.tenure;
    opts.initial_tours = tours;
    opts.dump_features = args.dump_features;

    let report = execute_run(&opts, Some(out))?;
    let agg = &report.aggregate;
    println!(
        "{} on {} instance(s), restarts {}, budget {}",
        report.method,
        report.instances.len(),
        report.restarts,
        match report.budget {
            Some(b) => b.to_string(),
            None => "10n".into(),
        }
    );
    let gap = match agg.mean_gap_percent {
        Some(_) => format!("  mean gap {}%", report::fmt_opt(agg.mean_gap_percent)),
        None => String::new(),
    };
    println!(
        "mean cost {:.4}  std {:.4}{gap}  mean time {:.3}s",
        agg.mean_cost, agg.std_cost, agg.mean_seconds
    );
    println!("report.json, traces.csv, best_tours.jsonl written to {}", out.display());
    Ok(())
}

fn cmd_policy_info(path: &Path) -> anyhow::Result<()> {
    let (meta, net) = load_policy(path).map_err(|e| match e {
        e @ CoreError::Checkpoint(_) => e,
        other => CoreError::Checkpoint(format!("cannot load {}: {other}", path.display())),
    })?;
    let p = &meta.policy;
    use nico_core::nn::ParamModule;
    let params = net.params();
    let value_count: usize = params.iter().map(|q| q.value.len()).sum();
    println!("checkpoint: {}", path.display());
    println!(
        "stage: {:?}, epochs completed: {}, optimizer steps: {}, collected batches: {}, seed: {}",
        meta.stage, meta.epochs_completed, meta.optimizer_steps, meta.episodes, meta.seed
    );
    println!(
        "architecture: {} encoder layer(s), model dim {}, ffn hidden {}, heads {}, key dim {}, \
         logit clip {}, pooling {:?}, norm {:?}",
        p.layers,
        p.model_dim,
        p.ffn_hidden,
        p.heads,
        p.key_dim(),
        p.logit_clip,
        p.pooling,
        p.norm
    );
    println!(
        "history: capacity {}, feature {}, recency mask {} (window {})",
        p.history_capacity,
        if p.use_history_feature { "on" } else { "off" },
        if p.use_recency_mask { "on" } else { "off" },
        p.recency_window
    );
    println!("parameters: {value_count} values in {} blocks", params.len());
    Ok(())
}
