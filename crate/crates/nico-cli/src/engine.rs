//! The improvement-run engine behind `improve`, `refine`, and
//! `variability`.
//!
//! One run = one method evaluated on one dataset with R restarts per
//! instance.  Instances run in parallel; each worker owns its search state
//! and measures its own search-only time.  All random draws are keyed by
//! (seed, role, instance index, restart), so results do not depend on
//! thread scheduling and identical seeds reproduce identical reports
//! except for the timing fields.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use rayon::prelude::*;

use nico_core::baselines::{greedy_three_opt, greedy_two_opt, tabu_search};
use nico_core::features::compute_features;
use nico_core::rng::{rng_from, tag};
use nico_core::search::{run_improvement, Decode, NeuralSelector, UniformSelector};
use nico_core::training::load_policy;
use nico_core::tsp::io::{
    parse_instance, read_instances_jsonl, read_tours_jsonl, InstanceFormat, TourRecord,
};
use nico_core::tsp::{random_tour_with, tour_cost, Instance, Tour};
use nico_core::{AnytimeTrace, Error as CoreError, HistoryBuffer, PolicyNet};

use crate::report::{
    mean, population_std, Aggregate, AnytimePoint, InstanceResult, Report, GAP_TOL_PERCENT,
};

pub const FEATURE_CSV_HEADER: &str =
    "ux,uy,vx,vy,len,dir_x,dir_y,cos_u,sin_u,cos_v,sin_v,rel_len,z,hist";

/// Recency window used by the uniform-random improvement policy, matching
/// the neural policy's default mask.
const RANDOM_POLICY_WINDOW: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Nico,
    Greedy2Opt,
    Greedy3Opt,
    Tabu,
    RandomPolicy,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Nico => "nico",
            Method::Greedy2Opt => "greedy2opt",
            Method::Greedy3Opt => "greedy3opt",
            Method::Tabu => "tabu",
            Method::RandomPolicy => "random_policy",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub method: Method,
    pub dataset: PathBuf,
    pub checkpoint: Option<PathBuf>,
    /// None means 10n steps per instance.
    pub budget: Option<usize>,
    pub restarts: usize,
    pub decode: Decode,
    /// Keys instance starting tours (and equals the report's seed field).
    pub seed: u64,
    /// Keys move sampling; differs from `seed` only in the inference-
    /// variability protocol, which holds starts fixed while varying this.
    pub sample_seed: u64,
    /// Per-run wall-clock cap. Enforced mid-run for nico/random_policy;
    /// classical baselines always finish their restart.
    pub time_cap: Option<f64>,
    pub tenure: usize,
    pub initial_tours: Option<PathBuf>,
    pub dump_features: bool,
}

impl RunOptions {
    pub fn new(method: Method, dataset: PathBuf, seed: u64) -> Self {
        Self {
            method,
            dataset,
            checkpoint: None,
            budget: None,
            restarts: 1,
            decode: Decode::Greedy,
            seed,
            sample_seed: seed,
            time_cap: None,
            tenure: 8,
            initial_tours: None,
            dump_features: false,
        }
    }
}

/// Load a dataset: a `.tsp`/`.tsplib` file holds one TSPLIB instance,
/// anything else is JSONL.
pub fn load_dataset(path: &Path) -> anyhow::Result<Vec<Instance>> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    if ext.eq_ignore_ascii_case("tsp") || ext.eq_ignore_ascii_case("tsplib") {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        Ok(vec![parse_instance(&text, InstanceFormat::TsplibEuc2d)?])
    } else {
        Ok(read_instances_jsonl(path)
            .with_context(|| format!("loading dataset {}", path.display()))?)
    }
}

/// Load a policy checkpoint for inference; any failure is a checkpoint
/// error so the process exits with the checkpoint status code.
pub fn load_policy_for_inference(path: &Path) -> anyhow::Result<PolicyNet> {
    let (_, net) = load_policy(path).map_err(|e| match e {
        e @ CoreError::Checkpoint(_) => e,
        other => CoreError::Checkpoint(format!("cannot load {}: {other}", path.display())),
    })?;
    Ok(net)
}

struct InstanceOutcome {
    result: InstanceResult,
    best_tour: TourRecord,
    /// Best-over-restarts cost per step, length budget+1.
    curve: Vec<f64>,
    /// Mean-over-restarts elapsed seconds per step, length budget+1.
    seconds_curve: Vec<f64>,
    trace_rows: String,
    feature_csv: Option<String>,
}

fn best_curve(trace: &AnytimeTrace, len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(len);
    let mut last = f64::INFINITY;
    for s in 0..len {
        if s < trace.entries.len() {
            last = trace.entries[s].best;
        }
        out.push(last);
    }
    out
}

fn seconds_curve(trace: &AnytimeTrace, len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(len);
    let mut last = 0.0;
    for s in 0..len {
        if s < trace.entries.len() {
            last = trace.entries[s].seconds;
        }
        out.push(last);
    }
    out
}

fn run_instance(
    idx: usize,
    instance: &Instance,
    opts: &RunOptions,
    net: Option<&PolicyNet>,
    starts: Option<&Vec<Tour>>,
) -> anyhow::Result<InstanceOutcome> {
    let n = instance.n();
    let budget = opts.budget.unwrap_or(10 * n).max(1);
    let time_cap = opts.time_cap.map(Duration::from_secs_f64);

    let mut best_cost = f64::INFINITY;
    let mut best_tour: Option<Tour> = None;
    let mut best_restart = 0usize;
    let mut best_step = 0usize;
    let mut start_cost_min = f64::INFINITY;
    let mut total_seconds = 0.0;
    let mut curve = vec![f64::INFINITY; budget + 1];
    let mut secs_sum = vec![0.0; budget + 1];
    let mut rows = String::new();
    let mut feature_csv = None;

    for r in 0..opts.restarts {
        let start = match starts {
            Some(tours) => tours[r % tours.len()].clone(),
            None => {
                let mut rng = rng_from(&[opts.seed, tag::START_TOUR, idx as u64, r as u64]);
                random_tour_with(n, &mut rng)?
            }
        };
        start_cost_min = start_cost_min.min(tour_cost(instance, &start)?);

        if r == 0 && opts.dump_features {
            let features = compute_features(instance, &start, &HistoryBuffer::new(16))?;
            let mut csv = String::from(FEATURE_CSV_HEADER);
            csv.push('\n');
            for row in features.as_array().rows() {
                let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                csv.push_str(&cells.join(","));
                csv.push('\n');
            }
            feature_csv = Some(csv);
        }

        let mut sample_rng =
            rng_from(&[opts.sample_seed, tag::SAMPLE, idx as u64, r as u64]);
        let (tour, trace) = match opts.method {
            Method::Nico => {
                let net = net.expect("policy loaded for neural runs");
                let selector = NeuralSelector { net, decode: opts.decode };
                run_improvement(
                    instance,
                    start,
                    &selector,
                    budget,
                    net.config().history_capacity,
                    &mut sample_rng,
                    time_cap,
                )?
            }
            Method::RandomPolicy => run_improvement(
                instance,
                start,
                &UniformSelector { recency_window: RANDOM_POLICY_WINDOW },
                budget,
                RANDOM_POLICY_WINDOW,
                &mut sample_rng,
                time_cap,
            )?,
            Method::Greedy2Opt => greedy_two_opt(instance, start, budget)?,
            Method::Greedy3Opt => greedy_three_opt(instance, start, budget)?,
            Method::Tabu => {
                let run = tabu_search(instance, start, budget, opts.tenure, true)?;
                (run.best, run.trace)
            }
        };

        let restart_best = trace.best_final();
        if restart_best < best_cost {
            best_cost = restart_best;
            best_tour = Some(tour);
            best_restart = r;
            best_step = trace
                .entries
                .iter()
                .position(|e| e.best == restart_best)
                .unwrap_or(0);
        }
        total_seconds += trace.entries.last().map(|e| e.seconds).unwrap_or(0.0);

        let bc = best_curve(&trace, budget + 1);
        let sc = seconds_curve(&trace, budget + 1);
        for s in 0..=budget {
            curve[s] = curve[s].min(bc[s]);
            secs_sum[s] += sc[s];
        }
        for e in &trace.entries {
            let _ = writeln!(
                rows,
                "{},{r},{},{},{},{}",
                instance.id(),
                e.step,
                e.cost,
                e.best,
                e.seconds
            );
        }
    }

    let seconds_curve: Vec<f64> =
        secs_sum.iter().map(|s| s / opts.restarts as f64).collect();
    let best_tour = best_tour.expect("at least one restart ran");
    let gap_percent = match instance.opt_cost() {
        Some(opt) => {
            let gap = (best_cost - opt) / opt * 100.0;
            if gap < -GAP_TOL_PERCENT {
                return Err(CoreError::InvalidInput(format!(
                    "instance `{}`: found cost {best_cost} beats the declared optimum \
                     {opt} beyond tolerance; its opt_cost annotation is wrong",
                    instance.id()
                ))
                .into());
            }
            Some(gap)
        }
        None => None,
    };

    Ok(InstanceOutcome {
        result: InstanceResult {
            id: instance.id().to_string(),
            n,
            best_cost,
            opt_cost: instance.opt_cost(),
            gap_percent,
            start_cost: opts.initial_tours.is_some().then_some(start_cost_min),
            best_restart,
            best_step,
            seconds: total_seconds,
        },
        best_tour: TourRecord {
            id: instance.id().to_string(),
            order: best_tour.as_slice().to_vec(),
            cost: best_cost,
        },
        curve,
        seconds_curve,
        trace_rows: rows,
        feature_csv,
    })
}

fn group_tours_by_id(
    records: Vec<TourRecord>,
    instances: &[Instance],
) -> anyhow::Result<Vec<Vec<Tour>>> {
    let mut by_id: BTreeMap<&str, Vec<&TourRecord>> = BTreeMap::new();
    for rec in &records {
        by_id.entry(rec.id.as_str()).or_default().push(rec);
    }
    let mut out = Vec::with_capacity(instances.len());
    for inst in instances {
        let recs = by_id.get(inst.id()).ok_or_else(|| {
            CoreError::InvalidInput(format!(
                "no initial tour supplied for instance `{}`",
                inst.id()
            ))
        })?;
        let mut tours = Vec::with_capacity(recs.len());
        for rec in recs {
            if rec.order.len() != inst.n() {
                return Err(CoreError::InvalidInput(format!(
                    "initial tour for `{}` visits {} cities but the instance has {}",
                    inst.id(),
                    rec.order.len(),
                    inst.n()
                ))
                .into());
            }
            tours.push(Tour::new(rec.order.clone())?);
        }
        out.push(tours);
    }
    Ok(out)
}

fn aggregate_anytime(outcomes: &[InstanceOutcome], all_opt: bool) -> Vec<AnytimePoint> {
    let max_len = outcomes.iter().map(|o| o.curve.len()).max().unwrap_or(0);
    let mut points = Vec::with_capacity(max_len);
    for s in 0..max_len {
        let at = |o: &InstanceOutcome| o.curve[s.min(o.curve.len() - 1)];
        let secs = |o: &InstanceOutcome| o.seconds_curve[s.min(o.seconds_curve.len() - 1)];
        let mean_best_cost = mean(outcomes.iter().map(at));
        let mean_gap_percent = all_opt.then(|| {
            mean(outcomes.iter().map(|o| {
                let opt = o.result.opt_cost.expect("all instances carry optima");
                (at(o) - opt) / opt * 100.0
            }))
        });
        points.push(AnytimePoint {
            step: s,
            mean_best_cost,
            mean_gap_percent,
            mean_seconds: mean(outcomes.iter().map(secs)),
        });
    }
    points
}

/// Run a full evaluation.  When `out_dir` is given, writes `report.json`,
/// `traces.csv`, `best_tours.jsonl`, and (on request) per-instance feature
/// CSVs into it.
pub fn execute_run(opts: &RunOptions, out_dir: Option<&Path>) -> anyhow::Result<Report> {
    if opts.restarts < 1 {
        return Err(CoreError::Config("restarts must be at least 1".into()).into());
    }
    if opts.budget == Some(0) {
        return Err(CoreError::Config("step budget must be at least 1".into()).into());
    }
    if opts.method == Method::Nico && opts.checkpoint.is_none() {
        return Err(CoreError::Config(
            "method `nico` needs --checkpoint pointing at a trained policy".into(),
        )
        .into());
    }

    let instances = load_dataset(&opts.dataset)?;
    let net = match (&opts.checkpoint, opts.method) {
        (Some(path), Method::Nico) => Some(load_policy_for_inference(path)?),
        _ => None,
    };
    let starts: Option<Vec<Vec<Tour>>> = match &opts.initial_tours {
        Some(path) => {
            let records = read_tours_jsonl(path)
                .with_context(|| format!("loading initial tours {}", path.display()))?;
            Some(group_tours_by_id(records, &instances)?)
        }
        None => None,
    };

    let outcomes: Vec<InstanceOutcome> = instances
        .par_iter()
        .enumerate()
        .map(|(idx, inst)| {
            run_instance(idx, inst, opts, net.as_ref(), starts.as_ref().map(|s| &s[idx]))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;

    let costs: Vec<f64> = outcomes.iter().map(|o| o.result.best_cost).collect();
    let all_opt = outcomes.iter().all(|o| o.result.opt_cost.is_some());
    let aggregate = Aggregate {
        mean_cost: mean(costs.iter().copied()),
        std_cost: population_std(&costs),
        mean_gap_percent: all_opt
            .then(|| mean(outcomes.iter().map(|o| o.result.gap_percent.unwrap()))),
        mean_seconds: mean(outcomes.iter().map(|o| o.result.seconds)),
    };
    let anytime = aggregate_anytime(&outcomes, all_opt);

    let report = Report {
        method: opts.method.name().to_string(),
        dataset: opts.dataset.display().to_string(),
        budget: opts.budget,
        restarts: opts.restarts,
        decode: match opts.decode {
            Decode::Sample => "sample".into(),
            Decode::Greedy => "greedy".into(),
        },
        seed: opts.seed,
        refinement: opts.initial_tours.is_some(),
        instances: outcomes.iter().map(|o| o.result.clone()).collect(),
        aggregate,
        anytime,
    };

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        report.write_json(&dir.join("report.json"))?;

        let mut traces = String::from("instance,restart,step,cost,best,seconds\n");
        for o in &outcomes {
            traces.push_str(&o.trace_rows);
        }
        fs::write(dir.join("traces.csv"), traces)?;

        let best: Vec<TourRecord> = outcomes.iter().map(|o| o.best_tour.clone()).collect();
        nico_core::tsp::io::write_tours_jsonl(dir.join("best_tours.jsonl"), &best)?;

        if opts.dump_features {
            let fdir = dir.join("features");
            fs::create_dir_all(&fdir)?;
            for o in &outcomes {
                if let Some(csv) = &o.feature_csv {
                    let safe: String = o
                        .result
                        .id
                        .chars()
                        .map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
                        .collect();
                    fs::write(fdir.join(format!("{safe}.csv")), csv)?;
                }
            }
        }
    }
    Ok(report)
}

pub struct VariabilityOptions {
    pub checkpoints: Vec<PathBuf>,
    pub dataset: PathBuf,
    pub method: Method,
    pub inference_seeds: u64,
    pub budget: Option<usize>,
    pub restarts: usize,
    pub decode: Decode,
    pub tenure: usize,
    pub seed: u64,
}

#[derive(serde::Serialize)]
struct VariabilityJson {
    method: String,
    dataset: String,
    mean_cost: f64,
    training_std: f64,
    inference_std: f64,
    per_checkpoint: Vec<(String, f64)>,
    per_seed: Vec<(u64, f64)>,
}

/// The variability protocol: evaluate each checkpoint once under the base
/// seed (std across checkpoints = training variability), then re-evaluate
/// one fixed checkpoint under varied sampling seeds with the starting
/// tours held fixed (std across seeds = inference variability).
pub fn run_variability(
    opts: &VariabilityOptions,
    out_dir: &Path,
) -> anyhow::Result<String> {
    if opts.method == Method::Nico && opts.checkpoints.is_empty() {
        return Err(CoreError::Config(
            "variability for method `nico` needs at least one --checkpoints entry".into(),
        )
        .into());
    }

    let base_run = |checkpoint: Option<PathBuf>, sample_seed: u64| -> anyhow::Result<f64> {
        let mut run = RunOptions::new(opts.method, opts.dataset.clone(), opts.seed);
        run.checkpoint = checkpoint;
        run.budget = opts.budget;
        run.restarts = opts.restarts;
        run.decode = opts.decode;
        run.tenure = opts.tenure;
        run.sample_seed = sample_seed;
        Ok(execute_run(&run, None)?.aggregate.mean_cost)
    };

    // One pseudo-entry for classical methods keeps the table shape uniform.
    let checkpoints: Vec<Option<PathBuf>> = if opts.checkpoints.is_empty() {
        vec![None]
    } else {
        opts.checkpoints.iter().cloned().map(Some).collect()
    };

    let mut per_checkpoint = Vec::new();
    for ckpt in &checkpoints {
        let cost = base_run(ckpt.clone(), opts.seed)?;
        let label = ckpt
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| format!("({})", opts.method.name()));
        per_checkpoint.push((label, cost));
    }

    let mut per_seed = Vec::new();
    for s in 0..opts.inference_seeds {
        let cost = base_run(checkpoints[0].clone(), opts.seed.wrapping_add(s))?;
        per_seed.push((opts.seed.wrapping_add(s), cost));
    }

    let ckpt_costs: Vec<f64> = per_checkpoint.iter().map(|(_, c)| *c).collect();
    let seed_costs: Vec<f64> = per_seed.iter().map(|(_, c)| *c).collect();
    let summary = VariabilityJson {
        method: opts.method.name().to_string(),
        dataset: opts.dataset.display().to_string(),
        mean_cost: mean(ckpt_costs.iter().copied()),
        training_std: population_std(&ckpt_costs),
        inference_std: population_std(&seed_costs),
        per_checkpoint,
        per_seed,
    };

    let mut md = String::new();
    let _ = writeln!(md, "| Quantity | Value |");
    let _ = writeln!(md, "|---|---:|");
    let _ = writeln!(md, "| mean best cost | {:.6} |", summary.mean_cost);
    let _ = writeln!(
        md,
        "| std across {} checkpoint(s) | {:.6} |",
        summary.per_checkpoint.len(),
        summary.training_std
    );
    let _ = writeln!(
        md,
        "| std across {} inference seed(s) | {:.6} |",
        summary.per_seed.len(),
        summary.inference_std
    );

    fs::create_dir_all(out_dir)?;
    fs::write(
        out_dir.join("variability.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    fs::write(out_dir.join("variability.md"), &md)?;
    Ok(md)
}
