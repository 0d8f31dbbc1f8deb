use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand};
use serde::Serialize;

use gpp_core::config::{content_hash, ExperimentConfig, FieldSection};
use gpp_core::harness::{aggregate, run_episode, EpisodeResult, PolicyKind};
use gpp_core::verify::{run_suite, VerifyOptions};
use gpp_core::GppError;

/// Bumped whenever a results or summary column changes.
const SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "gpp", version, about = "Nonmyopic Gaussian-process planning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (seed, policy) episode in a config and write CSV results.
    Run {
        config: PathBuf,
        /// Parallel episodes.
        #[arg(long, env = "GPP_WORKERS", default_value_t = 1)]
        workers: usize,
        /// Output directory (overrides run.output).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the anytime planner's per-iteration bounds.
        #[arg(long)]
        trace: bool,
    },
    /// Check the planners' guarantees on small instances.
    Verify {
        /// Directory for serialized failing instances.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = VerifyOptions::default().instances)]
        instances: usize,
    },
    /// Write one generated field realization as CSV.
    GenField {
        config: PathBuf,
        out: PathBuf,
        /// Episode seed offset added to the field seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            workers,
            out,
            trace,
        } => cmd_run(&config, workers, out, trace),
        Command::Verify { out, instances } => cmd_verify(out, instances),
        Command::GenField { config, out, seed } => cmd_gen_field(&config, &out, seed),
    }
}

fn load_config(path: &Path) -> Result<(ExperimentConfig, Vec<u8>), ExitCode> {
    let raw = match fs::read(path) {
        Ok(raw) => raw,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", path.display());
            return Err(ExitCode::from(2));
        }
    };
    match ExperimentConfig::load(path) {
        Ok(cfg) => Ok((cfg, raw)),
        Err(e) => {
            eprintln!("error: invalid config {}: {e}", path.display());
            Err(ExitCode::from(2))
        }
    }
}

#[derive(Serialize)]
struct ResultRow {
    seed: u64,
    step: usize,
    x: f64,
    y: f64,
    z: f64,
    reward: f64,
    reward_normalized: f64,
    cum_reward: f64,
    max_reward: f64,
    tree_nodes: u64,
    wall_ms: f64,
}

#[derive(Serialize)]
struct TraceRow {
    seed: u64,
    step: usize,
    iteration: u64,
    nodes: u64,
    upper: f64,
    lower: f64,
    gap: f64,
}

#[derive(Serialize)]
struct StepBudget {
    step: usize,
    horizon: usize,
    lambda: Option<f64>,
    min_n: Option<usize>,
    max_n: Option<usize>,
    min_tau: Option<f64>,
    max_tau: Option<f64>,
}

#[derive(Serialize)]
struct PolicyMeta {
    policy: PolicyKind,
    episodes: usize,
    max_n: Option<usize>,
    steps: Vec<StepBudget>,
}

#[derive(Serialize)]
struct Metadata {
    schema_version: u32,
    config_hash: String,
    field_seed: u64,
    noise_seed: u64,
    seeds: Vec<u64>,
    steps: usize,
    horizon: usize,
    epsilon: f64,
    /// λ for the full online horizon; shorter final horizons re-derive it.
    lambda: f64,
    lambda_rederived_per_step: bool,
    timing: bool,
    complete: bool,
    policies: Vec<PolicyMeta>,
}

#[derive(Serialize)]
struct Failure {
    policy: PolicyKind,
    seed: u64,
    error: String,
}

#[derive(Serialize)]
struct Manifest {
    complete: bool,
    jobs_total: usize,
    jobs_done: usize,
    failures: Vec<Failure>,
}

fn cmd_run(config_path: &Path, workers: usize, out: Option<PathBuf>, trace: bool) -> ExitCode {
    let (cfg, raw) = match load_config(config_path) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let out_dir = out.unwrap_or_else(|| cfg.run.output.clone());
    match execute(&cfg, &raw, &out_dir, workers.max(1), trace) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

type JobResult = Result<EpisodeResult, GppError>;

fn execute(cfg: &ExperimentConfig, raw: &[u8], out_dir: &Path, workers: usize, trace: bool) -> Result<bool, GppError> {
    fs::create_dir_all(out_dir)?;
    let seeds = cfg.run.seeds.values();
    let jobs: Vec<(PolicyKind, u64)> = cfg
        .planner
        .policies
        .iter()
        .flat_map(|&p| seeds.iter().map(move |&s| (p, s)))
        .collect();
    let slots: Vec<Mutex<Option<JobResult>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers.min(jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(policy, seed)) = jobs.get(i) else {
                    break;
                };
                log::info!("episode {policy} seed {seed}");
                let result = run_job(cfg, policy, seed, trace);
                *slots[i].lock().expect("result slot") = Some(result);
            });
        }
    });

    let mut failures = Vec::new();
    let mut by_policy: Vec<(PolicyKind, Vec<(u64, EpisodeResult)>)> = Vec::new();
    for (&(policy, seed), slot) in jobs.iter().zip(slots) {
        let result = slot.into_inner().expect("result slot").expect("every job ran");
        if by_policy.last().is_none_or(|(p, _)| *p != policy) {
            by_policy.push((policy, Vec::new()));
        }
        match result {
            Ok(r) => by_policy.last_mut().expect("pushed").1.push((seed, r)),
            Err(e) => {
                eprintln!("error: {policy} seed {seed}: {e}");
                failures.push(Failure {
                    policy,
                    seed,
                    error: e.to_string(),
                });
            }
        }
    }

    let mut policies_meta = Vec::new();
    for (policy, episodes) in &by_policy {
        write_results(&out_dir.join(format!("results_{policy}.csv")), episodes)?;
        if trace && *policy == PolicyKind::Anytime {
            write_trace(&out_dir.join(format!("trace_{policy}.csv")), episodes)?;
        }
        let results: Vec<EpisodeResult> = episodes.iter().map(|(_, r)| r.clone()).collect();
        if !results.is_empty() {
            let summary = aggregate(&results)?;
            let mut w = csv::Writer::from_path(out_dir.join(format!("summary_{policy}.csv"))).map_err(csv_err)?;
            for row in &summary {
                w.serialize(row).map_err(csv_err)?;
            }
            w.flush()?;
        }
        policies_meta.push(policy_meta(*policy, &results));
    }

    let complete = failures.is_empty();
    let h = cfg.planner.horizon as f64;
    let meta = Metadata {
        schema_version: SCHEMA_VERSION,
        config_hash: content_hash(raw),
        field_seed: cfg.field_seed(),
        noise_seed: cfg.run.noise_seed,
        seeds,
        steps: cfg.run.steps,
        horizon: cfg.planner.horizon,
        epsilon: cfg.planner.epsilon,
        lambda: cfg.planner.epsilon / (h * (h + 1.0)),
        lambda_rederived_per_step: true,
        timing: cfg.run.timing,
        complete,
        policies: policies_meta,
    };
    fs::write(out_dir.join("metadata.json"), serde_json::to_string_pretty(&meta).map_err(json_err)? + "\n")?;
    let manifest = Manifest {
        complete,
        jobs_total: jobs.len(),
        jobs_done: jobs.len() - failures.len(),
        failures,
    };
    fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).map_err(json_err)? + "\n")?;
    Ok(complete)
}

fn run_job(cfg: &ExperimentConfig, policy: PolicyKind, seed: u64, trace: bool) -> JobResult {
    let field = cfg.field_for(seed)?;
    let start = cfg.start_for(field.grid(), seed);
    let mut ep = cfg.episode_config(policy, seed);
    ep.trace = trace;
    run_episode(&field, &ep, &cfg.gp, start)
}

fn policy_meta(policy: PolicyKind, results: &[EpisodeResult]) -> PolicyMeta {
    let steps = results.first().map_or(0, |r| r.steps.len());
    let mut out = Vec::with_capacity(steps);
    for t in 0..steps {
        let records: Vec<_> = results.iter().map(|r| &r.steps[t]).collect();
        let budgets: Vec<_> = records.iter().filter_map(|r| r.budget).filter(|b| b.partitions > 0).collect();
        out.push(StepBudget {
            step: t + 1,
            horizon: records[0].horizon,
            lambda: records[0].lambda,
            min_n: budgets.iter().map(|b| b.min_n).min(),
            max_n: budgets.iter().map(|b| b.max_n).max(),
            min_tau: budgets.iter().map(|b| b.min_tau).reduce(f64::min),
            max_tau: budgets.iter().map(|b| b.max_tau).reduce(f64::max),
        });
    }
    PolicyMeta {
        policy,
        episodes: results.len(),
        max_n: out.iter().filter_map(|s| s.max_n).max(),
        steps: out,
    }
}

fn write_results(path: &Path, episodes: &[(u64, EpisodeResult)]) -> Result<(), GppError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for (seed, r) in episodes {
        for s in &r.steps {
            w.serialize(ResultRow {
                seed: *seed,
                step: s.step,
                x: s.x,
                y: s.y,
                z: s.z,
                reward: s.reward,
                reward_normalized: s.reward_normalized,
                cum_reward: s.cum_reward,
                max_reward: s.max_reward,
                tree_nodes: s.tree_nodes,
                wall_ms: s.wall_ms,
            })
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_trace(path: &Path, episodes: &[(u64, EpisodeResult)]) -> Result<(), GppError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for (seed, r) in episodes {
        for s in &r.steps {
            for t in &s.trace {
                w.serialize(TraceRow {
                    seed: *seed,
                    step: s.step,
                    iteration: t.iteration,
                    nodes: t.nodes,
                    upper: t.upper,
                    lower: t.lower,
                    gap: t.gap,
                })
                .map_err(csv_err)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> GppError {
    GppError::Io(std::io::Error::other(e.to_string()))
}

fn json_err(e: serde_json::Error) -> GppError {
    GppError::Io(std::io::Error::other(e.to_string()))
}

fn cmd_verify(out: Option<PathBuf>, instances: usize) -> ExitCode {
    let opts = VerifyOptions {
        instances,
        ..VerifyOptions::default()
    };
    let checks = match run_suite(&opts) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: verification aborted: {e}");
            return ExitCode::from(1);
        }
    };
    let mut ok = true;
    for (i, check) in checks.iter().enumerate() {
        println!("{check}");
        if check.passed() {
            continue;
        }
        ok = false;
        if let Some(inst) = &check.failing {
            let json = serde_json::to_string_pretty(inst).unwrap_or_default();
            match &out {
                Some(dir) => {
                    let path = dir.join(format!("failing_check_{i}.json"));
                    if let Err(e) = fs::create_dir_all(dir).and_then(|_| fs::write(&path, &json)) {
                        eprintln!("error: cannot write {}: {e}", path.display());
                    } else {
                        println!("  failing instance written to {}", path.display());
                    }
                }
                None => println!("  failing instance: {json}"),
            }
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn cmd_gen_field(config_path: &Path, out: &Path, seed: u64) -> ExitCode {
    let (cfg, _) = match load_config(config_path) {
        Ok(c) => c,
        Err(code) => return code,
    };
    if !matches!(cfg.field, FieldSection::Generate { .. }) {
        eprintln!("error: gen-field needs a config with field.mode = \"generate\"");
        return ExitCode::from(2);
    }
    match cfg.field_for(seed).and_then(|f| f.write_csv(out)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
