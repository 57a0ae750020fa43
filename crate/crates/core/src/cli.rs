//! Command-line front end: `run`, `sweep`, `verify-bound`, `consensus-trace`.
//!
//! Exit codes: 0 success, 1 configuration or runtime error (including a
//! failed bound check), 2 divergence guard.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::bound::{verify_one_round_bound, verify_participation_identities, IdentityReport};
use crate::config::ExperimentConfig;
use crate::engine::{comm_closed_form, Simulation};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsRecord};
use crate::numeric::mean_stderr;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_DIVERGED: i32 = 2;

/// Worker-count variable; it never changes results.
pub const WORKERS_ENV: &str = "FEDALS_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "fedals", version, about = "Federated learning simulator with layer-wise sync schedules")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Replace the config's seed list with this single seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Metrics row every N global steps.
    #[arg(long, global = true)]
    pub cadence: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the configured experiment for every seed.
    Run { config: PathBuf },
    /// Cartesian sweep over alpha, tau, eta and seed.
    Sweep {
        config: PathBuf,
        /// `param=v1,v2,...`; repeat the flag or separate with `;`.
        #[arg(long, required = true)]
        grid: Vec<String>,
    },
    /// Monte-Carlo check of the one-round bound; exit 0 iff it passes.
    VerifyBound {
        config: PathBuf,
        /// Also check the participation identities.
        #[arg(long)]
        identities: bool,
    },
    /// Per-step, per-block consensus distance.
    ConsensusTrace { config: PathBuf },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Diverged { .. } => EXIT_DIVERGED,
        _ => EXIT_ERROR,
    }
}

pub fn workers_from_env() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|n: &usize| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Parse arguments, execute, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    match execute(&cli, workers_from_env()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: &Cli, workers: usize) -> Result<i32> {
    let path = match &cli.command {
        Command::Run { config } | Command::Sweep { config, .. } => config,
        Command::VerifyBound { config, .. } | Command::ConsensusTrace { config } => config,
    };
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
        if let Some(b) = cfg.bound.as_mut() {
            b.seed = s;
        }
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(c) = cli.cadence {
        cfg.cadence = c;
    }
    cfg.validate()?;
    fs::create_dir_all(&cfg.out)?;
    match &cli.command {
        Command::Run { .. } => cmd_run(&cfg, workers).map(|_| EXIT_OK),
        Command::Sweep { grid, .. } => cmd_sweep(&cfg, grid, workers).map(|_| EXIT_OK),
        Command::VerifyBound { identities, .. } => {
            cmd_verify_bound(&cfg, *identities).map(|pass| if pass { EXIT_OK } else { EXIT_ERROR })
        }
        Command::ConsensusTrace { .. } => cmd_consensus_trace(&cfg, workers).map(|_| EXIT_OK),
    }
}

fn provenance(cfg: &ExperimentConfig, seed: u64) -> Result<Value> {
    Ok(json!({
        "config_digest": cfg.digest()?,
        "seed": seed,
        "version": crate::VERSION,
        "algorithm": cfg.algorithm.name(),
    }))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map(|s| s + "\n").map_err(|e| Error::Io(e.to_string()))
}

/// Final state of one seeded run.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub provenance: Value,
    pub seed: u64,
    pub rounds: usize,
    pub steps: usize,
    pub train_risk: Option<f64>,
    pub test_risk: Option<f64>,
    pub test_risk_stderr: Option<f64>,
    pub gen_gap: Option<f64>,
    pub accuracy: Option<f64>,
    pub roundwise_gen_error: Option<f64>,
    pub comm_uploaded_total: u64,
    pub comm_downloaded_total: u64,
    pub comm_uploaded_per_client: Vec<u64>,
    /// Per-client per-direction count predicted by the schedule.
    pub comm_closed_form_per_client: u64,
    pub final_consensus: BTreeMap<String, f64>,
}

/// Execute one seed, streaming rows to `sink`.
pub fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    workers: usize,
    sink: &mut dyn FnMut(&MetricsRecord),
) -> Result<RunSummary> {
    let m = cfg.materialize(seed, workers)?;
    let shards = m.shards.clone();
    let source = m.spec.eval.clone();
    let weights = m.spec.participation.base_weights.clone();
    let schedule = m.spec.schedule.clone();
    let mut sim = Simulation::new(m.model.clone(), m.layout.clone(), m.shards, m.spec)?;
    let outcome = sim.run(sink)?;
    let last = outcome.last_record.clone().expect("at least one step");
    let roundwise = match (&source, outcome.trace.is_empty()) {
        (Some(src), false) => Some(metrics::roundwise_gen_error(&outcome.trace, &shards, &m.model, src, &weights)?),
        _ => None,
    };
    Ok(RunSummary {
        provenance: provenance(cfg, seed)?,
        seed,
        rounds: last.round,
        steps: last.step,
        train_risk: last.train_risk,
        test_risk: last.test_risk,
        test_risk_stderr: last.test_risk_stderr,
        gen_gap: last.gen_gap,
        accuracy: last.accuracy,
        roundwise_gen_error: roundwise,
        comm_uploaded_total: outcome.comm.total_uploaded(),
        comm_downloaded_total: outcome.comm.total_downloaded(),
        comm_uploaded_per_client: outcome.comm.uploaded.clone(),
        comm_closed_form_per_client: comm_closed_form(cfg.algorithm, &schedule, &m.layout, shards.len())
            .uploaded_per_client,
        final_consensus: last.consensus,
    })
}

/// `metrics_seed{s}.jsonl` (provenance line, then one row per tick) and
/// `summary_seed{s}.json` per seed; wall time goes to `timing.json`.
pub fn cmd_run(cfg: &ExperimentConfig, workers: usize) -> Result<Vec<RunSummary>> {
    let mut summaries = Vec::new();
    let mut timing = BTreeMap::new();
    for &seed in &cfg.seeds {
        let start = Instant::now();
        let mut lines = vec![serde_json::to_string(&json!({ "provenance": provenance(cfg, seed)? })).unwrap()];
        let summary = run_seed(cfg, seed, workers, &mut |r| lines.push(serde_json::to_string(r).unwrap()))?;
        let mut text = lines.join("\n");
        text.push('\n');
        write_file(&cfg.out.join(format!("metrics_seed{seed}.jsonl")), &text)?;
        write_file(&cfg.out.join(format!("summary_seed{seed}.json")), &to_json(&summary)?)?;
        timing.insert(format!("seed{seed}"), start.elapsed().as_secs_f64());
        summaries.push(summary);
    }
    write_file(&cfg.out.join("timing.json"), &to_json(&json!({ "wall_seconds": timing }))?)?;
    Ok(summaries)
}

#[derive(Debug, Clone, PartialEq)]
pub enum GridValue {
    Alpha(usize),
    Tau(usize),
    Eta(f64),
    Seed(u64),
}

/// Parse `param=v1,v2` items (also `;`-separated within one string).
pub fn parse_grid(specs: &[String]) -> Result<Vec<Vec<GridValue>>> {
    let mut axes = Vec::new();
    for item in specs.iter().flat_map(|s| s.split(';')).map(str::trim).filter(|s| !s.is_empty()) {
        let (name, values) =
            item.split_once('=').ok_or_else(|| Error::Config(format!("grid item `{item}` is not param=values")))?;
        let bad = |v: &str| Error::Config(format!("bad value `{v}` for {name}"));
        let axis = values
            .split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(|v| match name.trim() {
                "alpha" => v.parse().map(GridValue::Alpha).map_err(|_| bad(v)),
                "tau" => v.parse().map(GridValue::Tau).map_err(|_| bad(v)),
                "eta" => v.parse().map(GridValue::Eta).map_err(|_| bad(v)),
                "seed" => v.parse().map(GridValue::Seed).map_err(|_| bad(v)),
                other => Err(Error::Config(format!("cannot sweep `{other}` (allowed: alpha, tau, eta, seed)"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if axis.is_empty() {
            return Err(Error::Config(format!("grid axis `{name}` has no values")));
        }
        axes.push(axis);
    }
    if axes.is_empty() {
        return Err(Error::Config("empty grid".into()));
    }
    Ok(axes)
}

fn cartesian(axes: &[Vec<GridValue>]) -> Vec<Vec<GridValue>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.iter()
            .flat_map(|prefix| {
                axis.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(v.clone());
                    p
                })
            })
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub alpha: usize,
    pub tau: usize,
    pub eta: f64,
    pub seeds: Vec<u64>,
    pub train_risk: Vec<f64>,
    pub test_risk: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub comm_uploaded_total: Vec<u64>,
    pub comm_closed_form_per_client: u64,
}

fn mean_std(xs: &[f64]) -> (String, String) {
    if xs.is_empty() {
        return (String::new(), String::new());
    }
    let (mean, se) = mean_stderr(xs);
    let std = if xs.len() > 1 { format!("{}", se * (xs.len() as f64).sqrt()) } else { String::new() };
    (format!("{mean}"), std)
}

/// One CSV row per grid point, seeds aggregated to mean and standard deviation.
pub fn cmd_sweep(cfg: &ExperimentConfig, grid: &[String], workers: usize) -> Result<Vec<SweepRow>> {
    let points = cartesian(&parse_grid(grid)?);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let rows: Vec<SweepRow> = pool.install(|| {
        points
            .par_iter()
            .map(|point| {
                let mut c = cfg.clone();
                c.cadence = 0;
                let mut seeds = Vec::new();
                for v in point {
                    match *v {
                        GridValue::Alpha(a) => c.schedule.alpha = a,
                        GridValue::Tau(t) => c.schedule.tau = t,
                        GridValue::Eta(e) => c.schedule.eta = e,
                        GridValue::Seed(s) => seeds.push(s),
                    }
                }
                if !seeds.is_empty() {
                    c.seeds = seeds;
                }
                c.validate()?;
                let mut row = SweepRow {
                    alpha: c.schedule.alpha,
                    tau: c.schedule.tau,
                    eta: c.schedule.eta,
                    seeds: c.seeds.clone(),
                    train_risk: Vec::new(),
                    test_risk: Vec::new(),
                    accuracy: Vec::new(),
                    comm_uploaded_total: Vec::new(),
                    comm_closed_form_per_client: 0,
                };
                for &seed in &c.seeds {
                    let s = run_seed(&c, seed, 1, &mut |_| {})?;
                    row.train_risk.extend(s.train_risk);
                    row.test_risk.extend(s.test_risk);
                    row.accuracy.extend(s.accuracy);
                    row.comm_uploaded_total.push(s.comm_uploaded_total);
                    row.comm_closed_form_per_client = s.comm_closed_form_per_client;
                }
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut text = format!("# provenance: {}\n", serde_json::to_string(&provenance(cfg, cfg.seeds[0])?).unwrap());
    text.push_str(
        "point,alpha,tau,eta,n_seeds,train_risk_mean,train_risk_std,test_risk_mean,test_risk_std,\
         accuracy_mean,accuracy_std,comm_uploaded_total,comm_closed_form_per_client\n",
    );
    for (i, r) in rows.iter().enumerate() {
        let (trm, trs) = mean_std(&r.train_risk);
        let (tem, tes) = mean_std(&r.test_risk);
        let (acm, acs) = mean_std(&r.accuracy);
        let comm: Vec<f64> = r.comm_uploaded_total.iter().map(|&c| c as f64).collect();
        let (cm, _) = mean_std(&comm);
        text.push_str(&format!(
            "{i},{},{},{},{},{trm},{trs},{tem},{tes},{acm},{acs},{cm},{}\n",
            r.alpha,
            r.tau,
            r.eta,
            r.seeds.len(),
            r.comm_closed_form_per_client
        ));
    }
    write_file(&cfg.out.join("sweep.csv"), &text)?;
    Ok(rows)
}

/// Writes `bound_report.json`; returns whether every check passed.
pub fn cmd_verify_bound(cfg: &ExperimentConfig, identities: bool) -> Result<bool> {
    let bound = cfg.bound.as_ref().ok_or_else(|| Error::Config("verify-bound needs a [bound] section".into()))?;
    let report = verify_one_round_bound(bound)?;
    let mut pass = report.pass;
    let mut doc = json!({
        "provenance": provenance(cfg, bound.seed)?,
        "bound": report,
    });
    if identities {
        let ic = cfg.identities.clone().unwrap_or_default();
        let weights = ic.weights.clone().unwrap_or_else(|| vec![1.0 / ic.k as f64; ic.k]);
        let mut reports: Vec<IdentityReport> = Vec::new();
        for &scheme in &ic.schemes {
            for &k_hat in &ic.k_hat {
                reports.push(verify_participation_identities(
                    ic.k,
                    k_hat,
                    &weights,
                    scheme,
                    ic.draws,
                    ic.seed,
                    ic.x.as_deref(),
                )?);
            }
        }
        pass &= reports.iter().all(IdentityReport::pass);
        doc["identities"] = serde_json::to_value(&reports).unwrap();
    }
    doc["pass"] = json!(pass);
    let text = to_json(&doc)?;
    write_file(&cfg.out.join("bound_report.json"), &text)?;
    std::io::stdout().write_all(text.as_bytes())?;
    Ok(pass)
}

/// Time-averaged consensus distance per block, keyed by seed.
pub type ConsensusSummary = BTreeMap<u64, BTreeMap<String, f64>>;

/// `consensus_seed{s}.csv` with `(step, block, consensus)` rows plus
/// `consensus_summary.json` with time averages.
pub fn cmd_consensus_trace(cfg: &ExperimentConfig, workers: usize) -> Result<ConsensusSummary> {
    let spec = cfg.model.spec();
    if spec.num_blocks() < 2 {
        return Err(Error::Config("consensus-trace needs a model with at least 2 blocks".into()));
    }
    let mut c = cfg.clone();
    c.cadence = 1;
    let mut summary = ConsensusSummary::new();
    for &seed in &c.seeds {
        let mut m = c.materialize(seed, workers)?;
        m.spec.risks_at_sync = false;
        let mut text = format!("# provenance: {}\n", serde_json::to_string(&provenance(cfg, seed)?).unwrap());
        text.push_str("step,block,consensus\n");
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut rows = 0usize;
        let mut sim = Simulation::new(m.model, m.layout, m.shards, m.spec)?;
        sim.run(&mut |r: &MetricsRecord| {
            rows += 1;
            for (block, v) in &r.consensus {
                text.push_str(&format!("{},{block},{v}\n", r.step));
                *sums.entry(block.clone()).or_default() += v;
            }
        })?;
        write_file(&c.out.join(format!("consensus_seed{seed}.csv")), &text)?;
        summary.insert(seed, sums.into_iter().map(|(b, s)| (b, s / rows as f64)).collect());
    }
    let doc = json!({ "provenance": provenance(cfg, cfg.seeds[0])?, "time_averaged": summary });
    write_file(&c.out.join("consensus_summary.json"), &to_json(&doc)?)?;
    Ok(summary)
}
