//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 for configuration or usage errors, 2 for
//! runtime failures (I/O, malformed traces, failed runs).

pub mod config;
pub mod output;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::backbone::{trace, write_trace};
use crate::bench::{evaluate, sweep};
use crate::pipeline::oracle_run;
use config::{ConfigError, ExperimentConfig, ManifestSection};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const STEPS_FILE: &str = "steps.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Parser)]
#[command(
    name = "worldcache",
    version,
    about = "Curvature-guided caching experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one policy against its uncached oracle and write step and metrics CSVs.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        workload: WorkloadArgs,
        #[command(flatten)]
        policy: PolicyArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Run every grid point for every seed and write one table.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Replaces the configured seed list with this single seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "WORLDCACHE_JOBS")]
        jobs: Option<usize>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Run the oracle of a synthetic workload and store its outputs as a trace.
    Record {
        /// Trace file to write.
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        workload: WorkloadArgs,
    },
    /// Run a policy over a recorded trace, using the trace itself as oracle.
    Replay {
        trace: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed for the random-grouping predictor.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        policy: PolicyArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Check a trace file's structure.
    Validate { trace: PathBuf },
}

#[derive(Debug, Args, Default)]
struct WorkloadArgs {
    /// Synthetic preset: mixed, smooth, or turnpoint.
    #[arg(long)]
    workload: Option<String>,
    /// Use a recorded trace instead of a synthetic preset.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    n_tokens: Option<usize>,
    #[arg(long)]
    dims: Option<usize>,
    #[arg(long)]
    amplitude: Option<f64>,
    #[arg(long)]
    frequency: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    coupling: Option<f64>,
    #[arg(long)]
    turn_step: Option<usize>,
}

#[derive(Debug, Args, Default)]
struct PolicyArgs {
    /// Step-skipping rule: worldcache, fixed, difference, norm, curvature.
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    interval: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    /// Default-eta profile: aether or voyager.
    #[arg(long)]
    profile: Option<String>,
    /// Let streaks run past n_max.
    #[arg(long)]
    no_streak_cap: bool,
    #[arg(long)]
    warmup_fulls: Option<usize>,
    /// Predictor: chtp, reuse, linear, damped, random.
    #[arg(long)]
    predictor: Option<String>,
    #[arg(long)]
    n_max: Option<usize>,
    /// Extrapolation horizon: timestep_delta or step_count.
    #[arg(long)]
    horizon: Option<String>,
    #[arg(long)]
    p_s: Option<f64>,
    #[arg(long)]
    p_c: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    c_cache: Option<f64>,
}

#[derive(Debug, Args, Default)]
struct OutputArgs {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
}

impl WorkloadArgs {
    fn apply(&self, c: &mut ExperimentConfig) {
        let w = &mut c.workload;
        set(&mut w.preset, &self.workload);
        set(&mut w.trace, &self.trace);
        set(&mut w.seed, &self.seed);
        set(&mut w.n_tokens, &self.n_tokens);
        set(&mut w.dims, &self.dims);
        set(&mut w.amplitude, &self.amplitude);
        set(&mut w.frequency, &self.frequency);
        set(&mut w.noise_sigma, &self.noise_sigma);
        set(&mut w.coupling, &self.coupling);
        set(&mut w.turn_step, &self.turn_step);
        set(&mut c.scheduler.steps, &self.steps);
        if self.workload.is_some() && self.trace.is_none() {
            c.workload.trace = None;
        }
    }
}

impl PolicyArgs {
    fn apply(&self, c: &mut ExperimentConfig) {
        let s = &mut c.skipper;
        set(&mut s.policy, &self.policy);
        set(&mut s.eta, &self.eta);
        set(&mut s.interval, &self.interval);
        set(&mut s.tau, &self.tau);
        set(&mut s.profile, &self.profile);
        set(&mut s.warmup_fulls, &self.warmup_fulls);
        if self.no_streak_cap {
            s.streak_cap = Some(false);
        }
        let p = &mut c.predictor;
        set(&mut p.kind, &self.predictor);
        set(&mut p.n_max, &self.n_max);
        set(&mut p.horizon, &self.horizon);
        set(&mut p.p_s, &self.p_s);
        set(&mut p.p_c, &self.p_c);
        set(&mut p.eps, &self.eps);
        set(&mut c.scheduler.c_cache, &self.c_cache);
    }
}

impl OutputArgs {
    fn apply(&self, c: &mut ExperimentConfig) {
        set(&mut c.output.dir, &self.out);
        set(&mut c.output.run_id, &self.run_id);
    }
}

fn set<T: Clone>(slot: &mut Option<T>, flag: &Option<T>) {
    if let Some(v) = flag {
        *slot = Some(v.clone());
    }
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.0)
    }
}

impl From<crate::Error> for Failure {
    fn from(e: crate::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn io_fail(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{}: {e}", path.display()))
}

fn base_config(path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    Ok(match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    })
}

fn require_seed(c: &ExperimentConfig) -> Result<(), Failure> {
    if !c.is_trace() && c.workload.seed.is_none() {
        return Err(Failure::Config(
            "--seed: required for synthetic workloads (or set [workload].seed)".into(),
        ));
    }
    Ok(())
}

fn manifest(c: &ExperimentConfig, command: &str) -> Result<String, Failure> {
    let mut m = c.complete()?;
    m.manifest = Some(ManifestSection {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
    });
    Ok(m.to_toml())
}

fn cmd_run(c: ExperimentConfig, command: &str) -> Result<(), Failure> {
    require_seed(&c)?;
    let text = manifest(&c, command)?;
    let r = c.resolve()?;
    let prepared = r.workload.prepare()?;
    let inst = prepared.instance(r.seed.unwrap_or(0))?;
    let ev = evaluate(&inst, &r.policy, r.c_cache)?;
    let steps = r.out_dir.join(STEPS_FILE);
    output::write_steps(&steps, &ev.cached).map_err(io_fail(&steps))?;
    let metrics = r.out_dir.join(METRICS_FILE);
    output::write_metrics(&metrics, &r.run_id, &ev.metrics).map_err(io_fail(&metrics))?;
    let man = r.out_dir.join(MANIFEST_FILE);
    output::write_text(&man, &text).map_err(io_fail(&man))?;
    println!(
        "{}: {} steps, {} FULL, final_rel_err {}",
        r.run_id,
        ev.metrics.steps,
        ev.metrics.full_count,
        output::num(ev.metrics.final_latent_rel_error)
    );
    Ok(())
}

fn cmd_sweep(
    mut c: ExperimentConfig,
    seed: Option<u64>,
    jobs: Option<usize>,
) -> Result<(), Failure> {
    if let Some(s) = seed {
        c.workload.seed = Some(s);
        c.sweep.get_or_insert_with(Default::default).seeds = vec![s];
    }
    let spec = c.sweep_spec(jobs)?;
    c.sweep.get_or_insert_with(Default::default).seeds = spec.seeds.clone();
    let text = manifest(&c, "sweep")?;
    let out_dir = c.resolve()?.out_dir;
    let rows = sweep(&spec)?;
    let table = out_dir.join(SWEEP_FILE);
    output::write_sweep(&table, &rows).map_err(io_fail(&table))?;
    let man = out_dir.join(MANIFEST_FILE);
    output::write_text(&man, &text).map_err(io_fail(&man))?;
    let failed: Vec<String> = rows
        .iter()
        .filter_map(|r| {
            r.outcome
                .as_ref()
                .err()
                .map(|e| format!("row {}: {e}", output::sweep_run_id(r)))
        })
        .collect();
    println!("{} rows, {} failed", rows.len(), failed.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(failed.join("\n")))
    }
}

fn cmd_record(c: ExperimentConfig, out: &Path) -> Result<(), Failure> {
    if c.is_trace() {
        return Err(Failure::Config(
            "--trace: record needs a synthetic workload".into(),
        ));
    }
    require_seed(&c)?;
    let text = manifest(&c, "record")?;
    let r = c.resolve()?;
    let inst = r.workload.prepare()?.instance(r.seed.unwrap_or(0))?;
    let oracle = oracle_run(inst.backbone.as_ref(), &inst.scheduler, &inst.z_init)?;
    let ys = oracle.surrogates.unwrap_or_default();
    let outputs: Vec<_> = oracle
        .records
        .iter()
        .map(|rec| rec.timestep)
        .zip(ys)
        .collect();
    write_trace(out, &outputs, None)?;
    let mut man = out.as_os_str().to_owned();
    man.push(".manifest.toml");
    let man = PathBuf::from(man);
    output::write_text(&man, &text).map_err(io_fail(&man))?;
    println!("wrote {} steps to {}", outputs.len(), out.display());
    Ok(())
}

fn cmd_validate(path: &Path) -> Result<(), Failure> {
    let data =
        trace::validate(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    println!(
        "{}: ok, {} tokens x {} dims, {} steps, modality labels {}",
        path.display(),
        data.n_tokens,
        data.dims,
        data.n_steps(),
        if data.modality.is_some() {
            "present"
        } else {
            "absent"
        }
    );
    Ok(())
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run {
            config,
            workload,
            policy,
            output,
        } => {
            let mut c = base_config(config.as_deref())?;
            workload.apply(&mut c);
            policy.apply(&mut c);
            output.apply(&mut c);
            cmd_run(c, "run")
        }
        Command::Sweep {
            config,
            seed,
            jobs,
            output,
        } => {
            let mut c = base_config(Some(&config))?;
            output.apply(&mut c);
            cmd_sweep(c, seed, jobs)
        }
        Command::Record {
            out,
            config,
            workload,
        } => {
            let mut c = base_config(config.as_deref())?;
            workload.apply(&mut c);
            cmd_record(c, &out)
        }
        Command::Replay {
            trace,
            config,
            seed,
            policy,
            output,
        } => {
            let mut c = base_config(config.as_deref())?;
            c.workload.trace = Some(trace);
            set(&mut c.workload.seed, &seed);
            policy.apply(&mut c);
            output.apply(&mut c);
            cmd_run(c, "replay")
        }
        Command::Validate { trace } => cmd_validate(&trace),
    }
}

/// Parses `args` (program name first), runs the command, and returns the exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            EXIT_CONFIG
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            EXIT_RUNTIME
        }
    }
}
