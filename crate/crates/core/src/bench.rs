//! Oracle comparison, metrics, and parameter sweeps.

use std::path::PathBuf;
use std::sync::Arc;

use rayon::prelude::*;

use crate::backbone::{read_trace, SyntheticBackbone, SyntheticSpec, TraceBackbone};
use crate::curvature::TokenGroup;
use crate::error::{Error, Result};
use crate::matrix::TokenMatrix;
use crate::pipeline::{
    oracle_run, run, Backbone, EulerScheduler, Policy, RunOptions, RunResult, REL_ERR_TINY,
};
use crate::predictor::PredictorKind;
use crate::skipper::SkipKind;

/// Cost of one CACHE step relative to a FULL step.
pub const DEFAULT_C_CACHE: f64 = 0.01;
pub const DEFAULT_STEPS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub steps: usize,
    pub full_count: usize,
    pub cache_count: usize,
    pub per_step_rel_error: Vec<f64>,
    pub final_latent_rel_error: f64,
    /// Mean rowwise L2 error per group (Stable, Linear, Chaotic) over the
    /// steps where that group was non-empty.
    pub per_group_error: [Option<f64>; 3],
    pub full_ratio: f64,
    pub est_speedup: f64,
    pub e_acc_trace: Vec<(usize, f64)>,
}

impl RunMetrics {
    pub fn mean_rel_error(&self) -> f64 {
        if self.per_step_rel_error.is_empty() {
            return 0.0;
        }
        self.per_step_rel_error.iter().sum::<f64>() / self.per_step_rel_error.len() as f64
    }

    pub fn group_error(&self, g: TokenGroup) -> Option<f64> {
        self.per_group_error[g as usize]
    }
}

pub fn est_speedup(steps: usize, full_count: usize, c_cache: f64) -> f64 {
    let cache = steps - full_count;
    steps as f64 / (full_count as f64 + c_cache * cache as f64)
}

fn rel_frobenius(a: &TokenMatrix<f64>, b: &TokenMatrix<f64>) -> Result<f64> {
    Ok(a.sub(b)?.frobenius_norm() / (b.frobenius_norm() + REL_ERR_TINY))
}

/// Scores `cached` against `oracle`. Both runs must carry their per-step outputs.
pub fn compare_runs(
    cached: &RunResult<f64>,
    oracle: &RunResult<f64>,
    c_cache: f64,
) -> Result<RunMetrics> {
    if !(c_cache.is_finite() && c_cache >= 0.0) {
        return Err(Error::Parameter(format!(
            "c_cache must be finite and >= 0, got {c_cache}"
        )));
    }
    let steps = cached.steps();
    if steps != oracle.steps() {
        return Err(Error::Comparison(format!(
            "step counts differ: {steps} vs {}",
            oracle.steps()
        )));
    }
    if steps == 0 {
        return Err(Error::Comparison("runs have no steps".into()));
    }
    if cached.final_latent.shape() != oracle.final_latent.shape() {
        return Err(Error::Comparison(format!(
            "latent shapes differ: {:?} vs {:?}",
            cached.final_latent.shape(),
            oracle.final_latent.shape()
        )));
    }
    let (Some(ys), Some(refs)) = (cached.surrogates.as_ref(), oracle.surrogates.as_ref()) else {
        return Err(Error::Comparison(
            "both runs must record their per-step outputs".into(),
        ));
    };
    for (i, (a, b)) in cached.records.iter().zip(&oracle.records).enumerate() {
        if a.timestep != b.timestep {
            return Err(Error::Comparison(format!(
                "timestep grids differ at step {i}"
            )));
        }
    }

    let mut per_step = Vec::with_capacity(steps);
    let mut sums = [(0.0f64, 0usize); 3];
    for (step, (y, r)) in ys.iter().zip(refs).enumerate() {
        if y.shape() != r.shape() {
            return Err(Error::Comparison(format!(
                "output shapes differ at step {step}"
            )));
        }
        per_step.push(rel_frobenius(y, r)?);
        if let Some(g) = cached.assignment_at(step) {
            let rows = y.row_distances(r)?;
            for grp in TokenGroup::ALL {
                let idx: Vec<usize> = g.indices(grp).collect();
                if !idx.is_empty() {
                    let mean = idx.iter().map(|&i| rows[i]).sum::<f64>() / idx.len() as f64;
                    sums[grp as usize].0 += mean;
                    sums[grp as usize].1 += 1;
                }
            }
        }
    }
    let per_group_error = sums.map(|(s, n)| (n > 0).then(|| s / n as f64));
    Ok(RunMetrics {
        steps,
        full_count: cached.full_count,
        cache_count: cached.cache_count,
        per_step_rel_error: per_step,
        final_latent_rel_error: rel_frobenius(&cached.final_latent, &oracle.final_latent)?,
        per_group_error,
        full_ratio: cached.full_count as f64 / steps as f64,
        est_speedup: est_speedup(steps, cached.full_count, c_cache),
        e_acc_trace: cached.records.iter().map(|r| (r.step, r.e_acc)).collect(),
    })
}

/// Where backbone outputs come from.
#[derive(Debug, Clone, PartialEq)]
pub enum Workload {
    /// Seeded generator on a uniform integer grid of `steps` steps; the run
    /// seed replaces `spec.seed`.
    Synthetic { spec: SyntheticSpec, steps: usize },
    /// Recorded trace; its own timesteps define the grid.
    Trace(PathBuf),
}

/// A workload ready to run: backbone, grid, and starting latent for one seed.
pub struct Instance {
    pub backbone: Arc<dyn Backbone<f64>>,
    pub scheduler: EulerScheduler<f64>,
    pub z_init: TokenMatrix<f64>,
}

impl Workload {
    pub fn validate(&self) -> Result<()> {
        match self {
            Workload::Synthetic { spec, .. } => spec.validate(),
            Workload::Trace(_) => Ok(()),
        }
    }

    /// Loads shared state (the trace file) once.
    pub fn prepare(&self) -> Result<PreparedWorkload> {
        self.validate()?;
        Ok(match self {
            Workload::Synthetic { spec, steps } => PreparedWorkload::Synthetic {
                spec: spec.clone(),
                steps: *steps,
            },
            Workload::Trace(path) => PreparedWorkload::Trace(Arc::new(read_trace(path)?)),
        })
    }
}

#[derive(Clone)]
pub enum PreparedWorkload {
    Synthetic { spec: SyntheticSpec, steps: usize },
    Trace(Arc<TraceBackbone>),
}

impl PreparedWorkload {
    pub fn instance(&self, seed: u64) -> Result<Instance> {
        match self {
            PreparedWorkload::Synthetic { spec, steps } => {
                let spec = SyntheticSpec {
                    seed,
                    t_start: *steps as f64,
                    ..spec.clone()
                };
                let b = SyntheticBackbone::new(spec)?;
                let z_init = b.initial_latent()?;
                Ok(Instance {
                    backbone: Arc::new(b),
                    scheduler: EulerScheduler::uniform(*steps),
                    z_init,
                })
            }
            PreparedWorkload::Trace(b) => {
                let scheduler = EulerScheduler::from_values(&b.schedule_nodes())?;
                let (n, d) = (b.data().n_tokens, b.data().dims);
                Ok(Instance {
                    backbone: b.clone(),
                    scheduler,
                    z_init: TokenMatrix::zeros(n, d)?,
                })
            }
        }
    }
}

/// Oracle and cached runs of one policy on one instance, with step records
/// carrying errors against the oracle.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub oracle: RunResult<f64>,
    pub cached: RunResult<f64>,
    pub metrics: RunMetrics,
}

pub fn evaluate_against(
    inst: &Instance,
    oracle: &RunResult<f64>,
    policy: &Policy,
    c_cache: f64,
) -> Result<(RunResult<f64>, RunMetrics)> {
    let reference = oracle.surrogates.as_deref();
    let opts = RunOptions {
        record_surrogates: true,
        reference,
    };
    let cached = run(
        inst.backbone.as_ref(),
        &inst.scheduler,
        &inst.z_init,
        policy,
        &opts,
    )?;
    let metrics = compare_runs(&cached, oracle, c_cache)?;
    Ok((cached, metrics))
}

pub fn evaluate(inst: &Instance, policy: &Policy, c_cache: f64) -> Result<Evaluation> {
    let oracle = oracle_run(inst.backbone.as_ref(), &inst.scheduler, &inst.z_init)?;
    let (cached, metrics) = evaluate_against(inst, &oracle, policy, c_cache)?;
    Ok(Evaluation {
        oracle,
        cached,
        metrics,
    })
}

const MATCH_LOG_ETA: (f64, f64) = (-5.0, 2.0);
const MATCH_LOG_STEP: f64 = 0.01;

/// Finds a CAS threshold whose run uses `target_fulls` FULL steps, within one.
/// Returns `(eta, cached run, metrics)` for the closest match found.
pub fn match_full_count(
    inst: &Instance,
    oracle: &RunResult<f64>,
    base: &Policy,
    target_fulls: usize,
    c_cache: f64,
) -> Result<(f64, RunResult<f64>, RunMetrics)> {
    let try_eta = |eta: f64| -> Result<(f64, RunResult<f64>, RunMetrics)> {
        let mut p = *base;
        p.skip.kind = SkipKind::Cas;
        p.skip.eta = eta;
        let (r, m) = evaluate_against(inst, oracle, &p, c_cache)?;
        Ok((eta, r, m))
    };
    // FULL count is not monotone in eta, so scan a log grid from large to small
    // eta and keep the first point with the smallest count gap.
    let gap = |c: &(f64, RunResult<f64>, RunMetrics)| c.1.full_count.abs_diff(target_fulls);
    let mut best = try_eta(10f64.powf(MATCH_LOG_ETA.1))?;
    let n = ((MATCH_LOG_ETA.1 - MATCH_LOG_ETA.0) / MATCH_LOG_STEP).round() as usize;
    for i in 1..=n {
        if gap(&best) == 0 {
            break;
        }
        let cand = try_eta(10f64.powf(MATCH_LOG_ETA.1 - i as f64 * MATCH_LOG_STEP))?;
        if gap(&cand) < gap(&best) {
            best = cand;
        }
    }
    Ok(best)
}

/// Grid axes. An empty axis keeps the base policy's value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepGrid {
    pub eta: Vec<f64>,
    pub p_s: Vec<f64>,
    pub p_c: Vec<f64>,
    pub n_max: Vec<usize>,
    pub predictor: Vec<PredictorKind>,
    pub skip: Vec<SkipKind>,
    pub tau: Vec<f64>,
    pub interval: Vec<usize>,
}

/// One grid point, fully resolved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub index: usize,
    pub eta: f64,
    pub p_s: f64,
    pub p_c: f64,
    pub n_max: usize,
    pub predictor: PredictorKind,
    pub skip: SkipKind,
    pub tau: f64,
    pub interval: usize,
}

impl GridPoint {
    pub const KEYS: [&'static str; 8] = [
        "eta",
        "p_s",
        "p_c",
        "n_max",
        "predictor",
        "skip",
        "tau",
        "interval",
    ];

    pub fn policy(&self, base: &Policy, seed: u64) -> Policy {
        let mut p = *base;
        p.skip.eta = self.eta;
        p.grouping.p_s = self.p_s;
        p.grouping.p_c = self.p_c;
        p.predictor.n_max = self.n_max;
        p.predictor.kind = self.predictor;
        p.predictor.rng_seed = seed;
        p.skip.kind = self.skip;
        p.skip.tau = self.tau;
        p.skip.interval = self.interval;
        p
    }
}

impl SweepGrid {
    /// Cartesian product in axis order, last axis fastest.
    pub fn points(&self, base: &Policy) -> Vec<GridPoint> {
        fn or<T: Copy>(axis: &[T], v: T) -> Vec<T> {
            if axis.is_empty() {
                vec![v]
            } else {
                axis.to_vec()
            }
        }
        let mut out = Vec::new();
        for &eta in &or(&self.eta, base.skip.eta) {
            for &p_s in &or(&self.p_s, base.grouping.p_s) {
                for &p_c in &or(&self.p_c, base.grouping.p_c) {
                    for &n_max in &or(&self.n_max, base.predictor.n_max) {
                        for &predictor in &or(&self.predictor, base.predictor.kind) {
                            for &skip in &or(&self.skip, base.skip.kind) {
                                for &tau in &or(&self.tau, base.skip.tau) {
                                    for &interval in &or(&self.interval, base.skip.interval) {
                                        out.push(GridPoint {
                                            index: out.len(),
                                            eta,
                                            p_s,
                                            p_c,
                                            n_max,
                                            predictor,
                                            skip,
                                            tau,
                                            interval,
                                        });
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub grid: SweepGrid,
    pub seeds: Vec<u64>,
    pub workload: Workload,
    /// Values for axes the grid leaves empty, and all non-grid settings.
    pub base: Policy,
    pub c_cache: f64,
    /// Worker threads; `None` uses the rayon default.
    pub jobs: Option<usize>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Parameter("sweep needs at least one seed".into()));
        }
        if self.jobs == Some(0) {
            return Err(Error::Parameter("jobs must be >= 1".into()));
        }
        self.workload.validate()
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub point: GridPoint,
    pub seed: u64,
    /// Per-row failures are kept as messages so one bad row does not abort the sweep.
    pub outcome: std::result::Result<RunMetrics, String>,
}

/// Runs every (grid point, seed) pair. Rows come back ordered by grid index, then seed.
pub fn sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let prepared = spec.workload.prepare()?;
    let points = spec.grid.points(&spec.base);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?;

    pool.install(|| {
        let oracles: Vec<(u64, std::result::Result<(Instance, RunResult<f64>), String>)> = spec
            .seeds
            .par_iter()
            .map(|&seed| {
                let r = prepared.instance(seed).and_then(|inst| {
                    let o = oracle_run(inst.backbone.as_ref(), &inst.scheduler, &inst.z_init)?;
                    Ok((inst, o))
                });
                (seed, r.map_err(|e| e.to_string()))
            })
            .collect();

        let jobs: Vec<(GridPoint, usize)> = points
            .iter()
            .flat_map(|p| (0..oracles.len()).map(move |s| (*p, s)))
            .collect();
        let rows = jobs
            .par_iter()
            .map(|&(point, s)| {
                let (seed, base) = &oracles[s];
                let outcome = match base {
                    Ok((inst, oracle)) => {
                        let policy = point.policy(&spec.base, *seed);
                        evaluate_against(inst, oracle, &policy, spec.c_cache)
                            .map(|(_, m)| m)
                            .map_err(|e| e.to_string())
                    }
                    Err(e) => Err(e.clone()),
                };
                SweepRow {
                    point,
                    seed: *seed,
                    outcome,
                }
            })
            .collect();
        Ok(rows)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Preset;
    use crate::matrix::Timestep;
    use crate::pipeline::{Decision, StepRecord};
    use crate::skipper::SkipConfig;

    fn synthetic(fractions: [f64; 3], preset: Preset) -> Workload {
        Workload::Synthetic {
            spec: SyntheticSpec {
                fractions,
                preset,
                n_tokens: 32,
                dims: 8,
                ..Default::default()
            },
            steps: 50,
        }
    }

    #[test]
    fn self_comparison_is_zero_error() {
        let inst = synthetic([0.3, 0.4, 0.3], Preset::Mixed)
            .prepare()
            .unwrap()
            .instance(3)
            .unwrap();
        let ev = evaluate(&inst, &Policy::no_cache(), DEFAULT_C_CACHE).unwrap();
        let m = &ev.metrics;
        assert!(m.per_step_rel_error.iter().all(|&e| e == 0.0));
        assert_eq!(m.final_latent_rel_error, 0.0);
        assert_eq!(m.full_ratio, 1.0);
        assert_eq!(m.est_speedup, 1.0);

        let cached = evaluate(&inst, &Policy::default(), DEFAULT_C_CACHE)
            .unwrap()
            .cached;
        let m = compare_runs(&cached, &cached, DEFAULT_C_CACHE).unwrap();
        assert!(m.per_step_rel_error.iter().all(|&e| e == 0.0));
        assert_eq!(m.final_latent_rel_error, 0.0);
    }

    #[test]
    fn affine_workload_is_exact_under_chtp() {
        let inst = synthetic([0.0, 1.0, 0.0], Preset::Smooth)
            .prepare()
            .unwrap()
            .instance(1)
            .unwrap();
        for eta in [0.0, 0.2, 1.0, f64::INFINITY] {
            let policy = Policy {
                skip: SkipConfig {
                    eta,
                    enforce_streak_cap: false,
                    ..Default::default()
                },
                ..Default::default()
            };
            let m = evaluate(&inst, &policy, DEFAULT_C_CACHE).unwrap().metrics;
            assert!(
                m.final_latent_rel_error <= 1e-9,
                "eta {eta}: {}",
                m.final_latent_rel_error
            );
        }
    }

    fn one_step_run(y: TokenMatrix<f64>, decision: Decision) -> RunResult<f64> {
        RunResult {
            records: vec![StepRecord {
                step: 0,
                timestep: Timestep::new(1.0, 0),
                decision,
                k: 0,
                e_t: 0.0,
                e_acc: 0.0,
                group_id: None,
                rel_err: None,
                group_err: [None; 3],
            }],
            final_latent: y.clone(),
            full_count: (decision == Decision::Full) as usize,
            cache_count: (decision == Decision::Cache) as usize,
            surrogates: Some(vec![y]),
            assignments: vec![],
        }
    }

    #[test]
    fn known_offset_gives_known_relative_error() {
        let oracle = one_step_run(
            TokenMatrix::new(1, 2, vec![0.6, 0.8]).unwrap(),
            Decision::Full,
        );
        let delta = 0.125;
        let cached = one_step_run(
            TokenMatrix::new(1, 2, vec![0.6 + delta, 0.8]).unwrap(),
            Decision::Cache,
        );
        let m = compare_runs(&cached, &oracle, 0.01).unwrap();
        assert!((m.per_step_rel_error[0] - delta).abs() <= 1e-15);
        assert_eq!(m.full_ratio, 0.0);
        assert!((m.est_speedup - 100.0).abs() < 1e-9);
    }

    #[test]
    fn mismatched_runs_are_rejected() {
        let a = one_step_run(
            TokenMatrix::new(1, 2, vec![0.6, 0.8]).unwrap(),
            Decision::Full,
        );
        let b = one_step_run(
            TokenMatrix::new(2, 1, vec![0.6, 0.8]).unwrap(),
            Decision::Full,
        );
        assert!(matches!(
            compare_runs(&a, &b, 0.01),
            Err(Error::Comparison(_))
        ));
        let mut c = a.clone();
        c.surrogates = None;
        assert!(matches!(
            compare_runs(&c, &a, 0.01),
            Err(Error::Comparison(_))
        ));
    }

    #[test]
    fn speedup_decreases_with_full_count() {
        let s: Vec<f64> = (1..=50).map(|f| est_speedup(50, f, 0.01)).collect();
        assert!(s.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(est_speedup(50, 50, 0.01), 1.0);
        assert!(s.iter().all(|&x| x >= 1.0));
    }

    #[test]
    fn empty_seed_list_is_rejected() {
        let spec = SweepSpec {
            grid: SweepGrid::default(),
            seeds: vec![],
            workload: synthetic([0.3, 0.4, 0.3], Preset::Mixed),
            base: Policy::default(),
            c_cache: DEFAULT_C_CACHE,
            jobs: Some(1),
        };
        assert!(matches!(sweep(&spec), Err(Error::Parameter(_))));
    }

    #[test]
    fn sweep_rows_are_ordered_and_independent() {
        let grid = SweepGrid {
            eta: vec![0.1, 0.3],
            predictor: vec![PredictorKind::Chtp, PredictorKind::UniformReuse],
            ..Default::default()
        };
        let mk = |seeds: Vec<u64>, jobs| SweepSpec {
            grid: grid.clone(),
            seeds,
            workload: synthetic([0.3, 0.4, 0.3], Preset::Mixed),
            base: Policy::default(),
            c_cache: DEFAULT_C_CACHE,
            jobs: Some(jobs),
        };
        let rows = sweep(&mk(vec![4, 5], 3)).unwrap();
        assert_eq!(rows.len(), 8);
        let keys: Vec<(usize, u64)> = rows.iter().map(|r| (r.point.index, r.seed)).collect();
        assert_eq!(
            keys,
            vec![
                (0, 4),
                (0, 5),
                (1, 4),
                (1, 5),
                (2, 4),
                (2, 5),
                (3, 4),
                (3, 5)
            ]
        );
        assert_eq!(rows[4].point.predictor, PredictorKind::Chtp);
        assert_eq!(rows[4].point.eta, 0.3);

        let alone = sweep(&mk(vec![5], 1)).unwrap();
        for (row, single) in rows.iter().filter(|r| r.seed == 5).zip(&alone) {
            assert_eq!(
                row.outcome.as_ref().unwrap(),
                single.outcome.as_ref().unwrap()
            );
        }
    }

    #[test]
    fn sweep_keeps_failed_rows() {
        let spec = SweepSpec {
            grid: SweepGrid {
                p_c: vec![0.7, 0.1],
                ..Default::default()
            },
            seeds: vec![1],
            workload: synthetic([0.3, 0.4, 0.3], Preset::Mixed),
            base: Policy::default(),
            c_cache: DEFAULT_C_CACHE,
            jobs: Some(2),
        };
        let rows = sweep(&spec).unwrap();
        assert!(rows[0].outcome.is_ok());
        assert!(rows[1].outcome.as_ref().unwrap_err().contains("p_c"));
    }

    #[test]
    fn matching_hits_the_target_full_count() {
        let inst = synthetic([0.3, 0.4, 0.3], Preset::Mixed)
            .prepare()
            .unwrap()
            .instance(2)
            .unwrap();
        let oracle = oracle_run(inst.backbone.as_ref(), &inst.scheduler, &inst.z_init).unwrap();
        let (_, r, _) =
            match_full_count(&inst, &oracle, &Policy::default(), 20, DEFAULT_C_CACHE).unwrap();
        assert!(r.full_count.abs_diff(20) <= 1, "{}", r.full_count);
    }
}
