//! The cached denoising loop.
//!
//! Each step either evaluates the backbone (FULL) or predicts its output from
//! the FULL history (CACHE); the scheduler then advances the latent with
//! whichever output was produced. FULL steps refresh the curvature groups
//! and clear the streak accumulators; CACHE steps advance the streak counter
//! and add the drift score of the new surrogate to the accumulator.

use crate::curvature::{
    compute_curvature, group_tokens, FullHistory, GroupAssignment, GroupingConfig, TokenGroup,
};
use crate::error::{Error, Result};
use crate::matrix::{check_schedule, Timestep, TokenMatrix};
use crate::predictor::{predict, random_grouping, PredictorConfig, PredictorKind};
use crate::scalar::Scalar;
use crate::skipper::{drift_score, should_full, CacheState, SkipConfig, SkipKind};

/// Denominator guard for relative errors: `0 / 0` reads as zero.
pub const REL_ERR_TINY: f64 = 1e-30;

pub trait Backbone<T: Scalar>: Send + Sync {
    /// `(tokens, channels)` of every output.
    fn shape(&self) -> (usize, usize);

    fn evaluate(&self, z: &TokenMatrix<T>, t: Timestep<T>) -> Result<TokenMatrix<T>>;

    /// Abstract cost of one evaluation.
    fn cost_full(&self) -> f64 {
        1.0
    }
}

pub trait Scheduler<T: Scalar>: Send + Sync {
    /// Descending grid of `steps + 1` nodes.
    fn timesteps(&self) -> &[Timestep<T>];

    fn step(
        &self,
        z: &TokenMatrix<T>,
        y: &TokenMatrix<T>,
        from: Timestep<T>,
        to: Timestep<T>,
    ) -> Result<TokenMatrix<T>>;

    fn steps(&self) -> usize {
        self.timesteps().len().saturating_sub(1)
    }
}

/// Explicit Euler update `z + (t_to - t_from) * y`.
#[derive(Debug, Clone)]
pub struct EulerScheduler<T> {
    timesteps: Vec<Timestep<T>>,
}

impl<T: Scalar> EulerScheduler<T> {
    /// Integer grid `steps, steps - 1, ..., 0`.
    pub fn uniform(steps: usize) -> Self {
        let timesteps = (0..=steps)
            .map(|i| Timestep::new(T::of((steps - i) as f64), i))
            .collect();
        Self { timesteps }
    }

    pub fn from_values(values: &[T]) -> Result<Self> {
        let timesteps: Vec<_> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| Timestep::new(v, i))
            .collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        check_schedule(&timesteps)?;
        Ok(Self { timesteps })
    }
}

impl<T: Scalar> Scheduler<T> for EulerScheduler<T> {
    fn timesteps(&self) -> &[Timestep<T>] {
        &self.timesteps
    }

    fn step(
        &self,
        z: &TokenMatrix<T>,
        y: &TokenMatrix<T>,
        from: Timestep<T>,
        to: Timestep<T>,
    ) -> Result<TokenMatrix<T>> {
        z.axpy(y, to.value - from.value)
    }
}

/// Everything that shapes caching behaviour in one run.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Policy {
    pub grouping: GroupingConfig,
    pub predictor: PredictorConfig,
    pub skip: SkipConfig,
}

impl Policy {
    /// FULL at every step.
    pub fn no_cache() -> Self {
        Self {
            skip: SkipConfig {
                kind: SkipKind::Cas,
                eta: 0.0,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grouping.validate()?;
        self.predictor.validate()?;
        self.skip.validate()
    }

    /// FULL steps that must precede the first CACHE step.
    pub fn min_fulls(&self) -> usize {
        let groups_needed = match (self.predictor.kind, self.skip.kind) {
            (PredictorKind::Chtp | PredictorKind::RandomGrouping, _) => 3,
            (_, SkipKind::Cas | SkipKind::CurvatureGuided) => 3,
            _ => 0,
        };
        self.skip
            .warmup_fulls
            .max(self.predictor.kind.required_history())
            .max(groups_needed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Full,
    Cache,
}

impl Decision {
    pub fn name(self) -> &'static str {
        match self {
            Decision::Full => "FULL",
            Decision::Cache => "CACHE",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord<T> {
    pub step: usize,
    pub timestep: Timestep<T>,
    pub decision: Decision,
    /// Streak counter after the step.
    pub k: usize,
    pub e_t: T,
    /// Accumulator after the step.
    pub e_acc: T,
    /// Index into [`RunResult::assignments`] of the grouping active at this step.
    pub group_id: Option<usize>,
    /// Relative Frobenius error against the reference output, when one was supplied.
    pub rel_err: Option<f64>,
    /// Mean rowwise error per group (Stable, Linear, Chaotic), when available.
    pub group_err: [Option<f64>; 3],
}

#[derive(Debug, Clone)]
pub struct RunResult<T> {
    pub records: Vec<StepRecord<T>>,
    pub final_latent: TokenMatrix<T>,
    pub full_count: usize,
    pub cache_count: usize,
    /// Output used at every step, when recording was requested.
    pub surrogates: Option<Vec<TokenMatrix<T>>>,
    /// Every grouping computed during the run, in refresh order.
    pub assignments: Vec<GroupAssignment<T>>,
}

impl<T: Scalar> RunResult<T> {
    pub fn steps(&self) -> usize {
        self.records.len()
    }

    pub fn decisions(&self) -> impl Iterator<Item = Decision> + '_ {
        self.records.iter().map(|r| r.decision)
    }

    pub fn assignment_at(&self, step: usize) -> Option<&GroupAssignment<T>> {
        self.records
            .get(step)?
            .group_id
            .map(|g| &self.assignments[g])
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions<'a, T> {
    pub record_surrogates: bool,
    /// Per-step reference outputs (typically an oracle run's surrogates) used
    /// to fill the error columns of each record.
    pub reference: Option<&'a [TokenMatrix<T>]>,
}

/// Runs the cached loop over the scheduler's grid.
pub fn run<T: Scalar>(
    backbone: &dyn Backbone<T>,
    scheduler: &dyn Scheduler<T>,
    z_init: &TokenMatrix<T>,
    policy: &Policy,
    opts: &RunOptions<'_, T>,
) -> Result<RunResult<T>> {
    policy.validate()?;
    let shape = backbone.shape();
    z_init.ensure_shape(shape)?;
    let grid = scheduler.timesteps();
    check_schedule(grid)?;
    let steps = scheduler.steps();
    if let Some(reference) = opts.reference {
        if reference.len() < steps {
            return Err(Error::length("reference outputs", steps, reference.len()));
        }
    }

    let min_fulls = policy.min_fulls();
    let n_max = policy.predictor.n_max;
    let eps = T::of(policy.grouping.eps);

    let mut z = z_init.clone();
    let mut history = FullHistory::new();
    let mut state = CacheState::<T>::default();
    let mut assignments: Vec<GroupAssignment<T>> = Vec::new();
    let mut records = Vec::with_capacity(steps);
    let mut surrogates = opts.record_surrogates.then(|| Vec::with_capacity(steps));
    let (mut full_count, mut cache_count) = (0usize, 0usize);

    for step in 0..steps {
        let (t, t_next) = (grid[step], grid[step + 1]);
        let full =
            full_count < min_fulls || should_full(&state, &policy.skip, full_count, n_max, None);

        let mut e_t = T::zero();
        let y_t = if full {
            let y = backbone.evaluate(&z, t)?;
            y.ensure_shape(shape)?;
            history.push(t, y.clone())?;
            if history.len() == 3 {
                let kappa = compute_curvature(&history, eps)?;
                let mut g = group_tokens(&kappa, policy.grouping.p_s, policy.grouping.p_c, t)?;
                if policy.predictor.kind == PredictorKind::RandomGrouping {
                    g = random_grouping(&g, policy.predictor.rng_seed, assignments.len() as u64);
                }
                assignments.push(g.clone());
                state.group = Some(g);
            }
            state.reset_streak();
            full_count += 1;
            y
        } else {
            state.k += 1;
            let (t_star, _) = history.latest().expect("FULL history before caching");
            let horizon = policy.predictor.horizon_mode.horizon(*t_star, t, state.k);
            let y = predict(
                &history,
                state.group.as_ref(),
                state.k,
                horizon,
                &policy.predictor,
            )?;
            let y_prev = state
                .y_prev
                .as_ref()
                .expect("previous output before caching");
            if let Some(g) = state.group.as_ref() {
                e_t = drift_score(g, &y, y_prev)?;
            }
            let mut probe = state.probe;
            probe.observe(&y, y_prev, state.group.as_ref())?;
            state.probe = probe;
            state.accumulate(e_t)?;
            cache_count += 1;
            y
        };

        z = scheduler.step(&z, &y_t, t, t_next)?;
        z.ensure_shape(shape)?;

        let group_id = state.group.as_ref().map(|_| assignments.len() - 1);
        let (rel_err, group_err) = match opts.reference {
            Some(reference) => {
                let active = group_id.map(|g| &assignments[g]);
                step_errors(&y_t, &reference[step], active)?
            }
            None => (None, [None; 3]),
        };
        records.push(StepRecord {
            step,
            timestep: t,
            decision: if full {
                Decision::Full
            } else {
                Decision::Cache
            },
            k: state.k,
            e_t,
            e_acc: state.e_acc,
            group_id,
            rel_err,
            group_err,
        });
        if let Some(s) = surrogates.as_mut() {
            s.push(y_t.clone());
        }
        state.y_prev = Some(y_t);
    }

    Ok(RunResult {
        records,
        final_latent: z,
        full_count,
        cache_count,
        surrogates,
        assignments,
    })
}

/// The no-cache reference: FULL at every step, outputs recorded.
pub fn oracle_run<T: Scalar>(
    backbone: &dyn Backbone<T>,
    scheduler: &dyn Scheduler<T>,
    z_init: &TokenMatrix<T>,
) -> Result<RunResult<T>> {
    let opts = RunOptions {
        record_surrogates: true,
        reference: None,
    };
    run(backbone, scheduler, z_init, &Policy::no_cache(), &opts)
}

/// Relative Frobenius error and per-group mean rowwise error of `y` against `reference`.
pub fn step_errors<T: Scalar>(
    y: &TokenMatrix<T>,
    reference: &TokenMatrix<T>,
    groups: Option<&GroupAssignment<T>>,
) -> Result<(Option<f64>, [Option<f64>; 3])> {
    let rows = y.row_distances(reference)?;
    let num = rows
        .iter()
        .map(|d| d.as_f64() * d.as_f64())
        .sum::<f64>()
        .sqrt();
    let rel = num / (reference.frobenius_norm().as_f64() + REL_ERR_TINY);
    let mut per_group = [None; 3];
    if let Some(g) = groups {
        for (slot, grp) in TokenGroup::ALL.into_iter().enumerate() {
            let (sum, n) = g
                .indices(grp)
                .fold((0.0, 0usize), |(s, n), i| (s + rows[i].as_f64(), n + 1));
            per_group[slot] = (n > 0).then(|| sum / n as f64);
        }
    }
    Ok((Some(rel), per_group))
}
