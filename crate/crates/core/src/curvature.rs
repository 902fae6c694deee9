//! Discrete velocity, acceleration, and curvature of token trajectories, and
//! the percentile Stable / Linear / Chaotic grouping built on top of it.
//!
//! Only FULL backbone outputs enter the history. With the three most recent
//! outputs at `t2 > t1 > t0`:
//!
//! ```text
//! v0 = (y0 - y1) / (t0 - t1)
//! v1 = (y1 - y2) / (t1 - t2)
//! a0 = (v0 - v1) / (t0 - t1)
//! kappa_i = |a0_i| / (|v0_i|^2 + eps)
//! ```
//!
//! Denominators are true timestep differences, so non-uniform schedules and
//! FULL outputs separated by cached streaks are handled without rescaling.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::matrix::{Timestep, TokenMatrix};
use crate::scalar::Scalar;

/// Number of FULL outputs retained.
pub const HISTORY_CAPACITY: usize = 3;

/// Default curvature regulariser.
pub const DEFAULT_EPS: f64 = 1e-8;
pub const DEFAULT_P_STABLE: f64 = 0.3;
pub const DEFAULT_P_CHAOTIC: f64 = 0.7;

#[derive(Debug, Clone)]
pub struct FullHistory<T> {
    /// Most recent first.
    entries: VecDeque<(Timestep<T>, TokenMatrix<T>)>,
    v_latest: Option<TokenMatrix<T>>,
    v_prev: Option<TokenMatrix<T>>,
}

impl<T: Scalar> Default for FullHistory<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> FullHistory<T> {
    pub fn new() -> Self {
        Self {
            entries: VecDeque::with_capacity(HISTORY_CAPACITY),
            v_latest: None,
            v_prev: None,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry `i`, counted from the most recent.
    pub fn entry(&self, i: usize) -> Option<(&Timestep<T>, &TokenMatrix<T>)> {
        self.entries.get(i).map(|(t, y)| (t, y))
    }

    pub fn latest(&self) -> Option<(&Timestep<T>, &TokenMatrix<T>)> {
        self.entry(0)
    }

    pub fn shape(&self) -> Option<(usize, usize)> {
        self.latest().map(|(_, y)| y.shape())
    }

    pub fn v_latest(&self) -> Option<&TokenMatrix<T>> {
        self.v_latest.as_ref()
    }

    pub fn v_prev(&self) -> Option<&TokenMatrix<T>> {
        self.v_prev.as_ref()
    }

    pub(crate) fn require(&self, needed: usize) -> Result<()> {
        if self.len() < needed {
            return Err(Error::InsufficientHistory {
                needed,
                have: self.len(),
            });
        }
        Ok(())
    }

    /// Records a FULL output, evicting the oldest entry beyond capacity and
    /// recomputing both velocities.
    pub fn push(&mut self, t: Timestep<T>, y: TokenMatrix<T>) -> Result<()> {
        if let Some((latest_t, latest_y)) = self.latest() {
            if !(t.value < latest_t.value) {
                return Err(Error::Ordering(format!(
                    "FULL output at t={} does not follow t={}",
                    t.value, latest_t.value
                )));
            }
            y.ensure_shape(latest_y.shape())?;
        }
        self.entries.push_front((t, y));
        self.entries.truncate(HISTORY_CAPACITY);
        self.v_latest = self.velocity(0, 1)?;
        self.v_prev = self.velocity(1, 2)?;
        Ok(())
    }

    fn velocity(&self, newer: usize, older: usize) -> Result<Option<TokenMatrix<T>>> {
        match (self.entries.get(newer), self.entries.get(older)) {
            (Some((tn, yn)), Some((to, yo))) => {
                let dt = tn.value - to.value;
                Ok(Some(yn.sub(yo)?.scale(dt.recip())?))
            }
            _ => Ok(None),
        }
    }

    /// Discrete acceleration `(v_latest - v_prev) / (t0 - t1)`.
    pub fn acceleration(&self) -> Result<TokenMatrix<T>> {
        self.require(HISTORY_CAPACITY)?;
        let (v0, v1) = (
            self.v_latest.as_ref().unwrap(),
            self.v_prev.as_ref().unwrap(),
        );
        let dt = self.entries[0].0.value - self.entries[1].0.value;
        v0.sub(v1)?.scale(dt.recip())
    }
}

/// Functional form of [`FullHistory::push`].
pub fn push_full<T: Scalar>(
    mut h: FullHistory<T>,
    t: Timestep<T>,
    y: TokenMatrix<T>,
) -> Result<FullHistory<T>> {
    h.push(t, y)?;
    Ok(h)
}

/// Per-token curvature score. Requires three FULL outputs.
///
/// `eps = 0` is accepted for exact scale analysis; a token with zero
/// velocity and zero acceleration then scores 0, and one with zero velocity
/// but nonzero acceleration is a domain error.
pub fn compute_curvature<T: Scalar>(h: &FullHistory<T>, eps: T) -> Result<Vec<T>> {
    if !(eps >= T::zero()) || !eps.is_finite() {
        return Err(Error::Parameter(format!(
            "eps must be finite and >= 0, got {eps}"
        )));
    }
    let accel = h.acceleration()?.row_l2_norms();
    let speed = h.v_latest.as_ref().unwrap().row_l2_norms();
    accel
        .into_iter()
        .zip(speed)
        .enumerate()
        .map(|(i, (a, v))| {
            let denom = v * v + eps;
            if denom > T::zero() {
                Ok(a / denom)
            } else if a == T::zero() {
                Ok(T::zero())
            } else {
                Err(Error::Domain(format!(
                    "token {i} has zero velocity and nonzero acceleration with eps=0"
                )))
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TokenGroup {
    Stable,
    Linear,
    Chaotic,
}

impl TokenGroup {
    pub const ALL: [TokenGroup; 3] = [TokenGroup::Stable, TokenGroup::Linear, TokenGroup::Chaotic];

    pub fn name(self) -> &'static str {
        match self {
            TokenGroup::Stable => "stable",
            TokenGroup::Linear => "linear",
            TokenGroup::Chaotic => "chaotic",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupAssignment<T> {
    pub kappa: Vec<T>,
    pub labels: Vec<TokenGroup>,
    pub source_timestep: Timestep<T>,
}

impl<T: Scalar> GroupAssignment<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn count(&self, g: TokenGroup) -> usize {
        self.labels.iter().filter(|&&l| l == g).count()
    }

    pub fn indices(&self, g: TokenGroup) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(move |(_, &l)| l == g)
            .map(|(i, _)| i)
    }
}

/// Group sizes `(floor(p_s * n), ceil((1 - p_c) * n))` for `n` tokens.
pub fn group_sizes(n: usize, p_s: f64, p_c: f64) -> Result<(usize, usize)> {
    if !(p_s > 0.0 && p_s < 1.0) {
        return Err(Error::Parameter(format!(
            "p_s must lie in (0, 1), got {p_s}"
        )));
    }
    if !(p_c > p_s && p_c <= 1.0) {
        return Err(Error::Parameter(format!(
            "p_c must lie in (p_s, 1], got p_s={p_s}, p_c={p_c}"
        )));
    }
    let stable = snapped(p_s * n as f64).floor() as usize;
    let chaotic = snapped((1.0 - p_c) * n as f64).ceil() as usize;
    if stable + chaotic > n {
        return Err(Error::Parameter(format!(
            "stable ({stable}) and chaotic ({chaotic}) selections overlap for {n} tokens"
        )));
    }
    Ok((stable, chaotic))
}

// 0.3 * 10 and (1 - 0.7) * 10 both land a few ulps away from 3.
fn snapped(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r
    } else {
        x
    }
}

/// Percentile grouping: Stable is `{i : kappa_i < Q_s}` and Chaotic is
/// `{i : kappa_i >= Q_c}`, where `Q_s` is the order statistic at rank
/// `floor(p_s N)` and `Q_c` the one at rank `N - ceil((1 - p_c) N)`
/// (0-based, ascending). With distinct curvatures this selects exactly
/// `floor(p_s N)` Stable and `ceil((1 - p_c) N)` Chaotic tokens. Ties at a
/// threshold move tokens out of Stable and into Chaotic, so a fully tied
/// vector is all Chaotic.
pub fn group_tokens<T: Scalar>(
    kappa: &[T],
    p_s: f64,
    p_c: f64,
    source_timestep: Timestep<T>,
) -> Result<GroupAssignment<T>> {
    if let Some(index) = kappa.iter().position(|k| !k.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let n = kappa.len();
    let (n_stable, n_chaotic) = group_sizes(n, p_s, p_c)?;
    let mut sorted = kappa.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite curvature"));
    let q_stable = sorted.get(n_stable).copied();
    let q_chaotic = (n_chaotic > 0).then(|| sorted[n - n_chaotic]);
    let labels = kappa
        .iter()
        .map(|&k| {
            if q_chaotic.is_some_and(|q| k >= q) {
                TokenGroup::Chaotic
            } else if q_stable.is_some_and(|q| k < q) {
                TokenGroup::Stable
            } else {
                TokenGroup::Linear
            }
        })
        .collect();
    Ok(GroupAssignment {
        kappa: kappa.to_vec(),
        labels,
        source_timestep,
    })
}

/// Curvature and grouping parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupingConfig {
    pub p_s: f64,
    pub p_c: f64,
    pub eps: f64,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self {
            p_s: DEFAULT_P_STABLE,
            p_c: DEFAULT_P_CHAOTIC,
            eps: DEFAULT_EPS,
        }
    }
}

impl GroupingConfig {
    pub fn validate(&self) -> Result<()> {
        group_sizes(0, self.p_s, self.p_c)?;
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::Parameter(format!(
                "eps must be finite and >= 0, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}
