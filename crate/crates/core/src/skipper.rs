//! FULL-vs-CACHE decisions.
//!
//! The chaotic-prioritised rule scores each cached step by the mean over
//! Chaotic tokens of `kappa_i * |y_t,i - y_prev,i|`, accumulates the score
//! over the streak, and requests a FULL step once the sum reaches `eta`.
//! Curvature scales as `1/s` and displacements as `s` under a global feature
//! rescale `y -> s*y`, so the score carries no feature units.

use crate::curvature::{GroupAssignment, TokenGroup};
use crate::error::{Error, Result};
use crate::matrix::TokenMatrix;
use crate::scalar::Scalar;

pub const DEFAULT_WARMUP_FULLS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SkipKind {
    /// Chaotic-prioritised accumulated drift.
    Cas,
    FixedInterval,
    DifferenceGuided,
    NormGuided,
    CurvatureGuided,
}

impl SkipKind {
    pub const ALL: [SkipKind; 5] = [
        SkipKind::Cas,
        SkipKind::FixedInterval,
        SkipKind::DifferenceGuided,
        SkipKind::NormGuided,
        SkipKind::CurvatureGuided,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SkipKind::Cas => "worldcache",
            SkipKind::FixedInterval => "fixed",
            SkipKind::DifferenceGuided => "difference",
            SkipKind::NormGuided => "norm",
            SkipKind::CurvatureGuided => "curvature",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "worldcache" | "cas" => Some(SkipKind::Cas),
            "fixed" => Some(SkipKind::FixedInterval),
            "difference" => Some(SkipKind::DifferenceGuided),
            "norm" => Some(SkipKind::NormGuided),
            "curvature" => Some(SkipKind::CurvatureGuided),
            _ => None,
        }
    }
}

/// Threshold presets for the two workload scales the defaults were tuned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EtaProfile {
    #[default]
    Aether,
    Voyager,
}

impl EtaProfile {
    pub fn eta(self) -> f64 {
        match self {
            EtaProfile::Aether => 0.2,
            EtaProfile::Voyager => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkipConfig {
    pub kind: SkipKind,
    pub eta: f64,
    pub interval: usize,
    pub tau: f64,
    /// Force a FULL step once the streak reaches `n_max`.
    pub enforce_streak_cap: bool,
    pub warmup_fulls: usize,
}

impl Default for SkipConfig {
    fn default() -> Self {
        Self {
            kind: SkipKind::Cas,
            eta: EtaProfile::default().eta(),
            interval: 2,
            tau: 0.1,
            enforce_streak_cap: true,
            warmup_fulls: DEFAULT_WARMUP_FULLS,
        }
    }
}

impl SkipConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_fulls == 0 {
            return Err(Error::Parameter("warmup_fulls must be >= 1".into()));
        }
        match self.kind {
            SkipKind::Cas if self.eta.is_nan() || self.eta < 0.0 => Err(Error::Parameter(format!(
                "eta must be >= 0, got {}",
                self.eta
            ))),
            SkipKind::FixedInterval if self.interval == 0 => {
                Err(Error::Parameter("interval must be >= 1".into()))
            }
            SkipKind::DifferenceGuided | SkipKind::NormGuided | SkipKind::CurvatureGuided
                if self.tau.is_nan() || self.tau < 0.0 =>
            {
                Err(Error::Parameter(format!(
                    "tau must be >= 0, got {}",
                    self.tau
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Streak-accumulated statistics for the guided baselines.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DriftProbe {
    /// Sum of `|y_t - y_prev|_F`.
    pub difference: f64,
    /// Sum of `|y_t - y_prev|_F / |y_prev|_F`.
    pub norm: f64,
    /// Sum of the mean curvature over all tokens.
    pub curvature: f64,
}

impl DriftProbe {
    pub fn observe<T: Scalar>(
        &mut self,
        y_t: &TokenMatrix<T>,
        y_prev: &TokenMatrix<T>,
        groups: Option<&GroupAssignment<T>>,
    ) -> Result<()> {
        let diff = y_t.sub(y_prev)?.frobenius_norm().as_f64();
        let base = y_prev.frobenius_norm().as_f64();
        self.difference += diff;
        self.norm += if base > 0.0 {
            diff / base
        } else if diff > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        if let Some(g) = groups {
            let n = g.kappa.len().max(1) as f64;
            self.curvature += g.kappa.iter().map(|k| k.as_f64()).sum::<f64>() / n;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CacheState<T> {
    /// Consecutive CACHE steps since the last FULL step.
    pub k: usize,
    pub e_acc: T,
    /// Output emitted at the previous step (FULL or surrogate).
    pub y_prev: Option<TokenMatrix<T>>,
    pub group: Option<GroupAssignment<T>>,
    pub probe: DriftProbe,
}

impl<T: Scalar> Default for CacheState<T> {
    fn default() -> Self {
        Self {
            k: 0,
            e_acc: T::zero(),
            y_prev: None,
            group: None,
            probe: DriftProbe::default(),
        }
    }
}

impl<T: Scalar> CacheState<T> {
    /// Clears the streak counter and all accumulators after a FULL step.
    pub fn reset_streak(&mut self) {
        self.k = 0;
        self.e_acc = T::zero();
        self.probe = DriftProbe::default();
    }

    pub fn accumulate(&mut self, e_t: T) -> Result<()> {
        if !e_t.is_finite() || e_t < T::zero() {
            return Err(Error::Domain(format!(
                "drift score must be finite and >= 0, got {e_t}"
            )));
        }
        self.e_acc = self.e_acc + e_t;
        Ok(())
    }
}

/// Functional form of [`CacheState::accumulate`].
pub fn accumulate<T: Scalar>(mut state: CacheState<T>, e_t: T) -> Result<CacheState<T>> {
    state.accumulate(e_t)?;
    Ok(state)
}

/// Mean over Chaotic tokens of `kappa_i * |y_t,i - y_prev,i|`, falling back
/// to the mean over all tokens when the Chaotic group is empty. Summation is
/// left to right in token order.
pub fn drift_score<T: Scalar>(
    g: &GroupAssignment<T>,
    y_t: &TokenMatrix<T>,
    y_prev: &TokenMatrix<T>,
) -> Result<T> {
    let dist = y_t.row_distances(y_prev)?;
    if g.len() != dist.len() || g.kappa.len() != dist.len() {
        return Err(Error::length("group assignment", dist.len(), g.len()));
    }
    let chaotic = g.count(TokenGroup::Chaotic);
    let (sum, n) = if chaotic > 0 {
        let sum = g
            .indices(TokenGroup::Chaotic)
            .fold(T::zero(), |acc, i| acc + g.kappa[i] * dist[i]);
        (sum, chaotic)
    } else {
        let sum = g
            .kappa
            .iter()
            .zip(&dist)
            .fold(T::zero(), |acc, (&k, &d)| acc + k * d);
        (sum, dist.len())
    };
    Ok(sum / T::of(n as f64))
}

/// Decides whether the upcoming step evaluates the backbone.
///
/// `fulls_so_far` counts FULL steps already executed in the run. The
/// accumulators in `state` and `probe` cover the current streak only.
pub fn should_full<T: Scalar>(
    state: &CacheState<T>,
    cfg: &SkipConfig,
    fulls_so_far: usize,
    n_max: usize,
    probe: Option<&DriftProbe>,
) -> bool {
    if fulls_so_far < cfg.warmup_fulls {
        return true;
    }
    if cfg.kind != SkipKind::FixedInterval && cfg.enforce_streak_cap && state.k >= n_max {
        return true;
    }
    let probe = probe.copied().unwrap_or(state.probe);
    match cfg.kind {
        SkipKind::Cas => state.e_acc >= T::of(cfg.eta),
        SkipKind::FixedInterval => state.k >= cfg.interval,
        SkipKind::DifferenceGuided => probe.difference >= cfg.tau,
        SkipKind::NormGuided => probe.norm >= cfg.tau,
        SkipKind::CurvatureGuided => probe.curvature >= cfg.tau,
    }
}
