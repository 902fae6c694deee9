//! Surrogate outputs for CACHE steps.
//!
//! The heterogeneous rule reuses Stable tokens, extrapolates Linear tokens
//! along the latest velocity, and extrapolates Chaotic tokens along a
//! smoothstep blend of the two most recent velocities. The uniform and
//! random-grouping variants exist for ablation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::curvature::{FullHistory, GroupAssignment, TokenGroup, HISTORY_CAPACITY};
use crate::error::{Error, Result};
use crate::matrix::{Timestep, TokenMatrix};
use crate::scalar::Scalar;

pub const DEFAULT_N_MAX: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PredictorKind {
    /// Curvature-grouped reuse / linear / damped.
    Chtp,
    UniformReuse,
    UniformLinear,
    UniformDamped,
    /// Heterogeneous rules on a random relabelling with the same group sizes.
    RandomGrouping,
}

impl PredictorKind {
    pub const ALL: [PredictorKind; 5] = [
        PredictorKind::Chtp,
        PredictorKind::UniformReuse,
        PredictorKind::UniformLinear,
        PredictorKind::UniformDamped,
        PredictorKind::RandomGrouping,
    ];

    /// FULL outputs needed before the rule can produce a surrogate.
    pub fn required_history(self) -> usize {
        match self {
            PredictorKind::UniformReuse => 1,
            PredictorKind::UniformLinear => 2,
            _ => HISTORY_CAPACITY,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PredictorKind::Chtp => "chtp",
            PredictorKind::UniformReuse => "reuse",
            PredictorKind::UniformLinear => "linear",
            PredictorKind::UniformDamped => "damped",
            PredictorKind::RandomGrouping => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        PredictorKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
    }
}

/// How far a surrogate extrapolates from the last FULL output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HorizonMode {
    /// Signed scheduler-time displacement `t - t_star`.
    #[default]
    TimestepDelta,
    /// `k` unit steps along the denoising direction, i.e. `-k` in scheduler time.
    StepCount,
}

impl HorizonMode {
    pub fn name(self) -> &'static str {
        match self {
            HorizonMode::TimestepDelta => "timestep_delta",
            HorizonMode::StepCount => "step_count",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "timestep_delta" => Some(HorizonMode::TimestepDelta),
            "step_count" => Some(HorizonMode::StepCount),
            _ => None,
        }
    }

    /// Extrapolation distance for the `k`-th cached step at `t`, measured
    /// from the last FULL step at `t_star`. Velocities are derivatives with
    /// respect to scheduler time, which decreases while denoising, so the
    /// distance is negative.
    pub fn horizon<T: Scalar>(self, t_star: Timestep<T>, t: Timestep<T>, k: usize) -> T {
        match self {
            HorizonMode::TimestepDelta => t.value - t_star.value,
            HorizonMode::StepCount => -T::of(k as f64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictorConfig {
    pub kind: PredictorKind,
    pub n_max: usize,
    pub horizon_mode: HorizonMode,
    pub rng_seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            kind: PredictorKind::Chtp,
            n_max: DEFAULT_N_MAX,
            horizon_mode: HorizonMode::TimestepDelta,
            rng_seed: 0,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_max == 0 {
            return Err(Error::Parameter("n_max must be >= 1".into()));
        }
        Ok(())
    }
}

/// Smoothstep weight `3x^2 - 2x^3` with `x = min(k / n_max, 1)`.
pub fn hermite_alpha<T: Scalar>(k: usize, n_max: usize) -> T {
    let x = if n_max == 0 || k >= n_max {
        T::one()
    } else {
        T::of(k as f64) / T::of(n_max as f64)
    };
    T::of(3.0) * x * x - T::of(2.0) * x * x * x
}

/// `(1 - alpha_k) * v_latest + alpha_k * v_prev`, per element.
pub fn damped_velocity<T: Scalar>(
    h: &FullHistory<T>,
    k: usize,
    n_max: usize,
) -> Result<TokenMatrix<T>> {
    let (Some(v0), Some(v1)) = (h.v_latest(), h.v_prev()) else {
        return Err(Error::InsufficientHistory {
            needed: HISTORY_CAPACITY,
            have: h.len(),
        });
    };
    let alpha: T = hermite_alpha(k, n_max);
    let keep = T::one() - alpha;
    let data = v0
        .as_slice()
        .iter()
        .zip(v1.as_slice())
        .map(|(&a, &b)| keep * a + alpha * b)
        .collect();
    TokenMatrix::new(v0.rows(), v0.cols(), data)
}

/// Surrogate output for the `k`-th consecutive cached step.
///
/// `horizon` is the signed extrapolation distance in scheduler time (see
/// [`HorizonMode::horizon`]). `groups` is required by the grouped kinds and
/// ignored by the uniform ones.
pub fn predict<T: Scalar>(
    h: &FullHistory<T>,
    groups: Option<&GroupAssignment<T>>,
    k: usize,
    horizon: T,
    cfg: &PredictorConfig,
) -> Result<TokenMatrix<T>> {
    h.require(cfg.kind.required_history())?;
    let (_, y_star) = h.latest().expect("non-empty history");
    let shape = y_star.shape();

    let uniform = match cfg.kind {
        PredictorKind::UniformReuse => Some(TokenGroup::Stable),
        PredictorKind::UniformLinear => Some(TokenGroup::Linear),
        PredictorKind::UniformDamped => Some(TokenGroup::Chaotic),
        PredictorKind::Chtp | PredictorKind::RandomGrouping => None,
    };
    let labels: Vec<TokenGroup> = match (uniform, groups) {
        (Some(g), _) => vec![g; shape.0],
        (None, Some(g)) => {
            if g.len() != shape.0 {
                return Err(Error::length("group labels", shape.0, g.len()));
            }
            g.labels.clone()
        }
        (None, None) => {
            return Err(Error::Parameter(
                "grouped predictor called without a group assignment".into(),
            ))
        }
    };

    let needs = |g| labels.contains(&g);
    let linear = if needs(TokenGroup::Linear) {
        Some(y_star.axpy(h.v_latest().expect("checked history"), horizon)?)
    } else {
        None
    };
    let chaotic = if needs(TokenGroup::Chaotic) {
        Some(y_star.axpy(&damped_velocity(h, k, cfg.n_max)?, horizon)?)
    } else {
        None
    };
    TokenMatrix::gather_rows(shape, |i| match labels[i] {
        TokenGroup::Stable => y_star.row(i),
        TokenGroup::Linear => linear.as_ref().unwrap().row(i),
        TokenGroup::Chaotic => chaotic.as_ref().unwrap().row(i),
    })
}

/// Uniformly random relabelling that keeps each group's size. The stream is
/// a pure function of `(seed, refresh)`.
pub fn random_grouping<T: Scalar>(
    g: &GroupAssignment<T>,
    seed: u64,
    refresh: u64,
) -> GroupAssignment<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(refresh);
    let mut labels = g.labels.clone();
    labels.shuffle(&mut rng);
    GroupAssignment {
        kappa: g.kappa.clone(),
        labels,
        source_timestep: g.source_timestep,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curvature::group_tokens;

    fn ts(v: f64, i: usize) -> Timestep<f64> {
        Timestep::new(v, i)
    }

    fn history(points: &[(f64, Vec<f64>)], cols: usize) -> FullHistory<f64> {
        let mut h = FullHistory::new();
        for (i, (t, y)) in points.iter().enumerate() {
            h.push(
                ts(*t, i),
                TokenMatrix::new(y.len() / cols, cols, y.clone()).unwrap(),
            )
            .unwrap();
        }
        h
    }

    fn cfg(kind: PredictorKind) -> PredictorConfig {
        PredictorConfig {
            kind,
            ..Default::default()
        }
    }

    #[test]
    fn hermite_examples() {
        assert_eq!(hermite_alpha::<f64>(0, 6), 0.0);
        assert_eq!(hermite_alpha::<f64>(6, 6), 1.0);
        assert_eq!(hermite_alpha::<f64>(3, 6), 0.5);
        assert_eq!(hermite_alpha::<f64>(40, 6), 1.0);
        let mut prev = 0.0;
        for k in 1..=12 {
            let a = hermite_alpha::<f64>(k, 6);
            assert!(a >= prev && (0.0..=1.0).contains(&a));
            prev = a;
        }
    }

    // velocities in scheduler time: v_latest = (y0 - y1)/(t0 - t1)
    fn blend_history(v_latest: f64, v_prev: f64) -> FullHistory<f64> {
        // t = 2, 1, 0 with unit spacing: y1 - y2 = -v_prev, y0 - y1 = -v_latest
        history(
            &[
                (2.0, vec![0.0]),
                (1.0, vec![-v_prev]),
                (0.0, vec![-v_prev - v_latest]),
            ],
            1,
        )
    }

    #[test]
    fn damped_examples() {
        let h = blend_history(2.0, 0.0);
        assert_eq!(damped_velocity(&h, 1, 1_000_000).unwrap().as_slice()[0], {
            let a: f64 = hermite_alpha(1, 1_000_000);
            (1.0 - a) * 2.0
        });
        assert_eq!(damped_velocity(&h, 3, 6).unwrap().as_slice(), &[1.0]);
        let h = blend_history(1.5, 1.5);
        for k in 1..10 {
            let v = damped_velocity(&h, k, 6).unwrap().as_slice()[0];
            assert!((v - 1.5).abs() <= 4.0 * f64::EPSILON);
        }
        let short = history(&[(2.0, vec![0.0]), (1.0, vec![1.0])], 1);
        assert!(matches!(
            damped_velocity(&short, 1, 6),
            Err(Error::InsufficientHistory { .. })
        ));
    }

    #[test]
    fn damped_is_latest_when_alpha_vanishes() {
        let h = blend_history(2.0, -7.0);
        assert_eq!(damped_velocity(&h, 0, 6).unwrap().as_slice(), &[2.0]);
    }

    #[test]
    fn predict_examples() {
        // all stable -> bitwise copy of the latest FULL output
        let h = history(
            &[
                (3.0, vec![0.1, 0.2]),
                (2.0, vec![0.3, 0.7]),
                (1.0, vec![0.9, -0.4]),
            ],
            1,
        );
        let stable = GroupAssignment {
            kappa: vec![0.0; 2],
            labels: vec![TokenGroup::Stable; 2],
            source_timestep: ts(1.0, 2),
        };
        let out = predict(&h, Some(&stable), 2, -2.0, &cfg(PredictorKind::Chtp)).unwrap();
        assert_eq!(out.as_slice(), h.latest().unwrap().1.as_slice());

        // linear token: y* = 5, v* = 2, horizon 3 -> 11
        let h = history(
            &[(-2.0, vec![9.0]), (-3.0, vec![7.0]), (-4.0, vec![5.0])],
            1,
        );
        assert_eq!(h.v_latest().unwrap().as_slice(), &[2.0]);
        let lin = GroupAssignment {
            kappa: vec![0.0],
            labels: vec![TokenGroup::Linear],
            source_timestep: ts(-4.0, 2),
        };
        let out = predict(&h, Some(&lin), 1, 3.0, &cfg(PredictorKind::Chtp)).unwrap();
        assert_eq!(out.as_slice(), &[11.0]);

        // chaotic token: y* = 0, v_latest = 2, v_prev = 0, k = 3, n_max = 6, horizon 3 -> 3
        let h = history(&[(2.0, vec![2.0]), (1.0, vec![2.0]), (0.0, vec![0.0])], 1);
        assert_eq!(h.v_latest().unwrap().as_slice(), &[2.0]);
        assert_eq!(h.v_prev().unwrap().as_slice(), &[0.0]);
        let chaos = GroupAssignment {
            kappa: vec![1.0],
            labels: vec![TokenGroup::Chaotic],
            source_timestep: ts(0.0, 2),
        };
        let out = predict(&h, Some(&chaos), 3, 3.0, &cfg(PredictorKind::Chtp)).unwrap();
        assert_eq!(out.as_slice(), &[3.0]);
    }

    #[test]
    fn predict_errors() {
        let h = history(
            &[
                (2.0, vec![0.0, 1.0]),
                (1.0, vec![0.0, 1.0]),
                (0.0, vec![0.0, 1.0]),
            ],
            1,
        );
        let g = GroupAssignment {
            kappa: vec![0.0],
            labels: vec![TokenGroup::Linear],
            source_timestep: ts(0.0, 2),
        };
        assert!(matches!(
            predict(&h, Some(&g), 1, -1.0, &cfg(PredictorKind::Chtp)),
            Err(Error::Dimension { .. })
        ));
        let short = history(&[(2.0, vec![0.0])], 1);
        assert!(predict(&short, None, 1, -1.0, &cfg(PredictorKind::UniformReuse)).is_ok());
        assert!(matches!(
            predict(&short, None, 1, -1.0, &cfg(PredictorKind::UniformLinear)),
            Err(Error::InsufficientHistory { needed: 2, have: 1 })
        ));
        assert!(predict(&h, None, 1, -1.0, &cfg(PredictorKind::Chtp)).is_err());
    }

    #[test]
    fn horizon_modes() {
        let star = ts(10.0, 40);
        let now = ts(7.5, 42);
        assert_eq!(HorizonMode::TimestepDelta.horizon(star, now, 2), -2.5);
        assert_eq!(HorizonMode::StepCount.horizon(star, now, 2), -2.0);
    }

    #[test]
    fn random_grouping_preserves_sizes_and_is_seeded() {
        let kappa: Vec<f64> = (0..40).map(|i| f64::from(i * 7 % 13)).collect();
        let g = group_tokens(&kappa, 0.3, 0.7, ts(0.0, 0)).unwrap();
        let a = random_grouping(&g, 11, 0);
        let b = random_grouping(&g, 11, 0);
        let c = random_grouping(&g, 11, 1);
        assert_eq!(a.labels, b.labels);
        assert_ne!(a.labels, c.labels);
        for grp in TokenGroup::ALL {
            assert_eq!(a.count(grp), g.count(grp));
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn hist(vals: &[f64], s: f64) -> FullHistory<f64> {
            let mut h = FullHistory::new();
            for (i, t) in [5.0, 3.5, 2.0].into_iter().enumerate() {
                let y = TokenMatrix::new(
                    3,
                    2,
                    vals[i * 6..(i + 1) * 6].iter().map(|v| v * s).collect(),
                )
                .unwrap();
                h.push(ts(t, i), y).unwrap();
            }
            h
        }

        proptest! {
            #[test]
            fn predict_is_scale_equivariant(
                vals in prop::collection::vec(-5.0f64..5.0, 18),
                s in 0.1f64..20.0,
                k in 1usize..9,
            ) {
                let g = GroupAssignment {
                    kappa: vec![0.0; 3],
                    labels: vec![TokenGroup::Stable, TokenGroup::Linear, TokenGroup::Chaotic],
                    source_timestep: ts(2.0, 2),
                };
                for kind in [PredictorKind::Chtp, PredictorKind::UniformLinear, PredictorKind::UniformDamped] {
                    let c = cfg(kind);
                    let base = predict(&hist(&vals, 1.0), Some(&g), k, -1.25, &c).unwrap();
                    let scaled = predict(&hist(&vals, s), Some(&g), k, -1.25, &c).unwrap();
                    for (a, b) in base.as_slice().iter().zip(scaled.as_slice()) {
                        prop_assert!((b - s * a).abs() <= 1e-10 * (1.0 + (s * a).abs()));
                    }
                }
            }

            #[test]
            fn damped_velocity_is_bounded(vals in prop::collection::vec(-5.0f64..5.0, 18), k in 0usize..20) {
                let h = hist(&vals, 1.0);
                let v = damped_velocity(&h, k, 6).unwrap().row_l2_norms();
                let v0 = h.v_latest().unwrap().row_l2_norms();
                let v1 = h.v_prev().unwrap().row_l2_norms();
                for i in 0..3 {
                    prop_assert!(v[i] <= v0[i].max(v1[i]) * (1.0 + 1e-12) + 1e-12);
                }
            }
        }
    }
}
