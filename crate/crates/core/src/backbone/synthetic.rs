//! Parametric token-trajectory generators.
//!
//! Tokens are split into three regimes. Stable tokens emit a constant row,
//! linear tokens move along a fixed direction, and chaotic tokens change
//! direction abruptly. Time enters through `tau = t_start - t`, the elapsed
//! scheduler time since the start of denoising.
//!
//! Presets:
//! - `Smooth`: linear tokens are exactly affine; chaotic tokens circle in a
//!   random 2-plane on top of a linear drift.
//! - `Mixed`: linear tokens carry a mild quadratic bend; chaotic tokens
//!   drift linearly under a sum of three sinusoids in random directions,
//!   whose strength is concentrated in two bursts per run, plus a weak
//!   flicker that flips sign every unit of time.
//! - `TurnPoint`: linear tokens are exactly affine; chaotic tokens move at
//!   constant speed until `turn_step`, reverse, and then keep reversing as a
//!   triangle wave at the given frequency.
//!
//! Base rows and velocities are drawn on a dyadic grid so affine tokens are
//! reproduced exactly by finite differences at integer timesteps.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::matrix::{Timestep, TokenMatrix};
use crate::pipeline::Backbone;
use crate::scalar::Scalar;

/// Coefficient of the closed-loop pull `coupling * CLOSED_LOOP_DECAY * (z - target)`.
pub const CLOSED_LOOP_DECAY: f64 = 0.05;
/// Quadratic coefficient of Mixed-preset linear tokens.
pub const MIXED_BEND: f64 = 0.002;
/// Amplitude of the Mixed-preset sign-flipping flicker.
pub const MIXED_FLICKER: f64 = 0.2;
const MIXED_BURST_WIDTH: f64 = 6.0;
const MIXED_WAVES: usize = 3;
const DYADIC: f64 = 4096.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preset {
    #[default]
    Mixed,
    Smooth,
    TurnPoint,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Mixed => "mixed",
            Preset::Smooth => "smooth",
            Preset::TurnPoint => "turnpoint",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mixed" => Some(Preset::Mixed),
            "smooth" => Some(Preset::Smooth),
            "turnpoint" | "turn_point" => Some(Preset::TurnPoint),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    Stable,
    Linear,
    Chaotic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_tokens: usize,
    pub dims: usize,
    /// `(stable, linear, chaotic)` token fractions.
    pub fractions: [f64; 3],
    pub preset: Preset,
    pub turn_step: usize,
    pub amplitude: f64,
    /// Chaotic direction changes per unit of scheduler time.
    pub frequency: f64,
    pub noise_sigma: f64,
    /// 0 is open loop; 1 adds the full closed-loop pull toward a per-token target.
    pub coupling: f64,
    pub seed: u64,
    /// First timestep of the schedule the workload is laid out against.
    pub t_start: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_tokens: 64,
            dims: 16,
            fractions: [0.3, 0.4, 0.3],
            preset: Preset::Mixed,
            turn_step: 25,
            amplitude: 0.5,
            frequency: 0.25,
            noise_sigma: 0.0,
            coupling: 0.0,
            seed: 0,
            t_start: 50.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_tokens == 0 || self.dims == 0 {
            return Err(Error::Parameter(
                "n_tokens and dims must be positive".into(),
            ));
        }
        if self.fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
            return Err(Error::Parameter(format!(
                "fractions must be >= 0, got {:?}",
                self.fractions
            )));
        }
        let sum: f64 = self.fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Parameter(format!(
                "fractions must sum to 1, got {sum}"
            )));
        }
        for (name, v) in [
            ("amplitude", self.amplitude),
            ("frequency", self.frequency),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Parameter(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.coupling) {
            return Err(Error::Parameter(format!(
                "coupling must lie in [0, 1], got {}",
                self.coupling
            )));
        }
        if !self.t_start.is_finite() {
            return Err(Error::Parameter("t_start must be finite".into()));
        }
        Ok(())
    }

    /// Token counts per regime: `floor(f_s N)` stable, `ceil(f_c N)` chaotic, rest linear.
    pub fn regime_counts(&self) -> [usize; 3] {
        let n = self.n_tokens as f64;
        let snap = |x: f64| {
            if (x - x.round()).abs() <= 1e-9 * x.round().abs().max(1.0) {
                x.round()
            } else {
                x
            }
        };
        let stable = snap(self.fractions[0] * n).floor() as usize;
        let chaotic = (snap(self.fractions[2] * n).ceil() as usize).min(self.n_tokens - stable);
        [stable, self.n_tokens - stable - chaotic, chaotic]
    }
}

#[derive(Debug, Clone)]
struct TokenParams {
    regime: Regime,
    base: Vec<f64>,
    velocity: Vec<f64>,
    /// Bend for Mixed linear tokens, jitter or turn direction for chaotic ones.
    direction: Vec<f64>,
    /// Second in-plane axis for Smooth chaotic tokens.
    ortho: Vec<f64>,
    phase: f64,
    /// Per-token frequency multiplier.
    rate: f64,
    /// Mixed chaotic jitter components: `(frequency multiplier, phase, direction)`.
    waves: Vec<(f64, f64, Vec<f64>)>,
    target: Vec<f64>,
}

/// Deterministic synthetic backbone.
#[derive(Debug, Clone)]
pub struct SyntheticBackbone {
    spec: SyntheticSpec,
    tokens: Vec<TokenParams>,
    burst_centers: [f64; 2],
}

fn dyadic(v: f64) -> f64 {
    (v * DYADIC).round() / DYADIC
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v = normal_vec(rng, d, 1.0);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

impl SyntheticBackbone {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let [n_stable, n_linear, _] = spec.regime_counts();
        let mut regimes: Vec<Regime> = (0..spec.n_tokens)
            .map(|i| {
                if i < n_stable {
                    Regime::Stable
                } else if i < n_stable + n_linear {
                    Regime::Linear
                } else {
                    Regime::Chaotic
                }
            })
            .collect();
        regimes.shuffle(&mut rng);

        let d = spec.dims;
        let speed = 1.0 / (d as f64).sqrt();
        let tokens = regimes
            .into_iter()
            .map(|regime| {
                let base = normal_vec(&mut rng, d, 1.0)
                    .into_iter()
                    .map(dyadic)
                    .collect();
                let velocity = normal_vec(&mut rng, d, speed)
                    .into_iter()
                    .map(dyadic)
                    .collect();
                let direction = unit_vec(&mut rng, d);
                let mut ortho = unit_vec(&mut rng, d);
                let dot: f64 = ortho.iter().zip(&direction).map(|(a, b)| a * b).sum();
                ortho
                    .iter_mut()
                    .zip(&direction)
                    .for_each(|(o, u)| *o -= dot * u);
                let on = ortho.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                ortho.iter_mut().for_each(|o| *o /= on);
                let phase = rng.random::<f64>() * std::f64::consts::TAU;
                let rate = 0.85 + 0.3 * rng.random::<f64>();
                let target = normal_vec(&mut rng, d, 1.0);
                let waves = (0..MIXED_WAVES)
                    .map(|_| {
                        let r = 0.5 + rng.random::<f64>();
                        (
                            r,
                            rng.random::<f64>() * std::f64::consts::TAU,
                            unit_vec(&mut rng, d),
                        )
                    })
                    .collect();
                TokenParams {
                    regime,
                    base,
                    velocity,
                    direction,
                    ortho,
                    phase,
                    rate,
                    waves,
                    target,
                }
            })
            .collect();
        let span = spec.t_start.abs().max(1.0);
        let burst_centers = [
            span * (0.1 + 0.35 * rng.random::<f64>()),
            span * (0.55 + 0.35 * rng.random::<f64>()),
        ];
        Ok(Self {
            spec,
            tokens,
            burst_centers,
        })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    pub fn regimes(&self) -> Vec<Regime> {
        self.tokens.iter().map(|t| t.regime).collect()
    }

    /// Seeded standard-normal starting latent.
    pub fn initial_latent<T: Scalar>(&self) -> Result<TokenMatrix<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(2);
        let data = normal_vec(&mut rng, self.spec.n_tokens * self.spec.dims, 1.0);
        TokenMatrix::new(
            self.spec.n_tokens,
            self.spec.dims,
            data.into_iter().map(T::of).collect(),
        )
    }

    fn envelope(&self, tau: f64) -> f64 {
        let bursts: f64 = self
            .burst_centers
            .iter()
            .map(|c| (-((tau - c) / MIXED_BURST_WIDTH).powi(2)).exp())
            .sum();
        bursts.min(1.0)
    }

    /// Position along the turn direction for the TurnPoint preset.
    fn turn_profile(&self, tau: f64) -> f64 {
        let turn = self.spec.turn_step as f64;
        if tau <= turn {
            return tau;
        }
        let half = if self.spec.frequency > 0.0 {
            (0.5 / self.spec.frequency).max(1e-9)
        } else {
            f64::INFINITY
        };
        let s = tau - turn;
        if half.is_infinite() {
            return turn - s;
        }
        let m = s.rem_euclid(2.0 * half);
        turn - (half - (m - half).abs())
    }

    /// Noise-free, open-loop row for token `i`.
    fn clean_row(&self, i: usize, tau: f64, out: &mut [f64]) {
        let p = &self.tokens[i];
        let spec = &self.spec;
        match p.regime {
            Regime::Stable => out.copy_from_slice(&p.base),
            Regime::Linear => {
                let bend = if spec.preset == Preset::Mixed {
                    MIXED_BEND * tau * tau
                } else {
                    0.0
                };
                for (c, o) in out.iter_mut().enumerate() {
                    *o = p.base[c] + tau * p.velocity[c] + bend * p.direction[c];
                }
            }
            Regime::Chaotic => match spec.preset {
                Preset::Mixed => {
                    let scale = spec.amplitude * self.envelope(tau) / (p.waves.len() as f64).sqrt();
                    for (c, o) in out.iter_mut().enumerate() {
                        *o = p.base[c] + tau * p.velocity[c];
                    }
                    let fl = MIXED_FLICKER * (std::f64::consts::PI * tau + p.phase).sin();
                    out.iter_mut()
                        .zip(&p.direction)
                        .for_each(|(o, u)| *o += fl * u);
                    for (r, ph, dir) in &p.waves {
                        let w =
                            scale * (std::f64::consts::TAU * spec.frequency * r * tau + ph).sin();
                        out.iter_mut().zip(dir).for_each(|(o, u)| *o += w * u);
                    }
                }
                Preset::Smooth => {
                    let omega = std::f64::consts::TAU * spec.frequency * p.rate;
                    let (s, co) = (omega * tau + p.phase).sin_cos();
                    for (c, o) in out.iter_mut().enumerate() {
                        *o = p.base[c]
                            + tau * p.velocity[c]
                            + spec.amplitude * (co * p.direction[c] + s * p.ortho[c]);
                    }
                }
                Preset::TurnPoint => {
                    let pos = spec.amplitude * self.turn_profile(tau);
                    for (c, o) in out.iter_mut().enumerate() {
                        *o = p.base[c] + pos * p.direction[c];
                    }
                }
            },
        }
    }
}

impl<T: Scalar> Backbone<T> for SyntheticBackbone {
    fn shape(&self) -> (usize, usize) {
        (self.spec.n_tokens, self.spec.dims)
    }

    fn evaluate(&self, z: &TokenMatrix<T>, t: Timestep<T>) -> Result<TokenMatrix<T>> {
        let (n, d) = (self.spec.n_tokens, self.spec.dims);
        z.ensure_shape((n, d))?;
        let tau = self.spec.t_start - t.value.as_f64();
        let mut data = vec![0.0f64; n * d];
        for (i, row) in data.chunks_exact_mut(d).enumerate() {
            self.clean_row(i, tau, row);
        }
        if self.spec.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(
                self.spec.seed ^ t.value.as_f64().to_bits().rotate_left(17),
            );
            rng.set_stream(1);
            for v in &mut data {
                *v += self.spec.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        if self.spec.coupling > 0.0 {
            let pull = self.spec.coupling * CLOSED_LOOP_DECAY;
            for (i, row) in data.chunks_exact_mut(d).enumerate() {
                let zr = z.row(i);
                for (c, v) in row.iter_mut().enumerate() {
                    *v += pull * (zr[c].as_f64() - self.tokens[i].target[c]);
                }
            }
        }
        TokenMatrix::new(n, d, data.into_iter().map(T::of).collect())
    }
}
