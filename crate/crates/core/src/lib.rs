//! Curvature-guided caching for iterative denoising loops.
//!
//! A denoising loop calls an expensive backbone once per step. This crate
//! decides, step by step, whether to call it (FULL) or to predict its output
//! from the last few FULL outputs (CACHE). Tokens are sorted by the curvature
//! of their recent trajectories: flat ones are reused, straight ones are
//! extrapolated, and bending ones get a damped extrapolation. A drift
//! accumulator over the bending tokens decides when the next FULL is due.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, the precision the harness uses.

pub mod backbone;
pub mod bench;
pub mod cli;
pub mod curvature;
pub mod error;
pub mod matrix;
pub mod pipeline;
pub mod predictor;
pub mod scalar;
pub mod skipper;

pub use curvature::{
    compute_curvature, group_tokens, FullHistory, GroupAssignment, GroupingConfig, TokenGroup,
};
pub use error::{Error, Result};
pub use matrix::{Modality, Timestep, TokenMatrix};
pub use pipeline::{
    oracle_run, run, Backbone, Decision, EulerScheduler, Policy, RunOptions, RunResult, Scheduler,
    StepRecord,
};
pub use predictor::{hermite_alpha, predict, HorizonMode, PredictorConfig, PredictorKind};
pub use scalar::Scalar;
pub use skipper::{drift_score, should_full, CacheState, EtaProfile, SkipConfig, SkipKind};

pub type TokenMatrix64 = TokenMatrix<f64>;
pub type TokenMatrix32 = TokenMatrix<f32>;
pub type Timestep64 = Timestep<f64>;
pub type FullHistory64 = FullHistory<f64>;
pub type GroupAssignment64 = GroupAssignment<f64>;
pub type RunResult64 = RunResult<f64>;
pub type EulerScheduler64 = EulerScheduler<f64>;
