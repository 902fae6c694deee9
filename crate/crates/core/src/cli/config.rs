//! Experiment configuration documents.
//!
//! Every key is optional. Missing keys take the library defaults when the
//! document is resolved; [`ExperimentConfig::complete`] writes those defaults
//! back so a manifest records every value a run used.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{Preset, SyntheticSpec};
use crate::bench::{SweepGrid, SweepSpec, Workload, DEFAULT_C_CACHE, DEFAULT_STEPS};
use crate::curvature::GroupingConfig;
use crate::pipeline::Policy;
use crate::predictor::{HorizonMode, PredictorConfig, PredictorKind};
use crate::skipper::{EtaProfile, SkipConfig, SkipKind};

/// Configuration problem. Maps to exit code 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn parse_all<T>(
    key: &str,
    names: &[String],
    f: fn(&str) -> Option<T>,
) -> Result<Vec<T>, ConfigError> {
    names
        .iter()
        .map(|n| f(n).ok_or_else(|| bad(key, format!("unknown value {n:?}"))))
        .collect()
}

fn bad(key: &str, msg: impl std::fmt::Display) -> ConfigError {
    ConfigError(format!("{key}: {msg}"))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub workload: WorkloadSection,
    pub predictor: PredictorSection,
    pub skipper: SkipperSection,
    pub scheduler: SchedulerSection,
    pub output: OutputSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<ManifestSection>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadSection {
    /// Synthetic preset name. Ignored when `trace` is set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_tokens: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dims: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fractions: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub turn_step: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub amplitude: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frequency: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coupling: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_max: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SkipperSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy: Option<String>,
    /// `aether` or `voyager`; picks the default `eta`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub profile: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interval: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub streak_cap: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_fulls: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerSection {
    /// Number of denoising steps on the uniform grid. Synthetic only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_cache: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub seeds: Vec<u64>,
    pub eta: Vec<f64>,
    pub p_s: Vec<f64>,
    pub p_c: Vec<f64>,
    pub n_max: Vec<usize>,
    pub predictor: Vec<String>,
    pub skip: Vec<String>,
    pub tau: Vec<f64>,
    pub interval: Vec<usize>,
}

/// Provenance block written into every manifest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManifestSection {
    pub command: String,
    pub version: String,
}

/// Everything a single run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub workload: Workload,
    pub seed: Option<u64>,
    pub policy: Policy,
    pub c_cache: f64,
    pub out_dir: PathBuf,
    pub run_id: String,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text)
            .map_err(|e| ConfigError(format!("config: {}", e.to_string().trim_end())))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| ConfigError(format!("{}: {}", path.display(), e.0)))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn is_trace(&self) -> bool {
        self.workload.trace.is_some()
    }

    /// Copy with every unset key filled from the defaults.
    pub fn complete(&self) -> Result<Self, ConfigError> {
        let r = self.resolve()?;
        let mut c = self.clone();
        let w = &mut c.workload;
        if let Workload::Synthetic { spec, steps } = &r.workload {
            w.preset = Some(spec.preset.name().into());
            w.n_tokens = Some(spec.n_tokens);
            w.dims = Some(spec.dims);
            w.fractions = Some(spec.fractions);
            w.turn_step = Some(spec.turn_step);
            w.amplitude = Some(spec.amplitude);
            w.frequency = Some(spec.frequency);
            w.noise_sigma = Some(spec.noise_sigma);
            w.coupling = Some(spec.coupling);
            c.scheduler.steps = Some(*steps);
        }
        w.seed = r.seed;
        let p = &r.policy;
        c.predictor = PredictorSection {
            kind: Some(p.predictor.kind.name().into()),
            n_max: Some(p.predictor.n_max),
            horizon: Some(p.predictor.horizon_mode.name().into()),
            p_s: Some(p.grouping.p_s),
            p_c: Some(p.grouping.p_c),
            eps: Some(p.grouping.eps),
        };
        c.skipper = SkipperSection {
            policy: Some(p.skip.kind.name().into()),
            profile: Some(
                self.skipper
                    .profile
                    .clone()
                    .unwrap_or_else(|| "aether".into()),
            ),
            eta: Some(p.skip.eta),
            interval: Some(p.skip.interval),
            tau: Some(p.skip.tau),
            streak_cap: Some(p.skip.enforce_streak_cap),
            warmup_fulls: Some(p.skip.warmup_fulls),
        };
        c.scheduler.c_cache = Some(r.c_cache);
        c.output = OutputSection {
            dir: Some(r.out_dir),
            run_id: Some(r.run_id),
        };
        Ok(c)
    }

    pub fn resolve(&self) -> Result<Resolved, ConfigError> {
        let w = &self.workload;
        let steps = self.scheduler.steps.unwrap_or(DEFAULT_STEPS);
        let workload = match &w.trace {
            Some(path) => Workload::Trace(path.clone()),
            None => {
                if steps == 0 {
                    return Err(bad("scheduler.steps", "must be >= 1"));
                }
                let d = SyntheticSpec::default();
                let preset = match &w.preset {
                    Some(s) => Preset::parse(s)
                        .ok_or_else(|| bad("workload.preset", format!("unknown preset {s:?}")))?,
                    None => d.preset,
                };
                let spec = SyntheticSpec {
                    n_tokens: w.n_tokens.unwrap_or(d.n_tokens),
                    dims: w.dims.unwrap_or(d.dims),
                    fractions: w.fractions.unwrap_or(d.fractions),
                    preset,
                    turn_step: w.turn_step.unwrap_or(d.turn_step),
                    amplitude: w.amplitude.unwrap_or(d.amplitude),
                    frequency: w.frequency.unwrap_or(d.frequency),
                    noise_sigma: w.noise_sigma.unwrap_or(d.noise_sigma),
                    coupling: w.coupling.unwrap_or(d.coupling),
                    seed: w.seed.unwrap_or(0),
                    t_start: steps as f64,
                };
                spec.validate().map_err(|e| bad("workload", e))?;
                Workload::Synthetic { spec, steps }
            }
        };

        let pd = PredictorConfig::default();
        let p = &self.predictor;
        let kind = match &p.kind {
            Some(s) => PredictorKind::parse(s)
                .ok_or_else(|| bad("predictor.kind", format!("unknown predictor {s:?}")))?,
            None => pd.kind,
        };
        let horizon_mode = match &p.horizon {
            Some(s) => HorizonMode::parse(s)
                .ok_or_else(|| bad("predictor.horizon", format!("unknown horizon {s:?}")))?,
            None => pd.horizon_mode,
        };
        let predictor = PredictorConfig {
            kind,
            n_max: p.n_max.unwrap_or(pd.n_max),
            horizon_mode,
            rng_seed: w.seed.unwrap_or(0),
        };
        let gd = GroupingConfig::default();
        let grouping = GroupingConfig {
            p_s: p.p_s.unwrap_or(gd.p_s),
            p_c: p.p_c.unwrap_or(gd.p_c),
            eps: p.eps.unwrap_or(gd.eps),
        };

        let s = &self.skipper;
        let sd = SkipConfig::default();
        let profile = match s.profile.as_deref().map(str::to_ascii_lowercase).as_deref() {
            None | Some("aether") => EtaProfile::Aether,
            Some("voyager") => EtaProfile::Voyager,
            Some(other) => {
                return Err(bad("skipper.profile", format!("unknown profile {other:?}")))
            }
        };
        let skip = SkipConfig {
            kind: match &s.policy {
                Some(name) => SkipKind::parse(name)
                    .ok_or_else(|| bad("skipper.policy", format!("unknown policy {name:?}")))?,
                None => sd.kind,
            },
            eta: s.eta.unwrap_or(profile.eta()),
            interval: s.interval.unwrap_or(sd.interval),
            tau: s.tau.unwrap_or(sd.tau),
            enforce_streak_cap: s.streak_cap.unwrap_or(sd.enforce_streak_cap),
            warmup_fulls: s.warmup_fulls.unwrap_or(sd.warmup_fulls),
        };
        let policy = Policy {
            grouping,
            predictor,
            skip,
        };
        policy.validate().map_err(|e| bad("policy", e))?;

        let c_cache = self.scheduler.c_cache.unwrap_or(DEFAULT_C_CACHE);
        if !(c_cache.is_finite() && c_cache >= 0.0) {
            return Err(bad(
                "scheduler.c_cache",
                format!("must be finite and >= 0, got {c_cache}"),
            ));
        }
        Ok(Resolved {
            workload,
            seed: w.seed,
            policy,
            c_cache,
            out_dir: self
                .output
                .dir
                .clone()
                .unwrap_or_else(|| PathBuf::from("out")),
            run_id: self.output.run_id.clone().unwrap_or_else(|| "run".into()),
        })
    }

    /// Resolved sweep. Seeds come from `[sweep].seeds`, or the single
    /// workload seed when that list is empty.
    pub fn sweep_spec(&self, jobs: Option<usize>) -> Result<SweepSpec, ConfigError> {
        let r = self.resolve()?;
        let sw = self.sweep.clone().unwrap_or_default();
        let seeds = if sw.seeds.is_empty() {
            r.seed.map(|s| vec![s]).unwrap_or_default()
        } else {
            sw.seeds.clone()
        };
        if seeds.is_empty() {
            return Err(bad(
                "sweep.seeds",
                "no seeds given (set [sweep].seeds or --seed)",
            ));
        }
        let grid = SweepGrid {
            eta: sw.eta,
            p_s: sw.p_s,
            p_c: sw.p_c,
            n_max: sw.n_max,
            predictor: parse_all("sweep.predictor", &sw.predictor, PredictorKind::parse)?,
            skip: parse_all("sweep.skip", &sw.skip, SkipKind::parse)?,
            tau: sw.tau,
            interval: sw.interval,
        };
        for point in grid.points(&r.policy) {
            point
                .policy(&r.policy, 0)
                .validate()
                .map_err(|e| bad("sweep", format!("grid point {}: {e}", point.index)))?;
        }
        let spec = SweepSpec {
            grid,
            seeds,
            workload: r.workload,
            base: r.policy,
            c_cache: r.c_cache,
            jobs,
        };
        spec.validate().map_err(|e| bad("sweep", e))?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_resolves_to_defaults() {
        let c = ExperimentConfig::from_toml("").unwrap();
        let r = c.resolve().unwrap();
        assert_eq!(r.policy, Policy::default());
        assert_eq!(r.c_cache, DEFAULT_C_CACHE);
        assert!(matches!(
            r.workload,
            Workload::Synthetic {
                steps: DEFAULT_STEPS,
                ..
            }
        ));
        assert_eq!(r.seed, None);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = ExperimentConfig::from_toml("[skipper]\netta = 0.3\n").unwrap_err();
        assert!(e.0.contains("etta"), "{e}");
        assert!(ExperimentConfig::from_toml("[skiper]\n").is_err());
    }

    #[test]
    fn profile_sets_default_eta() {
        let c = ExperimentConfig::from_toml("[skipper]\nprofile = \"voyager\"\n").unwrap();
        assert_eq!(c.resolve().unwrap().policy.skip.eta, 1.0);
        let c =
            ExperimentConfig::from_toml("[skipper]\nprofile = \"voyager\"\neta = 0.5\n").unwrap();
        assert_eq!(c.resolve().unwrap().policy.skip.eta, 0.5);
    }

    #[test]
    fn bad_values_name_their_key() {
        let e = ExperimentConfig::from_toml("[predictor]\nkind = \"taylor\"\n")
            .unwrap()
            .resolve()
            .unwrap_err();
        assert!(e.0.starts_with("predictor.kind"), "{e}");
        let e = ExperimentConfig::from_toml("[skipper]\neta = -1.0\n")
            .unwrap()
            .resolve()
            .unwrap_err();
        assert!(e.0.contains("eta"), "{e}");
    }

    #[test]
    fn completed_config_round_trips() {
        let c =
            ExperimentConfig::from_toml("[workload]\nseed = 3\n[skipper]\neta = inf\n").unwrap();
        let full = c.complete().unwrap();
        let back = ExperimentConfig::from_toml(&full.to_toml()).unwrap();
        assert_eq!(back, full);
        assert_eq!(back.resolve().unwrap(), c.resolve().unwrap());
        assert_eq!(back.complete().unwrap(), full);
    }
}
