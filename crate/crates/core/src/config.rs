//! Run configuration files.
//!
//! Configs are TOML with one table per subsystem. Unknown keys are rejected
//! and the physical MPC parameters have no defaults.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::{BaselinePath, ExperimentSpec, MpcSettings, Variant};
use crate::kinematics::{JointConfig, KinematicChain, WHOLE_BODY_JOINTS};
use crate::planner::{CandidatePolicy, InitialErrorMode};
use crate::trajectory::{make_nominal, CurveKind, NominalSource, Predictor, PredictorMode, SIGMA_BASE};

/// Well-conditioned starting configuration of the shipped chain.
pub const NOMINAL_THETA: [f64; WHOLE_BODY_JOINTS] = [0.0, 0.6, 0.85, 1.25, -1.4, -0.65, -1.45, 0.35];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub trials: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub robot: RobotConfig,
    pub trajectory: TrajectoryConfig,
    pub disturbance: DisturbanceConfig,
    pub mpc: MpcConfig,
    #[serde(default)]
    pub planner: PlannerSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotConfig {
    /// DH table file; the built-in chain when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<PathBuf>,
    /// Joint-limit file; only used together with `chain`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limits: Option<PathBuf>,
    #[serde(default = "default_theta")]
    pub initial_theta: Vec<f64>,
}

impl Default for RobotConfig {
    fn default() -> Self {
        Self {
            chain: None,
            limits: None,
            initial_theta: default_theta(),
        }
    }
}

fn default_theta() -> Vec<f64> {
    NOMINAL_THETA.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryConfig {
    /// `curve-a`, `curve-b` or `file`.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    pub steps: usize,
    #[serde(default = "default_predictor")]
    pub predictor: PredictorMode,
    #[serde(default = "default_history")]
    pub history_window: usize,
}

fn default_predictor() -> PredictorMode {
    PredictorMode::OracleNominal
}

fn default_history() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceConfig {
    pub q: f64,
    #[serde(default = "default_sigma_base")]
    pub sigma_base: [f64; 3],
}

fn default_sigma_base() -> [f64; 3] {
    SIGMA_BASE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcConfig {
    pub q_scale: f64,
    pub r_scale: f64,
    pub kappa: f64,
    pub horizon: usize,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerSection {
    pub variants: Vec<Variant>,
    pub candidates: usize,
    pub radius: f64,
    pub max_joints_perturbed: usize,
    pub perturb_heading: bool,
    pub max_retries: usize,
    pub period: usize,
    pub initial_error: InitialErrorMode,
    pub baseline_path: BaselinePath,
    pub threads: usize,
}

impl Default for PlannerSection {
    fn default() -> Self {
        let policy = CandidatePolicy::default();
        Self {
            variants: vec![Variant::PoHu],
            candidates: policy.count,
            radius: policy.perturb_radius,
            max_joints_perturbed: policy.max_joints_perturbed,
            perturb_heading: policy.perturb_heading,
            max_retries: policy.max_retries,
            period: 5,
            initial_error: InitialErrorMode::Recompute,
            baseline_path: BaselinePath::Dedicated,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub candidate_counts: Vec<usize>,
    pub horizons: Vec<usize>,
    pub widths: Vec<usize>,
    #[serde(default = "default_plans")]
    pub plans: usize,
}

fn default_plans() -> usize {
    500
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::config("config", e.message().trim().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads and validates a config; relative paths inside it are resolved
    /// against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut config = Self::parse(&std::fs::read_to_string(path)?)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(dir);
        config.check_files()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        };
        fix(&mut self.robot.chain);
        fix(&mut self.robot.limits);
        fix(&mut self.trajectory.file);
        fix(&mut self.output_dir);
    }

    fn check_files(&self) -> Result<()> {
        for (field, path) in [
            ("robot.chain", &self.robot.chain),
            ("robot.limits", &self.robot.limits),
            ("trajectory.file", &self.trajectory.file),
        ] {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(Error::config(field, format!("file `{}` does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(field: &str, v: f64) -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be positive, got {v}")))
            }
        }
        fn non_negative(field: &str, v: f64) -> Result<()> {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be non-negative, got {v}")))
            }
        }
        fn at_least(field: &str, v: usize, min: usize) -> Result<()> {
            if v >= min {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be at least {min}, got {v}")))
            }
        }

        at_least("trials", self.trials, 1)?;
        if self.robot.limits.is_some() && self.robot.chain.is_none() {
            return Err(Error::config("robot.limits", "requires robot.chain"));
        }
        if self.robot.initial_theta.len() != WHOLE_BODY_JOINTS {
            return Err(Error::config(
                "robot.initial_theta",
                format!("expected {WHOLE_BODY_JOINTS} values, got {}", self.robot.initial_theta.len()),
            ));
        }
        if self.robot.initial_theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("robot.initial_theta", "values must be finite"));
        }

        let t = &self.trajectory;
        match t.kind.as_str() {
            "file" if t.file.is_none() => {
                return Err(Error::config("trajectory.file", "required when kind = \"file\""));
            }
            "file" => {}
            other => {
                other.parse::<CurveKind>()?;
                if t.file.is_some() {
                    return Err(Error::config("trajectory.file", "only valid with kind = \"file\""));
                }
            }
        }
        at_least("trajectory.steps", t.steps, 2)?;
        at_least("trajectory.history_window", t.history_window, 2)?;

        non_negative("disturbance.q", self.disturbance.q)?;
        for (i, s) in self.disturbance.sigma_base.iter().enumerate() {
            non_negative(&format!("disturbance.sigma_base[{i}]"), *s)?;
        }

        let m = &self.mpc;
        non_negative("mpc.q_scale", m.q_scale)?;
        positive("mpc.r_scale", m.r_scale)?;
        non_negative("mpc.kappa", m.kappa)?;
        at_least("mpc.horizon", m.horizon, 1)?;
        positive("mpc.tau", m.tau)?;

        let p = &self.planner;
        if p.variants.is_empty() {
            return Err(Error::config("planner.variants", "list at least one variant"));
        }
        at_least("planner.candidates", p.candidates, 1)?;
        positive("planner.radius", p.radius)?;
        at_least("planner.max_joints_perturbed", p.max_joints_perturbed, 1)?;
        at_least("planner.period", p.period, 1)?;
        at_least("planner.threads", p.threads, 1)?;

        if let Some(b) = &self.bench {
            for (field, list) in [
                ("bench.candidate_counts", &b.candidate_counts),
                ("bench.horizons", &b.horizons),
                ("bench.widths", &b.widths),
            ] {
                if list.is_empty() || list.contains(&0) {
                    return Err(Error::config(field, "must be a non-empty list of positive integers"));
                }
            }
            at_least("bench.plans", b.plans, 1)?;
        }
        Ok(())
    }

    /// Canonical TOML form, used for echoing and hashing.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical form, ignoring where outputs go.
    pub fn hash(&self) -> String {
        let canonical = RunConfig {
            output_dir: None,
            ..self.clone()
        };
        let digest = Sha256::digest(canonical.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn chain(&self) -> Result<KinematicChain> {
        match &self.robot.chain {
            Some(path) => KinematicChain::from_files(path, self.robot.limits.as_deref()),
            None => Ok(KinematicChain::reference()),
        }
    }

    /// Experiment for one variant.
    pub fn experiment(&self, variant: Variant) -> Result<ExperimentSpec> {
        let chain = self.chain()?;
        let t = &self.trajectory;
        let source = match &t.file {
            Some(path) => NominalSource::File(path),
            None => NominalSource::Curve(t.kind.parse()?),
        };
        let nominal = make_nominal(source, t.steps, self.mpc.tau)?;
        let p = &self.planner;
        let spec = ExperimentSpec {
            chain: Arc::new(chain),
            nominal,
            predictor: Predictor {
                mode: t.predictor,
                history_window: t.history_window,
            },
            mpc: MpcSettings {
                q_scale: self.mpc.q_scale,
                r_scale: self.mpc.r_scale,
                kappa: self.mpc.kappa,
                horizon: self.mpc.horizon,
                tau: self.mpc.tau,
            },
            q: self.disturbance.q,
            sigma_base: self.disturbance.sigma_base,
            variant,
            trials: self.trials,
            base_seed: self.seed,
            policy: CandidatePolicy {
                count: p.candidates,
                perturb_radius: p.radius,
                max_joints_perturbed: p.max_joints_perturbed,
                perturb_heading: p.perturb_heading,
                max_retries: p.max_retries,
                seed: self.seed,
            },
            period: p.period,
            initial_error: p.initial_error,
            threads: p.threads,
            initial_theta: JointConfig::from_slice(&self.robot.initial_theta),
            baseline_path: p.baseline_path,
            rate_limits: None,
        };
        spec.validate()?;
        Ok(spec)
    }
}
