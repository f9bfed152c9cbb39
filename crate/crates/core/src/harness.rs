//! Closed-loop Monte Carlo experiments.
//!
//! A trial anchors the nominal trajectory to the robot's starting pose,
//! realizes one disturbed reference, and then plans and applies one control
//! per step through the same kinematic model the planner uses. Costs are the
//! realized tracking, input and pose-change terms.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{Matrix3, SVector, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{
    base_step, whole_body_pose, BaseState, ControlInput, EePose, JointConfig, KinematicChain,
    INPUT_DIM,
};
use crate::planner::{
    mix_seed, CandidatePolicy, DisturbanceModel, InitialErrorMode, MpcWeights, PlanResult, Planner,
    PlannerConfig,
};
use crate::trajectory::{anchor, predict_window, realize_disturbance, Predictor, ReferenceModel};

/// Controller variants compared by the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Pose optimization every step, disturbance-aware scores.
    #[serde(rename = "po-hu")]
    PoHu,
    /// Pose optimization every `period` steps.
    #[serde(rename = "ppo-hu")]
    PPoHu,
    /// No pose optimization.
    #[serde(rename = "npo-hu")]
    NpoHu,
    /// Pose optimization with scores that ignore the disturbance.
    #[serde(rename = "po-nhu")]
    PoNhu,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::PoHu, Variant::PPoHu, Variant::NpoHu, Variant::PoNhu];

    pub fn name(self) -> &'static str {
        match self {
            Variant::PoHu => "po-hu",
            Variant::PPoHu => "ppo-hu",
            Variant::NpoHu => "npo-hu",
            Variant::PoNhu => "po-nhu",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config("planner.variant", format!("unknown variant `{s}`")))
    }
}

/// How the two baselines are realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselinePath {
    /// Separate code paths: fixed-pose planning, and a recursion without the
    /// disturbance term.
    #[default]
    Dedicated,
    /// The full planner with `|Theta| = 1` or a zero planner-side covariance.
    Reduction,
}

/// Scalar MPC settings; `Q = q_scale * I`, `R = r_scale * I`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpcSettings {
    pub q_scale: f64,
    pub r_scale: f64,
    pub kappa: f64,
    pub horizon: usize,
    pub tau: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub chain: Arc<KinematicChain>,
    /// Nominal reference, `T + 1` poses; moved to the robot's start pose at
    /// the beginning of each trial.
    pub nominal: Vec<EePose>,
    pub predictor: Predictor,
    pub mpc: MpcSettings,
    /// Disturbance scale `q`; the true covariance is `q * diag(sigma_base)`.
    pub q: f64,
    pub sigma_base: [f64; 3],
    pub variant: Variant,
    pub trials: usize,
    pub base_seed: u64,
    /// Candidate sampling; the seed is replaced by a per-trial one.
    pub policy: CandidatePolicy,
    /// Planning period of the periodic variant.
    pub period: usize,
    pub initial_error: InitialErrorMode,
    /// Candidate-evaluation workers per plan.
    pub threads: usize,
    pub initial_theta: JointConfig,
    pub baseline_path: BaselinePath,
    pub rate_limits: Option<SVector<f64, INPUT_DIM>>,
}

impl ExperimentSpec {
    pub fn steps(&self) -> usize {
        self.nominal.len().saturating_sub(1)
    }

    pub fn true_sigma(&self) -> Matrix3<f64> {
        ReferenceModel::scaled_sigma(self.q, self.sigma_base)
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials < 1 {
            return Err(Error::config("trials", "must be at least 1"));
        }
        if self.steps() < 1 {
            return Err(Error::config("trajectory.steps", "need at least one step"));
        }
        if !(self.q >= 0.0 && self.q.is_finite()) {
            return Err(Error::config("disturbance.q", "must be non-negative"));
        }
        if self.sigma_base.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::config("disturbance.sigma_base", "entries must be non-negative"));
        }
        if self.period < 1 {
            return Err(Error::config("planner.period", "must be at least 1"));
        }
        if self.initial_theta.len() != self.chain.dof() {
            return Err(Error::Dimension {
                expected: self.chain.dof(),
                got: self.initial_theta.len(),
            });
        }
        if !self.chain.limits.contains(&self.initial_theta) {
            return Err(Error::config("robot.initial_theta", "outside the joint limits"));
        }
        self.planner_parts(0)?.0.validate()?;
        Ok(())
    }

    /// Planner weights and configuration for this spec's variant.
    fn planner_parts(&self, trial_seed: u64) -> Result<(MpcWeights, PlannerConfig, bool)> {
        let m = &self.mpc;
        let mut weights =
            MpcWeights::scaled(m.q_scale, m.r_scale, m.kappa, m.horizon, m.tau, self.true_sigma());
        let mut config = PlannerConfig {
            policy: CandidatePolicy {
                seed: mix_seed(trial_seed, CANDIDATE_STREAM),
                ..self.policy.clone()
            },
            initial_error: self.initial_error,
            disturbance: DisturbanceModel::Aware,
            period: 1,
            threads: self.threads,
            rate_limits: self.rate_limits,
        };
        let mut fixed_pose = false;
        match (self.variant, self.baseline_path) {
            (Variant::PoHu, _) => {}
            (Variant::PPoHu, _) => config.period = self.period,
            (Variant::NpoHu, BaselinePath::Dedicated) => fixed_pose = true,
            (Variant::NpoHu, BaselinePath::Reduction) => config.policy.count = 1,
            (Variant::PoNhu, BaselinePath::Dedicated) => config.disturbance = DisturbanceModel::Ignored,
            (Variant::PoNhu, BaselinePath::Reduction) => weights.sigma = Matrix3::zeros(),
        }
        Ok((weights, config, fixed_pose))
    }
}

const CANDIDATE_STREAM: u64 = 0xC4D1;

/// One closed-loop step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub k: usize,
    pub pose: EePose,
    pub reference: EePose,
    pub error: Vector6<f64>,
    /// First MPC control at the chosen pose.
    pub u_star: ControlInput,
    /// Applied command (MPC control plus pose-change rates).
    pub control: ControlInput,
    pub base: BaseState,
    pub theta: JointConfig,
    pub theta_bar: JointConfig,
    pub pose_switch: bool,
    pub tracking_cost: f64,
    pub input_cost: f64,
    pub pose_cost: f64,
    pub predicted_cost: f64,
    pub fallback: bool,
    pub ill_conditioned: bool,
}

impl StepRecord {
    pub fn cost(&self) -> f64 {
        self.tracking_cost + self.input_cost + self.pose_cost
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub variant: Variant,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub total_cost: f64,
    /// Set when planning failed; `steps` then stops at the failing step.
    pub failure: Option<String>,
    /// Seconds spent inside the planner.
    pub plan_seconds: Vec<f64>,
}

impl TrialRecord {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }

    /// Running sum of per-step costs.
    pub fn accumulated_cost(&self) -> Vec<f64> {
        self.steps
            .iter()
            .scan(0.0, |acc, s| {
                *acc += s.cost();
                Some(*acc)
            })
            .collect()
    }
}

/// `e' Q e`, `u' R u`, `kappa |theta_bar - theta|^2` for one step.
pub fn step_costs(
    weights: &MpcWeights,
    error: &Vector6<f64>,
    u_star: &ControlInput,
    theta_bar: &JointConfig,
    theta: &JointConfig,
) -> (f64, f64, f64) {
    let tracking = (error.transpose() * weights.q * error)[(0, 0)];
    let input = (u_star.0.transpose() * weights.r * u_star.0)[(0, 0)];
    let pose = weights.kappa * theta_bar.distance_squared(theta);
    (tracking, input, pose)
}

/// Applies a fused command for one step: base update and joint
/// integration through the planning model, with the heading joint tied to
/// the base heading. Joint limits are not enforced here.
pub fn apply_control(
    base: BaseState,
    theta: &JointConfig,
    control: &ControlInput,
    tau: f64,
) -> (BaseState, JointConfig) {
    let omega = control.angular();
    let base = base_step(base, control.linear_velocity(), omega[0], tau);
    let mut next: JointConfig = theta.iter().zip(omega.iter()).map(|(t, w)| t + tau * w).collect();
    next.0[0] = base.phi;
    (base, next)
}

/// Inputs to one plan, reproducible from a trial seed.
#[derive(Debug)]
pub struct TrialSetup {
    pub anchored: Vec<EePose>,
    pub realized: Vec<EePose>,
    pub planner: Planner,
    pub fixed_pose: bool,
}

pub fn setup_trial(spec: &ExperimentSpec, seed: u64) -> Result<TrialSetup> {
    let theta0 = &spec.initial_theta;
    let base = BaseState::new(0.0, 0.0, theta0.heading());
    let start = whole_body_pose(&spec.chain, &base, theta0)?;
    let anchored = anchor(&spec.nominal, &start);
    let model = ReferenceModel::new(anchored.clone(), spec.true_sigma(), seed);
    let realized = realize_disturbance(&model)?.realized;
    let (weights, config, fixed_pose) = spec.planner_parts(seed)?;
    let planner = Planner::new(spec.chain.clone(), weights, config)?;
    Ok(TrialSetup {
        anchored,
        realized,
        planner,
        fixed_pose,
    })
}

/// Expected reference window `r(k..=k+H)` given the observation `r(k)`:
/// the predictor's relative motion added to the observed pose.
pub fn planning_window(
    predictor: &Predictor,
    anchored: &[EePose],
    realized: &[EePose],
    k: usize,
    horizon: usize,
) -> Result<Vec<EePose>> {
    let predicted = predict_window(predictor, &realized[..=k], anchored, k, horizon)?;
    let origin = predicted.poses[0];
    Ok(predicted
        .poses
        .iter()
        .map(|p| realized[k].offset(&p.difference(&origin)))
        .collect())
}

fn plan(setup: &TrialSetup, theta: &JointConfig, base: &BaseState, window: &[EePose], k: usize) -> Result<PlanResult> {
    if setup.fixed_pose {
        setup.planner.plan_fixed_pose(theta, base, window)
    } else {
        setup.planner.plan_step(theta, base, window, k as u64)
    }
}

pub fn run_trial(spec: &ExperimentSpec, seed: u64) -> Result<TrialRecord> {
    spec.validate()?;
    let setup = setup_trial(spec, seed)?;
    let weights = setup.planner.weights().clone();
    let mut theta = spec.initial_theta.clone();
    let mut base = BaseState::new(0.0, 0.0, theta.heading());
    let mut record = TrialRecord {
        variant: spec.variant,
        seed,
        steps: Vec::with_capacity(spec.steps()),
        total_cost: 0.0,
        failure: None,
        plan_seconds: Vec::with_capacity(spec.steps()),
    };
    for k in 0..spec.steps() {
        let reference = setup.realized[k];
        let pose = whole_body_pose(&spec.chain, &base, &theta)?;
        let error = pose.difference(&reference);
        let window = planning_window(&spec.predictor, &setup.anchored, &setup.realized, k, weights.horizon)?;
        let started = Instant::now();
        let result = plan(&setup, &theta, &base, &window, k);
        record.plan_seconds.push(started.elapsed().as_secs_f64());
        let result = match result {
            Ok(r) if !r.flags.fallback => r,
            Ok(_) => {
                record.failure = Some(format!("step {k}: every candidate failed"));
                break;
            }
            Err(e) => {
                record.failure = Some(format!("step {k}: {e}"));
                break;
            }
        };
        let (tracking_cost, input_cost, pose_cost) =
            step_costs(&weights, &error, &result.u_star, &result.chosen, &theta);
        let (next_base, next_theta) =
            apply_control(base, &theta, &result.control, weights.tau);
        record.steps.push(StepRecord {
            k,
            pose,
            reference,
            error,
            u_star: result.u_star,
            control: result.control,
            base,
            theta: theta.clone(),
            theta_bar: result.chosen.clone(),
            pose_switch: result.chosen_index != 0,
            tracking_cost,
            input_cost,
            pose_cost,
            predicted_cost: result.predicted_cost,
            fallback: result.flags.fallback,
            ill_conditioned: result.flags.ill_conditioned,
        });
        base = next_base;
        theta = next_theta;
    }
    record.total_cost = record.steps.iter().map(StepRecord::cost).sum();
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingSummary {
    pub plans: usize,
    pub mean_seconds: f64,
    pub median_seconds: f64,
}

impl TimingSummary {
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self {
                plans: 0,
                mean_seconds: 0.0,
                median_seconds: 0.0,
            };
        }
        Self {
            plans: samples.len(),
            mean_seconds: samples.iter().sum::<f64>() / samples.len() as f64,
            median_seconds: median(samples),
        }
    }
}

pub fn median(samples: &[f64]) -> f64 {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trial failure summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialFailure {
    pub seed: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct AggregateReport {
    pub variant: Variant,
    pub trials: usize,
    pub completed: usize,
    pub seeds: Vec<u64>,
    pub mean_cost: f64,
    /// Sample standard deviation; zero for a single trial.
    pub stddev_cost: f64,
    /// `C_total` per completed trial, in seed order.
    pub totals: Vec<f64>,
    /// Mean accumulated cost per step over completed trials.
    pub accumulated_cost: Vec<f64>,
    pub failures: Vec<TrialFailure>,
    /// More than 10% of trials failed.
    pub unreliable: bool,
    pub timing: TimingSummary,
    #[serde(skip)]
    pub records: Vec<TrialRecord>,
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<AggregateReport> {
    spec.validate()?;
    let seeds: Vec<u64> = (0..spec.trials as u64).map(|i| spec.base_seed.wrapping_add(i)).collect();
    let results: Vec<Result<TrialRecord>> = seeds.par_iter().map(|s| run_trial(spec, *s)).collect();
    let mut records = Vec::with_capacity(seeds.len());
    for r in results {
        records.push(r?);
    }
    Ok(aggregate(spec.variant, &seeds, records))
}

pub fn aggregate(variant: Variant, seeds: &[u64], records: Vec<TrialRecord>) -> AggregateReport {
    let failures: Vec<TrialFailure> = records
        .iter()
        .filter_map(|r| {
            r.failure.as_ref().map(|reason| TrialFailure {
                seed: r.seed,
                reason: reason.clone(),
            })
        })
        .collect();
    let done: Vec<&TrialRecord> = records.iter().filter(|r| !r.failed()).collect();
    let totals: Vec<f64> = done.iter().map(|r| r.total_cost).collect();
    let n = totals.len();
    let mean_cost = if n > 0 { totals.iter().sum::<f64>() / n as f64 } else { f64::NAN };
    let stddev_cost = if n > 1 {
        (totals.iter().map(|t| (t - mean_cost).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else if n == 1 {
        0.0
    } else {
        f64::NAN
    };
    let len = done.iter().map(|r| r.steps.len()).max().unwrap_or(0);
    let mut accumulated_cost = vec![0.0; len];
    for r in &done {
        for (slot, v) in accumulated_cost.iter_mut().zip(r.accumulated_cost()) {
            *slot += v / n as f64;
        }
    }
    let plan_times: Vec<f64> = done.iter().flat_map(|r| r.plan_seconds.iter().copied()).collect();
    AggregateReport {
        variant,
        trials: records.len(),
        completed: n,
        seeds: seeds.to_vec(),
        mean_cost,
        stddev_cost,
        totals,
        accumulated_cost,
        unreliable: failures.len() * 10 > records.len(),
        failures,
        timing: TimingSummary::from_samples(&plan_times),
        records,
    }
}

/// Timing of `plan_step` for one `(|Theta|, H, width)` combination.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRow {
    pub candidates: usize,
    pub horizon: usize,
    pub width: usize,
    pub plans: usize,
    pub median_seconds: f64,
    pub mean_seconds: f64,
    pub p90_seconds: f64,
}

/// Times `plan_step` over states visited by one closed-loop run of `spec`.
///
/// Every combination is warmed up and then timed over `plans` calls,
/// cycling through the recorded states.
pub fn benchmark_planning(
    spec: &ExperimentSpec,
    candidate_counts: &[usize],
    horizons: &[usize],
    widths: &[usize],
    plans: usize,
) -> Result<Vec<TimingRow>> {
    if plans < 1 {
        return Err(Error::config("bench.plans", "must be at least 1"));
    }
    let mut probe = spec.with_variant(Variant::PoHu);
    probe.threads = 1;
    let trial = run_trial(&probe, spec.base_seed)?;
    if trial.steps.is_empty() {
        return Err(Error::Numerical {
            step: 0,
            msg: trial.failure.unwrap_or_else(|| "no states recorded".into()),
        });
    }
    let setup = setup_trial(&probe, spec.base_seed)?;
    let states: Vec<(JointConfig, BaseState, usize)> = trial
        .steps
        .iter()
        .map(|s| (s.theta.clone(), s.base, s.k))
        .collect();

    let mut rows = Vec::new();
    for &horizon in horizons {
        let windows: Vec<Vec<EePose>> = states
            .iter()
            .map(|(_, _, k)| planning_window(&spec.predictor, &setup.anchored, &setup.realized, *k, horizon))
            .collect::<Result<_>>()?;
        for &count in candidate_counts {
            for &width in widths {
                let mut s = probe.clone();
                s.mpc.horizon = horizon;
                s.policy.count = count;
                s.threads = width;
                let (weights, config, _) = s.planner_parts(spec.base_seed)?;
                let planner = Planner::new(spec.chain.clone(), weights, config)?;
                let warmup = (plans / 10).max(5);
                let mut samples = Vec::with_capacity(plans);
                for i in 0..warmup + plans {
                    let idx = i % states.len();
                    let (theta, base, k) = &states[idx];
                    let started = Instant::now();
                    let r = planner.plan_step(theta, base, &windows[idx], *k as u64)?;
                    let dt = started.elapsed().as_secs_f64();
                    std::hint::black_box(&r);
                    if i >= warmup {
                        samples.push(dt);
                    }
                }
                let mut sorted = samples.clone();
                sorted.sort_by(f64::total_cmp);
                rows.push(TimingRow {
                    candidates: count,
                    horizon,
                    width,
                    plans,
                    median_seconds: median(&samples),
                    mean_seconds: samples.iter().sum::<f64>() / plans as f64,
                    p90_seconds: sorted[((plans as f64 * 0.9).ceil() as usize).clamp(1, plans) - 1],
                });
            }
        }
    }
    Ok(rows)
}

/// Everything `plan_step` saw and produced at step `k` of the first trial.
#[derive(Debug, Clone, Serialize)]
pub struct PlanTrace {
    pub step: usize,
    pub seed: u64,
    pub variant: Variant,
    pub theta0: JointConfig,
    pub window: Vec<EePose>,
    pub candidates: Vec<JointConfig>,
    pub per_candidate_costs: Vec<Option<f64>>,
    pub chosen_index: usize,
    pub chosen: JointConfig,
    pub predicted_cost: f64,
    pub pose_command: Vec<f64>,
    pub u_star: ControlInput,
    pub control: ControlInput,
    pub initial_error: Vector6<f64>,
    pub riccati: Option<crate::riccati::RiccatiDump>,
}

/// Replays the first trial up to step `k` and records the plan made there.
pub fn trace_plan(spec: &ExperimentSpec, k: usize) -> Result<PlanTrace> {
    spec.validate()?;
    if k >= spec.steps() {
        return Err(Error::StepOutOfRange {
            k,
            horizon: spec.steps(),
        });
    }
    let seed = spec.base_seed;
    let setup = setup_trial(spec, seed)?;
    let tau = setup.planner.weights().tau;
    let horizon = setup.planner.weights().horizon;
    let mut theta = spec.initial_theta.clone();
    let mut base = BaseState::new(0.0, 0.0, theta.heading());
    for j in 0..=k {
        let window = planning_window(&spec.predictor, &setup.anchored, &setup.realized, j, horizon)?;
        let r = plan(&setup, &theta, &base, &window, j)?;
        if j == k {
            return Ok(PlanTrace {
                step: k,
                seed,
                variant: spec.variant,
                theta0: theta,
                window,
                candidates: r.candidates,
                per_candidate_costs: r.per_candidate_costs,
                chosen_index: r.chosen_index,
                chosen: r.chosen,
                predicted_cost: r.predicted_cost,
                pose_command: r.pose_command.iter().copied().collect(),
                u_star: r.u_star,
                control: r.control,
                initial_error: r.initial_error,
                riccati: r.solution.map(|s| s.dump()),
            });
        }
        (base, theta) = apply_control(base, &theta, &r.control, tau);
    }
    unreachable!("loop returns at j == k")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{make_nominal, CurveKind, NominalSource, SIGMA_BASE};
    use approx::assert_relative_eq;

    pub(crate) fn small_spec(variant: Variant, steps: usize) -> ExperimentSpec {
        ExperimentSpec {
            chain: Arc::new(KinematicChain::reference()),
            nominal: make_nominal(NominalSource::Curve(CurveKind::CurveB), steps, 0.1).unwrap(),
            predictor: Predictor::oracle(),
            mpc: MpcSettings {
                q_scale: 1000.0,
                r_scale: 1.0,
                kappa: 1.0,
                horizon: 8,
                tau: 0.1,
            },
            q: 0.4,
            sigma_base: SIGMA_BASE,
            variant,
            trials: 2,
            base_seed: 11,
            policy: CandidatePolicy::default(),
            period: 5,
            initial_error: InitialErrorMode::Recompute,
            threads: 1,
            initial_theta: JointConfig::from_slice(&[0.0, 0.6, 0.85, 1.25, -1.4, -0.65, -1.45, 0.35]),
            baseline_path: BaselinePath::Dedicated,
            rate_limits: None,
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
        }
        assert!("po_hu".parse::<Variant>().is_err());
    }

    #[test]
    fn trial_is_deterministic_and_closes_its_ledger() {
        let spec = small_spec(Variant::PoHu, 30);
        let a = run_trial(&spec, 5).unwrap();
        let b = run_trial(&spec, 5).unwrap();
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.total_cost, b.total_cost);
        assert_eq!(a.steps.len(), 30);
        let w = MpcWeights::scaled(1000.0, 1.0, 1.0, 8, 0.1, Matrix3::zeros());
        let recomputed: f64 = a
            .steps
            .iter()
            .map(|s| {
                let (t, i, p) = step_costs(&w, &s.error, &s.u_star, &s.theta_bar, &s.theta);
                t + i + p
            })
            .sum();
        assert_relative_eq!(recomputed, a.total_cost, max_relative = 1e-9);
        let acc = a.accumulated_cost();
        assert!(acc.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn quiet_run_tracks_closely() {
        let mut spec = small_spec(Variant::NpoHu, 40);
        spec.q = 0.0;
        let t = run_trial(&spec, 1).unwrap();
        assert!(t.failure.is_none());
        let worst = t.steps.iter().map(|s| s.error.norm()).fold(0.0, f64::max);
        assert!(worst < 0.02, "max error {worst}");
        assert!(t.steps.iter().all(|s| !s.pose_switch && s.pose_cost == 0.0));
    }

    #[test]
    fn single_trial_has_zero_spread() {
        let mut spec = small_spec(Variant::NpoHu, 10);
        spec.trials = 1;
        let report = run_experiment(&spec).unwrap();
        assert_eq!(report.completed, 1);
        assert_eq!(report.stddev_cost, 0.0);
        assert_eq!(report.mean_cost, report.totals[0]);
        assert_eq!(report.accumulated_cost.len(), 10);
        assert!(!report.unreliable);
    }

    #[test]
    fn periodic_variant_switches_only_on_cycle() {
        let spec = small_spec(Variant::PPoHu, 20);
        let t = run_trial(&spec, 2).unwrap();
        assert!(t.steps.iter().filter(|s| s.pose_switch).all(|s| s.k % 5 == 0));
    }

    #[test]
    fn reductions_match_dedicated_paths() {
        for v in [Variant::NpoHu, Variant::PoNhu] {
            let mut spec = small_spec(v, 15);
            let a = run_trial(&spec, 3).unwrap();
            spec.baseline_path = BaselinePath::Reduction;
            let b = run_trial(&spec, 3).unwrap();
            assert_eq!(a.steps, b.steps, "{v}");
        }
    }

    #[test]
    fn apply_control_keeps_heading_joint_on_base() {
        let chain = KinematicChain::reference();
        let theta = JointConfig::from_slice(&[0.0, 0.6, 0.85, 1.25, -1.4, -0.65, -1.45, 0.35]);
        let mut u = ControlInput::zeros();
        u.0[0] = 0.5;
        u.0[1] = 0.3;
        u.0[3] = 100.0;
        let (base, next) = apply_control(BaseState::default(), &theta, &u, 0.1);
        assert_relative_eq!(base.phi, 0.03, epsilon = 1e-15);
        assert_eq!(next[0], base.phi);
        assert_relative_eq!(next[2], 10.85, epsilon = 1e-12);
        assert!(!chain.limits.contains(&next));
        assert_relative_eq!(base.x, 0.05, epsilon = 1e-15);
    }

    #[test]
    fn trace_matches_trial_step() {
        let mut spec = small_spec(Variant::PoHu, 12);
        spec.trials = 1;
        let trial = run_trial(&spec, spec.base_seed).unwrap();
        let trace = trace_plan(&spec, 7).unwrap();
        assert_eq!(trace.theta0, trial.steps[7].theta);
        assert_eq!(trace.chosen, trial.steps[7].theta_bar);
        assert_eq!(trace.u_star, trial.steps[7].u_star);
        assert!(trace_plan(&spec, 12).is_err());
    }

    #[test]
    fn benchmark_rows_cover_sweep() {
        let spec = small_spec(Variant::PoHu, 12);
        let rows = benchmark_planning(&spec, &[1, 12], &[3, 5, 8], &[1], 10).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.plans == 10 && r.median_seconds > 0.0));
    }
}
