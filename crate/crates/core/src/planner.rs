//! Pose-optimizing MPC step.
//!
//! Each plan samples joint configurations around the current one, scores
//! every candidate by its expected cost-to-go under the disturbance-aware
//! Riccati solution, and commands the best candidate's first control plus the
//! joint-rate command that moves the arm to it within one step.

use std::sync::Arc;

use nalgebra::{Matrix3, Matrix6, SMatrix, SVector, Vector6};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{
    whole_body_input_matrix, whole_body_pose, BaseState, ControlInput, EePose, JointConfig,
    JointLimits, KinematicChain, INPUT_DIM, WHOLE_BODY_JOINTS,
};
use crate::riccati::{
    check_weights, positional_injection, solve_dare, solve_dare_nominal, RiccatiSolution,
    WholeBodyProblem,
};

/// Cost weights and horizon shared by every plan.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcWeights {
    pub q: Matrix6<f64>,
    pub r: SMatrix<f64, INPUT_DIM, INPUT_DIM>,
    pub kappa: f64,
    pub horizon: usize,
    pub tau: f64,
    /// Disturbance covariance the planner assumes.
    pub sigma: Matrix3<f64>,
}

impl MpcWeights {
    /// `Q = q_scale * I6`, `R = r_scale * I9`.
    pub fn scaled(q_scale: f64, r_scale: f64, kappa: f64, horizon: usize, tau: f64, sigma: Matrix3<f64>) -> Self {
        Self {
            q: Matrix6::identity() * q_scale,
            r: SMatrix::identity() * r_scale,
            kappa,
            horizon,
            tau,
            sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_weights(&self.q, &self.r, &self.sigma, self.kappa)?;
        if self.horizon < 1 {
            return Err(Error::config("mpc.horizon", "must be at least 1"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("mpc.tau", "must be positive"));
        }
        Ok(())
    }
}

/// How candidate joint configurations are drawn around the current one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePolicy {
    /// `|Theta|`, including the current configuration.
    pub count: usize,
    /// Half-width of the uniform perturbation, rad.
    pub perturb_radius: f64,
    /// Each candidate perturbs `U{1..=max_joints_perturbed}` joints.
    pub max_joints_perturbed: usize,
    /// Whether the base heading (joint 0) may be perturbed.
    pub perturb_heading: bool,
    /// Redraws allowed for a candidate outside the joint limits before it is
    /// clamped.
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for CandidatePolicy {
    fn default() -> Self {
        Self {
            count: 12,
            perturb_radius: 0.1,
            max_joints_perturbed: WHOLE_BODY_JOINTS,
            perturb_heading: true,
            max_retries: 16,
            seed: 0,
        }
    }
}

impl CandidatePolicy {
    /// `Theta = {theta0}`.
    pub fn current_only() -> Self {
        Self {
            count: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count < 1 {
            return Err(Error::config("planner.candidates", "must be at least 1"));
        }
        if !(self.perturb_radius > 0.0 && self.perturb_radius.is_finite()) {
            return Err(Error::config("planner.radius", "must be positive"));
        }
        if self.max_joints_perturbed < 1 {
            return Err(Error::config("planner.max_joints_perturbed", "must be at least 1"));
        }
        Ok(())
    }
}

/// Candidate set plus a flag set when limits left only `theta0`.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub candidates: Vec<JointConfig>,
    pub degenerate: bool,
}

/// Draws `policy.count` configurations; index 0 is always `theta0`.
pub fn sample_candidates(
    policy: &CandidatePolicy,
    theta0: &JointConfig,
    limits: &JointLimits,
    rng: &mut impl Rng,
) -> Result<CandidateSet> {
    policy.validate()?;
    if limits.len() != theta0.len() {
        return Err(Error::Dimension {
            expected: limits.len(),
            got: theta0.len(),
        });
    }
    if !limits.contains(theta0) {
        return Err(Error::config("theta0", "current configuration violates joint limits"));
    }
    let first = if policy.perturb_heading { 0 } else { 1 };
    let eligible = theta0.len().saturating_sub(first);
    let mut candidates = vec![theta0.clone()];
    if eligible == 0 {
        return Ok(CandidateSet {
            degenerate: policy.count > 1,
            candidates,
        });
    }
    let max_subset = policy.max_joints_perturbed.min(eligible);
    for _ in 1..policy.count {
        let mut accepted = None;
        let mut last = theta0.clone();
        for _ in 0..=policy.max_retries {
            let m = rng.random_range(1..=max_subset);
            let mut cand = theta0.clone();
            for idx in sample(rng, eligible, m) {
                let j = idx + first;
                cand.0[j] += rng.random_range(-policy.perturb_radius..policy.perturb_radius);
            }
            if limits.contains(&cand) {
                accepted = Some(cand);
                break;
            }
            last = cand;
        }
        let cand = accepted.unwrap_or_else(|| limits.clamp(&last));
        if cand != *theta0 {
            candidates.push(cand);
        }
    }
    let degenerate = policy.count > 1 && candidates.len() == 1;
    if degenerate {
        log::warn!("joint limits left no candidate besides the current configuration");
    }
    Ok(CandidateSet {
        candidates,
        degenerate,
    })
}

/// Where a candidate's initial tracking error comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialErrorMode {
    /// Forward kinematics at the candidate: prices the end-effector motion
    /// caused by the pose change.
    Recompute,
    /// Keep the current end-effector pose for every candidate.
    FixedStart,
}

/// Whether the disturbance trace term enters the candidate scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisturbanceModel {
    Aware,
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerConfig {
    pub policy: CandidatePolicy,
    pub initial_error: InitialErrorMode,
    pub disturbance: DisturbanceModel,
    /// Optimize the pose every `period` steps; other steps use `{theta0}`.
    pub period: usize,
    /// Candidate-evaluation workers; 1 evaluates serially.
    pub threads: usize,
    /// Optional per-channel magnitude bounds on the fused command.
    pub rate_limits: Option<SVector<f64, INPUT_DIM>>,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            policy: CandidatePolicy::default(),
            initial_error: InitialErrorMode::Recompute,
            disturbance: DisturbanceModel::Aware,
            period: 1,
            threads: 1,
            rate_limits: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PlanFlags {
    /// Every candidate failed; the result is a zero command at `theta0`.
    pub fallback: bool,
    /// The chosen candidate's Euler-rate map is ill-conditioned.
    pub ill_conditioned: bool,
    pub degenerate_candidates: bool,
    pub rate_clamped: bool,
    pub window_clamped: bool,
}

#[derive(Debug, Clone)]
pub struct PlanResult {
    pub chosen: JointConfig,
    pub chosen_index: usize,
    /// `(theta_bar* - theta0) / tau`.
    pub pose_command: SVector<f64, WHOLE_BODY_JOINTS>,
    /// First MPC control at the chosen pose.
    pub u_star: ControlInput,
    /// `u_star` with the pose command added to the angular channels.
    pub control: ControlInput,
    pub predicted_cost: f64,
    /// Score per candidate; `None` where the candidate failed numerically.
    pub per_candidate_costs: Vec<Option<f64>>,
    pub candidates: Vec<JointConfig>,
    pub initial_error: Vector6<f64>,
    pub solution: Option<RiccatiSolution<6, INPUT_DIM>>,
    pub flags: PlanFlags,
}

/// Adds the pose-change rates to the angular channels of `u_star`.
pub fn fuse_controls(pose_command: &SVector<f64, WHOLE_BODY_JOINTS>, u_star: &ControlInput) -> ControlInput {
    let mut out = *u_star;
    for i in 0..WHOLE_BODY_JOINTS {
        out.0[i + 1] += pose_command[i];
    }
    out
}

/// Clamps each channel to `[-limit, limit]`, reporting whether anything moved.
pub fn clamp_rates(control: &ControlInput, limits: &SVector<f64, INPUT_DIM>) -> (ControlInput, bool) {
    let mut out = *control;
    let mut clamped = false;
    for i in 0..INPUT_DIM {
        let c = out.0[i].clamp(-limits[i], limits[i]);
        clamped |= c != out.0[i];
        out.0[i] = c;
    }
    (out, clamped)
}

/// Stepwise-unwrapped reference vectors for a window of poses.
pub fn reference_vectors(window: &[EePose]) -> Vec<SVector<f64, 6>> {
    let mut out = Vec::with_capacity(window.len());
    if let Some(first) = window.first() {
        out.push(first.to_vector());
        for w in window.windows(2) {
            let prev = *out.last().unwrap();
            out.push(prev + w[1].difference(&w[0]));
        }
    }
    out
}

/// Outcome of scoring one candidate.
#[derive(Debug, Clone)]
pub struct CandidateEval {
    pub score: f64,
    pub initial_error: Vector6<f64>,
    pub solution: RiccatiSolution<6, INPUT_DIM>,
    pub ill_conditioned: bool,
}

/// Inputs shared by all candidates of one plan.
struct PlanContext<'a> {
    theta0: &'a JointConfig,
    base: &'a BaseState,
    reference: Vec<SVector<f64, 6>>,
    current_ref: EePose,
    start_pose: EePose,
}

/// Plans with sampled pose optimization.
#[derive(Debug)]
pub struct Planner {
    chain: Arc<KinematicChain>,
    weights: MpcWeights,
    config: PlannerConfig,
    pool: Option<rayon::ThreadPool>,
}

impl Planner {
    pub fn new(chain: Arc<KinematicChain>, weights: MpcWeights, config: PlannerConfig) -> Result<Self> {
        if chain.dof() != WHOLE_BODY_JOINTS {
            return Err(Error::Dimension {
                expected: WHOLE_BODY_JOINTS,
                got: chain.dof(),
            });
        }
        weights.validate()?;
        config.policy.validate()?;
        if config.period < 1 {
            return Err(Error::config("planner.period", "must be at least 1"));
        }
        if config.threads < 1 {
            return Err(Error::config("planner.threads", "must be at least 1"));
        }
        let pool = if config.threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.threads)
                    .build()
                    .map_err(|e| Error::config("planner.threads", e.to_string()))?,
            )
        } else {
            None
        };
        Ok(Self {
            chain,
            weights,
            config,
            pool,
        })
    }

    pub fn weights(&self) -> &MpcWeights {
        &self.weights
    }

    pub fn config(&self) -> &PlannerConfig {
        &self.config
    }

    pub fn chain(&self) -> &KinematicChain {
        &self.chain
    }

    /// Deterministic per-step candidate stream.
    pub fn step_rng(&self, step: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix_seed(self.config.policy.seed, step))
    }

    fn context<'a>(
        &self,
        theta0: &'a JointConfig,
        base: &'a BaseState,
        window: &[EePose],
    ) -> Result<PlanContext<'a>> {
        if window.len() != self.weights.horizon + 1 {
            return Err(Error::Dimension {
                expected: self.weights.horizon + 1,
                got: window.len(),
            });
        }
        let start_pose = whole_body_pose(&self.chain, base, theta0)?;
        Ok(PlanContext {
            theta0,
            base,
            reference: reference_vectors(window),
            current_ref: window[0],
            start_pose,
        })
    }

    /// Scores one candidate: builds `B(theta_bar)`, solves the recursion and
    /// evaluates the cost-to-go at the candidate's initial error.
    fn evaluate(&self, ctx: &PlanContext<'_>, theta_bar: &JointConfig) -> Result<CandidateEval> {
        let (b_bar, ill_conditioned) = whole_body_input_matrix(&self.chain, theta_bar, self.weights.tau)?;
        let pose = match self.config.initial_error {
            InitialErrorMode::Recompute => {
                let base = BaseState::new(ctx.base.x, ctx.base.y, theta_bar.heading());
                whole_body_pose(&self.chain, &base, theta_bar)?
            }
            InitialErrorMode::FixedStart => ctx.start_pose,
        };
        let e0 = pose.difference(&ctx.current_ref);
        let problem = WholeBodyProblem {
            q: self.weights.q,
            r: self.weights.r,
            kappa: self.weights.kappa,
            horizon: self.weights.horizon,
            tau: self.weights.tau,
            b_bar: b_bar.0,
            reference: ctx.reference.clone(),
            sigma: self.weights.sigma,
            injection: positional_injection(),
        };
        let solution = match self.config.disturbance {
            DisturbanceModel::Aware => solve_dare(&problem, theta_bar, ctx.theta0)?,
            DisturbanceModel::Ignored => solve_dare_nominal(&problem, theta_bar, ctx.theta0)?,
        };
        let score = solution.cost_to_go(&e0);
        if !score.is_finite() {
            return Err(Error::Numerical {
                step: 0,
                msg: "non-finite candidate score".into(),
            });
        }
        Ok(CandidateEval {
            score,
            initial_error: e0,
            solution,
            ill_conditioned,
        })
    }

    fn evaluate_all(&self, ctx: &PlanContext<'_>, candidates: &[JointConfig]) -> Vec<Result<CandidateEval>> {
        match &self.pool {
            Some(pool) => pool.install(|| candidates.par_iter().map(|c| self.evaluate(ctx, c)).collect()),
            None => candidates.iter().map(|c| self.evaluate(ctx, c)).collect(),
        }
    }

    /// One planning step at time index `step`.
    ///
    /// `window` is the expected reference `r(step..=step+H)`, its first entry
    /// being the currently observed reference.
    pub fn plan_step(
        &self,
        theta0: &JointConfig,
        base: &BaseState,
        window: &[EePose],
        step: u64,
    ) -> Result<PlanResult> {
        let ctx = self.context(theta0, base, window)?;
        let optimize = step.is_multiple_of(self.config.period as u64) && self.config.policy.count > 1;
        let set = if optimize {
            // The plant does not enforce limits, so theta0 may sit outside
            // them; candidates may stay there but never move further out.
            let limits = self.chain.limits.widened_to(theta0);
            sample_candidates(&self.config.policy, theta0, &limits, &mut self.step_rng(step))?
        } else {
            CandidateSet {
                candidates: vec![theta0.clone()],
                degenerate: false,
            }
        };
        let evals = self.evaluate_all(&ctx, &set.candidates);
        Ok(self.select(set, evals))
    }

    /// Plan without pose optimization: solve once at `theta0`.
    pub fn plan_fixed_pose(
        &self,
        theta0: &JointConfig,
        base: &BaseState,
        window: &[EePose],
    ) -> Result<PlanResult> {
        let ctx = self.context(theta0, base, window)?;
        let eval = self.evaluate(&ctx, theta0);
        let set = CandidateSet {
            candidates: vec![theta0.clone()],
            degenerate: false,
        };
        Ok(self.select(set, vec![eval]))
    }

    fn select(&self, set: CandidateSet, evals: Vec<Result<CandidateEval>>) -> PlanResult {
        let theta0 = set.candidates[0].clone();
        let per_candidate_costs: Vec<Option<f64>> =
            evals.iter().map(|e| e.as_ref().ok().map(|c| c.score)).collect();
        // Strict comparison in index order: ties keep theta0, then the lowest index.
        let mut best: Option<usize> = None;
        for (i, cost) in per_candidate_costs.iter().enumerate() {
            if let Some(c) = cost {
                if best.is_none_or(|b| *c < per_candidate_costs[b].unwrap()) {
                    best = Some(i);
                }
            }
        }
        let mut flags = PlanFlags {
            degenerate_candidates: set.degenerate,
            ..PlanFlags::default()
        };
        let Some(best) = best else {
            log::warn!("every candidate failed; holding position");
            flags.fallback = true;
            return PlanResult {
                chosen: theta0,
                chosen_index: 0,
                pose_command: SVector::zeros(),
                u_star: ControlInput::zeros(),
                control: ControlInput::zeros(),
                predicted_cost: f64::INFINITY,
                per_candidate_costs,
                candidates: set.candidates,
                initial_error: Vector6::zeros(),
                solution: None,
                flags,
            };
        };
        let eval = evals.into_iter().nth(best).unwrap().unwrap();
        flags.ill_conditioned = eval.ill_conditioned;
        let u_star = ControlInput(
            eval.solution
                .control(&eval.initial_error, 0)
                .expect("horizon is at least one"),
        );
        let chosen = set.candidates[best].clone();
        let (pose_command, mut control) = if best == 0 {
            (SVector::zeros(), u_star)
        } else {
            let cmd = SVector::<f64, WHOLE_BODY_JOINTS>::from_iterator(
                chosen
                    .iter()
                    .zip(theta0.iter())
                    .map(|(a, b)| (a - b) / self.weights.tau),
            );
            (cmd, fuse_controls(&cmd, &u_star))
        };
        if let Some(limits) = &self.config.rate_limits {
            let (c, clamped) = clamp_rates(&control, limits);
            control = c;
            flags.rate_clamped = clamped;
        }
        PlanResult {
            chosen,
            chosen_index: best,
            pose_command,
            u_star,
            control,
            predicted_cost: eval.score,
            per_candidate_costs,
            candidates: set.candidates,
            initial_error: eval.initial_error,
            solution: Some(eval.solution),
            flags,
        }
    }
}

/// SplitMix64 finalizer over `seed ^ mix(stream)`.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(seed ^ splitmix(stream))
}
