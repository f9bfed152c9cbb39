//! Reference implementations used to check the solver.
//!
//! The batch solver stacks the whole horizon into one least-squares problem
//! and never forms a Riccati recursion; the Monte Carlo rollout simulates the
//! closed loop with sampled disturbances.

#![allow(dead_code)]

use cotrack::kinematics::{JointConfig, INPUT_DIM, POSE_DIM};
use cotrack::riccati::{positional_injection, RiccatiSolution, WholeBodyProblem, DISTURBANCE_DIM};
use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Pose = SVector<f64, POSE_DIM>;
pub type Input = SVector<f64, INPUT_DIM>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_spd<const N: usize>(rng: &mut impl Rng, scale: f64, floor: f64) -> SMatrix<f64, N, N> {
    let a = SMatrix::<f64, N, N>::from_fn(|_, _| rng.random_range(-1.0..1.0));
    (a * a.transpose()) * scale + SMatrix::identity() * floor
}

/// Random whole-body instance with horizon `h`.
pub fn random_problem(rng: &mut impl Rng, h: usize, sigma: Matrix3<f64>) -> WholeBodyProblem {
    let mut reference = vec![Pose::from_fn(|_, _| rng.random_range(-1.0..1.0))];
    for _ in 0..h {
        let step = Pose::from_fn(|_, _| rng.random_range(-0.05..0.05));
        reference.push(reference.last().unwrap() + step);
    }
    let (q_scale, r_scale) = (rng.random_range(1.0..100.0), rng.random_range(0.1..2.0));
    WholeBodyProblem {
        q: random_spd(rng, q_scale, 0.5),
        r: random_spd(rng, r_scale, 0.1),
        kappa: rng.random_range(0.0..2.0),
        horizon: h,
        tau: 0.1,
        b_bar: SMatrix::from_fn(|_, _| rng.random_range(-0.1..0.1)),
        reference,
        sigma,
        injection: positional_injection(),
    }
}

pub fn random_theta(rng: &mut impl Rng) -> JointConfig {
    JointConfig::from_iter((0..8).map(|_| rng.random_range(-1.0..1.0)))
}

pub fn random_sigma(rng: &mut impl Rng) -> Matrix3<f64> {
    let scale = rng.random_range(0.001..0.01);
    random_spd::<DISTURBANCE_DIM>(rng, scale, 0.0005)
}

fn reference_steps(p: &WholeBodyProblem) -> Vec<Pose> {
    p.reference.windows(2).map(|w| w[0] - w[1]).collect()
}

/// Open-loop minimizer of the deterministic cost
/// `sum_{k=0}^{H} e'Qe + sum_{k=0}^{H-1} u'Ru` with
/// `e(k+1) = e(k) + B u(k) + r(k) - r(k+1)`, by stacked least squares.
///
/// Returns the input sequence and the minimal cost (without the constant
/// pose-change term).
pub fn batch_minimizer(p: &WholeBodyProblem, e0: &Pose) -> (Vec<Input>, f64) {
    let h = p.horizon;
    let (n, m) = (POSE_DIM, INPUT_DIM);
    let d = reference_steps(p);
    let q_half = p.q.cholesky().expect("Q positive definite in tests").l().transpose();
    let r_half = p.r.cholesky().expect("R positive definite").l().transpose();

    // Residual rows: Q^1/2 e(k) for k = 0..=H, then R^1/2 u(k).
    let rows = (h + 1) * n + h * m;
    let mut a = DMatrix::<f64>::zeros(rows, h * m);
    let mut b = DVector::<f64>::zeros(rows);
    let mut drift = *e0;
    for k in 0..=h {
        if k > 0 {
            drift += d[k - 1];
        }
        let off = k * n;
        b.rows_mut(off, n).copy_from(&(-(q_half * drift)));
        for j in 0..k {
            let block = q_half * p.b_bar;
            a.view_mut((off, j * m), (n, m)).copy_from(&block);
        }
    }
    for k in 0..h {
        let off = (h + 1) * n + k * m;
        a.view_mut((off, k * m), (m, m)).copy_from(&r_half);
    }
    let normal = a.transpose() * &a;
    let rhs = a.transpose() * &b;
    let u = normal.cholesky().expect("normal equations definite").solve(&rhs);
    let residual = &a * &u - &b;
    let inputs = (0..h).map(|k| Input::from_iterator(u.rows(k * m, m).iter().copied())).collect();
    (inputs, residual.norm_squared())
}

/// Feedback sequence of a solution along the disturbance-free trajectory.
pub fn riccati_rollout(p: &WholeBodyProblem, sol: &RiccatiSolution<6, 9>, e0: &Pose) -> Vec<Input> {
    let d = reference_steps(p);
    let mut e = *e0;
    let mut out = Vec::with_capacity(p.horizon);
    for k in 0..p.horizon {
        let u = sol.control(&e, k).unwrap();
        e += p.b_bar * u + d[k];
        out.push(u);
    }
    out
}

/// Realized closed-loop cost under the feedback law, with
/// `e(k+1) = e(k) + B u(k) + r(k) - r(k+1) - D w(k+1)`, `w ~ N(0, Sigma)`.
///
/// Returns the sample mean and its standard error over `draws` rollouts.
pub fn monte_carlo_cost(
    p: &WholeBodyProblem,
    sol: &RiccatiSolution<6, 9>,
    e0: &Pose,
    terminal: f64,
    draws: usize,
    seed: u64,
) -> (f64, f64) {
    let d = reference_steps(p);
    let root = p.sigma.cholesky().expect("Sigma positive definite in tests").l();
    let mut rng = rng(seed);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..draws {
        let mut e = *e0;
        let mut cost = terminal;
        for k in 0..p.horizon {
            let u = sol.control(&e, k).unwrap();
            cost += (e.transpose() * p.q * e)[(0, 0)] + (u.transpose() * p.r * u)[(0, 0)];
            let z = SVector::<f64, 3>::from_fn(|_, _| rng.sample(StandardNormal));
            e += p.b_bar * u + d[k] - p.injection * (root * z);
        }
        cost += (e.transpose() * p.q * e)[(0, 0)];
        sum += cost;
        sum_sq += cost * cost;
    }
    let n = draws as f64;
    let mean = sum / n;
    let var = (sum_sq - n * mean * mean) / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn relative_error(a: &[Input], b: &[Input]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_squared()).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y.norm_squared()).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

/// Standard-DH homogeneous transform, written out element by element.
pub fn dh_matrix(a: f64, alpha: f64, d: f64, theta: f64) -> nalgebra::Matrix4<f64> {
    let (st, ct) = theta.sin_cos();
    let (sa, ca) = alpha.sin_cos();
    nalgebra::Matrix4::new(
        ct, -st * ca, st * sa, a * ct, //
        st, ct * ca, -ct * sa, a * st, //
        0.0, sa, ca, d, //
        0.0, 0.0, 0.0, 1.0,
    )
}
