//! Finite-horizon Riccati recursion for tracking a moving reference under
//! additive Gaussian disturbances.
//!
//! With error dynamics `e(k+1) = e(k) + B u(k) + r(k) - r(k+1) - D w(k+1)`,
//! the optimal cost-to-go is `e' P(k) e + 2 e' p(k) + c(k)`. `P` and `p`
//! determine the affine feedback law; `c` collects everything independent of
//! the error, including the disturbance contribution
//! `sum_k Tr(Sigma D' P(k+1) D)` and the terminal pose-change cost.
//! Controls therefore never depend on `Sigma`.

use nalgebra::{SMatrix, SVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kinematics::{JointConfig, INPUT_DIM, POSE_DIM};

/// Disturbance dimension of the whole-body problem (positional x, y, z).
pub const DISTURBANCE_DIM: usize = 3;

/// One planning instance with a frozen input matrix.
///
/// `S` is the error dimension, `U` the input dimension and `W` the
/// disturbance dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcProblem<const S: usize, const U: usize, const W: usize> {
    pub q: SMatrix<f64, S, S>,
    pub r: SMatrix<f64, U, U>,
    pub kappa: f64,
    pub horizon: usize,
    pub tau: f64,
    pub b_bar: SMatrix<f64, S, U>,
    /// Predicted reference `r~(0..=H)`; only consecutive differences matter.
    pub reference: Vec<SVector<f64, S>>,
    pub sigma: SMatrix<f64, W, W>,
    pub injection: SMatrix<f64, S, W>,
}

pub type WholeBodyProblem = MpcProblem<POSE_DIM, INPUT_DIM, DISTURBANCE_DIM>;

/// `D = [I3; 0]`: disturbances move the reference position only.
pub fn positional_injection() -> SMatrix<f64, POSE_DIM, DISTURBANCE_DIM> {
    let mut d = SMatrix::<f64, POSE_DIM, DISTURBANCE_DIM>::zeros();
    d.fixed_view_mut::<3, 3>(0, 0).fill_with_identity();
    d
}

impl<const S: usize, const U: usize, const W: usize> MpcProblem<S, U, W> {
    /// Full invariant check, including eigenvalue tests on `Q`, `R` and
    /// `Sigma`. Callers that build many problems from the same weights
    /// should validate the weights once instead.
    pub fn validate(&self) -> Result<()> {
        check_weights(&self.q, &self.r, &self.sigma, self.kappa)?;
        self.check_shape()
    }

    fn check_shape(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::config("horizon", "must be at least 1"));
        }
        if self.reference.len() != self.horizon + 1 {
            return Err(Error::Dimension {
                expected: self.horizon + 1,
                got: self.reference.len(),
            });
        }
        if !self.b_bar.iter().all(|v| v.is_finite()) {
            return Err(Error::config("b_bar", "non-finite entry"));
        }
        if !self.reference.iter().flat_map(|r| r.iter()).all(|v| v.is_finite()) {
            return Err(Error::config("reference", "non-finite entry"));
        }
        Ok(())
    }
}

fn symmetric_within<const N: usize>(m: &SMatrix<f64, N, N>, rel: f64) -> bool {
    let scale = m.amax().max(1.0);
    (m - m.transpose()).amax() <= rel * scale
}

/// Checks `Q >= 0`, `R > 0`, `Sigma >= 0` (all symmetric) and `kappa >= 0`.
pub fn check_weights<const S: usize, const U: usize, const W: usize>(
    q: &SMatrix<f64, S, S>,
    r: &SMatrix<f64, U, U>,
    sigma: &SMatrix<f64, W, W>,
    kappa: f64,
) -> Result<()> {
    fn psd(m: nalgebra::DMatrix<f64>) -> f64 {
        if m.nrows() == 0 {
            return 0.0;
        }
        m.symmetric_eigenvalues().min()
    }
    let all_finite = q.iter().chain(r.iter()).chain(sigma.iter()).all(|v| v.is_finite());
    if !all_finite {
        return Err(Error::config("weights", "non-finite entry"));
    }
    if !symmetric_within(q, 1e-12) {
        return Err(Error::config("q", "must be symmetric"));
    }
    if !symmetric_within(r, 1e-12) {
        return Err(Error::config("r", "must be symmetric"));
    }
    if !symmetric_within(sigma, 1e-12) {
        return Err(Error::config("sigma", "must be symmetric"));
    }
    let dq = nalgebra::DMatrix::from_iterator(S, S, q.iter().copied());
    let dr = nalgebra::DMatrix::from_iterator(U, U, r.iter().copied());
    let ds = nalgebra::DMatrix::from_iterator(W, W, sigma.iter().copied());
    if psd(dq) < -1e-10 * q.amax().max(1.0) {
        return Err(Error::config("q", "must be positive semidefinite"));
    }
    if !(psd(dr) > 0.0) {
        return Err(Error::config("r", "must be positive definite"));
    }
    if psd(ds) < -1e-12 * sigma.amax().max(1.0) {
        return Err(Error::config("sigma", "must be positive semidefinite"));
    }
    if !(kappa >= 0.0) {
        return Err(Error::config("kappa", "must be non-negative"));
    }
    Ok(())
}

/// Backward sequences of the recursion.
///
/// Index `k` of `p_mat`, `p_vec` and `c` runs over `0..=H`; `gain[k]` is
/// `M(k) = (R + B' P(k+1) B)^-1 B'` for `k in 0..H`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution<const S: usize, const U: usize> {
    pub p_mat: Vec<SMatrix<f64, S, S>>,
    pub p_vec: Vec<SVector<f64, S>>,
    pub c: Vec<f64>,
    pub gain: Vec<SMatrix<f64, U, S>>,
    /// `Tr(Sigma D' P(k+1) D)` for `k in 0..H` (all zero when disturbances
    /// are ignored).
    pub trace_terms: Vec<f64>,
    /// `r~(k) - r~(k+1)` for `k in 0..H`.
    reference_steps: Vec<SVector<f64, S>>,
}

impl<const S: usize, const U: usize> RiccatiSolution<S, U> {
    pub fn horizon(&self) -> usize {
        self.gain.len()
    }

    /// Optimal control at step `k` for tracking error `e`:
    /// `u = -M(k) (P(k+1) (e + r~(k) - r~(k+1)) + p(k+1))`.
    pub fn control(&self, e: &SVector<f64, S>, k: usize) -> Result<SVector<f64, U>> {
        if k >= self.horizon() {
            return Err(Error::StepOutOfRange {
                k,
                horizon: self.horizon(),
            });
        }
        let g = self.p_mat[k + 1] * (e + self.reference_steps[k]) + self.p_vec[k + 1];
        Ok(-(self.gain[k] * g))
    }

    /// Expected cost-to-go from error `e0` at step 0.
    pub fn cost_to_go(&self, e0: &SVector<f64, S>) -> f64 {
        (e0.transpose() * self.p_mat[0] * e0)[(0, 0)] + 2.0 * e0.dot(&self.p_vec[0]) + self.c[0]
    }

    /// Per-step dump for forensics.
    pub fn dump(&self) -> RiccatiDump {
        RiccatiDump {
            p_mat: self
                .p_mat
                .iter()
                .map(|m| m.row_iter().map(|r| r.iter().copied().collect()).collect())
                .collect(),
            p_vec: self.p_vec.iter().map(|v| v.iter().copied().collect()).collect(),
            c: self.c.clone(),
            trace_terms: self.trace_terms.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RiccatiDump {
    pub p_mat: Vec<Vec<Vec<f64>>>,
    pub p_vec: Vec<Vec<f64>>,
    pub c: Vec<f64>,
    pub trace_terms: Vec<f64>,
}

/// Solves the disturbance-aware recursion for candidate pose `theta_bar`
/// reached from the current pose `theta0`.
pub fn solve_dare<const S: usize, const U: usize, const W: usize>(
    problem: &MpcProblem<S, U, W>,
    theta_bar: &JointConfig,
    theta0: &JointConfig,
) -> Result<RiccatiSolution<S, U>> {
    backward_pass(problem, pose_change_cost(problem.kappa, theta_bar, theta0)?, true)
}

/// The same recursion with the disturbance term left out of `c`, i.e. the
/// planner that does not model uncertainty. Identical to [`solve_dare`]
/// with `Sigma = 0`.
pub fn solve_dare_nominal<const S: usize, const U: usize, const W: usize>(
    problem: &MpcProblem<S, U, W>,
    theta_bar: &JointConfig,
    theta0: &JointConfig,
) -> Result<RiccatiSolution<S, U>> {
    backward_pass(problem, pose_change_cost(problem.kappa, theta_bar, theta0)?, false)
}

/// `kappa * |theta_bar - theta0|^2`.
pub fn pose_change_cost(kappa: f64, theta_bar: &JointConfig, theta0: &JointConfig) -> Result<f64> {
    if theta_bar.len() != theta0.len() {
        return Err(Error::Dimension {
            expected: theta0.len(),
            got: theta_bar.len(),
        });
    }
    Ok(kappa * theta_bar.distance_squared(theta0))
}

/// Alias for [`RiccatiSolution::control`].
pub fn extract_control<const S: usize, const U: usize>(
    sol: &RiccatiSolution<S, U>,
    e: &SVector<f64, S>,
    k: usize,
) -> Result<SVector<f64, U>> {
    sol.control(e, k)
}

/// Alias for [`RiccatiSolution::cost_to_go`].
pub fn cost_to_go<const S: usize, const U: usize>(
    sol: &RiccatiSolution<S, U>,
    e0: &SVector<f64, S>,
) -> f64 {
    sol.cost_to_go(e0)
}

fn backward_pass<const S: usize, const U: usize, const W: usize>(
    problem: &MpcProblem<S, U, W>,
    terminal_cost: f64,
    with_disturbance: bool,
) -> Result<RiccatiSolution<S, U>> {
    problem.check_shape()?;
    let h = problem.horizon;
    let b = &problem.b_bar;
    let bt = b.transpose();
    let d = &problem.injection;

    let mut p_mat = vec![SMatrix::<f64, S, S>::zeros(); h + 1];
    let mut p_vec = vec![SVector::<f64, S>::zeros(); h + 1];
    let mut c = vec![0.0; h + 1];
    let mut gain = vec![SMatrix::<f64, U, S>::zeros(); h];
    let mut trace_terms = vec![0.0; h];
    let reference_steps: Vec<_> = problem
        .reference
        .windows(2)
        .map(|w| w[0] - w[1])
        .collect();

    p_mat[h] = problem.q;
    c[h] = terminal_cost;

    for k in (0..h).rev() {
        let pn = p_mat[k + 1];
        let pv = p_vec[k + 1];
        let gram = problem.r + bt * pn * b;
        let chol = gram.cholesky().ok_or_else(|| Error::Numerical {
            step: k,
            msg: "R + B'P(k+1)B is not positive definite".into(),
        })?;
        let m = chol.solve(&bt);
        let bm = b * m;
        let bm = (bm + bm.transpose()) * 0.5;

        let mut pk = problem.q + pn - pn * bm * pn;
        pk = (pk + pk.transpose()) * 0.5;

        let dr = reference_steps[k];
        let g = pn * dr + pv;
        let pk_vec = g - pn * (bm * g);

        let trace = if with_disturbance {
            (problem.sigma * (d.transpose() * pn * d)).trace()
        } else {
            0.0
        };
        let ck = c[k + 1] + dr.dot(&(pn * dr)) + trace - g.dot(&(bm * g)) + 2.0 * dr.dot(&pv);

        if !(pk.iter().all(|v| v.is_finite()) && pk_vec.iter().all(|v| v.is_finite()) && ck.is_finite()) {
            return Err(Error::Numerical {
                step: k,
                msg: "non-finite value in backward recursion".into(),
            });
        }
        p_mat[k] = pk;
        p_vec[k] = pk_vec;
        c[k] = ck;
        gain[k] = m;
        trace_terms[k] = trace;
    }

    Ok(RiccatiSolution {
        p_mat,
        p_vec,
        c,
        gain,
        trace_terms,
        reference_steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{Matrix1, Vector1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type Scalar = MpcProblem<1, 1, 1>;

    fn scalar(sigma2: f64) -> Scalar {
        MpcProblem {
            q: Matrix1::new(2.0),
            r: Matrix1::new(0.5),
            kappa: 0.0,
            horizon: 3,
            tau: 0.1,
            b_bar: Matrix1::new(0.1),
            reference: vec![Vector1::new(0.7); 4],
            sigma: Matrix1::new(sigma2),
            injection: Matrix1::new(1.0),
        }
    }

    fn theta(n: usize) -> JointConfig {
        JointConfig::zeros(n)
    }

    /// Hand-iterated scalar recursion `P = q + P+ - P+^2 b^2 / (r + b^2 P+)`.
    fn scalar_reference(q: f64, r: f64, b: f64, h: usize) -> Vec<f64> {
        let mut p = vec![0.0; h + 1];
        p[h] = q;
        for k in (0..h).rev() {
            let pn = p[k + 1];
            p[k] = q + pn - pn * pn * b * b / (r + b * b * pn);
        }
        p
    }

    #[test]
    fn scalar_surrogate_matches_hand_recursion() {
        let sigma2 = 0.09;
        let sol = solve_dare(&scalar(sigma2), &theta(1), &theta(1)).unwrap();
        let expect = scalar_reference(2.0, 0.5, 0.1, 3);
        for k in 0..=3 {
            assert_relative_eq!(sol.p_mat[k][(0, 0)], expect[k], max_relative = 1e-14);
            assert_eq!(sol.p_vec[k][0], 0.0);
        }
        let c0: f64 = (1..=3).map(|k| sigma2 * expect[k]).sum();
        assert_relative_eq!(sol.c[0], c0, max_relative = 1e-14);

        // u*(0) at e = 1 is -M P(1).
        let m = 0.1 / (0.5 + 0.01 * expect[1]);
        let u = sol.control(&Vector1::new(1.0), 0).unwrap();
        assert_relative_eq!(u[0], -m * expect[1], max_relative = 1e-14);
    }

    #[test]
    fn terminal_conditions() {
        let mut pb = scalar(0.2);
        pb.kappa = 3.0;
        let tb = JointConfig::from_slice(&[0.1, -0.2]);
        let t0 = JointConfig::from_slice(&[0.0, 0.0]);
        let sol = solve_dare(&pb, &tb, &t0).unwrap();
        assert_eq!(sol.p_mat[3], pb.q);
        assert_eq!(sol.p_vec[3][0], 0.0);
        assert_eq!(sol.c[3], 3.0 * (0.01 + 0.04));
    }

    #[test]
    fn trivial_case_is_exactly_zero() {
        let mut pb = scalar(0.0);
        pb.kappa = 1.0;
        let sol = solve_dare(&pb, &theta(2), &theta(2)).unwrap();
        assert!(sol.p_vec.iter().all(|p| p[0] == 0.0));
        assert!(sol.c.iter().all(|c| *c == 0.0));
        for k in 0..3 {
            assert_eq!(sol.control(&Vector1::zeros(), k).unwrap()[0], 0.0);
        }
        assert_eq!(sol.cost_to_go(&Vector1::zeros()), 0.0);
    }

    #[test]
    fn control_is_affine_in_error() {
        let mut pb = scalar(0.0);
        pb.reference = vec![
            Vector1::new(0.0),
            Vector1::new(0.3),
            Vector1::new(0.1),
            Vector1::new(0.9),
        ];
        let sol = solve_dare(&pb, &theta(1), &theta(1)).unwrap();
        let e = Vector1::new(0.42);
        let u0 = sol.control(&Vector1::zeros(), 1).unwrap();
        let u1 = sol.control(&e, 1).unwrap();
        let u2 = sol.control(&(e * 2.0), 1).unwrap();
        assert_relative_eq!(u2 - u0, (u1 - u0) * 2.0, max_relative = 1e-12);
    }

    #[test]
    fn out_of_range_step() {
        let sol = solve_dare(&scalar(0.0), &theta(1), &theta(1)).unwrap();
        assert!(matches!(
            sol.control(&Vector1::zeros(), 3),
            Err(Error::StepOutOfRange { k: 3, horizon: 3 })
        ));
    }

    #[test]
    fn shape_errors() {
        let mut pb = scalar(0.0);
        pb.reference.pop();
        assert!(matches!(
            solve_dare(&pb, &theta(1), &theta(1)),
            Err(Error::Dimension { expected: 4, got: 3 })
        ));
        let mut pb = scalar(0.0);
        pb.horizon = 0;
        pb.reference.truncate(1);
        assert!(solve_dare(&pb, &theta(1), &theta(1)).is_err());
    }

    #[test]
    fn weight_validation() {
        let pb = scalar(0.1);
        assert!(pb.validate().is_ok());
        let mut bad = pb.clone();
        bad.r = Matrix1::new(0.0);
        assert!(bad.validate().is_err());
        let mut bad = pb.clone();
        bad.q = Matrix1::new(-1.0);
        assert!(bad.validate().is_err());
        let mut bad = pb;
        bad.sigma = Matrix1::new(-0.1);
        assert!(bad.validate().is_err());
    }

    fn random_whole_body(rng: &mut ChaCha8Rng) -> WholeBodyProblem {
        let h = rng.random_range(1..=8);
        let a = SMatrix::<f64, 6, 6>::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let q = a * a.transpose() * rng.random_range(0.1..100.0);
        let l = SMatrix::<f64, 9, 9>::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let r = l * l.transpose() + SMatrix::<f64, 9, 9>::identity() * 0.1;
        let s = SMatrix::<f64, 3, 3>::from_fn(|_, _| rng.random_range(-0.3..0.3));
        MpcProblem {
            q,
            r,
            kappa: 1.0,
            horizon: h,
            tau: 0.1,
            b_bar: SMatrix::from_fn(|_, _| rng.random_range(-0.2..0.2)),
            reference: (0..=h)
                .map(|_| SVector::from_fn(|_, _| rng.random_range(-1.0..1.0)))
                .collect(),
            sigma: s * s.transpose(),
            injection: positional_injection(),
        }
    }

    #[test]
    fn riccati_matrices_stay_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let pb = random_whole_body(&mut rng);
            pb.validate().unwrap();
            let sol = solve_dare(&pb, &theta(8), &theta(8)).unwrap();
            for p in &sol.p_mat {
                assert!((p - p.transpose()).amax() <= 1e-12 * p.amax().max(1.0));
                let eig = nalgebra::DMatrix::from_iterator(6, 6, p.iter().copied())
                    .symmetric_eigenvalues()
                    .min();
                assert!(eig >= -1e-10 * p.amax().max(1.0), "min eigenvalue {eig}");
            }
        }
    }

    #[test]
    fn nominal_solver_equals_zero_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let pb = random_whole_body(&mut rng);
            let mut zero = pb.clone();
            zero.sigma = SMatrix::zeros();
            let a = solve_dare(&zero, &theta(8), &theta(8)).unwrap();
            let b = solve_dare_nominal(&pb, &theta(8), &theta(8)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn trace_contribution_grows_with_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = random_whole_body(&mut rng);
        let mut last = f64::NEG_INFINITY;
        for q in [0.0, 0.1, 0.4, 0.7, 1.5] {
            let mut pb = base.clone();
            pb.sigma = base.sigma * q;
            let c0 = solve_dare(&pb, &theta(8), &theta(8)).unwrap().c[0];
            assert!(c0 >= last);
            last = c0;
        }
    }

    #[test]
    fn injection_layout() {
        let d = positional_injection();
        for i in 0..6 {
            for j in 0..3 {
                assert_eq!(d[(i, j)], if i == j { 1.0 } else { 0.0 });
            }
        }
    }
}
