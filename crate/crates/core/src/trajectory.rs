//! Reference trajectories for the carried object.
//!
//! A realized reference is the nominal path plus a random walk on the
//! position channels: `r(k) = r~(k) + D * sum_{j=0..=k} w(j)` with
//! `w(j) ~ N(0, Sigma)` i.i.d. and `D = [I3; 0]`. The orientation channels are
//! never disturbed.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, SMatrix, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{wrap_angle, EePose, POSE_DIM};
use crate::riccati::{positional_injection, DISTURBANCE_DIM};

/// Per-axis variance base used with a scale `q`: `Sigma = q * diag(base)`.
pub const SIGMA_BASE: [f64; 3] = [0.015, 0.025, 0.015];

/// Walking speed of the shipped generators, m/s.
const PATH_SPEED: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurveKind {
    /// Smooth, low-curvature S-shaped walk.
    CurveA,
    /// Straight legs joined by tight turns.
    CurveB,
}

impl FromStr for CurveKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "curve-a" => Ok(CurveKind::CurveA),
            "curve-b" => Ok(CurveKind::CurveB),
            other => Err(Error::config("trajectory.kind", format!("unknown kind `{other}`"))),
        }
    }
}

/// Where a nominal trajectory comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum NominalSource<'a> {
    Curve(CurveKind),
    File(&'a Path),
}

/// Builds a nominal trajectory of `steps + 1` poses sampled every `tau`
/// seconds.
///
/// The shipped curves start at the origin heading along `+x`, keep the
/// object level (zero roll and pitch) and point yaw along the direction of
/// travel. File trajectories are loaded verbatim and must contain exactly
/// `steps + 1` poses.
pub fn make_nominal(source: NominalSource<'_>, steps: usize, tau: f64) -> Result<Vec<EePose>> {
    if steps < 2 {
        return Err(Error::config("trajectory.steps", "need at least 2 steps"));
    }
    if !(tau > 0.0) {
        return Err(Error::config("mpc.tau", "time step must be positive"));
    }
    match source {
        NominalSource::Curve(kind) => {
            let points: Vec<Vector3<f64>> = (0..=steps)
                .map(|k| match kind {
                    CurveKind::CurveA => curve_a(k as f64 * tau),
                    CurveKind::CurveB => curve_b(k as f64 * tau),
                })
                .collect();
            Ok(attach_heading(&points))
        }
        NominalSource::File(path) => {
            let poses = read_trajectory(path)?;
            if poses.len() != steps + 1 {
                return Err(Error::config(
                    "trajectory.steps",
                    format!("file has {} poses, expected {}", poses.len(), steps + 1),
                ));
            }
            Ok(poses)
        }
    }
}

fn curve_a(t: f64) -> Vector3<f64> {
    // One gentle S over 50 s.
    let x = PATH_SPEED * t;
    let y = 0.8 * (1.0 - (2.0 * PI * t / 50.0).cos());
    let z = 0.05 * (2.0 * PI * t / 25.0).sin();
    Vector3::new(x, y, z)
}

/// Straight legs joined by 90 degree turns of radius `TURN_RADIUS`, laid out
/// as a staircase so the path keeps making progress.
fn curve_b(t: f64) -> Vector3<f64> {
    const LEG: f64 = 2.0;
    const TURN_RADIUS: f64 = 0.08;
    let arc = FRAC_PI_2 * TURN_RADIUS;
    let mut s = PATH_SPEED * t;
    let mut pos = Vector3::zeros();
    let mut heading: f64 = 0.0;
    // Alternate left and right turns.
    let mut left = true;
    loop {
        if s <= LEG {
            pos += Vector3::new(heading.cos(), heading.sin(), 0.0) * s;
            break;
        }
        pos += Vector3::new(heading.cos(), heading.sin(), 0.0) * LEG;
        s -= LEG;
        let sign = if left { 1.0 } else { -1.0 };
        let centre = pos + Vector3::new(-heading.sin(), heading.cos(), 0.0) * (sign * TURN_RADIUS);
        let swept = s.min(arc) / TURN_RADIUS * sign;
        let start = heading - sign * FRAC_PI_2;
        let ang = start + swept;
        pos = centre + Vector3::new(ang.cos(), ang.sin(), 0.0) * TURN_RADIUS;
        heading += swept;
        if s <= arc {
            break;
        }
        s -= arc;
        left = !left;
    }
    // Small height change on each leg, as when stepping over a threshold.
    pos.z = 0.04 * (2.0 * PI * PATH_SPEED * t / (2.0 * LEG)).sin();
    pos
}

/// Poses with yaw along the (unwrapped) direction of travel.
fn attach_heading(points: &[Vector3<f64>]) -> Vec<EePose> {
    let n = points.len();
    let mut yaw = Vec::with_capacity(n);
    let mut prev: Option<f64> = None;
    for k in 0..n {
        let d = if k + 1 < n {
            points[k + 1] - points[k]
        } else {
            points[k] - points[k - 1]
        };
        let raw = d.y.atan2(d.x);
        let y = match prev {
            Some(p) => p + wrap_angle(raw - p),
            None => raw,
        };
        yaw.push(y);
        prev = Some(y);
    }
    points
        .iter()
        .zip(yaw)
        .map(|(p, y)| EePose::new(*p, Vector3::new(0.0, 0.0, y)))
        .collect()
}

/// Largest absolute heading change between consecutive poses.
pub fn max_turn_per_step(poses: &[EePose]) -> f64 {
    poses
        .windows(2)
        .map(|w| wrap_angle(w[1].orientation.z - w[0].orientation.z).abs())
        .fold(0.0, f64::max)
}

/// Moves a nominal trajectory so that it starts at `start`: positions are
/// translated, roll and pitch are replaced by the start's, yaw keeps its
/// changes relative to the first pose.
pub fn anchor(nominal: &[EePose], start: &EePose) -> Vec<EePose> {
    let Some(first) = nominal.first() else {
        return Vec::new();
    };
    nominal
        .iter()
        .map(|p| {
            let pos = start.position + (p.position - first.position);
            let yaw = start.orientation.z + (p.orientation.z - first.orientation.z);
            EePose::new(pos, Vector3::new(start.orientation.x, start.orientation.y, yaw))
        })
        .collect()
}

/// Nominal trajectory plus its disturbance model.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceModel {
    pub nominal: Vec<EePose>,
    pub sigma: Matrix3<f64>,
    pub seed: u64,
}

impl ReferenceModel {
    pub fn new(nominal: Vec<EePose>, sigma: Matrix3<f64>, seed: u64) -> Self {
        Self {
            nominal,
            sigma,
            seed,
        }
    }

    /// `Sigma = q * diag(SIGMA_BASE)`.
    pub fn scaled_sigma(q: f64, base: [f64; 3]) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(base)) * q
    }

    pub fn injection(&self) -> SMatrix<f64, POSE_DIM, DISTURBANCE_DIM> {
        positional_injection()
    }

    pub fn steps(&self) -> usize {
        self.nominal.len().saturating_sub(1)
    }
}

/// Realized reference and the draws that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbedTrajectory {
    pub realized: Vec<EePose>,
    pub draws: Vec<Vector3<f64>>,
    pub seed: u64,
}

/// Symmetric square root of a PSD matrix via eigendecomposition. Tiny
/// negative eigenvalues from rounding are treated as zero; clearly negative
/// ones are an error.
pub fn symmetric_sqrt(sigma: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    if !sigma.iter().all(|v| v.is_finite()) {
        return Err(Error::config("sigma", "non-finite entry"));
    }
    let scale = sigma.amax().max(1e-300);
    if (sigma - sigma.transpose()).amax() > 1e-12 * scale {
        return Err(Error::config("sigma", "covariance must be symmetric"));
    }
    let eig = sigma.symmetric_eigen();
    if eig.eigenvalues.min() < -1e-12 * scale {
        return Err(Error::config("sigma", "covariance must be positive semidefinite"));
    }
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(eig.eigenvectors * Matrix3::from_diagonal(&root) * eig.eigenvectors.transpose())
}

/// Draws `w(0..=T)` from the model's seed and accumulates them onto the
/// nominal positions.
pub fn realize_disturbance(model: &ReferenceModel) -> Result<DisturbedTrajectory> {
    let root = symmetric_sqrt(&model.sigma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    let mut offset = Vector3::zeros();
    let mut realized = Vec::with_capacity(model.nominal.len());
    let mut draws = Vec::with_capacity(model.nominal.len());
    for pose in &model.nominal {
        let z = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
        let w = root * z;
        offset += w;
        draws.push(w);
        realized.push(EePose::new(pose.position + offset, pose.orientation));
    }
    Ok(DisturbedTrajectory {
        realized,
        draws,
        seed: model.seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorMode {
    /// Future references are the known nominal trajectory.
    OracleNominal,
    /// Extrapolate the recent positional velocity, hold orientation.
    ConstantVelocity,
}

impl FromStr for PredictorMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle-nominal" | "oracle" => Ok(PredictorMode::OracleNominal),
            "constant-velocity" => Ok(PredictorMode::ConstantVelocity),
            other => Err(Error::config(
                "trajectory.predictor",
                format!("unknown predictor `{other}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    pub mode: PredictorMode,
    /// Number of most recent observations used by constant-velocity mode.
    pub history_window: usize,
}

impl Predictor {
    pub fn oracle() -> Self {
        Self {
            mode: PredictorMode::OracleNominal,
            history_window: 2,
        }
    }

    pub fn constant_velocity(history_window: usize) -> Self {
        Self {
            mode: PredictorMode::ConstantVelocity,
            history_window,
        }
    }
}

/// `H + 1` predicted poses starting at step `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedWindow {
    pub poses: Vec<EePose>,
    /// Set when the window ran past the end of the trajectory and the final
    /// pose was repeated.
    pub clamped: bool,
}

/// Predicts `r~(k..=k+H)`.
///
/// `history` holds observed references up to and including step `k`;
/// `nominal` is the full nominal trajectory (its length bounds the window in
/// both modes).
pub fn predict_window(
    predictor: &Predictor,
    history: &[EePose],
    nominal: &[EePose],
    k: usize,
    horizon: usize,
) -> Result<PredictedWindow> {
    if nominal.is_empty() {
        return Err(Error::config("trajectory", "empty nominal trajectory"));
    }
    let last = nominal.len() - 1;
    let clamped = k + horizon > last;
    let poses = match predictor.mode {
        PredictorMode::OracleNominal => (0..=horizon).map(|j| nominal[(k + j).min(last)]).collect(),
        PredictorMode::ConstantVelocity => {
            let Some(current) = history.last() else {
                return Err(Error::config(
                    "history",
                    "constant-velocity prediction needs at least one observation",
                ));
            };
            let w = predictor.history_window.max(2).min(history.len());
            let velocity = if w >= 2 {
                (current.position - history[history.len() - w].position) / (w - 1) as f64
            } else {
                Vector3::zeros()
            };
            (0..=horizon)
                .map(|j| {
                    let steps_ahead = (k + j).min(last.max(k)) - k;
                    EePose::new(
                        current.position + velocity * steps_ahead as f64,
                        current.orientation,
                    )
                })
                .collect()
        }
    };
    Ok(PredictedWindow { poses, clamped })
}

/// Reads one pose per line (`x y z roll pitch yaw`); `#` starts a comment.
pub fn parse_trajectory(text: &str) -> Result<Vec<EePose>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>().map_err(|e| Error::Parse {
                    line: n + 1,
                    msg: format!("`{t}`: {e}"),
                })
            })
            .collect::<Result<_>>()?;
        if vals.len() != 6 {
            return Err(Error::Parse {
                line: n + 1,
                msg: format!("expected 6 fields, found {}", vals.len()),
            });
        }
        let pose = EePose::from_array([vals[0], vals[1], vals[2], vals[3], vals[4], vals[5]]);
        if !pose.is_finite() {
            return Err(Error::Parse {
                line: n + 1,
                msg: "non-finite value".into(),
            });
        }
        out.push(pose);
    }
    Ok(out)
}

pub fn read_trajectory(path: impl AsRef<Path>) -> Result<Vec<EePose>> {
    parse_trajectory(&std::fs::read_to_string(path)?)
}

/// Text form of a trajectory with a header recording seed and covariance.
pub fn format_trajectory(poses: &[EePose], seed: Option<u64>, sigma: Option<&Matrix3<f64>>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# x y z roll pitch yaw");
    if let Some(seed) = seed {
        let _ = writeln!(s, "# seed={seed}");
    }
    if let Some(sig) = sigma {
        let rows: Vec<String> = sig
            .row_iter()
            .map(|r| format!("{} {} {}", r[0], r[1], r[2]))
            .collect();
        let _ = writeln!(s, "# sigma={}", rows.join("; "));
    }
    for p in poses {
        let _ = writeln!(s, "{p}");
    }
    s
}

pub fn write_trajectory(
    path: impl AsRef<Path>,
    poses: &[EePose],
    seed: Option<u64>,
    sigma: Option<&Matrix3<f64>>,
) -> Result<()> {
    std::fs::write(path, format_trajectory(poses, seed, sigma))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn line(n: usize) -> Vec<EePose> {
        (0..n)
            .map(|i| EePose::from_array([0.1 * i as f64, 0.0, 0.5, 0.0, 0.0, 0.3]))
            .collect()
    }

    #[test]
    fn full_length_trajectory() {
        let a = make_nominal(NominalSource::Curve(CurveKind::CurveA), 500, 0.1).unwrap();
        assert_eq!(a.len(), 501);
        assert!(a.iter().all(EePose::is_finite));
        let b = make_nominal(NominalSource::Curve(CurveKind::CurveB), 500, 0.1).unwrap();
        assert_eq!(b.len(), 501);
    }

    #[test]
    fn sharp_turn_curve_turns_harder() {
        let a = make_nominal(NominalSource::Curve(CurveKind::CurveA), 500, 0.1).unwrap();
        let b = make_nominal(NominalSource::Curve(CurveKind::CurveB), 500, 0.1).unwrap();
        let (ta, tb) = (max_turn_per_step(&a), max_turn_per_step(&b));
        assert!(tb >= 3.0 * ta, "curve-b {tb} vs curve-a {ta}");
    }

    #[test]
    fn curve_b_is_continuous() {
        let b = make_nominal(NominalSource::Curve(CurveKind::CurveB), 500, 0.1).unwrap();
        for w in b.windows(2) {
            let step = (w[1].position - w[0].position).norm();
            assert!(step <= PATH_SPEED * 0.1 + 0.02, "jump {step}");
        }
    }

    #[test]
    fn short_file_trajectory() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("line.traj");
        write_trajectory(&path, &line(3), None, None).unwrap();
        let poses = make_nominal(NominalSource::File(&path), 2, 0.1).unwrap();
        assert_eq!(poses.len(), 3);
        assert_relative_eq!(poses[2].position.x, 0.2, epsilon = 1e-9);
        assert!(poses.iter().all(|p| p.orientation == poses[0].orientation));
        assert!(make_nominal(NominalSource::File(&path), 5, 0.1).is_err());
    }

    #[test]
    fn parse_rejects_short_rows() {
        assert!(matches!(
            parse_trajectory("1 2 3 4 5 6\n1 2 3\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn zero_covariance_leaves_nominal() {
        let model = ReferenceModel::new(line(20), Matrix3::zeros(), 5);
        let d = realize_disturbance(&model).unwrap();
        assert_eq!(d.realized, model.nominal);
    }

    #[test]
    fn same_seed_same_realization() {
        let model = ReferenceModel::new(line(50), ReferenceModel::scaled_sigma(0.4, SIGMA_BASE), 9);
        assert_eq!(realize_disturbance(&model).unwrap(), realize_disturbance(&model).unwrap());
    }

    #[test]
    fn non_psd_covariance_rejected() {
        let sigma = Matrix3::from_diagonal(&Vector3::new(0.1, -0.2, 0.1));
        let model = ReferenceModel::new(line(3), sigma, 0);
        assert!(realize_disturbance(&model).is_err());
    }

    #[test]
    fn symmetric_sqrt_squares_back() {
        let a = Matrix3::new(0.2, 0.05, 0.0, 0.05, 0.3, -0.02, 0.0, -0.02, 0.1);
        let r = symmetric_sqrt(&a).unwrap();
        assert_relative_eq!(r * r, a, epsilon = 1e-14);
        assert_relative_eq!(r, r.transpose(), epsilon = 1e-15);
    }

    #[test]
    fn oracle_window_passthrough_and_clamp() {
        let nominal = line(10);
        let p = Predictor::oracle();
        let w = predict_window(&p, &[], &nominal, 0, 3).unwrap();
        assert_eq!(w.poses, nominal[0..4].to_vec());
        assert!(!w.clamped);

        // T = 9, k = T - 1, H = 8.
        let w = predict_window(&p, &[], &nominal, 8, 8).unwrap();
        assert_eq!(w.poses.len(), 9);
        assert_eq!(w.poses[0], nominal[8]);
        assert!(w.poses[1..].iter().all(|q| *q == nominal[9]));
        assert!(w.clamped);
    }

    #[test]
    fn constant_velocity_extrapolates() {
        let history = vec![
            EePose::from_array([1.0, 0.0, 0.0, 0.1, 0.2, 0.3]),
            EePose::from_array([1.1, 0.0, 0.0, 0.1, 0.2, 0.3]),
        ];
        let nominal = line(50);
        let w = predict_window(&Predictor::constant_velocity(2), &history, &nominal, 1, 4).unwrap();
        assert_eq!(w.poses.len(), 5);
        for (j, p) in w.poses.iter().enumerate() {
            assert_relative_eq!(p.position.x, 1.1 + 0.1 * j as f64, epsilon = 1e-12);
            assert_eq!(p.orientation, history[1].orientation);
        }
        assert!(predict_window(&Predictor::constant_velocity(2), &[], &nominal, 0, 4).is_err());
    }

    #[test]
    fn anchor_moves_start() {
        let nominal = make_nominal(NominalSource::Curve(CurveKind::CurveA), 20, 0.1).unwrap();
        let start = EePose::from_array([0.7, 0.0, 0.9, 0.05, -0.03, 1.3]);
        let a = anchor(&nominal, &start);
        assert_eq!(a[0], start);
        assert_relative_eq!(
            a[10].position - a[0].position,
            nominal[10].position - nominal[0].position,
            epsilon = 1e-12
        );
    }
}
