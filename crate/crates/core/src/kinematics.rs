//! Whole-body kinematics of a differential-drive mobile manipulator.
//!
//! The arm is described by standard Denavit-Hartenberg rows
//! `Rz(theta + offset) * Tz(d) * Tx(a) * Rx(alpha)`. The first row of the
//! whole-body chain is the base heading, treated as an extra revolute joint
//! about the vertical axis through the base origin. Poses produced here live
//! in the translation-only frame attached to the base; adding the base
//! position gives the inertial pose.
//!
//! Orientation is reported as intrinsic ZYX Euler angles `(roll, pitch, yaw)`
//! with `R = Rz(yaw) * Ry(pitch) * Rx(roll)`.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of whole-body joints (base heading + 7 arm joints).
pub const WHOLE_BODY_JOINTS: usize = 8;
/// Whole-body input size: base linear velocity + one rate per joint.
pub const INPUT_DIM: usize = WHOLE_BODY_JOINTS + 1;
/// Pose dimension: xyz position + roll/pitch/yaw.
pub const POSE_DIM: usize = 6;

/// Euler-rate maps with a condition number above this are flagged.
pub const EULER_CONDITION_LIMIT: f64 = 1e8;

const REFERENCE_CHAIN: &str = include_str!("../data/reference_chain.dh");
const REFERENCE_LIMITS: &str = include_str!("../data/reference_chain.limits");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DhRow {
    pub a: f64,
    pub alpha: f64,
    pub d: f64,
    pub theta_offset: f64,
}

impl DhRow {
    pub fn new(a: f64, alpha: f64, d: f64, theta_offset: f64) -> Self {
        Self {
            a,
            alpha,
            d,
            theta_offset,
        }
    }

    /// Rotation and translation of this link for joint value `theta`.
    fn transform(&self, theta: f64) -> (Matrix3<f64>, Vector3<f64>) {
        let (st, ct) = (theta + self.theta_offset).sin_cos();
        let (sa, ca) = self.alpha.sin_cos();
        let rot = Matrix3::new(
            ct,
            -st * ca,
            st * sa,
            st,
            ct * ca,
            -ct * sa,
            0.0,
            sa,
            ca,
        );
        (rot, Vector3::new(self.a * ct, self.a * st, self.d))
    }
}

/// Denavit-Hartenberg table, ordered base to tip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DhParameters {
    rows: Vec<DhRow>,
}

impl DhParameters {
    pub fn new(rows: Vec<DhRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::config("dh", "chain needs at least one joint"));
        }
        for (i, r) in rows.iter().enumerate() {
            if ![r.a, r.alpha, r.d, r.theta_offset].iter().all(|v| v.is_finite()) {
                return Err(Error::config(format!("dh[{i}]"), "non-finite entry"));
            }
        }
        Ok(Self { rows })
    }

    /// Parses a whitespace-separated table with one `a alpha d theta_offset`
    /// row per joint. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let rows = parse_table(text, 4)?
            .into_iter()
            .map(|v| DhRow::new(v[0], v[1], v[2], v[3]))
            .collect();
        Self::new(rows)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn rows(&self) -> &[DhRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Per-joint box limits in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointLimits {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl JointLimits {
    pub fn unbounded(n: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Dimension {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(Error::config(
                    format!("limits[{i}]"),
                    format!("invalid interval [{lo}, {hi}]"),
                ));
            }
        }
        Ok(Self { lower, upper })
    }

    /// One `lower upper` row per joint, same order as the DH table.
    pub fn parse(text: &str) -> Result<Self> {
        let rows = parse_table(text, 2)?;
        Self::new(
            rows.iter().map(|r| r[0]).collect(),
            rows.iter().map(|r| r[1]).collect(),
        )
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn contains(&self, theta: &JointConfig) -> bool {
        theta.len() == self.len()
            && theta
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(t, (lo, hi))| *t >= *lo && *t <= *hi)
    }

    pub fn contains_joint(&self, i: usize, value: f64) -> bool {
        value >= self.lower[i] && value <= self.upper[i]
    }

    pub fn clamp_joint(&self, i: usize, value: f64) -> f64 {
        value.clamp(self.lower[i], self.upper[i])
    }

    pub fn clamp(&self, theta: &JointConfig) -> JointConfig {
        JointConfig::from_iter(theta.iter().enumerate().map(|(i, t)| self.clamp_joint(i, *t)))
    }

    /// The smallest box containing both these limits and `theta`.
    pub fn widened_to(&self, theta: &JointConfig) -> JointLimits {
        let lower = self.lower.iter().zip(theta.iter()).map(|(l, t)| l.min(*t)).collect();
        let upper = self.upper.iter().zip(theta.iter()).map(|(u, t)| u.max(*t)).collect();
        JointLimits { lower, upper }
    }
}

fn parse_table(text: &str, width: usize) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|e| Error::Parse {
                    line: n + 1,
                    msg: format!("`{tok}`: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != width {
            return Err(Error::Parse {
                line: n + 1,
                msg: format!("expected {width} fields, found {}", vals.len()),
            });
        }
        rows.push(vals);
    }
    Ok(rows)
}

/// DH table plus joint limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinematicChain {
    pub dh: DhParameters,
    pub limits: JointLimits,
}

impl KinematicChain {
    pub fn new(dh: DhParameters, limits: JointLimits) -> Result<Self> {
        if dh.len() != limits.len() {
            return Err(Error::Dimension {
                expected: dh.len(),
                got: limits.len(),
            });
        }
        Ok(Self { dh, limits })
    }

    pub fn unbounded(dh: DhParameters) -> Self {
        let limits = JointLimits::unbounded(dh.len());
        Self { dh, limits }
    }

    /// The shipped 8-joint reference chain (heading pseudo-joint followed by a
    /// 7-DOF arm). Geometry and limits are loaded from `data/`.
    pub fn reference() -> Self {
        let dh = DhParameters::parse(REFERENCE_CHAIN).expect("shipped chain parses");
        let limits = JointLimits::parse(REFERENCE_LIMITS).expect("shipped limits parse");
        Self::new(dh, limits).expect("shipped chain and limits agree")
    }

    /// Loads a chain file and an optional limits file.
    pub fn from_files(chain: impl AsRef<Path>, limits: Option<&Path>) -> Result<Self> {
        let dh = DhParameters::from_file(chain)?;
        match limits {
            Some(p) => Self::new(dh, JointLimits::from_file(p)?),
            None => Ok(Self::unbounded(dh)),
        }
    }

    pub fn dof(&self) -> usize {
        self.dh.len()
    }
}

/// Joint angles `[phi, theta_2, ..., theta_n]` in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointConfig(pub DVector<f64>);

impl JointConfig {
    pub fn from_slice(v: &[f64]) -> Self {
        Self(DVector::from_column_slice(v))
    }

    pub fn zeros(n: usize) -> Self {
        Self(DVector::zeros(n))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.0.iter()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn heading(&self) -> f64 {
        self.0[0]
    }

    pub fn distance_squared(&self, other: &JointConfig) -> f64 {
        (&self.0 - &other.0).norm_squared()
    }
}

impl FromIterator<f64> for JointConfig {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        Self(DVector::from_vec(iter.into_iter().collect()))
    }
}

impl std::ops::Index<usize> for JointConfig {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Differential-drive base state in the inertial frame. `phi` is never
/// wrapped.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BaseState {
    pub x: f64,
    pub y: f64,
    pub phi: f64,
}

impl BaseState {
    pub fn new(x: f64, y: f64, phi: f64) -> Self {
        Self { x, y, phi }
    }
}

/// End-effector pose: position in metres, ZYX Euler angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EePose {
    pub position: Vector3<f64>,
    /// `(roll, pitch, yaw)`
    pub orientation: Vector3<f64>,
}

impl EePose {
    pub fn new(position: Vector3<f64>, orientation: Vector3<f64>) -> Self {
        Self {
            position,
            orientation,
        }
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self::from_vector(&Vector6::from(v))
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            position: Vector3::new(v[0], v[1], v[2]),
            orientation: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.position.x,
            self.position.y,
            self.position.z,
            self.orientation.x,
            self.orientation.y,
            self.orientation.z,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }

    /// `self - other` with orientation channels wrapped into `(-pi, pi]`.
    pub fn difference(&self, other: &EePose) -> Vector6<f64> {
        let mut d = self.to_vector() - other.to_vector();
        for i in 3..6 {
            d[i] = wrap_angle(d[i]);
        }
        d
    }

    /// `self + delta`, with no angle wrapping.
    pub fn offset(&self, delta: &Vector6<f64>) -> EePose {
        EePose::from_vector(&(self.to_vector() + delta))
    }
}

impl fmt::Display for EePose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = self.to_vector();
        write!(
            f,
            "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            v[0], v[1], v[2], v[3], v[4], v[5]
        )
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// `B(theta)`: 6x9 whole-body input matrix, columns `[v, omega_0..omega_7]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputMatrix(pub SMatrix<f64, POSE_DIM, INPUT_DIM>);

/// Whole-body command `[v, eta, theta_dot_2..theta_dot_8]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput(pub SVector<f64, INPUT_DIM>);

impl ControlInput {
    pub fn zeros() -> Self {
        Self(SVector::zeros())
    }

    pub fn linear_velocity(&self) -> f64 {
        self.0[0]
    }

    pub fn angular(&self) -> SVector<f64, WHOLE_BODY_JOINTS> {
        self.0.fixed_rows::<WHOLE_BODY_JOINTS>(1).into_owned()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Geometric Jacobian with angular rows expressed as Euler-angle rates.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian {
    pub matrix: DMatrix<f64>,
    /// Condition number of the angular-velocity to Euler-rate map.
    pub euler_condition: f64,
}

impl Jacobian {
    pub fn ill_conditioned(&self) -> bool {
        !(self.euler_condition <= EULER_CONDITION_LIMIT)
    }
}

fn check_len(chain: &KinematicChain, theta: &JointConfig) -> Result<()> {
    if theta.len() != chain.dof() {
        return Err(Error::Dimension {
            expected: chain.dof(),
            got: theta.len(),
        });
    }
    Ok(())
}

/// ZYX Euler angles of a rotation matrix.
pub fn euler_zyx(r: &Matrix3<f64>) -> Vector3<f64> {
    let pitch = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    let roll = r[(2, 1)].atan2(r[(2, 2)]);
    let yaw = r[(1, 0)].atan2(r[(0, 0)]);
    Vector3::new(roll, pitch, yaw)
}

/// Rotation matrix for ZYX Euler angles `(roll, pitch, yaw)`.
pub fn rotation_zyx(rpy: &Vector3<f64>) -> Matrix3<f64> {
    let (sr, cr) = rpy.x.sin_cos();
    let (sp, cp) = rpy.y.sin_cos();
    let (sy, cy) = rpy.z.sin_cos();
    let rz = Matrix3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0);
    let ry = Matrix3::new(cp, 0.0, sp, 0.0, 1.0, 0.0, -sp, 0.0, cp);
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cr, -sr, 0.0, sr, cr);
    rz * ry * rx
}

/// Frame origins and z-axes for every joint, plus the tool transform.
struct ChainFrames {
    origins: Vec<Vector3<f64>>,
    axes: Vec<Vector3<f64>>,
    rotation: Matrix3<f64>,
    position: Vector3<f64>,
}

fn chain_frames(chain: &KinematicChain, theta: &JointConfig) -> ChainFrames {
    let n = chain.dof();
    let mut origins = Vec::with_capacity(n);
    let mut axes = Vec::with_capacity(n);
    let mut rot = Matrix3::identity();
    let mut pos = Vector3::zeros();
    for (row, &q) in chain.dh.rows().iter().zip(theta.iter()) {
        origins.push(pos);
        axes.push(rot.column(2).into_owned());
        let (r, t) = row.transform(q);
        pos += rot * t;
        rot *= r;
    }
    ChainFrames {
        origins,
        axes,
        rotation: rot,
        position: pos,
    }
}

/// End-effector pose in the base-attached frame.
pub fn forward_kinematics(chain: &KinematicChain, theta: &JointConfig) -> Result<EePose> {
    check_len(chain, theta)?;
    let frames = chain_frames(chain, theta);
    Ok(EePose::new(frames.position, euler_zyx(&frames.rotation)))
}

/// Analytic Jacobian of [`forward_kinematics`], 6 x n.
///
/// Linear rows are `z_i x (p_tool - o_i)`. Angular rows map the geometric
/// angular velocity `z_i` to ZYX Euler rates. The rate map has condition
/// number `sqrt((1 + |sin p|) / (1 - |sin p|))`; large values are reported
/// through [`Jacobian::ill_conditioned`] rather than rejected.
pub fn jacobian(chain: &KinematicChain, theta: &JointConfig) -> Result<Jacobian> {
    check_len(chain, theta)?;
    let frames = chain_frames(chain, theta);
    let rpy = euler_zyx(&frames.rotation);
    let (sp, cp) = rpy.y.sin_cos();
    let (sy, cy) = rpy.z.sin_cos();
    let asp = sp.abs();
    let euler_condition = ((1.0 + asp) / (1.0 - asp)).sqrt();

    let n = chain.dof();
    let mut m = DMatrix::zeros(POSE_DIM, n);
    for i in 0..n {
        let z = frames.axes[i];
        let lin = z.cross(&(frames.position - frames.origins[i]));
        // Rotate into the yaw-aligned frame, then invert the pitch/roll block.
        let wx = cy * z.x + sy * z.y;
        let wy = -sy * z.x + cy * z.y;
        let roll_rate = wx / cp;
        m[(0, i)] = lin.x;
        m[(1, i)] = lin.y;
        m[(2, i)] = lin.z;
        m[(3, i)] = roll_rate;
        m[(4, i)] = wy;
        m[(5, i)] = z.z + sp * roll_rate;
    }
    Ok(Jacobian {
        matrix: m,
        euler_condition,
    })
}

/// Euler update of the differential-drive base.
pub fn base_step(state: BaseState, v: f64, eta: f64, tau: f64) -> BaseState {
    let (s, c) = state.phi.sin_cos();
    BaseState {
        x: state.x + tau * v * c,
        y: state.y + tau * v * s,
        phi: state.phi + tau * eta,
    }
}

/// `B(theta) = tau * [ (cos phi, sin phi, 0, 0, 0, 0)^T | J(theta) ]`.
///
/// Returns the matrix together with the Jacobian's conditioning flag.
pub fn whole_body_input_matrix(
    chain: &KinematicChain,
    theta: &JointConfig,
    tau: f64,
) -> Result<(InputMatrix, bool)> {
    if theta.len() != WHOLE_BODY_JOINTS {
        return Err(Error::Dimension {
            expected: WHOLE_BODY_JOINTS,
            got: theta.len(),
        });
    }
    if !(tau > 0.0) {
        return Err(Error::config("tau", "time step must be positive"));
    }
    let jac = jacobian(chain, theta)?;
    Ok((assemble_input_matrix(&jac.matrix, theta.heading(), tau), jac.ill_conditioned()))
}

pub(crate) fn assemble_input_matrix(jac: &DMatrix<f64>, phi: f64, tau: f64) -> InputMatrix {
    let mut b = SMatrix::<f64, POSE_DIM, INPUT_DIM>::zeros();
    let (s, c) = phi.sin_cos();
    b[(0, 0)] = tau * c;
    b[(1, 0)] = tau * s;
    for j in 0..WHOLE_BODY_JOINTS {
        for i in 0..POSE_DIM {
            b[(i, j + 1)] = tau * jac[(i, j)];
        }
    }
    InputMatrix(b)
}

/// Inertial end-effector pose: arm pose plus the base's planar position.
pub fn whole_body_pose(
    chain: &KinematicChain,
    base: &BaseState,
    theta: &JointConfig,
) -> Result<EePose> {
    check_len(chain, theta)?;
    if (base.phi - theta.heading()).abs() > 1e-9 {
        return Err(Error::HeadingMismatch {
            base_phi: base.phi,
            joint_phi: theta.heading(),
        });
    }
    let mut pose = forward_kinematics(chain, theta)?;
    pose.position.x += base.x;
    pose.position.y += base.y;
    Ok(pose)
}
