//! Rotation-matrix math on SO(3) and its Lie algebra so(3).
//!
//! Rotations are stored as plain 3×3 matrices (no quaternions). Everything in
//! this module is a pure function of its inputs.

use std::f64::consts::PI;
use std::fmt;
use std::ops::Mul;

use nalgebra::Unit;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vector3 = nalgebra::Vector3<f64>;
pub type Matrix3 = nalgebra::Matrix3<f64>;
pub type UnitVector3 = Unit<Vector3>;

/// Tolerance used when validating orthonormality and determinant.
pub const ROTATION_TOL: f64 = 1e-9;
/// Below this angle exp/log switch to Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-8;
/// Within this distance of π the logarithm extracts the axis from sym(R).
const NEAR_PI: f64 = 1e-3;

pub fn e1() -> Vector3 {
    Vector3::x()
}

pub fn e2() -> Vector3 {
    Vector3::y()
}

pub fn e3() -> Vector3 {
    Vector3::z()
}

/// Element of SO(3).
#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 3]; 3]", into = "[[f64; 3]; 3]")]
pub struct Rotation(Matrix3);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Validates `m` against `mᵀm = I` and `det m = 1` within [`ROTATION_TOL`].
    pub fn new(m: Matrix3) -> Result<Self> {
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::NotRotation("non-finite entry".into()));
        }
        let ortho = (m.transpose() * m - Matrix3::identity()).norm();
        if ortho > ROTATION_TOL {
            return Err(Error::NotRotation(format!("‖mᵀm − I‖_F = {ortho:e}")));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::NotRotation(format!("det = {det}")));
        }
        Ok(Rotation(m))
    }

    /// Wraps `m` without checking. Callers must guarantee `m` is a rotation.
    pub fn from_matrix_unchecked(m: Matrix3) -> Self {
        Rotation(m)
    }

    /// Projects a nearly orthonormal matrix back onto SO(3) with one Newton
    /// step of the polar decomposition, `R(3I − RᵀR)/2`.
    pub fn renormalized(m: Matrix3) -> Self {
        Rotation(m * (Matrix3::identity() * 3.0 - m.transpose() * m) * 0.5)
    }

    /// Row-major entries.
    pub fn from_row_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 9 {
            return Err(Error::Format(format!("expected 9 entries, got {}", v.len())));
        }
        Self::new(Matrix3::from_row_slice(v))
    }

    pub fn to_row_array(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn matrix(&self) -> &Matrix3 {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    /// `R e_3`, the body z-axis in the world frame.
    pub fn z_axis(&self) -> Vector3 {
        self.0.column(2).into_owned()
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// ‖RᵀR − I‖_F.
    pub fn orthonormality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).norm()
    }

    /// Frobenius distance to another rotation.
    pub fn distance(&self, other: &Rotation) -> f64 {
        (self.0 - other.0).norm()
    }
}

impl fmt::Debug for Rotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Rotation({:?})", self.to_row_array())
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<&Rotation> for &Rotation {
    type Output = Rotation;
    fn mul(self, rhs: &Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<Vector3> for &Rotation {
    type Output = Vector3;
    fn mul(self, rhs: Vector3) -> Vector3 {
        self.0 * rhs
    }
}

impl Mul<Vector3> for Rotation {
    type Output = Vector3;
    fn mul(self, rhs: Vector3) -> Vector3 {
        self.0 * rhs
    }
}

impl TryFrom<[[f64; 3]; 3]> for Rotation {
    type Error = Error;
    fn try_from(rows: [[f64; 3]; 3]) -> Result<Self> {
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Rotation::from_row_slice(&flat)
    }
}

impl From<Rotation> for [[f64; 3]; 3] {
    fn from(r: Rotation) -> Self {
        let a = r.to_row_array();
        [[a[0], a[1], a[2]], [a[3], a[4], a[5]], [a[6], a[7], a[8]]]
    }
}

/// Rotation axis and angle. The angle lies in `[0, π]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisAngle {
    pub axis: UnitVector3,
    pub angle: f64,
}

impl AxisAngle {
    pub fn to_rotation(&self) -> Rotation {
        exp_so3(&(self.axis.into_inner() * self.angle))
    }
}

/// `hat(v) w = v × w`.
pub fn hat(v: &Vector3) -> Matrix3 {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`]. Rejects inputs with ‖m + mᵀ‖_F > 1e-6.
pub fn vee(m: &Matrix3) -> Result<Vector3> {
    let asym = (m + m.transpose()).norm();
    if asym > 1e-6 {
        return Err(Error::NotSkewSymmetric(asym));
    }
    Ok(vee_unchecked(m))
}

/// Reads the axial vector of the skew part without validating.
pub(crate) fn vee_unchecked(m: &Matrix3) -> Vector3 {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Skew-symmetric part `(m − mᵀ)/2`.
pub fn sk(m: &Matrix3) -> Matrix3 {
    (m - m.transpose()) * 0.5
}

/// Symmetric part `(m + mᵀ)/2`.
pub fn sym(m: &Matrix3) -> Matrix3 {
    (m + m.transpose()) * 0.5
}

/// `sk(m)∨`, skipping the round trip through a matrix.
pub fn sk_vee(m: &Matrix3) -> Vector3 {
    vee_unchecked(m)
}

/// Rodrigues' formula `I + sinθ/θ v̂ + (1 − cosθ)/θ² v̂²`.
pub fn exp_so3(v: &Vector3) -> Rotation {
    let theta2 = v.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let w = hat(v);
    Rotation(Matrix3::identity() + w * a + w * w * b)
}

/// Principal logarithm, returned as a rotation vector of norm in `[0, π]`.
///
/// At θ = π the axis sign is ambiguous; the first nonzero component is made
/// positive.
pub fn log_so3(r: &Rotation) -> Vector3 {
    let m = r.matrix();
    let s_vec = vee_unchecked(m);
    let s = s_vec.norm();
    let c = 0.5 * (m.trace() - 1.0);
    let theta = s.atan2(c);
    if theta < SMALL_ANGLE {
        // θ/sinθ ≈ 1 + θ²/6
        return s_vec * (1.0 + theta * theta / 6.0);
    }
    if theta < PI - NEAR_PI {
        return s_vec * (theta / s);
    }
    // sym(R) = cosθ I + (1 − cosθ) ξξᵀ
    let outer = (sym(m) - Matrix3::identity() * c) / (1.0 - c);
    let k = (0..3)
        .max_by(|&i, &j| outer[(i, i)].total_cmp(&outer[(j, j)]))
        .unwrap_or(0);
    let mut axis: Vector3 = outer.column(k).into_owned();
    axis /= axis.norm();
    if s_vec.dot(&axis) < 0.0 {
        axis = -axis;
    }
    if s < 1e-12 {
        axis = canonical_sign(axis);
    }
    axis * theta
}

fn canonical_sign(v: Vector3) -> Vector3 {
    match v.iter().find(|x| x.abs() > 1e-9) {
        Some(&first) if first < 0.0 => -v,
        _ => v,
    }
}

/// Axis and angle of `r`; the identity maps to `(e_3, 0)`.
pub fn axis_angle(r: &Rotation) -> AxisAngle {
    let v = log_so3(r);
    let angle = v.norm();
    if angle < 1e-12 {
        return AxisAngle {
            axis: Unit::new_unchecked(e3()),
            angle,
        };
    }
    AxisAngle {
        axis: Unit::new_normalize(v),
        angle,
    }
}

/// Rotation energy `½ tr(I − R)`, in `[0, 2]`.
pub fn phi(r: &Rotation) -> f64 {
    0.5 * (3.0 - r.trace())
}

/// The same energy through `¼‖I − R‖_F²`.
pub fn phi_frobenius(r: &Rotation) -> f64 {
    0.25 * (Matrix3::identity() - r.matrix()).norm_squared()
}

/// Smallest eigenvalue of a symmetric 3×3 matrix.
///
/// Trigonometric closed form for the characteristic cubic, followed by one
/// Rayleigh-quotient polish so repeated eigenvalues keep full precision.
pub fn lambda_min_sym3(m: &Matrix3) -> Result<f64> {
    let asym = (m - m.transpose()).norm();
    if asym > 1e-9 * m.norm().max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }
    let a = sym(m);
    let p1 = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
    let q = a.trace() / 3.0;
    let p2 = (a[(0, 0)] - q).powi(2) + (a[(1, 1)] - q).powi(2) + (a[(2, 2)] - q).powi(2) + 2.0 * p1;
    if p2 == 0.0 {
        return Ok(q);
    }
    let p = (p2 / 6.0).sqrt();
    let b = (a - Matrix3::identity() * q) / p;
    let r = (0.5 * b.determinant()).clamp(-1.0, 1.0);
    let angle = r.acos() / 3.0;
    let estimate = q + 2.0 * p * (angle + 2.0 * PI / 3.0).cos();

    match min_eigenvector(&a, estimate) {
        Some(v) => Ok(v.dot(&(a * v)) / v.norm_squared()),
        None => Ok(estimate),
    }
}

/// Null vector of `a − λI`, taken from row cross products when the shifted
/// matrix has rank two, or orthogonal to its dominant row when rank one.
fn min_eigenvector(a: &Matrix3, lambda: f64) -> Option<Vector3> {
    let shifted = a - Matrix3::identity() * lambda;
    let rows: [Vector3; 3] = [
        shifted.row(0).transpose(),
        shifted.row(1).transpose(),
        shifted.row(2).transpose(),
    ];
    let scale = shifted.norm();
    if scale == 0.0 {
        return None;
    }
    let crosses = [
        rows[0].cross(&rows[1]),
        rows[0].cross(&rows[2]),
        rows[1].cross(&rows[2]),
    ];
    let best = crosses
        .iter()
        .max_by(|x, y| x.norm_squared().total_cmp(&y.norm_squared()))?;
    if best.norm() > 1e-6 * scale * scale {
        return Some(*best);
    }
    let dominant = rows
        .iter()
        .max_by(|x, y| x.norm_squared().total_cmp(&y.norm_squared()))?;
    let k = dominant.iamin();
    let mut basis = Vector3::zeros();
    basis[k] = 1.0;
    let v = dominant.cross(&basis);
    (v.norm() > 0.0).then_some(v)
}

/// One-step integrator choice for rotation ODEs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    /// `R ← R exp(ω dt)`; exact for piecewise-constant body velocity.
    #[default]
    LieEuler,
    /// Fourth-order Runge–Kutta–Munthe-Kaas.
    Rkmk4,
}

/// Lie–Euler body-frame step `r exp(ω dt)`, re-projected onto SO(3).
pub fn step_rotation(r: &Rotation, omega_body: &Vector3, dt: f64) -> Rotation {
    Rotation::renormalized(r.0 * exp_so3(&(omega_body * dt)).0)
}

/// Spatial-frame step `exp(ω dt) r`, re-projected onto SO(3).
pub fn step_rotation_spatial(r: &Rotation, omega_spatial: &Vector3, dt: f64) -> Rotation {
    Rotation::renormalized(exp_so3(&(omega_spatial * dt)).0 * r.0)
}

/// Inverse of the body-frame dexp map, truncated after the double commutator
/// (sufficient for fourth order).
fn dexp_inv_body(u: &Vector3, xi: &Vector3) -> Vector3 {
    let c = u.cross(xi);
    xi + c * 0.5 + u.cross(&c) / 12.0
}

impl Integrator {
    /// Advances a tuple of rotations `X_k` obeying `Ẋ_k = X_k ξ_k(X)^`, where
    /// `field` returns the body velocities `ξ_k` for a given tuple.
    pub fn step<F>(self, states: &[Rotation], dt: f64, mut field: F) -> Result<Vec<Rotation>>
    where
        F: FnMut(&[Rotation]) -> Result<Vec<Vector3>>,
    {
        match self {
            Integrator::LieEuler => {
                let xi = field(states)?;
                Ok(states
                    .iter()
                    .zip(&xi)
                    .map(|(r, w)| step_rotation(r, w, dt))
                    .collect())
            }
            Integrator::Rkmk4 => {
                let advance = |u: &[Vector3]| -> Vec<Rotation> {
                    states
                        .iter()
                        .zip(u)
                        .map(|(r, ui)| Rotation(r.0 * exp_so3(ui).0))
                        .collect()
                };
                let mut stage = |u: &[Vector3]| -> Result<Vec<Vector3>> {
                    Ok(field(&advance(u))?
                        .iter()
                        .zip(u)
                        .map(|(w, ui)| dexp_inv_body(ui, w) * dt)
                        .collect())
                };
                let k1: Vec<Vector3> = stage(&vec![Vector3::zeros(); states.len()])?;
                let k2 = stage(&k1.iter().map(|k| k * 0.5).collect::<Vec<_>>())?;
                let k3 = stage(&k2.iter().map(|k| k * 0.5).collect::<Vec<_>>())?;
                let k4 = stage(&k3)?;
                Ok(states
                    .iter()
                    .enumerate()
                    .map(|(i, r)| {
                        let u = (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) / 6.0;
                        Rotation::renormalized(r.0 * exp_so3(&u).0)
                    })
                    .collect())
            }
        }
    }
}

/// Minimal-geodesic rotation `Q` with `Q a = b` for unit vectors `a`, `b`.
/// Antipodal pairs rotate by π about an axis orthogonal to `a`, preferring
/// `e_1` when it qualifies.
pub fn rotation_between(a: &Vector3, b: &Vector3) -> Rotation {
    let c = a.dot(b).clamp(-1.0, 1.0);
    if c < -1.0 + 1e-9 {
        let mut axis = e1() - a * a.dot(&e1());
        if axis.norm() < 1e-6 {
            axis = e2() - a * a.dot(&e2());
        }
        return exp_so3(&(axis.normalize() * PI));
    }
    let cross = a.cross(b);
    let s = cross.norm();
    if s < 1e-15 {
        return Rotation::identity();
    }
    exp_so3(&(cross / s * s.atan2(c)))
}
