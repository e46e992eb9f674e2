//! Virtual leader, quasi-average rotation and the synchronization law that
//! couples them.
//!
//! The human steers the leader `R_l`; the network follows through the filtered
//! command `ω̃_h^s = k_s R̄ sk(R̄ᵀR_l)∨`, which rotates the quasi-average `R̄`
//! (and with it every body) in the spatial frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::so3::{e3, rotation_between, sk_vee, step_rotation, step_rotation_spatial, Rotation, UnitVector3, Vector3};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LeaderState {
    pub rotation: Rotation,
}

impl LeaderState {
    pub fn new(rotation: Rotation) -> Self {
        LeaderState { rotation }
    }

    /// `d_l = R_l e_3`.
    pub fn heading(&self) -> Vector3 {
        self.rotation.z_axis()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuasiAverageState {
    pub rotation: Rotation,
}

impl QuasiAverageState {
    pub fn new(rotation: Rotation) -> Self {
        QuasiAverageState { rotation }
    }

    pub fn heading(&self) -> Vector3 {
        self.rotation.z_axis()
    }
}

/// Constant over a trial.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceState {
    pub rotation: Rotation,
}

impl ReferenceState {
    pub fn new(rotation: Rotation) -> Self {
        ReferenceState { rotation }
    }

    /// Reference whose z-axis is `d_r`, yaw fixed by [`align_z_axis`].
    pub fn from_heading(d_r: &UnitVector3) -> Self {
        ReferenceState {
            rotation: align_z_axis(d_r),
        }
    }

    /// `d_r = R_r e_3`.
    pub fn heading(&self) -> Vector3 {
        self.rotation.z_axis()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncGains {
    pub k_s: f64,
}

impl SyncGains {
    pub fn new(k_s: f64) -> Result<Self> {
        if !(k_s > 0.0 && k_s.is_finite()) {
            return Err(Error::InvalidArgument(format!("k_s must be positive, got {k_s}")));
        }
        Ok(SyncGains { k_s })
    }
}

/// Minimal-geodesic rotation from the identity whose z-axis is `target`.
///
/// For `target ≈ −e_3` the result is a rotation of π about `e_1`.
pub fn align_z_axis(target: &UnitVector3) -> Rotation {
    rotation_between(&e3(), target)
}

/// Rotates `base` along the shortest arc that carries its z-axis onto
/// `target`; equals [`align_z_axis`] when `base` is the identity.
pub fn align_z_axis_from(base: &Rotation, target: &UnitVector3) -> Rotation {
    Rotation::renormalized(*(rotation_between(&base.z_axis(), target) * *base).matrix())
}

/// `ω̃_h^s = k_s R̄ sk(R̄ᵀR_l)∨`.
pub fn human_filter_command(qa: &QuasiAverageState, leader: &LeaderState, gains: &SyncGains) -> Vector3 {
    let rel = qa.rotation.transpose() * leader.rotation;
    qa.rotation * (sk_vee(rel.matrix()) * gains.k_s)
}

/// Leader body velocity `ω_l = k_s sk(R_lᵀR̄)∨ + R_lᵀ ω_h^s`.
pub fn leader_velocity(
    leader: &LeaderState,
    qa: &QuasiAverageState,
    omega_h_spatial: &Vector3,
    gains: &SyncGains,
) -> Vector3 {
    let rel = leader.rotation.transpose() * qa.rotation;
    sk_vee(rel.matrix()) * gains.k_s + leader.rotation.matrix().transpose() * omega_h_spatial
}

/// One explicit step of the coupled leader / quasi-average system.
///
/// Both velocities are evaluated on the same snapshot; `R̄` advances in the
/// spatial frame and `R_l` in its body frame. Returns `ω̃_h^s` for the network.
pub fn step_navigation(
    qa: &QuasiAverageState,
    leader: &LeaderState,
    gains: &SyncGains,
    omega_h_spatial: &Vector3,
    dt: f64,
) -> (QuasiAverageState, LeaderState, Vector3) {
    let omega_tilde = human_filter_command(qa, leader, gains);
    let omega_l = leader_velocity(leader, qa, omega_h_spatial, gains);
    (
        QuasiAverageState::new(step_rotation_spatial(&qa.rotation, &omega_tilde, dt)),
        LeaderState::new(step_rotation(&leader.rotation, &omega_l, dt)),
        omega_tilde,
    )
}

/// `(R_rl, R̄_r) = (R_rᵀR_l, R_rᵀR̄)`.
pub fn relative_rotations(
    qa: &QuasiAverageState,
    leader: &LeaderState,
    reference: &ReferenceState,
) -> (Rotation, Rotation) {
    let rt = reference.rotation.transpose();
    (
        Rotation::renormalized(*(rt * leader.rotation).matrix()),
        Rotation::renormalized(*(rt * qa.rotation).matrix()),
    )
}
