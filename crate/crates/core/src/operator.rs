//! Human-operator models.
//!
//! The synthetic operator is a 2×2 LTI system from the attitude error `e` to
//! the first two body-velocity components `u_h`, with second-order diagonal
//! entries `(b₁s + b₀)/(s² + a₁s + a₀)` and constant off-diagonal gains. It is
//! simulated through its zero-order-hold discretization at the loop rate.

use std::path::Path;

use nalgebra::{Matrix2, Matrix4, Matrix4x2, Matrix2x4, SMatrix, Vector2, Vector4};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::navigation::{LeaderState, ReferenceState};
use crate::so3::{log_so3, sk_vee, Rotation, Vector3};

/// Saturation limit on ‖ω_h^s‖ in rad/s.
pub const OMEGA_MAX: f64 = 1.0;
/// Default gain of the controller-attitude command map.
pub const K_OMEGA: f64 = 0.8;
/// Loop rate in Hz.
pub const DEFAULT_RATE_HZ: f64 = 120.0;

/// One diagonal entry `(b₁s + b₀)/(s² + a₁s + a₀) + direct`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagonalEntry {
    /// `[b₁, b₀]`
    pub num: [f64; 2],
    /// `[a₁, a₀]`
    pub den: [f64; 2],
    /// Static feedthrough; zero for the identified structure.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub direct: f64,
}

fn is_zero(x: &f64) -> bool {
    *x == 0.0
}

impl DiagonalEntry {
    pub fn new(num: [f64; 2], den: [f64; 2]) -> Self {
        DiagonalEntry { num, den, direct: 0.0 }
    }

    pub fn static_gain(k: f64) -> Self {
        DiagonalEntry {
            num: [0.0, 0.0],
            den: [1.0, 1.0],
            direct: k,
        }
    }

    pub fn is_hurwitz(&self) -> bool {
        self.den[0] > 0.0 && self.den[1] > 0.0
    }

    pub fn eval(&self, s: Complex64) -> Result<Complex64> {
        let den = s * s + s * self.den[0] + self.den[1];
        if den.norm() < 1e-12 {
            return Err(Error::PoleOnAxis(s.im));
        }
        Ok((s * self.num[0] + self.num[1]) / den + self.direct)
    }

    pub fn dc_gain(&self) -> f64 {
        self.num[1] / self.den[1] + self.direct
    }
}

/// Structured 2×2 operator transfer matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferMatrix2x2 {
    pub diag: [DiagonalEntry; 2],
    /// `[h₁₂, h₂₁]`
    pub offdiag: [f64; 2],
}

pub type ComplexMatrix2 = Matrix2<Complex64>;

impl TransferMatrix2x2 {
    pub fn diagonal(entry: DiagonalEntry) -> Self {
        TransferMatrix2x2 {
            diag: [entry, entry],
            offdiag: [0.0, 0.0],
        }
    }

    pub fn is_hurwitz(&self) -> bool {
        self.diag.iter().all(DiagonalEntry::is_hurwitz)
    }

    /// `H(s)`.
    pub fn eval(&self, s: Complex64) -> Result<ComplexMatrix2> {
        Ok(Matrix2::new(
            self.diag[0].eval(s)?,
            Complex64::from(self.offdiag[0]),
            Complex64::from(self.offdiag[1]),
            self.diag[1].eval(s)?,
        ))
    }

    /// `H(jω)`.
    pub fn frequency_response(&self, omega: f64) -> Result<ComplexMatrix2> {
        self.eval(Complex64::new(0.0, omega))
    }

    pub fn dc_gain(&self) -> Matrix2<f64> {
        Matrix2::new(self.diag[0].dc_gain(), self.offdiag[0], self.offdiag[1], self.diag[1].dc_gain())
    }

    /// An LTI operator sends zero output identically only for zero error
    /// when its DC gain is nonsingular.
    pub fn has_nonsingular_dc_gain(&self) -> bool {
        self.dc_gain().determinant().abs() > 1e-12
    }

    /// Controllable canonical realization, one 2-state block per diagonal
    /// entry.
    pub fn realization(&self) -> StateSpace {
        let mut a = Matrix4::zeros();
        let mut b = Matrix4x2::zeros();
        let mut c = Matrix2x4::zeros();
        for (i, entry) in self.diag.iter().enumerate() {
            let k = 2 * i;
            a[(k, k + 1)] = 1.0;
            a[(k + 1, k)] = -entry.den[1];
            a[(k + 1, k + 1)] = -entry.den[0];
            b[(k + 1, i)] = 1.0;
            c[(i, k)] = entry.num[1];
            c[(i, k + 1)] = entry.num[0];
        }
        let d = Matrix2::new(self.diag[0].direct, self.offdiag[0], self.offdiag[1], self.diag[1].direct);
        StateSpace { a, b, c, d }
    }
}

/// Continuous-time realization `ẋ = Ax + Be`, `u = Cx + De`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateSpace {
    pub a: Matrix4<f64>,
    pub b: Matrix4x2<f64>,
    pub c: Matrix2x4<f64>,
    pub d: Matrix2<f64>,
}

impl StateSpace {
    /// `C(sI − A)⁻¹B + D`.
    pub fn eval(&self, s: Complex64) -> Result<ComplexMatrix2> {
        let a = self.a.map(Complex64::from);
        let shifted = Matrix4::<Complex64>::identity() * s - a;
        let lu = shifted.lu();
        let x = lu
            .solve(&self.b.map(Complex64::from))
            .ok_or(Error::PoleOnAxis(s.im))?;
        Ok(self.c.map(Complex64::from) * x + self.d.map(Complex64::from))
    }

    /// Zero-order-hold discretization through the exponential of the
    /// augmented matrix `[[A, B], [0, 0]] dt`.
    pub fn discretize(&self, dt: f64) -> (Matrix4<f64>, Matrix4x2<f64>) {
        let mut aug = SMatrix::<f64, 6, 6>::zeros();
        aug.fixed_view_mut::<4, 4>(0, 0).copy_from(&(self.a * dt));
        aug.fixed_view_mut::<4, 2>(0, 4).copy_from(&(self.b * dt));
        let e = aug.exp();
        (e.fixed_view::<4, 4>(0, 0).into_owned(), e.fixed_view::<4, 2>(0, 4).into_owned())
    }
}

/// On-disk operator model: `{rate_hz, diag: [{num, den}×2], offdiag}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorModelFile {
    pub rate_hz: f64,
    pub diag: [DiagonalEntry; 2],
    pub offdiag: [f64; 2],
}

impl OperatorModelFile {
    pub fn new(structure: TransferMatrix2x2, rate_hz: f64) -> Self {
        OperatorModelFile {
            rate_hz,
            diag: structure.diag,
            offdiag: structure.offdiag,
        }
    }

    pub fn structure(&self) -> TransferMatrix2x2 {
        TransferMatrix2x2 {
            diag: self.diag,
            offdiag: self.offdiag,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Discretized synthetic operator with its internal state.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorModel {
    pub structure: TransferMatrix2x2,
    pub realization: StateSpace,
    pub rate_hz: f64,
    pub a_d: Matrix4<f64>,
    pub b_d: Matrix4x2<f64>,
    pub state: Vector4<f64>,
}

impl OperatorModel {
    pub fn new(structure: TransferMatrix2x2, rate_hz: f64) -> Result<Self> {
        if !structure.is_hurwitz() {
            return Err(Error::UnstableModel(format!("{:?}", structure.diag)));
        }
        if !(rate_hz > 0.0 && rate_hz.is_finite()) {
            return Err(Error::InvalidArgument(format!("rate must be positive, got {rate_hz}")));
        }
        let realization = structure.realization();
        let (a_d, b_d) = realization.discretize(1.0 / rate_hz);
        Ok(OperatorModel {
            structure,
            realization,
            rate_hz,
            a_d,
            b_d,
            state: Vector4::zeros(),
        })
    }

    pub fn from_file(file: &OperatorModelFile) -> Result<Self> {
        Self::new(file.structure(), file.rate_hz)
    }

    pub fn reset(&mut self) {
        self.state = Vector4::zeros();
    }

    /// Output for the current state, then one ZOH state update.
    pub fn advance(&mut self, e: &Vector2<f64>) -> Vector2<f64> {
        let u = self.realization.c * self.state + self.realization.d * e;
        self.state = self.a_d * self.state + self.b_d * e;
        u
    }

    fn check_rate(&self, dt: f64) -> Result<()> {
        if (dt * self.rate_hz - 1.0).abs() > 1e-9 {
            return Err(Error::RateMismatch {
                model_hz: self.rate_hz,
                step_hz: 1.0 / dt,
            });
        }
        Ok(())
    }
}

/// Signals exchanged between the operator and the loop at one tick.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatorSignals {
    /// First two components of `sk(R_lᵀR_r)∨`.
    pub error_e: Vector2<f64>,
    /// First two components of `ω_h^b` after saturation.
    pub u_h: Vector2<f64>,
    pub omega_h_body: Vector3,
    pub omega_h_spatial: Vector3,
}

/// `e = [sk(R_lᵀR_r)∨]₁,₂`.
pub fn compute_error(leader: &LeaderState, reference: &ReferenceState) -> Vector2<f64> {
    let v = error_vector(&leader.rotation, &reference.rotation);
    Vector2::new(v.x, v.y)
}

/// Full `sk(R_lᵀR_r)∨`.
pub fn error_vector(leader: &Rotation, reference: &Rotation) -> Vector3 {
    sk_vee((leader.transpose() * *reference).matrix())
}

/// Clamps ‖v‖ to `max`, preserving direction.
///
/// Norms within a relative 1e-12 of `max` pass unchanged, so that clamping
/// an already clamped vector is the identity even after rounding.
pub fn saturate(v: &Vector3, max: f64) -> Vector3 {
    let n = v.norm();
    if n > max * (1.0 + 1e-12) {
        v * (max / n)
    } else {
        *v
    }
}

/// Builds signals from a spatial command: saturate, then express in the
/// leader body frame.
pub fn signals_from_spatial(error_e: Vector2<f64>, omega_h_spatial: &Vector3, leader: &LeaderState) -> OperatorSignals {
    let omega_h_spatial = saturate(omega_h_spatial, OMEGA_MAX);
    let omega_h_body = leader.rotation.matrix().transpose() * omega_h_spatial;
    OperatorSignals {
        error_e,
        u_h: Vector2::new(omega_h_body.x, omega_h_body.y),
        omega_h_body,
        omega_h_spatial,
    }
}

/// Advances the synthetic operator one tick and maps its output to a
/// saturated spatial command. The third body component is always zero.
pub fn synthetic_operator_step(
    model: &mut OperatorModel,
    error_e: &Vector2<f64>,
    leader: &LeaderState,
    dt: f64,
) -> Result<OperatorSignals> {
    model.check_rate(dt)?;
    let u = model.advance(error_e);
    let body = Vector3::new(u.x, u.y, 0.0);
    let spatial = saturate(&(leader.rotation * body), OMEGA_MAX);
    let mut omega_h_body = leader.rotation.matrix().transpose() * spatial;
    omega_h_body.z = 0.0;
    Ok(OperatorSignals {
        error_e: *error_e,
        u_h: Vector2::new(omega_h_body.x, omega_h_body.y),
        omega_h_body,
        omega_h_spatial: spatial,
    })
}

/// Built-in strictly passive operator: both diagonal entries
/// `(2s + 3)/(s² + 3s + 2)`, no cross-coupling.
///
/// Re H(jω) = 2(3 + 1.5ω²)/|(jω)² + 3jω + 2|² > 0 for every ω.
pub fn passive_reference_model() -> TransferMatrix2x2 {
    TransferMatrix2x2::diagonal(DiagonalEntry::new([2.0, 3.0], [3.0, 2.0]))
}

/// Controller-attitude command map `k_ω log(R_t R_0ᵀ)∨`, saturated at
/// [`OMEGA_MAX`].
pub fn teleop_command_map(r_t: &Rotation, r_0: &Rotation, k_omega: f64) -> Vector3 {
    saturate(&(log_so3(&(*r_t * r_0.transpose())) * k_omega), OMEGA_MAX)
}

/// Inputs visible to an operator at one tick.
#[derive(Clone, Copy, Debug)]
pub struct OperatorContext<'a> {
    pub tick: u64,
    pub t: f64,
    pub dt: f64,
    pub leader: &'a LeaderState,
    pub reference: &'a ReferenceState,
}

/// Source of the human command `ω_h^s`.
pub trait Operator: Send {
    fn command(&mut self, ctx: &OperatorContext<'_>) -> Result<OperatorSignals>;

    /// Called when the reference changes (trial boundary).
    fn on_new_trial(&mut self) {}
}

/// Synthetic LTI operator driven by the leader-relative error.
#[derive(Clone, Debug)]
pub struct SyntheticOperator {
    pub model: OperatorModel,
}

impl SyntheticOperator {
    pub fn new(model: OperatorModel) -> Self {
        SyntheticOperator { model }
    }
}

impl Operator for SyntheticOperator {
    fn command(&mut self, ctx: &OperatorContext<'_>) -> Result<OperatorSignals> {
        let e = compute_error(ctx.leader, ctx.reference);
        synthetic_operator_step(&mut self.model, &e, ctx.leader, ctx.dt)
    }
}

/// One entry of a scripted schedule, active on `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduledCommand {
    pub start: f64,
    pub end: f64,
    pub omega_h_s: [f64; 3],
}

/// Deterministic playback of spatial commands; zero outside every interval.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScriptedOperator {
    schedule: Vec<ScheduledCommand>,
}

const SCHEDULE_EPS: f64 = 1e-9;

impl ScriptedOperator {
    pub fn new(mut schedule: Vec<ScheduledCommand>) -> Result<Self> {
        schedule.sort_by(|a, b| a.start.total_cmp(&b.start));
        for c in &schedule {
            if !(c.end > c.start) || c.omega_h_s.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidArgument(format!("bad scheduled command {c:?}")));
            }
        }
        for pair in schedule.windows(2) {
            if pair[1].start < pair[0].end - SCHEDULE_EPS {
                return Err(Error::InvalidArgument(format!(
                    "scheduled intervals overlap at t = {}",
                    pair[1].start
                )));
            }
        }
        Ok(ScriptedOperator { schedule })
    }

    /// One command per tick `k`, active on `[k dt, (k + 1) dt)`.
    pub fn from_ticks(commands: &[Vector3], dt: f64) -> Self {
        let schedule = commands
            .iter()
            .enumerate()
            .map(|(k, w)| ScheduledCommand {
                start: k as f64 * dt,
                end: (k + 1) as f64 * dt,
                omega_h_s: [w.x, w.y, w.z],
            })
            .collect();
        ScriptedOperator { schedule }
    }

    pub fn schedule(&self) -> &[ScheduledCommand] {
        &self.schedule
    }

    pub fn command_at(&self, t: f64) -> Vector3 {
        let idx = self.schedule.partition_point(|c| c.start <= t + SCHEDULE_EPS);
        match idx.checked_sub(1).map(|i| &self.schedule[i]) {
            Some(c) if t < c.end - SCHEDULE_EPS => Vector3::from(c.omega_h_s),
            _ => Vector3::zeros(),
        }
    }
}

impl Operator for ScriptedOperator {
    fn command(&mut self, ctx: &OperatorContext<'_>) -> Result<OperatorSignals> {
        let e = compute_error(ctx.leader, ctx.reference);
        Ok(signals_from_spatial(e, &self.command_at(ctx.t), ctx.leader))
    }
}

/// Operator that never commands anything.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroOperator;

impl Operator for ZeroOperator {
    fn command(&mut self, ctx: &OperatorContext<'_>) -> Result<OperatorSignals> {
        let e = compute_error(ctx.leader, ctx.reference);
        Ok(signals_from_spatial(e, &Vector3::zeros(), ctx.leader))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::exp_so3;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const DT: f64 = 1.0 / 120.0;

    fn leader(r: Rotation) -> LeaderState {
        LeaderState::new(r)
    }

    #[test]
    fn error_examples() {
        let r = exp_so3(&Vector3::new(0.3, 0.2, -0.1));
        assert_eq!(compute_error(&leader(r), &ReferenceState::new(r)), Vector2::zeros());
        let theta = 0.9;
        let e = compute_error(
            &leader(Rotation::identity()),
            &ReferenceState::new(exp_so3(&Vector3::new(theta, 0.0, 0.0))),
        );
        assert_abs_diff_eq!(e, Vector2::new(theta.sin(), 0.0), epsilon = 1e-15);
    }

    #[test]
    fn static_gain_operator() {
        let structure = TransferMatrix2x2::diagonal(DiagonalEntry::static_gain(0.5));
        let mut model = OperatorModel::new(structure, 120.0).unwrap();
        let s = synthetic_operator_step(&mut model, &Vector2::new(0.2, -0.4), &leader(Rotation::identity()), DT)
            .unwrap();
        assert_abs_diff_eq!(s.omega_h_body, Vector3::new(0.1, -0.2, 0.0), epsilon = 1e-15);

        let mut model = OperatorModel::new(passive_reference_model(), 120.0).unwrap();
        let s = synthetic_operator_step(&mut model, &Vector2::zeros(), &leader(Rotation::identity()), DT).unwrap();
        assert_eq!(s.omega_h_spatial, Vector3::zeros());
    }

    #[test]
    fn rate_mismatch_is_rejected() {
        let mut model = OperatorModel::new(passive_reference_model(), 120.0).unwrap();
        let err = synthetic_operator_step(&mut model, &Vector2::zeros(), &leader(Rotation::identity()), 0.01);
        assert!(matches!(err, Err(Error::RateMismatch { .. })));
    }

    #[test]
    fn unstable_structure_is_rejected() {
        let bad = TransferMatrix2x2::diagonal(DiagonalEntry::new([1.0, 1.0], [-0.5, 2.0]));
        assert!(matches!(OperatorModel::new(bad, 120.0), Err(Error::UnstableModel(_))));
    }

    /// Step response of (b₁s + b₀)/(s² + a₁s + a₀) by partial fractions.
    fn analytic_step(entry: &DiagonalEntry, t: f64) -> f64 {
        let [b1, b0] = entry.num;
        let [a1, a0] = entry.den;
        let disc = Complex64::from(a1 * a1 - 4.0 * a0).sqrt();
        let p1 = (-a1 + disc) / 2.0;
        let p2 = (-a1 - disc) / 2.0;
        let term = |p: Complex64, q: Complex64| (p * b1 + b0) / (p * (p - q)) * (p * t).exp();
        (b0 / a0) + (term(p1, p2) + term(p2, p1)).re
    }

    #[test]
    fn step_response_matches_analytic_solution() {
        let entries = [
            DiagonalEntry::new([2.0, 3.0], [3.0, 2.0]),
            DiagonalEntry::new([-0.7, 1.4], [0.8, 4.0]),
        ];
        for entry in entries {
            let structure = TransferMatrix2x2 {
                diag: [entry, DiagonalEntry::new([1.0, 1.0], [2.0, 2.0])],
                offdiag: [0.0, 0.0],
            };
            let mut model = OperatorModel::new(structure, 120.0).unwrap();
            for k in 0..=600 {
                let u = model.advance(&Vector2::new(1.0, 0.0));
                let expected = if k == 0 { 0.0 } else { analytic_step(&entry, k as f64 * DT) };
                assert!((u.x - expected).abs() < 1e-6, "k = {k}: {} vs {expected}", u.x);
            }
        }
    }

    #[test]
    fn realization_matches_structure() {
        let structure = TransferMatrix2x2 {
            diag: [DiagonalEntry::new([0.4, 1.5], [1.2, 3.0]), DiagonalEntry::new([-1.0, 2.0], [4.0, 0.5])],
            offdiag: [0.2, -0.3],
        };
        let ss = structure.realization();
        for omega in [0.0, 0.01, 0.5, 2.0, 10.0, 300.0] {
            let s = Complex64::new(0.0, omega);
            let diff = structure.eval(s).unwrap() - ss.eval(s).unwrap();
            assert!(diff.iter().all(|z| z.norm() < 1e-9), "ω = {omega}");
        }
    }

    #[test]
    fn discrete_model_tracks_frequency_response() {
        let structure = TransferMatrix2x2 {
            diag: [DiagonalEntry::new([2.0, 3.0], [3.0, 2.0]), DiagonalEntry::new([1.0, 1.0], [1.0, 1.0])],
            offdiag: [0.1, 0.0],
        };
        let rate = 120.0;
        for omega in [0.2, 1.0, 4.0, 12.0] {
            let mut model = OperatorModel::new(structure, rate).unwrap();
            let settle = (40.0 * rate) as usize;
            let window = (20.0 * rate) as usize;
            let (mut ss, mut sc, mut cc, mut ys, mut yc) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for k in 0..settle + window {
                let t = k as f64 / rate;
                let y = model.advance(&Vector2::new((omega * t).sin(), 0.0)).x;
                if k >= settle {
                    let (s, c) = (omega * t).sin_cos();
                    ss += s * s;
                    sc += s * c;
                    cc += c * c;
                    ys += y * s;
                    yc += y * c;
                }
            }
            // least-squares fit y ≈ α sin + γ cos
            let det = ss * cc - sc * sc;
            let alpha = (ys * cc - yc * sc) / det;
            let gamma = (yc * ss - ys * sc) / det;
            let measured = Complex64::new(alpha, gamma);
            let truth = structure.frequency_response(omega).unwrap()[(0, 0)];
            let amp_err = (measured.norm() / truth.norm() - 1.0).abs();
            let phase_err = (measured / truth).arg().abs();
            assert!(amp_err < 0.01, "ω = {omega}: amplitude error {amp_err}");
            assert!(phase_err < 0.01 * std::f64::consts::TAU, "ω = {omega}: phase error {phase_err}");
        }
    }

    #[test]
    fn bounded_input_gives_bounded_state() {
        let structure = TransferMatrix2x2 {
            diag: [DiagonalEntry::new([2.0, 3.0], [3.0, 2.0]), DiagonalEntry::new([0.5, 1.0], [0.4, 1.0])],
            offdiag: [0.3, 0.0],
        };
        let mut model = OperatorModel::new(structure, 120.0).unwrap();
        // ‖x_k‖ ≤ Σ_j ‖A_dʲ B_d‖₂ · sup‖e‖ (triangle inequality on the convolution sum).
        let mut bound = 0.0;
        let mut power = model.b_d;
        for _ in 0..200_000 {
            let term = power.svd(false, false).singular_values.max();
            bound += term;
            if term < 1e-16 {
                break;
            }
            power = model.a_d * power;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst: f64 = 0.0;
        for _ in 0..120 * 600 {
            let e = Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let e = if e.norm() > 1.0 { e.normalize() } else { e };
            model.advance(&e);
            worst = worst.max(model.state.norm());
        }
        assert!(worst <= bound, "{worst} > {bound}");
    }

    #[test]
    fn passive_reference_has_positive_real_part() {
        let h = passive_reference_model();
        assert!(h.is_hurwitz());
        assert!(h.has_nonsingular_dc_gain());
        for k in 0..400 {
            let omega = 10f64.powf(-2.0 + 4.0 * k as f64 / 399.0);
            let resp = h.frequency_response(omega).unwrap();
            let analytic = 2.0 * (3.0 + 1.5 * omega * omega) / ((2.0 - omega * omega).powi(2) + 9.0 * omega * omega);
            assert!((resp[(0, 0)].re - analytic).abs() < 1e-12);
            assert!(analytic > 0.0);
        }
    }

    #[test]
    fn command_map_examples() {
        let r0 = exp_so3(&Vector3::new(0.3, -0.2, 0.6));
        assert_eq!(teleop_command_map(&r0, &r0, K_OMEGA), Vector3::zeros());
        let rt = exp_so3(&Vector3::new(0.0, 0.0, 0.5)) * r0;
        assert_abs_diff_eq!(teleop_command_map(&rt, &r0, K_OMEGA), Vector3::new(0.0, 0.0, 0.4), epsilon = 1e-12);
        let rt = exp_so3(&Vector3::new(2.0, 0.0, 0.0)) * r0;
        assert_abs_diff_eq!(teleop_command_map(&rt, &r0, K_OMEGA), Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn scripted_examples() {
        let empty = ScriptedOperator::new(vec![]).unwrap();
        assert_eq!(empty.command_at(3.0), Vector3::zeros());

        let op = ScriptedOperator::new(vec![ScheduledCommand {
            start: 0.0,
            end: 1.0,
            omega_h_s: [0.0, 0.0, 0.1],
        }])
        .unwrap();
        let active = (0..600).filter(|&k| op.command_at(k as f64 * DT) != Vector3::zeros()).count();
        assert_eq!(active, 120);

        let overlapping = vec![
            ScheduledCommand { start: 0.0, end: 2.0, omega_h_s: [0.0; 3] },
            ScheduledCommand { start: 1.0, end: 3.0, omega_h_s: [0.0; 3] },
        ];
        assert!(ScriptedOperator::new(overlapping).is_err());
    }

    #[test]
    fn model_file_round_trip() {
        let file = OperatorModelFile::new(passive_reference_model(), 120.0);
        let text = serde_json::to_string(&file).unwrap();
        assert_eq!(
            text,
            r#"{"rate_hz":120.0,"diag":[{"num":[2.0,3.0],"den":[3.0,2.0]},{"num":[2.0,3.0],"den":[3.0,2.0]}],"offdiag":[0.0,0.0]}"#
        );
        let back: OperatorModelFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back, file);
        assert!(serde_json::from_str::<OperatorModelFile>(r#"{"rate_hz":1,"diag":[],"offdiag":[0,0],"x":1}"#).is_err());
    }

    proptest! {
        #[test]
        fn synthetic_output_is_saturated_and_planar(
            e in proptest::array::uniform2(-1.0f64..1.0),
            v in proptest::array::uniform3(-3.0f64..3.0),
            steps in 1usize..50,
        ) {
            let structure = TransferMatrix2x2::diagonal(DiagonalEntry::new([8.0, 20.0], [3.0, 2.0]));
            let mut model = OperatorModel::new(structure, 120.0).unwrap();
            let l = leader(exp_so3(&Vector3::from(v)));
            for _ in 0..steps {
                let s = synthetic_operator_step(&mut model, &Vector2::from(e), &l, DT).unwrap();
                prop_assert_eq!(s.omega_h_body.z, 0.0);
                prop_assert!(s.omega_h_spatial.norm() <= OMEGA_MAX + 1e-12);
            }
        }

        #[test]
        fn saturation_preserves_direction(v in proptest::array::uniform3(-5.0f64..5.0)) {
            let v = Vector3::from(v);
            let s = saturate(&v, OMEGA_MAX);
            prop_assert!(s.norm() <= OMEGA_MAX + 1e-12);
            prop_assert!(v.cross(&s).norm() < 1e-12);
            prop_assert!(v.dot(&s) >= 0.0);
            prop_assert_eq!(saturate(&s, OMEGA_MAX), s);
        }
    }
}
