//! Energy bookkeeping along trajectories, the invariant monitors, and the
//! frequency-domain passivity index of the operator model.

use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::navigation::{relative_rotations, LeaderState, QuasiAverageState, ReferenceState, SyncGains};
use crate::operator::{error_vector, TransferMatrix2x2};
use crate::so3::{lambda_min_sym3, phi, Rotation, Vector3};

/// Tolerance below which ν counts as nonnegative.
pub const PASSIVITY_TOL: f64 = 1e-9;

/// `ν(ω) = ½ λ_min(H(jω) + Hᴴ(jω))`, by the closed-form 2×2 Hermitian
/// eigenvalue.
pub fn passivity_index(model: &TransferMatrix2x2, omega: f64) -> Result<f64> {
    if !(omega >= 0.0) {
        return Err(Error::InvalidArgument(format!("frequency must be nonnegative, got {omega}")));
    }
    let h = model.frequency_response(omega)?;
    let m11 = 2.0 * h[(0, 0)].re;
    let m22 = 2.0 * h[(1, 1)].re;
    let m12: Complex64 = h[(0, 1)] + h[(1, 0)].conj();
    let mean = 0.5 * (m11 + m22);
    let radius = (0.25 * (m11 - m22).powi(2) + m12.norm_sqr()).sqrt();
    Ok(0.5 * (mean - radius))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassivityReport {
    pub omega: Vec<f64>,
    pub nu: Vec<f64>,
    pub is_passive: bool,
    pub worst_frequency: f64,
    pub worst_value: f64,
    /// Adjacent grid points `(ω_k, ω_{k+1})` between which ν changes sign.
    pub crossings: Vec<(f64, f64)>,
    pub beta_estimate: Option<f64>,
}

/// Summary written next to the per-frequency CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassivitySummary {
    pub is_passive: bool,
    pub worst_frequency: f64,
    pub worst_value: f64,
    pub beta_estimate: Option<f64>,
}

impl PassivityReport {
    pub fn summary(&self) -> PassivitySummary {
        PassivitySummary {
            is_passive: self.is_passive,
            worst_frequency: self.worst_frequency,
            worst_value: self.worst_value,
            beta_estimate: self.beta_estimate,
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["omega", "nu"])?;
        for (o, n) in self.omega.iter().zip(&self.nu) {
            w.write_record([format!("{o:.16e}"), format!("{n:.16e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Evaluates ν on a logarithmic grid. A single point evaluates `omega_min`.
pub fn passivity_sweep(
    model: &TransferMatrix2x2,
    omega_min: f64,
    omega_max: f64,
    points: usize,
) -> Result<PassivityReport> {
    if points == 0 || !(omega_min > 0.0) || omega_max < omega_min || (points > 1 && omega_max == omega_min) {
        return Err(Error::InvalidArgument(format!(
            "bad sweep [{omega_min}, {omega_max}] with {points} points"
        )));
    }
    let omega: Vec<f64> = if points == 1 {
        vec![omega_min]
    } else {
        let (lo, hi) = (omega_min.ln(), omega_max.ln());
        (0..points)
            .map(|k| (lo + (hi - lo) * k as f64 / (points - 1) as f64).exp())
            .collect()
    };
    let nu = omega
        .iter()
        .map(|&w| passivity_index(model, w))
        .collect::<Result<Vec<_>>>()?;
    let (worst_idx, worst_value) = nu
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("grid is non-empty");
    let crossings = omega
        .windows(2)
        .zip(nu.windows(2))
        .filter(|(_, n)| (n[0] < 0.0) != (n[1] < 0.0))
        .map(|(w, _)| (w[0], w[1]))
        .collect();
    Ok(PassivityReport {
        is_passive: nu.iter().all(|&v| v >= -PASSIVITY_TOL),
        worst_frequency: omega[worst_idx],
        worst_value,
        omega,
        nu,
        crossings,
        beta_estimate: None,
    })
}

/// One tick of the energy bookkeeping.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyRecord {
    pub t: f64,
    pub trial_id: u32,
    /// `φ(R̄_r)`
    pub s_r: f64,
    /// `φ(R_rl)`
    pub s_rl: f64,
    /// Human supply `P(τ) = ∫₀^τ {sk(R_lᵀR_r)∨}ᵀ ω_h^b dt`.
    pub supply: f64,
    /// `S_h = β + P`
    pub s_h: f64,
    /// `V = S_r + S_rl + S_h`
    pub v: f64,
    /// `−½k_s{λ_min(R̄_r + R̄_rᵀ) + λ_min(R_rl + R_rlᵀ)} φ(R_lᵀR̄)`
    pub bound: f64,
}

#[derive(Clone, Copy, Debug)]
struct HeldStep {
    leader: Rotation,
    reference: Rotation,
    omega_h_spatial: Vector3,
}

/// Append-only energy ledger for one simulation.
///
/// `S_h` and `V` use the configured β, or the smallest β that keeps the
/// recorded supply admissible when none is configured.
#[derive(Clone, Debug, Default)]
pub struct EnergyLedger {
    beta: Option<f64>,
    records: Vec<EnergyRecord>,
    held: Option<HeldStep>,
}

fn supply_rate(leader: &Rotation, reference: &Rotation, omega_h_spatial: &Vector3) -> f64 {
    let body = leader.matrix().transpose() * omega_h_spatial;
    error_vector(leader, reference).dot(&body)
}

impl EnergyLedger {
    pub fn new(beta: Option<f64>) -> Self {
        EnergyLedger {
            beta,
            ..Default::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    /// β in effect: the configured value or [`estimate_beta`] of the supply.
    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or_else(|| estimate_beta(self.records.iter().map(|r| r.supply)))
    }

    /// Records with `S_h` and `V` evaluated at [`Self::beta`].
    pub fn records(&self) -> Vec<EnergyRecord> {
        let beta = self.beta();
        self.records
            .iter()
            .map(|r| EnergyRecord {
                s_h: beta + r.supply,
                v: r.s_r + r.s_rl + beta + r.supply,
                ..*r
            })
            .collect()
    }

    /// Latest record as stored, i.e. with the configured β or zero.
    pub fn last(&self) -> Option<&EnergyRecord> {
        self.records.last()
    }

    pub fn supply(&self) -> impl Iterator<Item = f64> + '_ {
        self.records.iter().map(|r| r.supply)
    }

    /// Appends the record for the current state.
    ///
    /// `omega_h_spatial` is the command about to be held over the next step.
    /// The supply integral is advanced over the previous step by the
    /// trapezoidal rule, with the previously held command at both ends.
    #[allow(clippy::too_many_arguments)]
    pub fn tick(
        &mut self,
        t: f64,
        trial_id: u32,
        qa: &QuasiAverageState,
        leader: &LeaderState,
        reference: &ReferenceState,
        omega_h_spatial: &Vector3,
        gains: &SyncGains,
        dt: f64,
    ) {
        let supply = match (self.held, self.records.last()) {
            (Some(h), Some(last)) => {
                let left = supply_rate(&h.leader, &h.reference, &h.omega_h_spatial);
                let right = supply_rate(&leader.rotation, &h.reference, &h.omega_h_spatial);
                last.supply + 0.5 * dt * (left + right)
            }
            _ => 0.0,
        };
        let (r_rl, r_bar_r) = relative_rotations(qa, leader, reference);
        let s_r = phi(&r_bar_r);
        let s_rl = phi(&r_rl);
        let beta = self.beta.unwrap_or(0.0);
        let record = EnergyRecord {
            t,
            trial_id,
            s_r,
            s_rl,
            supply,
            s_h: beta + supply,
            v: s_r + s_rl + beta + supply,
            bound: dissipation_bound(qa, leader, reference, gains),
        };
        self.records.push(record);
        self.held = Some(HeldStep {
            leader: leader.rotation,
            reference: reference.rotation,
            omega_h_spatial: *omega_h_spatial,
        });
    }
}

/// Functional form of [`EnergyLedger::tick`].
#[allow(clippy::too_many_arguments)]
pub fn energy_tick(
    mut ledger: EnergyLedger,
    t: f64,
    trial_id: u32,
    qa: &QuasiAverageState,
    leader: &LeaderState,
    reference: &ReferenceState,
    omega_h_spatial: &Vector3,
    gains: &SyncGains,
    dt: f64,
) -> EnergyLedger {
    ledger.tick(t, trial_id, qa, leader, reference, omega_h_spatial, gains, dt);
    ledger
}

fn lambda_min_sym_part(r: &Rotation) -> f64 {
    lambda_min_sym3(&(r.matrix() + r.matrix().transpose())).expect("R + Rᵀ is symmetric")
}

/// Right-hand side of the dissipation inequality `V̇ ≤ B`.
pub fn dissipation_bound(
    qa: &QuasiAverageState,
    leader: &LeaderState,
    reference: &ReferenceState,
    gains: &SyncGains,
) -> f64 {
    let (r_rl, r_bar_r) = relative_rotations(qa, leader, reference);
    let coupling = phi(&(leader.rotation.transpose() * qa.rotation));
    -0.5 * gains.k_s * (lambda_min_sym_part(&r_bar_r) + lambda_min_sym_part(&r_rl)) * coupling
}

/// Smallest β ≥ 0 with `P(τ) ≥ −β` over the recorded horizon.
pub fn estimate_beta(supply: impl IntoIterator<Item = f64>) -> f64 {
    supply.into_iter().fold(0.0, |beta: f64, p| beta.max(-p))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Record {
    /// `h(R̄_r) = tr(R̄_r) − 1`
    pub h_value: f64,
    pub on_boundary: bool,
}

pub fn lemma1_monitor(qa: &QuasiAverageState, reference: &ReferenceState) -> Lemma1Record {
    let h_value = (reference.rotation.transpose() * qa.rotation).trace() - 1.0;
    Lemma1Record {
        h_value,
        on_boundary: h_value.abs() < 1e-6,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionRecord {
    /// `λ_min(R_rl + R_rlᵀ)`
    pub sym_rrl_min_eig: f64,
    pub positive_definite: bool,
}

pub fn assumption_monitor(leader: &LeaderState, reference: &ReferenceState) -> AssumptionRecord {
    let r_rl = reference.rotation.transpose() * leader.rotation;
    let eig = lambda_min_sym_part(&r_rl);
    AssumptionRecord {
        sym_rrl_min_eig: eig,
        positive_definite: eig > 1e-9,
    }
}
