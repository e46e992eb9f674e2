//! Identification of the structured 2×2 operator model from session logs.
//!
//! Logs are trimmed to the post-start part of each trial, low-pass filtered,
//! decimated and split trial-wise into identification and validation halves.
//! The model is fitted by prediction error: the ZOH-discretized candidate is
//! simulated from rest on every segment and the squared output error is
//! minimized by Levenberg–Marquardt from several pole guesses.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x4, Matrix4, Matrix4x2, Vector2, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operator::{DiagonalEntry, OperatorModelFile, TransferMatrix2x2, DEFAULT_RATE_HZ};
use crate::sim::{fmt_f64, TrajectoryRecord, TrajectoryRow};
use crate::so3::{Matrix3, Rotation, Vector3};

/// Free parameters: `{b₁, b₀, a₁, a₀}` per diagonal entry plus `h₁₂, h₂₁`.
pub const N_PARAMS: usize = 10;
/// Minimum identification samples per free parameter.
pub const SAMPLES_PER_PARAM: usize = 10;

/// One logged tick of a session.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionRow {
    pub t: f64,
    pub error_e: Vector2<f64>,
    pub u_h: Vector2<f64>,
    pub omega_h_s: Vector3,
    pub r_l: Rotation,
    pub r_bar: Rotation,
    pub r_r: Rotation,
    pub d_r: Vector3,
    pub trial_id: u32,
    pub start_pressed: bool,
    /// Ticks were dropped right before this row.
    pub gap: bool,
}

/// Uniform-rate record of operator error and command.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionLog {
    pub rate_hz: f64,
    pub rows: Vec<SessionRow>,
}

const SESSION_COLUMNS: [&str; 3] = ["trial_id", "start_pressed", "gap"];

fn session_header() -> Vec<String> {
    let mut h: Vec<String> = ["t", "e_1", "e_2", "u_1", "u_2", "omega_h_s_x", "omega_h_s_y", "omega_h_s_z"]
        .map(String::from)
        .to_vec();
    for p in ["r_l", "r_bar", "r_r"] {
        for s in ["00", "01", "02", "10", "11", "12", "20", "21", "22"] {
            h.push(format!("{p}_{s}"));
        }
    }
    h.extend(["d_r_x", "d_r_y", "d_r_z"].map(String::from));
    h.extend(SESSION_COLUMNS.map(String::from));
    h.push("rate_hz".into());
    h
}

impl SessionLog {
    pub fn new(rate_hz: f64, rows: Vec<SessionRow>) -> Result<Self> {
        let log = SessionLog { rate_hz, rows };
        log.validate()?;
        Ok(log)
    }

    /// Fixed positive rate, strictly increasing `t` one period apart,
    /// valid rotations.
    pub fn validate(&self) -> Result<()> {
        if !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            return Err(Error::Format(format!("bad session rate {}", self.rate_hz)));
        }
        let dt = 1.0 / self.rate_hz;
        for (i, w) in self.rows.windows(2).enumerate() {
            let step = w[1].t - w[0].t;
            if !((step - dt).abs() <= 1e-6 * dt) {
                return Err(Error::Format(format!(
                    "row {}: time step {step} does not match rate {} Hz",
                    i + 1,
                    self.rate_hz
                )));
            }
        }
        for (i, r) in self.rows.iter().enumerate() {
            for m in [&r.r_l, &r.r_bar, &r.r_r] {
                if m.orthonormality_error() > 1e-9 {
                    return Err(Error::Format(format!("row {i}: invalid rotation")));
                }
            }
        }
        Ok(())
    }

    /// Session rows from a trajectory; `start_pressed` and `gap` give the
    /// per-row flags.
    pub fn from_trajectory(
        record: &TrajectoryRecord,
        rate_hz: f64,
        start_pressed: impl Fn(usize) -> bool,
        gap: impl Fn(usize) -> bool,
    ) -> Result<Self> {
        Self::from_rows(&record.rows, rate_hz, start_pressed, gap)
    }

    pub fn from_rows(
        rows: &[TrajectoryRow],
        rate_hz: f64,
        start_pressed: impl Fn(usize) -> bool,
        gap: impl Fn(usize) -> bool,
    ) -> Result<Self> {
        let rows = rows
            .iter()
            .enumerate()
            .map(|(i, r)| SessionRow {
                t: r.t,
                error_e: r.error_e,
                u_h: Vector2::new(r.omega_h_b.x, r.omega_h_b.y),
                omega_h_s: r.omega_h_s,
                r_l: r.r_l,
                r_bar: r.r_bar,
                r_r: r.r_r,
                d_r: r.d_r,
                trial_id: r.trial_id,
                start_pressed: start_pressed(i),
                gap: gap(i),
            })
            .collect();
        Self::new(rate_hz, rows)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(session_header())?;
        for r in &self.rows {
            let mut f: Vec<String> = [r.t, r.error_e.x, r.error_e.y, r.u_h.x, r.u_h.y]
                .into_iter()
                .chain(r.omega_h_s.iter().copied())
                .map(fmt_f64)
                .collect();
            for m in [&r.r_l, &r.r_bar, &r.r_r] {
                f.extend(m.matrix().transpose().iter().map(|x| fmt_f64(*x)));
            }
            f.extend(r.d_r.iter().map(|x| fmt_f64(*x)));
            f.push(r.trial_id.to_string());
            f.push(u8::from(r.start_pressed).to_string());
            f.push(u8::from(r.gap).to_string());
            f.push(fmt_f64(self.rate_hz));
            w.write_record(f)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(File::create(path)?)
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(input);
        let header = reader.headers()?.clone();
        if header.iter().ne(session_header().iter().map(String::as_str)) {
            return Err(Error::Format("session log header does not match the expected columns".into()));
        }
        let mut rows = Vec::new();
        let mut rate_hz = None;
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let num = |k: usize| -> Result<f64> {
                rec[k]
                    .trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("line {line}: bad number {:?}", &rec[k])))
            };
            let rot = |k: usize| -> Result<Rotation> {
                let mut m = [0.0; 9];
                for (j, x) in m.iter_mut().enumerate() {
                    *x = num(k + j)?;
                }
                Ok(Rotation::from_matrix_unchecked(Matrix3::from_row_slice(&m)))
            };
            let flag = |k: usize| -> Result<bool> {
                match rec[k].trim() {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    other => Err(Error::Format(format!("line {line}: bad flag {other:?}"))),
                }
            };
            rows.push(SessionRow {
                t: num(0)?,
                error_e: Vector2::new(num(1)?, num(2)?),
                u_h: Vector2::new(num(3)?, num(4)?),
                omega_h_s: Vector3::new(num(5)?, num(6)?, num(7)?),
                r_l: rot(8)?,
                r_bar: rot(17)?,
                r_r: rot(26)?,
                d_r: Vector3::new(num(35)?, num(36)?, num(37)?),
                trial_id: rec[38]
                    .trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("line {line}: bad trial id {:?}", &rec[38])))?,
                start_pressed: flag(39)?,
                gap: flag(40)?,
            });
            let rate = num(41)?;
            match rate_hz {
                None => rate_hz = Some(rate),
                Some(r) if r != rate => return Err(Error::Format(format!("line {line}: rate changes mid-log"))),
                Some(_) => {}
            }
        }
        let rate_hz = rate_hz.ok_or_else(|| Error::Format("session log has no rows".into()))?;
        Self::new(rate_hz, rows)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(File::open(path)?)
    }

    /// Trial ids in order of first appearance.
    pub fn trial_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = Vec::new();
        for r in &self.rows {
            if ids.last() != Some(&r.trial_id) && !ids.contains(&r.trial_id) {
                ids.push(r.trial_id);
            }
        }
        ids
    }
}

/// Pipeline settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentificationConfig {
    /// Sample rate after decimation, in samples per second.
    pub resample_hz: f64,
    pub trim_dead_time: bool,
    pub restarts: usize,
    pub max_iterations: usize,
    /// Relative cost decrease below which the optimizer stops.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for IdentificationConfig {
    fn default() -> Self {
        IdentificationConfig {
            resample_hz: 10.0,
            trim_dead_time: true,
            restarts: 8,
            max_iterations: 200,
            tolerance: 1e-12,
            seed: 0,
        }
    }
}

/// A contiguous stretch of input `e` and output `u_h` at spacing `dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub trial_id: u32,
    pub dt: f64,
    pub e: Vec<Vector2<f64>>,
    pub u: Vec<Vector2<f64>>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.e.len()
    }

    pub fn is_empty(&self) -> bool {
        self.e.is_empty()
    }
}

/// One second-order section `(b₀ + b₁z⁻¹ + b₂z⁻²)/(1 + a₁z⁻¹ + a₂z⁻²)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    /// Runs the section in transposed direct form II, started at the steady
    /// state of the first sample.
    fn run(&self, x: &[f64]) -> Vec<f64> {
        let Some(&x0) = x.first() else {
            return Vec::new();
        };
        let gain = (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1]);
        let y0 = gain * x0;
        let mut s2 = self.b[2] * x0 - self.a[1] * y0;
        let mut s1 = self.b[1] * x0 - self.a[0] * y0 + s2;
        x.iter()
            .map(|&xi| {
                let y = self.b[0] * xi + s1;
                s1 = self.b[1] * xi - self.a[0] * y + s2;
                s2 = self.b[2] * xi - self.a[1] * y;
                y
            })
            .collect()
    }
}

/// Fourth-order Butterworth low-pass as two bilinear-transformed sections
/// with prewarped cutoff.
pub fn butterworth_lowpass4(cutoff_hz: f64, sample_hz: f64) -> Result<[Biquad; 2]> {
    if !(cutoff_hz > 0.0 && cutoff_hz < 0.5 * sample_hz) {
        return Err(Error::InvalidConfig(format!(
            "cutoff {cutoff_hz} Hz must lie below the Nyquist rate of {sample_hz} Hz"
        )));
    }
    let w0 = 2.0 * std::f64::consts::PI * cutoff_hz / sample_hz;
    let (sin, cos) = w0.sin_cos();
    let section = |q: f64| {
        let alpha = sin / (2.0 * q);
        let a0 = 1.0 + alpha;
        let b = (1.0 - cos) / 2.0 / a0;
        Biquad {
            b: [b, 2.0 * b, b],
            a: [-2.0 * cos / a0, (1.0 - alpha) / a0],
        }
    };
    let pi = std::f64::consts::PI;
    Ok([
        section(1.0 / (2.0 * (pi / 8.0).cos())),
        section(1.0 / (2.0 * (3.0 * pi / 8.0).cos())),
    ])
}

/// Anti-alias filter at 0.4× the target rate, then keep every `ratio`-th
/// sample starting with the first.
pub fn lowpass_decimate(x: &[f64], sample_hz: f64, resample_hz: f64) -> Result<Vec<f64>> {
    let ratio = decimation_ratio(sample_hz, resample_hz)?;
    let sections = butterworth_lowpass4(0.4 * resample_hz, sample_hz)?;
    let filtered = sections.iter().fold(x.to_vec(), |acc, s| s.run(&acc));
    Ok(filtered.into_iter().step_by(ratio).collect())
}

fn decimation_ratio(sample_hz: f64, resample_hz: f64) -> Result<usize> {
    if !(resample_hz > 0.0 && resample_hz < sample_hz) {
        return Err(Error::InvalidConfig(format!(
            "resample rate {resample_hz} must be positive and below the log rate {sample_hz}"
        )));
    }
    let ratio = sample_hz / resample_hz;
    let rounded = ratio.round();
    if (ratio - rounded).abs() > 1e-6 * ratio {
        return Err(Error::InvalidConfig(format!(
            "log rate {sample_hz} is not an integer multiple of the resample rate {resample_hz}"
        )));
    }
    Ok(rounded as usize)
}

fn channel(v: &[Vector2<f64>], i: usize) -> Vec<f64> {
    v.iter().map(|x| x[i]).collect()
}

/// Trims dead time, splits at gaps, filters and decimates, then divides the
/// trials into an identification first half and a validation second half
/// (the extra trial of an odd count goes to identification).
pub fn preprocess(log: &SessionLog, cfg: &IdentificationConfig) -> Result<(Vec<Segment>, Vec<Segment>)> {
    log.validate()?;
    let ratio = decimation_ratio(log.rate_hz, cfg.resample_hz)?;
    let dt = ratio as f64 / log.rate_hz;
    let trials = log.trial_ids();
    let mut per_trial: Vec<Vec<Segment>> = Vec::with_capacity(trials.len());
    for &id in &trials {
        let rows: Vec<&SessionRow> = log.rows.iter().filter(|r| r.trial_id == id).collect();
        let start = if cfg.trim_dead_time {
            rows.iter().position(|r| r.start_pressed).ok_or(Error::EmptyAfterTrim(id as usize))?
        } else {
            0
        };
        let rows = &rows[start..];
        let mut pieces: Vec<&[&SessionRow]> = Vec::new();
        let mut begin = 0;
        for i in 1..=rows.len() {
            if i == rows.len() || rows[i].gap {
                pieces.push(&rows[begin..i]);
                begin = i;
            }
        }
        let mut segments = Vec::new();
        for piece in pieces {
            let e: Vec<Vector2<f64>> = piece.iter().map(|r| r.error_e).collect();
            let u: Vec<Vector2<f64>> = piece.iter().map(|r| r.u_h).collect();
            let mut cols = Vec::with_capacity(4);
            for series in [&e, &u] {
                for c in 0..2 {
                    cols.push(lowpass_decimate(&channel(series, c), log.rate_hz, cfg.resample_hz)?);
                }
            }
            let len = cols[0].len();
            if len == 0 {
                continue;
            }
            segments.push(Segment {
                trial_id: id,
                dt,
                e: (0..len).map(|k| Vector2::new(cols[0][k], cols[1][k])).collect(),
                u: (0..len).map(|k| Vector2::new(cols[2][k], cols[3][k])).collect(),
            });
        }
        per_trial.push(segments);
    }
    let n_id = trials.len().div_ceil(2);
    let val = per_trial.split_off(n_id);
    Ok((per_trial.into_iter().flatten().collect(), val.into_iter().flatten().collect()))
}

/// `100·(1 − ‖y − ŷ‖/‖y − ȳ‖)`.
pub fn fit_percent(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.len() != y_hat.len() || y.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "fit needs equal lengths of at least 2, got {} and {}",
            y.len(),
            y_hat.len()
        )));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let spread = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt();
    if spread == 0.0 {
        return Err(Error::DegenerateReference);
    }
    let err = y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    Ok(100.0 * (1.0 - err / spread))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitScores {
    pub per_output: [f64; 2],
    /// Mean of the per-output fits.
    pub aggregate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: OperatorModelFile,
    pub fit_id: FitScores,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_val: Option<FitScores>,
    pub residual_norm: f64,
    pub converged: bool,
    pub restarts_used: usize,
    pub iterations: usize,
}

impl FitResult {
    pub fn model(&self) -> TransferMatrix2x2 {
        self.params.structure()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        writeln!(f)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(File::open(path)?)?)
    }
}

struct Discrete {
    a: Matrix4<f64>,
    b: Matrix4x2<f64>,
    c: Matrix2x4<f64>,
    d: Matrix2<f64>,
}

impl Discrete {
    fn new(model: &TransferMatrix2x2, dt: f64) -> Self {
        let ss = model.realization();
        let (a, b) = ss.discretize(dt);
        Discrete { a, b, c: ss.c, d: ss.d }
    }

    /// Output before each state update, from rest.
    fn run(&self, e: &[Vector2<f64>], mut sink: impl FnMut(usize, Vector2<f64>)) {
        let mut x = Vector4::zeros();
        for (k, ek) in e.iter().enumerate() {
            sink(k, self.c * x + self.d * ek);
            x = self.a * x + self.b * ek;
        }
    }
}

/// Zero-initial-state ZOH response of `model` on one segment.
pub fn simulate_segment(model: &TransferMatrix2x2, segment: &Segment) -> Vec<Vector2<f64>> {
    let mut out = Vec::with_capacity(segment.len());
    Discrete::new(model, segment.dt).run(&segment.e, |_, y| out.push(y));
    out
}

fn model_from_theta(theta: &DVector<f64>) -> TransferMatrix2x2 {
    let entry = |k: usize| DiagonalEntry::new([theta[k], theta[k + 1]], [theta[k + 2].exp(), theta[k + 3].exp()]);
    TransferMatrix2x2 {
        diag: [entry(0), entry(4)],
        offdiag: [theta[8], theta[9]],
    }
}

fn residuals(theta: &DVector<f64>, data: &[Segment], total: usize) -> DVector<f64> {
    let mut r = DVector::zeros(2 * total);
    if theta.iter().any(|x| !x.is_finite()) {
        r.fill(f64::INFINITY);
        return r;
    }
    let model = model_from_theta(theta);
    let mut offset = 0;
    for seg in data {
        let disc = Discrete::new(&model, seg.dt);
        disc.run(&seg.e, |k, y| {
            let diff = seg.u[k] - y;
            r[offset + 2 * k] = diff.x;
            r[offset + 2 * k + 1] = diff.y;
        });
        offset += 2 * seg.len();
    }
    r
}

fn cost(r: &DVector<f64>) -> f64 {
    let c = r.norm_squared();
    if c.is_finite() {
        c
    } else {
        f64::INFINITY
    }
}

fn jacobian(theta: &DVector<f64>, data: &[Segment], total: usize) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(2 * total, N_PARAMS);
    for p in 0..N_PARAMS {
        let h = 1e-6 * theta[p].abs().max(1.0);
        let mut plus = theta.clone();
        plus[p] += h;
        let mut minus = theta.clone();
        minus[p] -= h;
        let col = (residuals(&plus, data, total) - residuals(&minus, data, total)) / (2.0 * h);
        j.set_column(p, &col);
    }
    j
}

/// Linear least squares for numerators and cross gains with the poles held.
fn initial_gains(a1: f64, a0: f64, data: &[Segment], total: usize) -> Result<DVector<f64>> {
    let mut theta = DVector::zeros(N_PARAMS);
    for i in 0..2 {
        let other = 1 - i;
        let mut regress = DMatrix::zeros(total, 3);
        let mut target = DVector::zeros(total);
        let mut offset = 0;
        for seg in data {
            for (col, num) in [(0, [1.0, 0.0]), (1, [0.0, 1.0])] {
                let mut diag = [DiagonalEntry::new([0.0, 0.0], [a1, a0]); 2];
                diag[i] = DiagonalEntry::new(num, [a1, a0]);
                let model = TransferMatrix2x2 {
                    diag,
                    offdiag: [0.0, 0.0],
                };
                Discrete::new(&model, seg.dt).run(&seg.e, |k, y| regress[(offset + k, col)] = y[i]);
            }
            for k in 0..seg.len() {
                regress[(offset + k, 2)] = seg.e[k][other];
                target[offset + k] = seg.u[k][i];
            }
            offset += seg.len();
        }
        let gains = regress
            .svd(true, true)
            .solve(&target, 1e-12)
            .map_err(|e| Error::InsufficientData(e.to_string()))?;
        theta[4 * i] = gains[0];
        theta[4 * i + 1] = gains[1];
        theta[4 * i + 2] = a1.ln();
        theta[4 * i + 3] = a0.ln();
        theta[8 + i] = gains[2];
    }
    Ok(theta)
}

struct Candidate {
    theta: DVector<f64>,
    cost: f64,
    converged: bool,
    iterations: usize,
}

fn levenberg_marquardt(mut theta: DVector<f64>, data: &[Segment], total: usize, cfg: &IdentificationConfig) -> Candidate {
    let mut r = residuals(&theta, data, total);
    let mut c = cost(&r);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations && !converged && c > 0.0 {
        iterations += 1;
        let j = jacobian(&theta, data, total);
        let jt = j.transpose();
        let h = &jt * &j;
        let g = &jt * &r;
        let mut improved = false;
        while lambda < 1e16 {
            let mut damped = h.clone();
            for k in 0..N_PARAMS {
                damped[(k, k)] += lambda * h[(k, k)].max(1e-12);
            }
            let Some(step) = damped.clone().cholesky().map(|ch| ch.solve(&(-&g))) else {
                lambda *= 4.0;
                continue;
            };
            let candidate = &theta + &step;
            let rc = residuals(&candidate, data, total);
            let cc = cost(&rc);
            if cc < c {
                let decrease = (c - cc) / c;
                let small_step = step.norm() <= cfg.tolerance * (theta.norm() + cfg.tolerance);
                theta = candidate;
                r = rc;
                c = cc;
                lambda = (lambda / 3.0).max(1e-12);
                converged = decrease <= cfg.tolerance || small_step;
                improved = true;
                break;
            }
            lambda *= 4.0;
        }
        if !improved {
            // No descent direction left at working precision.
            converged = true;
        }
    }
    Candidate {
        theta,
        cost: c,
        converged: converged || c == 0.0,
        iterations,
    }
}

fn check_output_spread(data: &[Segment]) -> Result<()> {
    for i in 0..2 {
        let first = data[0].u[0][i];
        if data.iter().all(|s| s.u.iter().all(|u| u[i] == first)) {
            return Err(Error::DegenerateReference);
        }
    }
    Ok(())
}

/// Scores a model on a data set by zero-initial-state simulation of every
/// segment.
pub fn validate(model: &TransferMatrix2x2, data: &[Segment]) -> Result<FitScores> {
    if !model.is_hurwitz() {
        return Err(Error::UnstableModel(format!("{:?}", model.diag)));
    }
    if data.iter().map(Segment::len).sum::<usize>() < 2 {
        return Err(Error::InsufficientData("validation needs at least two samples".into()));
    }
    let mut y = [Vec::new(), Vec::new()];
    let mut y_hat = [Vec::new(), Vec::new()];
    for seg in data {
        for (k, pred) in simulate_segment(model, seg).into_iter().enumerate() {
            for i in 0..2 {
                y[i].push(seg.u[k][i]);
                y_hat[i].push(pred[i]);
            }
        }
    }
    let per_output = [fit_percent(&y[0], &y_hat[0])?, fit_percent(&y[1], &y_hat[1])?];
    Ok(FitScores {
        per_output,
        aggregate: 0.5 * (per_output[0] + per_output[1]),
    })
}

/// Prediction-error fit of the structured model. Restarts run in parallel;
/// the lowest cost wins, ties going to the earlier restart.
pub fn identify(id_set: &[Segment], cfg: &IdentificationConfig) -> Result<FitResult> {
    let total: usize = id_set.iter().map(Segment::len).sum();
    if total < SAMPLES_PER_PARAM * N_PARAMS {
        return Err(Error::InsufficientData(format!(
            "{total} identification samples, need at least {}",
            SAMPLES_PER_PARAM * N_PARAMS
        )));
    }
    let dt = id_set[0].dt;
    if id_set.iter().any(|s| s.dt != dt || s.u.len() != s.e.len()) {
        return Err(Error::InvalidArgument("segments differ in spacing or length".into()));
    }
    check_output_spread(id_set)?;
    if id_set.iter().all(|s| s.e.iter().all(|e| *e == Vector2::zeros())) {
        return Err(Error::InsufficientData("input is identically zero".into()));
    }
    let restarts = cfg.restarts.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let guesses: Vec<(f64, f64)> = (0..restarts)
        .map(|k| {
            let frac = if restarts == 1 { 0.5 } else { k as f64 / (restarts - 1) as f64 };
            let a0 = 10f64.powf(-1.0 + 2.0 * frac);
            let a1 = 2.0 * a0.sqrt() * rng.random_range(0.9..1.1);
            (a1, a0)
        })
        .collect();
    let candidates: Vec<Result<Candidate>> = guesses
        .par_iter()
        .map(|&(a1, a0)| {
            let theta0 = initial_gains(a1, a0, id_set, total)?;
            Ok(levenberg_marquardt(theta0, id_set, total, cfg))
        })
        .collect();
    let mut best: Option<Candidate> = None;
    for c in candidates {
        let c = c?;
        if best.as_ref().is_none_or(|b| c.cost < b.cost) {
            best = Some(c);
        }
    }
    let best = best.expect("at least one restart");
    let model = model_from_theta(&best.theta);
    let fit_id = validate(&model, id_set)?;
    Ok(FitResult {
        params: OperatorModelFile::new(model, DEFAULT_RATE_HZ),
        fit_id,
        fit_val: None,
        residual_norm: best.cost.sqrt(),
        converged: best.converged,
        restarts_used: restarts,
        iterations: best.iterations,
    })
}

/// Full pipeline: preprocess, identify on the first half, validate on the
/// second. The model file carries the log rate.
pub fn identify_session(log: &SessionLog, cfg: &IdentificationConfig) -> Result<FitResult> {
    let (id_set, val_set) = preprocess(log, cfg)?;
    if id_set.is_empty() {
        return Err(Error::InsufficientData("no identification segments".into()));
    }
    let mut fit = identify(&id_set, cfg)?;
    fit.params.rate_hz = log.rate_hz;
    if !val_set.is_empty() {
        fit.fit_val = Some(validate(&fit.model(), &val_set)?);
    }
    Ok(fit)
}

/// Parameter vector `[b₁, b₀, a₁, a₀]×2 ∪ [h₁₂, h₂₁]` of a model.
pub fn parameters(model: &TransferMatrix2x2) -> [f64; N_PARAMS] {
    let [d1, d2] = model.diag;
    [
        d1.num[0],
        d1.num[1],
        d1.den[0],
        d1.den[1],
        d2.num[0],
        d2.num[1],
        d2.den[0],
        d2.den[1],
        model.offdiag[0],
        model.offdiag[1],
    ]
}

/// Random piecewise-constant two-channel input, each level held for 1 to
/// `max_hold` samples with amplitude uniform in `[-amplitude, amplitude]`.
pub fn excitation(rng: &mut impl Rng, len: usize, max_hold: usize, amplitude: f64) -> Vec<Vector2<f64>> {
    let mut out = Vec::with_capacity(len);
    let mut level = [0.0; 2];
    let mut left = [0usize; 2];
    for _ in 0..len {
        for c in 0..2 {
            if left[c] == 0 {
                level[c] = rng.random_range(-amplitude..=amplitude);
                left[c] = rng.random_range(1..=max_hold.max(1));
            }
            left[c] -= 1;
        }
        out.push(Vector2::new(level[0], level[1]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::passive_reference_model;
    use crate::sim::{run_scenario, ReferenceSpec, ScenarioConfig};

    fn truth() -> TransferMatrix2x2 {
        TransferMatrix2x2 {
            diag: [
                DiagonalEntry::new([2.0, 3.0], [3.0, 2.0]),
                DiagonalEntry::new([1.5, 1.0], [1.2, 0.8]),
            ],
            offdiag: [0.3, -0.2],
        }
    }

    fn dataset(model: &TransferMatrix2x2, trials: usize, len: usize, seed: u64) -> Vec<Segment> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..trials)
            .map(|k| {
                let mut seg = Segment {
                    trial_id: k as u32,
                    dt: 0.1,
                    e: excitation(&mut rng, len, 10, 0.5),
                    u: Vec::new(),
                };
                seg.u = simulate_segment(model, &seg);
                seg
            })
            .collect()
    }

    fn session_log(trials: u32, per_trial: usize, pressed_after: usize) -> SessionLog {
        let mut rows = Vec::new();
        let mut k = 0;
        for trial in 0..trials {
            for j in 0..per_trial {
                let t = k as f64 / 120.0;
                rows.push(SessionRow {
                    t,
                    error_e: Vector2::new((t * 2.0).sin(), (t * 0.7).cos()),
                    u_h: Vector2::new((t * 2.0).sin() * 0.5, (t * 0.7).cos() * 0.3),
                    omega_h_s: Vector3::zeros(),
                    r_l: Rotation::identity(),
                    r_bar: Rotation::identity(),
                    r_r: Rotation::identity(),
                    d_r: Vector3::z(),
                    trial_id: trial,
                    start_pressed: j >= pressed_after,
                    gap: false,
                });
                k += 1;
            }
        }
        SessionLog::new(120.0, rows).unwrap()
    }

    #[test]
    fn fit_percent_anchors() {
        let y = [1.0, -2.0, 0.5, 0.5];
        assert_eq!(fit_percent(&y, &y).unwrap(), 100.0);
        let mean = y.iter().sum::<f64>() / 4.0;
        assert!(fit_percent(&y, &[mean; 4]).unwrap().abs() < 1e-12);
        let z = [1.0, -1.0, 2.0, -2.0];
        let half: Vec<f64> = z.iter().map(|v| v * 0.5).collect();
        assert!((fit_percent(&z, &half).unwrap() - 50.0).abs() < 1e-12);
        assert!(matches!(fit_percent(&[1.0; 3], &[1.0; 3]), Err(Error::DegenerateReference)));
        assert!(fit_percent(&[1.0], &[1.0]).is_err());
        assert!(fit_percent(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn lowpass_keeps_slow_sinusoids() {
        // 1 Hz at 120 Hz, decimated to 10 Hz (cutoff 4 Hz).
        let fs = 120.0;
        let x: Vec<f64> = (0..2400)
            .map(|k| (2.0 * std::f64::consts::PI * k as f64 / fs).sin())
            .collect();
        let y = lowpass_decimate(&x, fs, 10.0).unwrap();
        assert_eq!(y.len(), 200);
        // Least-squares amplitude over whole periods of the 10 Hz samples.
        let (mut a, mut b) = (0.0, 0.0);
        for (k, v) in y.iter().enumerate().skip(100) {
            let w = 2.0 * std::f64::consts::PI * k as f64 / 10.0;
            a += v * w.sin();
            b += v * w.cos();
        }
        let amp = 2.0 * (a * a + b * b).sqrt() / 100.0;
        // Oracle: |H| = 1/sqrt(1 + (f/fc)^8) for the prewarped design.
        let expected = 1.0 / (1.0 + (1.0f64 / 4.0).powi(8)).sqrt();
        assert!((amp - 1.0).abs() < 0.02, "{amp}");
        assert!((amp - expected).abs() < 0.01);
    }

    #[test]
    fn lowpass_rejects_fast_sinusoids_and_keeps_constants() {
        let fs = 120.0;
        let x: Vec<f64> = (0..2400)
            .map(|k| (2.0 * std::f64::consts::PI * 20.0 * k as f64 / fs).sin())
            .collect();
        let y = lowpass_decimate(&x, fs, 10.0).unwrap();
        let amp = y[100..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(amp < 0.01, "{amp}");
        let c = lowpass_decimate(&[0.7; 240], fs, 10.0).unwrap();
        assert!(c.iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn decimation_needs_an_integer_ratio() {
        assert!(matches!(lowpass_decimate(&[0.0; 10], 120.0, 7.0), Err(Error::InvalidConfig(_))));
        assert!(matches!(lowpass_decimate(&[0.0; 10], 120.0, 240.0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn pressed_from_start_trims_nothing_and_splits_in_half() {
        let log = session_log(12, 120, 0);
        let (id, val) = preprocess(&log, &IdentificationConfig::default()).unwrap();
        assert_eq!(id.len(), 6);
        assert_eq!(val.len(), 6);
        assert_eq!(id.iter().map(|s| s.trial_id).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(val[0].trial_id, 6);
        assert!(id.iter().chain(&val).all(|s| s.len() == 10 && s.dt == 0.1));
    }

    #[test]
    fn dead_time_is_trimmed_per_trial() {
        let log = session_log(2, 120, 60);
        let (id, val) = preprocess(&log, &IdentificationConfig::default()).unwrap();
        assert_eq!(id[0].len(), 5);
        assert_eq!(val[0].len(), 5);
        let keep = IdentificationConfig {
            trim_dead_time: false,
            ..Default::default()
        };
        assert_eq!(preprocess(&log, &keep).unwrap().0[0].len(), 10);
        let never = session_log(2, 120, 1000);
        assert!(matches!(
            preprocess(&never, &IdentificationConfig::default()),
            Err(Error::EmptyAfterTrim(0))
        ));
    }

    #[test]
    fn gaps_split_segments() {
        let mut log = session_log(1, 240, 0);
        log.rows[120].gap = true;
        let (id, _) = preprocess(&log, &IdentificationConfig::default()).unwrap();
        assert_eq!(id.len(), 2);
        assert_eq!(id[0].len() + id[1].len(), 20);
    }

    #[test]
    fn session_csv_round_trip() {
        let cfg = ScenarioConfig {
            duration_s: 1.0,
            reference: ReferenceSpec::Fixed { d_r: [0.0, 1.0, 1.0] },
            ..Default::default()
        };
        let rec = run_scenario(&cfg).unwrap();
        let log = SessionLog::from_trajectory(&rec, 120.0, |i| i > 10, |i| i == 50).unwrap();
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        assert_eq!(SessionLog::read_csv(buf.as_slice()).unwrap(), log);
        assert!(log.rows.iter().all(|r| r.u_h.x != 0.0 || r.t == 0.0));
    }

    #[test]
    fn session_logs_reject_irregular_time() {
        let mut log = session_log(1, 10, 0);
        log.rows[5].t += 0.001;
        assert!(matches!(log.validate(), Err(Error::Format(_))));
    }

    #[test]
    fn noiseless_in_structure_data_is_recovered() {
        let model = truth();
        let data = dataset(&model, 6, 150, 1);
        let fit = identify(&data, &IdentificationConfig::default()).unwrap();
        assert!(fit.converged);
        for (p, q) in parameters(&fit.model()).iter().zip(parameters(&model)) {
            assert!(((p - q) / q).abs() < 1e-6, "{p} vs {q}");
        }
        assert!(fit.fit_id.aggregate > 99.9);
        let val = validate(&fit.model(), &dataset(&model, 6, 150, 2)).unwrap();
        assert!(val.aggregate > 99.0);
    }

    #[test]
    fn identification_is_scale_consistent() {
        let model = truth();
        let data = dataset(&model, 6, 150, 3);
        let scaled: Vec<Segment> = data
            .iter()
            .map(|s| Segment {
                e: s.e.iter().map(|v| v * 7.0).collect(),
                u: s.u.iter().map(|v| v * 7.0).collect(),
                ..s.clone()
            })
            .collect();
        let cfg = IdentificationConfig::default();
        let a = parameters(&identify(&data, &cfg).unwrap().model());
        let b = parameters(&identify(&scaled, &cfg).unwrap().model());
        for k in [2, 3, 6, 7] {
            assert!((a[k] - b[k]).abs() < 1e-6);
        }
        for k in [0, 1, 4, 5, 8, 9] {
            assert!((a[k] - b[k]).abs() < 1e-6 * a[k].abs().max(1.0));
        }
    }

    #[test]
    fn identification_is_deterministic() {
        let model = passive_reference_model();
        let mut data = dataset(&model, 4, 100, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for s in &mut data {
            for u in &mut s.u {
                *u += Vector2::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
            }
        }
        let cfg = IdentificationConfig {
            seed: 42,
            ..Default::default()
        };
        let a = identify(&data, &cfg).unwrap();
        let b = identify(&data, &cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn too_little_data_is_refused() {
        let data = dataset(&truth(), 1, 50, 5);
        assert!(matches!(
            identify(&data, &IdentificationConfig::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn zero_output_is_degenerate() {
        let mut data = dataset(&truth(), 2, 100, 6);
        for s in &mut data {
            s.u.iter_mut().for_each(|u| *u = Vector2::zeros());
        }
        assert!(matches!(
            identify(&data, &IdentificationConfig::default()),
            Err(Error::DegenerateReference)
        ));
    }

    #[test]
    fn unstable_candidates_are_not_simulated() {
        let unstable = TransferMatrix2x2::diagonal(DiagonalEntry::new([1.0, 1.0], [-1.0, 2.0]));
        let data = dataset(&truth(), 1, 20, 7);
        assert!(matches!(validate(&unstable, &data), Err(Error::UnstableModel(_))));
    }

    #[test]
    fn validating_on_the_identification_set_reproduces_fit_id() {
        let data = dataset(&truth(), 3, 100, 8);
        let fit = identify(&data, &IdentificationConfig::default()).unwrap();
        assert_eq!(validate(&fit.model(), &data).unwrap(), fit.fit_id);
    }

    #[test]
    fn fit_result_json_has_the_documented_keys() {
        let data = dataset(&truth(), 3, 100, 8);
        let fit = identify(&data, &IdentificationConfig::default()).unwrap();
        let v: serde_json::Value = serde_json::to_value(&fit).unwrap();
        for key in ["params", "fit_id", "converged", "restarts_used"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let back: FitResult = serde_json::from_value(v).unwrap();
        assert_eq!(back, fit);
    }
}
