//! Scenario configuration, the coupled closed-loop driver, trajectory files
//! and their invariant checks.
//!
//! One tick runs: operator command, saturation, filtered command `ω̃_h^s`
//! from `(R̄, R_l)`, leader velocity, stealthy network command, then a
//! simultaneous advance of bodies, `R̄` and `R_l`.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::analysis::{assumption_monitor, lemma1_monitor, EnergyLedger, EnergyRecord};
use crate::error::{Error, Result};
use crate::navigation::{
    align_z_axis, align_z_axis_from, human_filter_command, leader_velocity, LeaderState,
    QuasiAverageState, ReferenceState, SyncGains,
};
use crate::network::{
    assemble_command, demo_autonomous_law, step_network, with_rotations, CommandDecomposition, Graph,
    NetworkState,
};
use crate::operator::{
    passive_reference_model, OperatorContext, OperatorModel, OperatorModelFile, Operator,
    OperatorSignals, ScheduledCommand, ScriptedOperator, SyntheticOperator, ZeroOperator, OMEGA_MAX,
};
use crate::so3::{
    e3, exp_so3, step_rotation, step_rotation_spatial, Integrator, Rotation, UnitVector3, Vector3,
};

/// Largest angle between a random reference and the current heading.
pub const DEFAULT_MAX_REFERENCE_ANGLE_DEG: f64 = 85.0;
/// Default interval between random references.
pub const DEFAULT_TRIAL_PERIOD_S: f64 = 15.0;

fn default_dt() -> f64 {
    1.0 / 120.0
}
fn default_duration() -> f64 {
    180.0
}
fn default_n() -> usize {
    3
}
fn default_k_s() -> f64 {
    3.0
}
fn default_integrator() -> Integrator {
    Integrator::Rkmk4
}
fn default_period() -> f64 {
    DEFAULT_TRIAL_PERIOD_S
}
fn default_max_angle() -> f64 {
    DEFAULT_MAX_REFERENCE_ANGLE_DEG
}

/// Initial body attitudes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BodiesSpec {
    #[default]
    Identity,
    /// Independent random rotations with angle uniform in `[0, max_angle_rad]`.
    Random { max_angle_rad: f64 },
    Explicit { rotations: Vec<Rotation> },
}

/// When and where the reference moves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceSpec {
    /// New random heading every `period_s`, starting at t = 0.
    Random {
        #[serde(default = "default_period")]
        period_s: f64,
        #[serde(default = "default_max_angle")]
        max_angle_deg: f64,
    },
    /// A single heading applied at t = 0.
    Fixed { d_r: [f64; 3] },
    /// Headings or full rotations applied at given times.
    Explicit { changes: Vec<ReferenceChange> },
    /// Reference stays on the initial heading until changed at run time.
    Manual,
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        ReferenceSpec::Random {
            period_s: DEFAULT_TRIAL_PERIOD_S,
            max_angle_deg: DEFAULT_MAX_REFERENCE_ANGLE_DEG,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceChange {
    pub at_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_r: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_r: Option<Rotation>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorSpec {
    Zero,
    /// Built-in strictly passive model, see [`passive_reference_model`].
    #[default]
    PassiveReference,
    Synthetic { model: OperatorModelFile },
    SyntheticFile { path: PathBuf },
    Scripted { schedule: Vec<ScheduledCommand> },
    /// Commands arrive from a connected client; only valid for `serve`.
    Live,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum GraphSpec {
    Ring,
    Complete,
    Adjacency { neighbors: Vec<Vec<usize>> },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum AutonomousSpec {
    #[default]
    None,
    DemoConsensus { graph: GraphSpec, gain: f64 },
}

/// Everything needed to reproduce one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_duration")]
    pub duration_s: f64,
    #[serde(default = "default_k_s")]
    pub k_s: f64,
    #[serde(default)]
    pub bodies: BodiesSpec,
    /// Defaults to the minimal rotation taking `e_3` onto the initial `d̄`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quasi_average: Option<Rotation>,
    /// Defaults to the initial quasi-average.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leader: Option<Rotation>,
    #[serde(default)]
    pub reference: ReferenceSpec,
    #[serde(default)]
    pub operator: OperatorSpec,
    #[serde(default)]
    pub autonomous: AutonomousSpec,
    /// Defaults to RKMK4: a first-order step lets the autonomous command
    /// leak into `d̄` at O(dt²) per step.
    #[serde(default = "default_integrator")]
    pub integrator: Integrator,
    /// Human storage offset; estimated from the supply when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut text = String::new();
        File::open(path)?.read_to_string(&mut text)?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return bad(format!("duration_s must be positive, got {}", self.duration_s));
        }
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        if !(self.k_s > 0.0) {
            return bad(format!("k_s must be positive, got {}", self.k_s));
        }
        if let BodiesSpec::Explicit { rotations } = &self.bodies {
            if rotations.len() != self.n {
                return bad(format!("{} body rotations given for n = {}", rotations.len(), self.n));
            }
        }
        if let ReferenceSpec::Random { period_s, max_angle_deg } = &self.reference {
            if !(*period_s >= self.dt) {
                return bad(format!("reference period {period_s} shorter than dt"));
            }
            if !(*max_angle_deg > 0.0 && *max_angle_deg <= 180.0) {
                return bad(format!("max_angle_deg must lie in (0, 180], got {max_angle_deg}"));
            }
        }
        if let ReferenceSpec::Explicit { changes } = &self.reference {
            for c in changes {
                if c.d_r.is_some() == c.r_r.is_some() {
                    return bad(format!("reference change at {} needs exactly one of d_r, r_r", c.at_s));
                }
            }
        }
        if let Some(beta) = self.beta {
            if !(beta >= 0.0) {
                return bad(format!("beta must be nonnegative, got {beta}"));
            }
        }
        Ok(())
    }

    /// Number of steps; the record holds one more row than this.
    pub fn steps(&self) -> u64 {
        (self.duration_s / self.dt).round() as u64
    }
}

/// Uniform sample on the unit sphere.
pub fn sample_unit_sphere(rng: &mut impl Rng) -> UnitVector3 {
    loop {
        let v = Vector3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        if v.norm() > 1e-12 {
            return UnitVector3::new_normalize(v);
        }
    }
}

/// Uniform heading on the sphere, redrawn until it lies within `max_angle`
/// (radians) of `current`.
pub fn random_reference(rng: &mut impl Rng, current: &UnitVector3, max_angle: f64) -> UnitVector3 {
    let min_cos = max_angle.cos();
    loop {
        let d = sample_unit_sphere(rng);
        if d.dot(current) >= min_cos {
            return d;
        }
    }
}

fn random_rotation(rng: &mut impl Rng, max_angle: f64) -> Rotation {
    let axis = sample_unit_sphere(rng);
    let angle = rng.random_range(0.0..=max_angle);
    exp_so3(&(axis.into_inner() * angle))
}

/// Autonomous consensus law and its graph.
#[derive(Clone, Debug)]
pub struct AutonomousLaw {
    pub graph: Graph,
    pub gain: f64,
}

impl AutonomousLaw {
    pub fn raw(&self, net: &NetworkState) -> DVector<f64> {
        demo_autonomous_law(net, &self.graph, self.gain)
    }
}

/// Closed-loop state: network, quasi-average and leader.
#[derive(Clone, Debug)]
pub struct ClosedLoop {
    pub network: NetworkState,
    pub qa: QuasiAverageState,
    pub leader: LeaderState,
    pub gains: SyncGains,
    pub integrator: Integrator,
    pub autonomous: Option<AutonomousLaw>,
}

/// Signals evaluated on the current state for a held command.
#[derive(Clone, Debug)]
pub struct LoopCommands {
    pub omega_tilde: Vector3,
    pub omega_leader: Vector3,
    pub network: CommandDecomposition,
}

impl ClosedLoop {
    fn network_command(&self, net: &NetworkState, omega_tilde: &Vector3) -> Result<CommandDecomposition> {
        let raw = match &self.autonomous {
            Some(law) => law.raw(net),
            None => DVector::zeros(3 * net.len()),
        };
        assemble_command(net, omega_tilde, &raw)
    }

    pub fn commands(&self, omega_h_spatial: &Vector3) -> Result<LoopCommands> {
        let omega_tilde = human_filter_command(&self.qa, &self.leader, &self.gains);
        let omega_leader = leader_velocity(&self.leader, &self.qa, omega_h_spatial, &self.gains);
        let network = self.network_command(&self.network, &omega_tilde)?;
        Ok(LoopCommands {
            omega_tilde,
            omega_leader,
            network,
        })
    }

    /// Advances everything by `dt` with `ω_h^s` held in the spatial frame.
    pub fn step(&mut self, omega_h_spatial: &Vector3, dt: f64) -> Result<()> {
        match self.integrator {
            Integrator::LieEuler => {
                let cmd = self.commands(omega_h_spatial)?;
                self.network = step_network(&self.network, &cmd.network, dt)?;
                self.qa = QuasiAverageState::new(step_rotation_spatial(&self.qa.rotation, &cmd.omega_tilde, dt));
                self.leader = LeaderState::new(step_rotation(&self.leader.rotation, &cmd.omega_leader, dt));
            }
            Integrator::Rkmk4 => {
                let mut states = vec![self.qa.rotation, self.leader.rotation];
                states.extend(self.network.rotations().copied());
                let next = self.integrator.step(&states, dt, |x| {
                    let qa = QuasiAverageState::new(x[0]);
                    let leader = LeaderState::new(x[1]);
                    let net = with_rotations(&self.network, &x[2..])?;
                    let omega_tilde = human_filter_command(&qa, &leader, &self.gains);
                    let cmd = self.network_command(&net, &omega_tilde)?;
                    let mut xi = Vec::with_capacity(x.len());
                    xi.push(x[0].matrix().transpose() * omega_tilde);
                    xi.push(leader_velocity(&leader, &qa, omega_h_spatial, &self.gains));
                    xi.extend((0..net.len()).map(|i| cmd.body(i)));
                    Ok(xi)
                })?;
                self.network = with_rotations(&self.network, &next[2..])?;
                self.qa = QuasiAverageState::new(next[0]);
                self.leader = LeaderState::new(next[1]);
            }
        }
        Ok(())
    }
}

/// One tick of a trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub tick: u64,
    pub t: f64,
    pub trial_id: u32,
    pub bodies: Vec<Rotation>,
    pub r_bar: Rotation,
    pub r_l: Rotation,
    pub r_r: Rotation,
    pub d_bar: Vector3,
    pub d_l: Vector3,
    pub d_r: Vector3,
    pub omega_tilde: Vector3,
    pub omega_h_s: Vector3,
    pub omega_h_b: Vector3,
    pub error_e: Vector2<f64>,
    pub omega_a_norm: f64,
    pub energy: EnergyRecord,
    pub h_value: f64,
    pub on_boundary: bool,
    pub sym_rrl_min_eig: f64,
    pub positive_definite: bool,
}

/// Full per-tick history of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub n: usize,
    pub rows: Vec<TrajectoryRow>,
    /// Set when the run stopped early, e.g. on a degenerate average.
    pub aborted: Option<String>,
}

/// Drives a [`ClosedLoop`] with an operator and a reference schedule,
/// recording one row per tick.
pub struct Simulation {
    cfg: ScenarioConfig,
    state: ClosedLoop,
    reference: ReferenceState,
    operator: Box<dyn Operator>,
    rng: ChaCha8Rng,
    ledger: EnergyLedger,
    rows: Vec<TrajectoryRow>,
    tick: u64,
    trial_id: u32,
    pending: Option<Rotation>,
    changes: Vec<(u64, ReferenceChange)>,
    abort: Option<String>,
}

fn operator_from_spec(cfg: &ScenarioConfig) -> Result<Box<dyn Operator>> {
    let rate = 1.0 / cfg.dt;
    Ok(match &cfg.operator {
        OperatorSpec::Zero => Box::new(ZeroOperator),
        OperatorSpec::PassiveReference => {
            Box::new(SyntheticOperator::new(OperatorModel::new(passive_reference_model(), rate)?))
        }
        OperatorSpec::Synthetic { model } => Box::new(SyntheticOperator::new(OperatorModel::from_file(model)?)),
        OperatorSpec::SyntheticFile { path } => {
            Box::new(SyntheticOperator::new(OperatorModel::from_file(&OperatorModelFile::load(path)?)?))
        }
        OperatorSpec::Scripted { schedule } => Box::new(ScriptedOperator::new(schedule.clone())?),
        OperatorSpec::Live => {
            return Err(Error::InvalidConfig(
                "live operator needs a session server; use a scripted or synthetic operator".into(),
            ))
        }
    })
}

impl Simulation {
    /// Builds the run with the operator described by the config.
    pub fn from_config(cfg: ScenarioConfig) -> Result<Self> {
        let operator = operator_from_spec(&cfg)?;
        Self::with_operator(cfg, operator)
    }

    /// Builds the run with an externally supplied operator.
    pub fn with_operator(cfg: ScenarioConfig, operator: Box<dyn Operator>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let rotations = match &cfg.bodies {
            BodiesSpec::Identity => vec![Rotation::identity(); cfg.n],
            BodiesSpec::Random { max_angle_rad } => {
                (0..cfg.n).map(|_| random_rotation(&mut rng, *max_angle_rad)).collect()
            }
            BodiesSpec::Explicit { rotations } => rotations.clone(),
        };
        let network = NetworkState::new(rotations)?;
        let qa = cfg.quasi_average.unwrap_or_else(|| align_z_axis(&network.average()));
        let leader = cfg.leader.unwrap_or(qa);
        let autonomous = match &cfg.autonomous {
            AutonomousSpec::None => None,
            AutonomousSpec::DemoConsensus { graph, gain } => Some(AutonomousLaw {
                graph: match graph {
                    GraphSpec::Ring => Graph::ring(cfg.n),
                    GraphSpec::Complete => Graph::complete(cfg.n),
                    GraphSpec::Adjacency { neighbors } => {
                        let g = Graph::new(neighbors.clone())?;
                        if g.len() != cfg.n {
                            return Err(Error::InvalidConfig(format!(
                                "graph has {} nodes for n = {}",
                                g.len(),
                                cfg.n
                            )));
                        }
                        g
                    }
                },
                gain: *gain,
            }),
        };
        let changes = match &cfg.reference {
            ReferenceSpec::Explicit { changes } => {
                let mut c: Vec<(u64, ReferenceChange)> = changes
                    .iter()
                    .map(|c| ((c.at_s / cfg.dt).round().max(0.0) as u64, c.clone()))
                    .collect();
                c.sort_by_key(|(k, _)| *k);
                c
            }
            _ => Vec::new(),
        };
        let state = ClosedLoop {
            network,
            qa: QuasiAverageState::new(qa),
            leader: LeaderState::new(leader),
            gains: SyncGains::new(cfg.k_s)?,
            integrator: cfg.integrator,
            autonomous,
        };
        Ok(Simulation {
            reference: ReferenceState::new(qa),
            ledger: EnergyLedger::new(cfg.beta),
            cfg,
            state,
            operator,
            rng,
            rows: Vec::new(),
            tick: 0,
            trial_id: 0,
            pending: None,
            changes,
            abort: None,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn state(&self) -> &ClosedLoop {
        &self.state
    }

    pub fn reference(&self) -> &ReferenceState {
        &self.reference
    }

    pub fn tick_count(&self) -> u64 {
        self.tick
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 * self.cfg.dt
    }

    pub fn trial_id(&self) -> u32 {
        self.trial_id
    }

    pub fn rows(&self) -> &[TrajectoryRow] {
        &self.rows
    }

    /// Queues a new reference heading; it takes effect at the next tick.
    pub fn set_reference(&mut self, d_r: &UnitVector3) {
        self.pending = Some(align_z_axis_from(&self.state.qa.rotation, d_r));
    }

    /// Queues a new reference rotation; it takes effect at the next tick.
    pub fn set_reference_rotation(&mut self, r_r: Rotation) {
        self.pending = Some(r_r);
    }

    fn scheduled_reference(&mut self) -> Result<Option<Rotation>> {
        let k = self.tick;
        let qa = self.state.qa.rotation;
        Ok(match &self.cfg.reference {
            ReferenceSpec::Random { period_s, max_angle_deg } => {
                let period = (period_s / self.cfg.dt).round().max(1.0) as u64;
                if k.is_multiple_of(period) {
                    let d = random_reference(&mut self.rng, &self.state.network.average(), max_angle_deg.to_radians());
                    Some(align_z_axis_from(&qa, &d))
                } else {
                    None
                }
            }
            ReferenceSpec::Fixed { d_r } if k == 0 => {
                let d = UnitVector3::try_new(Vector3::from(*d_r), 1e-12)
                    .ok_or_else(|| Error::InvalidConfig("reference heading is zero".into()))?;
                Some(align_z_axis_from(&qa, &d))
            }
            ReferenceSpec::Explicit { .. } => {
                let mut out = None;
                while let Some((at, change)) = self.changes.first() {
                    if *at > k {
                        break;
                    }
                    out = Some(match (change.r_r, change.d_r) {
                        (Some(r), _) => r,
                        (None, Some(d)) => {
                            let d = UnitVector3::try_new(Vector3::from(d), 1e-12)
                                .ok_or_else(|| Error::InvalidConfig("reference heading is zero".into()))?;
                            align_z_axis_from(&qa, &d)
                        }
                        (None, None) => unreachable!("validated"),
                    });
                    self.changes.remove(0);
                }
                out
            }
            _ => None,
        })
    }

    /// Records the current state, then advances one step.
    pub fn tick(&mut self) -> Result<&TrajectoryRow> {
        let dt = self.cfg.dt;
        let t = self.time();
        let scheduled = self.scheduled_reference()?;
        if let Some(r) = self.pending.take().or(scheduled) {
            self.reference = ReferenceState::new(r);
            if self.tick > 0 {
                self.trial_id += 1;
                self.operator.on_new_trial();
            }
        }
        let ctx = OperatorContext {
            tick: self.tick,
            t,
            dt,
            leader: &self.state.leader,
            reference: &self.reference,
        };
        let signals: OperatorSignals = self.operator.command(&ctx)?;
        let omega_h_s = signals.omega_h_spatial;
        let cmd = self.state.commands(&omega_h_s)?;
        self.ledger.tick(
            t,
            self.trial_id,
            &self.state.qa,
            &self.state.leader,
            &self.reference,
            &omega_h_s,
            &self.state.gains,
            dt,
        );
        let lemma = lemma1_monitor(&self.state.qa, &self.reference);
        let assumption = assumption_monitor(&self.state.leader, &self.reference);
        let energy = *self.ledger.last().expect("ledger ticked");
        self.rows.push(TrajectoryRow {
            tick: self.tick,
            t,
            trial_id: self.trial_id,
            bodies: self.state.network.rotations().copied().collect(),
            r_bar: self.state.qa.rotation,
            r_l: self.state.leader.rotation,
            r_r: self.reference.rotation,
            d_bar: self.state.network.average().into_inner(),
            d_l: self.state.leader.heading(),
            d_r: self.reference.heading(),
            omega_tilde: cmd.omega_tilde,
            omega_h_s,
            omega_h_b: signals.omega_h_body,
            error_e: signals.error_e,
            omega_a_norm: cmd.network.omega_a.norm(),
            energy,
            h_value: lemma.h_value,
            on_boundary: lemma.on_boundary,
            sym_rrl_min_eig: assumption.sym_rrl_min_eig,
            positive_definite: assumption.positive_definite,
        });
        self.tick += 1;
        self.state.step(&omega_h_s, dt)?;
        Ok(self.rows.last().expect("row just pushed"))
    }

    /// Consumes the run; energy rows are finalized with the effective β.
    pub fn finish(self, aborted: Option<String>) -> TrajectoryRecord {
        let energy = self.ledger.records();
        let mut rows = self.rows;
        for (row, e) in rows.iter_mut().zip(energy) {
            row.energy = e;
        }
        TrajectoryRecord {
            n: self.cfg.n,
            rows,
            aborted,
        }
    }
}

/// Runs a scenario to completion. A degenerate average stops the run and
/// returns the partial record with [`TrajectoryRecord::aborted`] set.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<TrajectoryRecord> {
    let mut sim = Simulation::from_config(cfg.clone())?;
    run_to_end(&mut sim)?;
    Ok(sim_finish(sim))
}

/// Same as [`run_scenario`] with a caller-supplied operator.
pub fn run_scenario_with(cfg: &ScenarioConfig, operator: Box<dyn Operator>) -> Result<TrajectoryRecord> {
    let mut sim = Simulation::with_operator(cfg.clone(), operator)?;
    run_to_end(&mut sim)?;
    Ok(sim_finish(sim))
}

fn run_to_end(sim: &mut Simulation) -> Result<()> {
    let steps = sim.config().steps();
    for _ in 0..=steps {
        match sim.tick() {
            Ok(_) => {}
            Err(Error::DegenerateAverage(norm)) => {
                sim.abort = Some(format!("degenerate average (‖Σd‖ = {norm:e}) at t = {}", sim.time()));
                return Ok(());
            }
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

fn sim_finish(mut sim: Simulation) -> TrajectoryRecord {
    let aborted = sim.abort.take();
    sim.finish(aborted)
}

const ROT_SUFFIX: [&str; 9] = ["00", "01", "02", "10", "11", "12", "20", "21", "22"];
const XYZ: [&str; 3] = ["x", "y", "z"];

fn rotation_columns(prefix: &str, out: &mut Vec<String>) {
    out.extend(ROT_SUFFIX.iter().map(|s| format!("{prefix}_{s}")));
}

fn vector_columns(prefix: &str, out: &mut Vec<String>) {
    out.extend(XYZ.iter().map(|s| format!("{prefix}_{s}")));
}

/// Column names of a trajectory file for `n` bodies.
pub fn trajectory_header(n: usize) -> Vec<String> {
    let mut h = vec!["tick".to_string(), "t".into(), "trial_id".into()];
    for i in 1..=n {
        rotation_columns(&format!("r{i}"), &mut h);
    }
    rotation_columns("r_bar", &mut h);
    rotation_columns("r_l", &mut h);
    rotation_columns("r_r", &mut h);
    for p in ["d_bar", "d_l", "d_r", "omega_tilde", "omega_h_s", "omega_h_b"] {
        vector_columns(p, &mut h);
    }
    h.extend(
        [
            "e_1", "e_2", "omega_a_norm", "s_r", "s_rl", "supply", "s_h", "v", "bound", "h",
            "on_boundary", "sym_rrl_min_eig", "positive_definite",
        ]
        .map(String::from),
    );
    h
}

/// Exact decimal form: 17 significant digits round-trip every `f64`.
pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn push_rotation(r: &Rotation, out: &mut Vec<String>) {
    out.extend(r.matrix().transpose().iter().map(|x| fmt_f64(*x)));
}

fn push_vector(v: &Vector3, out: &mut Vec<String>) {
    out.extend(v.iter().map(|x| fmt_f64(*x)));
}

impl TrajectoryRow {
    fn to_fields(&self) -> Vec<String> {
        let mut f = vec![self.tick.to_string(), fmt_f64(self.t), self.trial_id.to_string()];
        for r in self.bodies.iter().chain([&self.r_bar, &self.r_l, &self.r_r]) {
            push_rotation(r, &mut f);
        }
        for v in [
            &self.d_bar,
            &self.d_l,
            &self.d_r,
            &self.omega_tilde,
            &self.omega_h_s,
            &self.omega_h_b,
        ] {
            push_vector(v, &mut f);
        }
        let e = &self.energy;
        f.extend(
            [
                self.error_e.x,
                self.error_e.y,
                self.omega_a_norm,
                e.s_r,
                e.s_rl,
                e.supply,
                e.s_h,
                e.v,
                e.bound,
                self.h_value,
            ]
            .map(fmt_f64),
        );
        f.push(u8::from(self.on_boundary).to_string());
        f.push(fmt_f64(self.sym_rrl_min_eig));
        f.push(u8::from(self.positive_definite).to_string());
        f
    }
}

struct FieldCursor<'a> {
    record: &'a csv::StringRecord,
    pos: usize,
    line: u64,
}

impl FieldCursor<'_> {
    fn next_str(&mut self) -> Result<&str> {
        let s = self
            .record
            .get(self.pos)
            .ok_or_else(|| Error::Format(format!("line {}: missing column {}", self.line, self.pos)))?;
        self.pos += 1;
        Ok(s)
    }

    fn f64(&mut self) -> Result<f64> {
        let line = self.line;
        let s = self.next_str()?;
        s.trim()
            .parse()
            .map_err(|_| Error::Format(format!("line {line}: bad number {s:?}")))
    }

    fn int<T: std::str::FromStr>(&mut self) -> Result<T> {
        let line = self.line;
        let s = self.next_str()?;
        s.trim()
            .parse()
            .map_err(|_| Error::Format(format!("line {line}: bad integer {s:?}")))
    }

    fn flag(&mut self) -> Result<bool> {
        Ok(self.int::<u8>()? != 0)
    }

    fn vector(&mut self) -> Result<Vector3> {
        Ok(Vector3::new(self.f64()?, self.f64()?, self.f64()?))
    }

    fn rotation(&mut self) -> Result<Rotation> {
        let mut rows = [0.0; 9];
        for x in &mut rows {
            *x = self.f64()?;
        }
        Ok(Rotation::from_matrix_unchecked(crate::so3::Matrix3::from_row_slice(&rows)))
    }
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(trajectory_header(self.n))?;
        for row in &self.rows {
            w.write_record(row.to_fields())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(File::create(path)?)
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        let n = header.iter().filter(|h| h.ends_with("_00") && h.starts_with('r') && h[1..h.len() - 3].parse::<usize>().is_ok()).count();
        let expected = trajectory_header(n);
        if header.iter().ne(expected.iter().map(String::as_str)) {
            return Err(Error::Format("trajectory header does not match the expected columns".into()));
        }
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let mut c = FieldCursor {
                record: &rec,
                pos: 0,
                line: i as u64 + 2,
            };
            let tick = c.int()?;
            let t = c.f64()?;
            let trial_id = c.int()?;
            let bodies = (0..n).map(|_| c.rotation()).collect::<Result<Vec<_>>>()?;
            let r_bar = c.rotation()?;
            let r_l = c.rotation()?;
            let r_r = c.rotation()?;
            let d_bar = c.vector()?;
            let d_l = c.vector()?;
            let d_r = c.vector()?;
            let omega_tilde = c.vector()?;
            let omega_h_s = c.vector()?;
            let omega_h_b = c.vector()?;
            let error_e = Vector2::new(c.f64()?, c.f64()?);
            let omega_a_norm = c.f64()?;
            let energy = EnergyRecord {
                t,
                trial_id,
                s_r: c.f64()?,
                s_rl: c.f64()?,
                supply: c.f64()?,
                s_h: c.f64()?,
                v: c.f64()?,
                bound: c.f64()?,
            };
            rows.push(TrajectoryRow {
                tick,
                t,
                trial_id,
                bodies,
                r_bar,
                r_l,
                r_r,
                d_bar,
                d_l,
                d_r,
                omega_tilde,
                omega_h_s,
                omega_h_b,
                error_e,
                omega_a_norm,
                energy,
                h_value: c.f64()?,
                on_boundary: c.flag()?,
                sym_rrl_min_eig: c.f64()?,
                positive_definite: c.flag()?,
            });
        }
        Ok(TrajectoryRecord { n, rows, aborted: None })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(File::open(path)?)
    }

    /// `d̄` per tick as recorded.
    pub fn d_bar_series(&self) -> Vec<Vector3> {
        self.rows.iter().map(|r| r.d_bar).collect()
    }
}

/// Tolerances used by [`verify_invariants`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerifyOptions {
    pub z_axis_tol: f64,
    pub lemma1_tol: f64,
    pub orthonormality_tol: f64,
    pub stealth_tol: f64,
    /// Constant part of the per-step energy slack.
    pub energy_slack: f64,
    /// Rate part of the per-step energy slack, multiplied by `dt`.
    pub energy_slack_rate: f64,
    /// When set, every trial must settle with ‖d̄ − d_r‖ below
    /// `objective_tol` within `objective_window_s` of its start.
    pub require_objective: bool,
    pub objective_tol: f64,
    pub objective_window_s: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            z_axis_tol: 1e-4,
            lemma1_tol: 1e-9,
            orthonormality_tol: 1e-9,
            stealth_tol: 1e-5,
            energy_slack: 1e-6,
            energy_slack_rate: ENERGY_SLACK_RATE,
            require_objective: false,
            objective_tol: 1e-3,
            objective_window_s: 30.0,
        }
    }
}

/// Rate constant `C` in the per-step energy slack `1e-6 + C·dt`.
pub const ENERGY_SLACK_RATE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InvariantCheck {
    pub name: String,
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub worst: f64,
    pub threshold: f64,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct InvariantReport {
    pub checks: Vec<InvariantCheck>,
}

impl InvariantReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&InvariantCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl std::fmt::Display for InvariantReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{:<20} {}  worst={:.3e}  limit={:.3e}  {}",
                c.name,
                if c.passed { "PASS" } else { "FAIL" },
                c.worst,
                c.threshold,
                c.detail
            )?;
        }
        Ok(())
    }
}

/// Trial ranges as `(first_row, end_row)`.
fn trial_ranges(rows: &[TrajectoryRow]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=rows.len() {
        if i == rows.len() || rows[i].trial_id != rows[start].trial_id {
            out.push((start, i));
            start = i;
        }
    }
    out
}

fn check(name: &str, worst: f64, threshold: f64, detail: String) -> InvariantCheck {
    InvariantCheck {
        name: name.into(),
        passed: worst <= threshold,
        worst,
        threshold,
        detail,
    }
}

fn average_heading(bodies: &[Rotation]) -> Vector3 {
    let sum = bodies.iter().fold(Vector3::zeros(), |acc, r| acc + r.z_axis());
    sum.normalize()
}

/// Checks a record against the closed-loop invariants. `paired` is a run of
/// the same scenario without the autonomous law, used for stealthiness.
pub fn verify_invariants(
    record: &TrajectoryRecord,
    paired: Option<&TrajectoryRecord>,
    opts: &VerifyOptions,
) -> InvariantReport {
    let rows = &record.rows;
    let mut checks = Vec::new();
    let dt = if rows.len() >= 2 { rows[1].t - rows[0].t } else { 0.0 };

    let ortho = rows
        .iter()
        .flat_map(|r| r.bodies.iter().chain([&r.r_bar, &r.r_l, &r.r_r]))
        .map(Rotation::orthonormality_error)
        .fold(0.0, f64::max);
    checks.push(check("orthonormality", ortho, opts.orthonormality_tol, String::new()));

    let (z_worst, z_tick) = rows
        .iter()
        .map(|r| ((r.r_bar * e3() - average_heading(&r.bodies)).norm(), r.tick))
        .fold((0.0, 0), |acc, x| if x.0 > acc.0 { x } else { acc });
    checks.push(check("z_axis_tracking", z_worst, opts.z_axis_tol, format!("at tick {z_tick}")));

    let sat = rows.iter().map(|r| r.omega_h_s.norm()).fold(0.0, f64::max);
    checks.push(check("saturation", sat, OMEGA_MAX * (1.0 + 1e-12), String::new()));

    // Invariance of tr(R̄_r) ≥ 1 and the energy inequality presuppose an
    // admissible start and the positive-definiteness assumption; other
    // trials are reported only.
    let trials = trial_ranges(rows);
    let mut lemma_worst: f64 = 0.0;
    let mut energy_worst: f64 = f64::NEG_INFINITY;
    let mut excluded = Vec::new();
    for &(a, b) in &trials {
        let seg = &rows[a..b];
        if seg[0].h_value < 0.0 || seg.iter().any(|r| !r.positive_definite) {
            excluded.push(seg[0].trial_id);
            continue;
        }
        for r in seg {
            lemma_worst = lemma_worst.max(-r.h_value);
        }
        for w in seg.windows(2) {
            energy_worst = energy_worst.max(w[1].energy.v - w[0].energy.v);
        }
    }
    let excluded_note = if excluded.is_empty() {
        String::new()
    } else {
        format!("excluded trials {excluded:?}")
    };
    checks.push(check(
        "lemma1",
        lemma_worst,
        opts.lemma1_tol,
        format!("{} trials checked {}", trials.len() - excluded.len(), excluded_note),
    ));
    let slack = opts.energy_slack + opts.energy_slack_rate * dt;
    checks.push(check(
        "energy_nonincreasing",
        energy_worst.max(0.0),
        slack,
        format!("max step increase of V {energy_worst:.3e} {excluded_note}"),
    ));

    if let Some(other) = paired {
        let (worst, detail) = if other.rows.len() != rows.len() {
            (
                f64::INFINITY,
                format!("paired record has {} rows, expected {}", other.rows.len(), rows.len()),
            )
        } else {
            let w = rows
                .iter()
                .zip(&other.rows)
                .map(|(a, b)| (a.d_bar - b.d_bar).norm())
                .fold(0.0, f64::max);
            (w, String::new())
        };
        checks.push(check("stealthiness", worst, opts.stealth_tol, detail));
    }

    if opts.require_objective {
        let mut worst_settle: f64 = 0.0;
        let mut unsettled = Vec::new();
        let mut truncated = None;
        for (k, &(a, b)) in trials.iter().enumerate() {
            let seg = &rows[a..b];
            let last_bad = seg
                .iter()
                .rposition(|r| (r.d_bar - r.d_r).norm() >= opts.objective_tol);
            let settle = match last_bad {
                None => 0.0,
                Some(i) if i + 1 < seg.len() => seg[i + 1].t - seg[0].t,
                // The run may end before the last trial had its full window.
                Some(_) if k + 1 == trials.len() && seg[seg.len() - 1].t - seg[0].t < opts.objective_window_s => {
                    truncated = Some(seg[0].trial_id);
                    0.0
                }
                Some(_) => {
                    unsettled.push(seg[0].trial_id);
                    f64::INFINITY
                }
            };
            worst_settle = worst_settle.max(settle);
        }
        checks.push(check(
            "objective",
            worst_settle,
            opts.objective_window_s,
            match (unsettled.is_empty(), truncated) {
                (true, None) => "worst settling time in seconds".into(),
                (true, Some(id)) => format!("worst settling time in seconds; trial {id} cut short by the run end"),
                (false, _) => format!("unsettled trials {unsettled:?}"),
            },
        ));
    }

    InvariantReport { checks }
}

/// Runs scenarios in parallel on `jobs` workers; results keep input order.
pub fn run_batch(configs: &[ScenarioConfig], jobs: usize) -> Result<Vec<Result<TrajectoryRecord>>> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(pool.install(|| configs.par_iter().map(run_scenario).collect()))
}
