//! Live teleoperation session: wire messages, the latest-command mailbox,
//! zero-order hold with timeout, and session export and replay.
//!
//! The network layer deposits commands and events; the tick loop owns the
//! [`Session`] and never waits on the network.

use std::mem;
use std::sync::{Arc, Mutex};

use nalgebra::{Quaternion, Rotation3, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operator::{
    compute_error, signals_from_spatial, teleop_command_map, Operator, OperatorContext, OperatorSignals,
    ScheduledCommand, K_OMEGA,
};
use crate::sim::{
    OperatorSpec, ReferenceChange, ReferenceSpec, ScenarioConfig, Simulation, TrajectoryRecord, TrajectoryRow,
};
use crate::so3::{Rotation, UnitVector3, Vector3};
use crate::sysid::SessionLog;

pub const WIRE_VERSION: u32 = 1;
/// A command older than this is no longer applied.
pub const COMMAND_TIMEOUT_S: f64 = 0.25;
pub const STREAM_RATE_HZ: f64 = 20.0;
/// Allowed deviation of a wire quaternion from unit norm.
pub const QUAT_NORM_TOL: f64 = 1e-6;

/// Client-to-server messages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Command { v: u32, seq: u64, omega_h_s: [f64; 3] },
    /// Controller attitude when the trigger was pressed, `[w, x, y, z]`.
    Grab { v: u32, r0_quat: [f64; 4] },
    /// Current controller attitude, `[w, x, y, z]`.
    Pose { v: u32, rt_quat: [f64; 4] },
    PressStart { v: u32 },
    SetReference { v: u32, d_r: [f64; 3] },
}

impl ClientMessage {
    /// Parses and checks version and finiteness.
    pub fn parse(text: &str) -> Result<Self> {
        let msg: ClientMessage = serde_json::from_str(text)?;
        let (v, values): (u32, Vec<f64>) = match &msg {
            ClientMessage::Command { v, omega_h_s, .. } => (*v, omega_h_s.to_vec()),
            ClientMessage::Grab { v, r0_quat } => (*v, r0_quat.to_vec()),
            ClientMessage::Pose { v, rt_quat } => (*v, rt_quat.to_vec()),
            ClientMessage::PressStart { v } => (*v, Vec::new()),
            ClientMessage::SetReference { v, d_r } => (*v, d_r.to_vec()),
        };
        if v != WIRE_VERSION {
            return Err(Error::Format(format!("unsupported message version {v}")));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::Format("non-finite value in message".into()));
        }
        Ok(msg)
    }
}

/// Server-to-client messages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ServerMessage {
    State {
        v: u32,
        t: f64,
        tick: u64,
        d_l: [f64; 3],
        d_r: [f64; 3],
        d_bar: [f64; 3],
        #[serde(rename = "R_l_quat")]
        r_l_quat: [f64; 4],
        bodies_quat: Vec<[f64; 4]>,
        error_norm: f64,
        trial_id: u32,
    },
    Error {
        v: u32,
        message: String,
    },
}

impl ServerMessage {
    pub fn error(message: impl Into<String>) -> Self {
        ServerMessage::Error {
            v: WIRE_VERSION,
            message: message.into(),
        }
    }

    pub fn state(row: &TrajectoryRow) -> Self {
        ServerMessage::State {
            v: WIRE_VERSION,
            t: row.t,
            tick: row.tick,
            d_l: row.d_l.into(),
            d_r: row.d_r.into(),
            d_bar: row.d_bar.into(),
            r_l_quat: rotation_to_quat(&row.r_l),
            bodies_quat: row.bodies.iter().map(rotation_to_quat).collect(),
            error_norm: row.error_e.norm(),
            trial_id: row.trial_id,
        }
    }
}

/// Unit quaternion `[w, x, y, z]` with `w ≥ 0`.
pub fn rotation_to_quat(r: &Rotation) -> [f64; 4] {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r.matrix()));
    let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
    [q.w, q.i, q.j, q.k]
}

/// Rotation of a wire quaternion `[w, x, y, z]`, which must be unit within
/// [`QUAT_NORM_TOL`].
pub fn quat_to_rotation(q: &[f64; 4]) -> Result<Rotation> {
    let raw = Quaternion::new(q[0], q[1], q[2], q[3]);
    let norm = raw.norm();
    if !norm.is_finite() || (norm - 1.0).abs() > QUAT_NORM_TOL {
        return Err(Error::NotUnit(norm));
    }
    let unit = UnitQuaternion::from_quaternion(raw);
    Ok(Rotation::renormalized(*unit.to_rotation_matrix().matrix()))
}

/// Latest command deposited by the connection handler.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PendingCommand {
    /// Strictly increasing across deposits.
    pub stamp: u64,
    pub omega_h_s: Vector3,
}

/// Discrete events that must not be overwritten.
#[derive(Clone, Debug, PartialEq)]
pub enum SessionEvent {
    PressStart,
    SetReference(UnitVector3),
}

/// Handoff between the network side and the tick loop: a single-slot,
/// last-writer-wins command mailbox plus an event queue.
#[derive(Debug, Default)]
pub struct SessionInbox {
    command: Mutex<Option<PendingCommand>>,
    events: Mutex<Vec<SessionEvent>>,
    stamp: Mutex<u64>,
}

impl SessionInbox {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_command(&self, omega_h_s: Vector3) {
        let mut stamp = self.stamp.lock().expect("inbox lock");
        *stamp += 1;
        *self.command.lock().expect("inbox lock") = Some(PendingCommand {
            stamp: *stamp,
            omega_h_s,
        });
    }

    pub fn push_event(&self, event: SessionEvent) {
        self.events.lock().expect("inbox lock").push(event);
    }

    fn take(&self) -> (Option<PendingCommand>, Vec<SessionEvent>) {
        let command = self.command.lock().expect("inbox lock").take();
        let events = mem::take(&mut *self.events.lock().expect("inbox lock"));
        (command, events)
    }
}

/// Per-connection state for translating client messages into inbox entries.
#[derive(Clone, Debug, Default)]
pub struct ClientTranslator {
    last_seq: Option<u64>,
    grab: Option<Rotation>,
}

impl ClientTranslator {
    /// Applies one parsed message to the inbox.
    pub fn apply(&mut self, msg: &ClientMessage, inbox: &SessionInbox) -> Result<()> {
        match msg {
            ClientMessage::Command { seq, omega_h_s, .. } => {
                if self.last_seq.is_some_and(|last| *seq <= last) {
                    return Err(Error::InvalidArgument(format!("stale command sequence number {seq}")));
                }
                self.last_seq = Some(*seq);
                inbox.put_command(Vector3::from(*omega_h_s));
            }
            ClientMessage::Grab { r0_quat, .. } => {
                self.grab = Some(quat_to_rotation(r0_quat)?);
            }
            ClientMessage::Pose { rt_quat, .. } => {
                let r0 = self
                    .grab
                    .ok_or_else(|| Error::InvalidArgument("pose received before grab".into()))?;
                let rt = quat_to_rotation(rt_quat)?;
                inbox.put_command(teleop_command_map(&rt, &r0, K_OMEGA));
            }
            ClientMessage::PressStart { .. } => inbox.push_event(SessionEvent::PressStart),
            ClientMessage::SetReference { d_r, .. } => {
                let d = UnitVector3::try_new(Vector3::from(*d_r), 1e-12)
                    .ok_or_else(|| Error::InvalidArgument("reference heading is zero".into()))?;
                inbox.push_event(SessionEvent::SetReference(d));
            }
        }
        Ok(())
    }
}

/// Operator whose command is written by the session before every tick.
struct HeldOperator {
    command: Arc<Mutex<Vector3>>,
}

impl Operator for HeldOperator {
    fn command(&mut self, ctx: &OperatorContext<'_>) -> Result<OperatorSignals> {
        let w = *self.command.lock().expect("held command lock");
        Ok(signals_from_spatial(compute_error(ctx.leader, ctx.reference), &w, ctx.leader))
    }
}

/// Closed loop driven by live commands, with its recording.
pub struct Session {
    sim: Simulation,
    held: Arc<Mutex<Vector3>>,
    last_stamp: u64,
    last_command: Vector3,
    fresh_tick: Option<u64>,
    start_pressed: bool,
    pending_gap: bool,
    flags: Vec<(bool, bool)>,
}

impl Session {
    pub fn new(cfg: ScenarioConfig) -> Result<Self> {
        let held = Arc::new(Mutex::new(Vector3::zeros()));
        let sim = Simulation::with_operator(cfg, Box::new(HeldOperator { command: held.clone() }))?;
        Ok(Session {
            sim,
            held,
            last_stamp: 0,
            last_command: Vector3::zeros(),
            fresh_tick: None,
            start_pressed: false,
            pending_gap: false,
            flags: Vec::new(),
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        self.sim.config()
    }

    pub fn simulation(&self) -> &Simulation {
        &self.sim
    }

    pub fn rows(&self) -> &[TrajectoryRow] {
        self.sim.rows()
    }

    pub fn tick_count(&self) -> u64 {
        self.sim.tick_count()
    }

    /// Marks that ticks were dropped before the next recorded row.
    pub fn mark_gap(&mut self) {
        self.pending_gap = true;
    }

    /// Command that the next tick will apply, before saturation.
    pub fn applied_command(&self) -> Vector3 {
        let dt = self.sim.config().dt;
        match self.fresh_tick {
            Some(k) if (self.sim.tick_count() - k) as f64 * dt <= COMMAND_TIMEOUT_S => self.last_command,
            _ => Vector3::zeros(),
        }
    }

    /// Drains the inbox, applies the held command and advances one step.
    pub fn tick(&mut self, inbox: &SessionInbox) -> Result<&TrajectoryRow> {
        let (command, events) = inbox.take();
        let mut pressed_since_reference = false;
        for event in events {
            match event {
                SessionEvent::PressStart => {
                    self.start_pressed = true;
                    pressed_since_reference = true;
                }
                SessionEvent::SetReference(d) => {
                    self.sim.set_reference(&d);
                    pressed_since_reference = false;
                }
            }
        }
        if let Some(c) = command.filter(|c| c.stamp > self.last_stamp) {
            self.last_stamp = c.stamp;
            self.last_command = c.omega_h_s;
            self.fresh_tick = Some(self.sim.tick_count());
        }
        *self.held.lock().expect("held command lock") = self.applied_command();
        let trial_before = self.sim.trial_id();
        let started = self.sim.tick_count() > 0;
        let gap = mem::take(&mut self.pending_gap);
        let row = self.sim.tick()?;
        if started && row.trial_id != trial_before {
            self.start_pressed = pressed_since_reference;
        }
        self.flags.push((self.start_pressed, gap));
        Ok(self.sim.rows().last().expect("row just recorded"))
    }

    /// Recorded session in the identification log format.
    pub fn export(&self) -> Result<SessionLog> {
        if self.sim.rows().is_empty() {
            return Err(Error::InsufficientData("session has no ticks".into()));
        }
        let flags = &self.flags;
        SessionLog::from_rows(self.sim.rows(), 1.0 / self.sim.config().dt, |i| flags[i].0, |i| flags[i].1)
    }

    /// Recorded trajectory so far.
    pub fn trajectory(&self) -> TrajectoryRecord {
        TrajectoryRecord {
            n: self.sim.config().n,
            rows: self.sim.rows().to_vec(),
            aborted: None,
        }
    }
}

/// Scenario that plays a recorded session back through a scripted operator:
/// the logged commands tick by tick, and the logged reference rotations at
/// each trial start.
pub fn replay_config(base: &ScenarioConfig, log: &SessionLog) -> Result<ScenarioConfig> {
    if log.rows.len() < 2 {
        return Err(Error::InsufficientData("replay needs at least two logged ticks".into()));
    }
    let dt = base.dt;
    if (log.rate_hz * dt - 1.0).abs() > 1e-9 {
        return Err(Error::RateMismatch {
            model_hz: log.rate_hz,
            step_hz: 1.0 / dt,
        });
    }
    let schedule = log
        .rows
        .iter()
        .enumerate()
        .map(|(k, r)| ScheduledCommand {
            start: k as f64 * dt,
            end: (k + 1) as f64 * dt,
            omega_h_s: r.omega_h_s.into(),
        })
        .collect();
    let mut changes = Vec::new();
    for (k, r) in log.rows.iter().enumerate() {
        if k == 0 || r.trial_id != log.rows[k - 1].trial_id {
            changes.push(ReferenceChange {
                at_s: k as f64 * dt,
                d_r: None,
                r_r: Some(r.r_r),
            });
        }
    }
    Ok(ScenarioConfig {
        duration_s: (log.rows.len() - 1) as f64 * dt,
        reference: ReferenceSpec::Explicit { changes },
        operator: OperatorSpec::Scripted { schedule },
        ..base.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::run_scenario;
    use crate::so3::exp_so3;
    use crate::sysid::{preprocess, IdentificationConfig};
    use proptest::prelude::*;

    fn live_cfg() -> ScenarioConfig {
        ScenarioConfig {
            operator: OperatorSpec::Live,
            reference: ReferenceSpec::Manual,
            duration_s: 10.0,
            ..Default::default()
        }
    }

    #[test]
    fn client_messages_parse_and_validate() {
        let m = ClientMessage::parse(r#"{"type":"command","v":1,"seq":3,"omega_h_s":[0.1,0,0]}"#).unwrap();
        assert_eq!(
            m,
            ClientMessage::Command {
                v: 1,
                seq: 3,
                omega_h_s: [0.1, 0.0, 0.0]
            }
        );
        assert!(ClientMessage::parse(r#"{"type":"press_start","v":1}"#).is_ok());
        assert!(ClientMessage::parse(r#"{"type":"press_start","v":2}"#).is_err());
        assert!(ClientMessage::parse(r#"{"type":"press_start"}"#).is_err());
        assert!(ClientMessage::parse(r#"{"type":"press_start","v":1,"extra":0}"#).is_err());
        assert!(ClientMessage::parse(r#"{"type":"warp","v":1}"#).is_err());
        assert!(ClientMessage::parse(r#"{"type":"command","v":1,"seq":1,"omega_h_s":[1e999,0,0]}"#).is_err());
    }

    #[test]
    fn state_message_uses_wire_names() {
        let mut s = Session::new(live_cfg()).unwrap();
        let row = s.tick(&SessionInbox::new()).unwrap().clone();
        let v = serde_json::to_value(ServerMessage::state(&row)).unwrap();
        assert_eq!(v["type"], "state");
        assert_eq!(v["v"], 1);
        assert_eq!(v["R_l_quat"].as_array().unwrap().len(), 4);
        assert_eq!(v["bodies_quat"].as_array().unwrap().len(), 3);
    }

    proptest! {
        #[test]
        fn quaternion_boundary_round_trips(x in -3.0..3.0f64, y in -3.0..3.0f64, z in -3.0..3.0f64) {
            let r = exp_so3(&Vector3::new(x, y, z));
            let q = rotation_to_quat(&r);
            prop_assert!(q[0] >= 0.0);
            prop_assert!(((q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt() - 1.0).abs() < 1e-12);
            let back = quat_to_rotation(&q).unwrap();
            prop_assert!((back.matrix() - r.matrix()).abs().max() < 1e-9);
        }
    }

    #[test]
    fn non_unit_quaternions_are_rejected() {
        assert!(matches!(quat_to_rotation(&[1.1, 0.0, 0.0, 0.0]), Err(Error::NotUnit(_))));
        assert!(quat_to_rotation(&[1.0 + 5e-7, 0.0, 0.0, 0.0]).is_ok());
    }

    #[test]
    fn without_a_client_the_command_is_zero() {
        let mut s = Session::new(live_cfg()).unwrap();
        let inbox = SessionInbox::new();
        for _ in 0..30 {
            assert_eq!(s.tick(&inbox).unwrap().omega_h_s, Vector3::zeros());
        }
    }

    #[test]
    fn commands_apply_on_the_next_tick_and_time_out() {
        let mut s = Session::new(live_cfg()).unwrap();
        let inbox = SessionInbox::new();
        s.tick(&inbox).unwrap();
        let w = Vector3::new(0.0, 0.3, 0.0);
        inbox.put_command(w);
        assert_eq!(s.tick(&inbox).unwrap().omega_h_s, w);
        // 0.25 s at 120 Hz is 30 ticks of hold.
        for _ in 0..30 {
            assert_eq!(s.tick(&inbox).unwrap().omega_h_s, w);
        }
        assert_eq!(s.tick(&inbox).unwrap().omega_h_s, Vector3::zeros());
    }

    #[test]
    fn last_writer_wins_and_commands_saturate() {
        let mut s = Session::new(live_cfg()).unwrap();
        let inbox = SessionInbox::new();
        inbox.put_command(Vector3::new(0.1, 0.0, 0.0));
        inbox.put_command(Vector3::new(0.0, 3.0, 0.0));
        let row = s.tick(&inbox).unwrap();
        assert_eq!(row.omega_h_s, Vector3::new(0.0, 1.0, 0.0));
    }

    #[test]
    fn stale_sequence_numbers_are_refused() {
        let inbox = SessionInbox::new();
        let mut tr = ClientTranslator::default();
        let cmd = |seq| ClientMessage::Command {
            v: 1,
            seq,
            omega_h_s: [0.0, 0.0, 0.1],
        };
        tr.apply(&cmd(5), &inbox).unwrap();
        assert!(tr.apply(&cmd(5), &inbox).is_err());
        assert!(tr.apply(&cmd(4), &inbox).is_err());
        tr.apply(&cmd(6), &inbox).unwrap();
    }

    #[test]
    fn pose_equal_to_grab_commands_nothing() {
        let inbox = SessionInbox::new();
        let mut tr = ClientTranslator::default();
        let q = rotation_to_quat(&exp_so3(&Vector3::new(0.2, -0.4, 0.9)));
        assert!(tr.apply(&ClientMessage::Pose { v: 1, rt_quat: q }, &inbox).is_err());
        tr.apply(&ClientMessage::Grab { v: 1, r0_quat: q }, &inbox).unwrap();
        tr.apply(&ClientMessage::Pose { v: 1, rt_quat: q }, &inbox).unwrap();
        let (cmd, _) = inbox.take();
        assert!(cmd.unwrap().omega_h_s.norm() < 1e-12);
    }

    #[test]
    fn streamed_constant_command_matches_scripted_run() {
        let w = Vector3::new(0.2, -0.1, 0.05);
        let mut s = Session::new(live_cfg()).unwrap();
        let inbox = SessionInbox::new();
        let steps = 240;
        for _ in 0..=steps {
            inbox.put_command(w);
            s.tick(&inbox).unwrap();
        }
        let scripted = ScenarioConfig {
            duration_s: steps as f64 / 120.0,
            operator: OperatorSpec::Scripted {
                schedule: vec![ScheduledCommand {
                    start: 0.0,
                    end: 1e9,
                    omega_h_s: w.into(),
                }],
            },
            ..live_cfg()
        };
        let rec = run_scenario(&scripted).unwrap();
        assert_eq!(rec.d_bar_series(), s.trajectory().d_bar_series());
    }

    #[test]
    fn empty_sessions_do_not_export() {
        let s = Session::new(live_cfg()).unwrap();
        assert!(s.export().is_err());
    }

    #[test]
    fn recorded_session_replays_exactly() {
        let mut s = Session::new(live_cfg()).unwrap();
        let inbox = SessionInbox::new();
        for k in 0..600u64 {
            if k == 0 {
                inbox.push_event(SessionEvent::SetReference(UnitVector3::new_normalize(Vector3::new(1.0, 0.0, 1.0))));
            }
            if k == 40 || k == 330 {
                inbox.push_event(SessionEvent::PressStart);
            }
            if k == 300 {
                inbox.push_event(SessionEvent::SetReference(UnitVector3::new_normalize(Vector3::new(0.0, -1.0, 1.0))));
            }
            if k % 3 == 0 && k < 500 {
                let phase = k as f64 * 0.05;
                inbox.put_command(Vector3::new(phase.sin() * 1.5, phase.cos(), 0.2));
            }
            if k == 200 {
                s.mark_gap();
            }
            s.tick(&inbox).unwrap();
        }
        let log = s.export().unwrap();
        assert!(!log.rows[39].start_pressed && log.rows[40].start_pressed);
        assert!(!log.rows[300].start_pressed && log.rows[330].start_pressed);
        assert!(log.rows[200].gap);
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let log = SessionLog::read_csv(buf.as_slice()).unwrap();
        let replay = run_scenario(&replay_config(s.config(), &log).unwrap()).unwrap();
        assert_eq!(replay.d_bar_series(), s.trajectory().d_bar_series());
        let (id, val) = preprocess(&log, &IdentificationConfig::default()).unwrap();
        assert!(!id.is_empty() && !val.is_empty());
    }
}
