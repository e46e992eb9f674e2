//! Semi-autonomous attitude navigation of rigid-body networks on SO(3).
//!
//! A human steers a virtual leader; a quasi-average rotation tracks the
//! network's average heading and synchronizes with the leader, while an
//! optional autonomous law acts only in directions that leave the average
//! unchanged. The crate also covers the operator model, passivity analysis,
//! identification of the operator from recorded sessions, and the live
//! session logic used by the server.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod analysis;
pub mod error;
pub mod navigation;
pub mod network;
pub mod operator;
pub mod sim;
pub mod so3;
pub mod sysid;
pub mod teleop;

pub use error::{Error, Result};
pub use navigation::{LeaderState, QuasiAverageState, ReferenceState, SyncGains};
pub use network::NetworkState;
pub use operator::{OperatorModel, OperatorModelFile, TransferMatrix2x2};
pub use sim::{run_scenario, ScenarioConfig, TrajectoryRecord};
pub use so3::{Integrator, Rotation, UnitVector3, Vector3};
