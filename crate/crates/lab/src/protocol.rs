//! Wire format of the control socket.
//!
//! Clients send one JSON object per WebSocket text message, tagged by `cmd`.
//! The server answers with objects tagged by `type`.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use timewarp_core::discretizer::DiscreteStateId;
use timewarp_core::env::ContinuousState;
use timewarp_core::experiment::{ExperimentConfig, Variant};
use timewarp_core::timewarp::RewindEvent;

/// Parameter names accepted by `set_param`.
pub const TUNABLE_PARAMS: [&str; 6] =
    ["epsilon", "temperature", "alpha", "rewind_policy", "rewind_escalation", "steps_per_second"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case")]
pub enum SessionCommand {
    Run,
    Pause,
    #[serde(alias = "step_once")]
    Step,
    /// Exactly one of the two fields must be set.
    Rewind {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target_time: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        steps_back: Option<u64>,
    },
    SetParam { name: String, value: Value },
    SetSpeed { steps_per_second: f64 },
    ResetTrial,
    Snapshots,
    Metrics,
    /// Full learner tables, for inspection.
    Values,
}

impl SessionCommand {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Run => "run",
            Self::Pause => "pause",
            Self::Step => "step",
            Self::Rewind { .. } => "rewind",
            Self::SetParam { .. } => "set_param",
            Self::SetSpeed { .. } => "set_speed",
            Self::ResetTrial => "reset_trial",
            Self::Snapshots => "snapshots",
            Self::Metrics => "metrics",
            Self::Values => "values",
        }
    }

    /// Whether the command changes the session, and so is echoed to the
    /// other subscribers.
    pub fn mutates(&self) -> bool {
        !matches!(self, Self::Snapshots | Self::Metrics | Self::Values)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello(Hello),
    State(StateBroadcast),
    Ack(Ack),
    Error(ErrorReply),
    Metrics(LiveMetrics),
    RewindEvent(RewindNotice),
    Command(CommandEcho),
}

impl ServerMessage {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }
}

/// First message on every connection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub config: ExperimentConfig,
    pub variant: Variant,
    pub seed: u64,
    pub running: bool,
    pub steps_per_second: f64,
    pub tunable: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateBroadcast {
    pub seq: u64,
    pub state: ContinuousState,
    pub discrete_id: Option<DiscreteStateId>,
    pub time_index: u64,
    pub trial: u64,
    /// Q-values, or actor preferences, of the current cell.
    pub q_row: [f64; 2],
    pub last_reward: f64,
    pub metrics: LiveMetrics,
    pub last_rewind: Option<RewindEvent>,
    pub running: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LiveMetrics {
    pub steps: u64,
    pub trials: u64,
    pub rewinds: u64,
    pub best_trial_steps: u64,
    pub unique_states: u64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub cmd: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReply {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cmd: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewindNotice {
    #[serde(flatten)]
    pub event: RewindEvent,
    /// Operator-requested rather than triggered by a failure.
    pub manual: bool,
    /// Automatic rewinds folded into this notice since the previous one.
    pub coalesced: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandEcho {
    pub command: SessionCommand,
}
