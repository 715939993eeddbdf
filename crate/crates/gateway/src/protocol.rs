//! JSON message schemas, version 1.
//!
//! Every message is a JSON object with a string `type`. Server messages also
//! carry `seq` (strictly increasing per connection) and `t` (simulation clock,
//! seconds). Client messages may carry their own `seq`, echoed back as
//! `request` in the matching reply.

use buzzwire_core::arbitration::{FactorId, FactorSet, UI_MAX, UI_MIN, UI_STEP};
use buzzwire_core::course::{CourseDescriptor, HandleGeometry};
use buzzwire_core::geometry::{Pose, PoseRepr};
use buzzwire_core::session::{Metrics, Mode, Outcome};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const PROTOCOL_VERSION: u32 = 1;

/// Input quaternions within this distance of unit norm are normalized.
pub const INPUT_UNIT_TOLERANCE: f64 = 1e-3;

const CLIENT_TYPES: &[&str] = &["hello", "input", "edit_factor", "start_trial", "end_review"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialPhase {
    BetweenTrials,
    Running,
    /// trial over, results on screen until `end_review`
    Review,
}

/// Factors on the UI scale `[10, 100]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UiFactors {
    pub speed: u8,
    pub depth_assist: u8,
    pub turnability: u8,
    pub safety: u8,
    pub responsiveness: u8,
}

impl From<&FactorSet> for UiFactors {
    fn from(f: &FactorSet) -> Self {
        UiFactors {
            speed: f.ui(FactorId::Speed),
            depth_assist: f.ui(FactorId::DepthAssist),
            turnability: f.ui(FactorId::Turnability),
            safety: f.ui(FactorId::Safety),
            responsiveness: f.ui(FactorId::Responsiveness),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UiScale {
    pub min: u8,
    pub max: u8,
    pub step: u8,
}

impl Default for UiScale {
    fn default() -> Self {
        UiScale { min: UI_MIN, max: UI_MAX, step: UI_STEP }
    }
}

/// Reply to `hello`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub protocol_version: u32,
    pub mode: Mode,
    pub course: CourseDescriptor,
    pub handle: HandleGeometry,
    pub factors: UiFactors,
    pub ui_scale: UiScale,
    pub alpha: [f64; 6],
    pub trial_phase: TrialPhase,
    pub trial: u32,
    pub tick_rate: f64,
    pub frame_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateFrame {
    pub robot_pose: Pose,
    pub handle_pose: Pose,
    pub progress: f64,
    pub buzz: bool,
    pub fatal: bool,
    pub trial_phase: TrialPhase,
    pub trial: u32,
    pub factors: UiFactors,
    pub alpha: [f64; 6],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialEnd {
    pub trial: u32,
    pub outcome: Outcome,
    pub metrics: Option<Metrics>,
    /// log file name when logging is enabled
    pub log: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerBody {
    Config(ConfigSnapshot),
    State(StateFrame),
    Ack {
        request: Option<u64>,
        factors: UiFactors,
        trial_phase: TrialPhase,
    },
    Rejected {
        request: Option<u64>,
        reason: String,
    },
    Error {
        request: Option<u64>,
        reason: String,
        detail: String,
    },
    TrialEnd(TrialEnd),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerMessage {
    pub seq: u64,
    pub t: f64,
    #[serde(flatten)]
    pub body: ServerBody,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Hello {
        seq: Option<u64>,
        protocol_version: Option<u32>,
    },
    Input {
        seq: Option<u64>,
        pose: PoseRepr,
    },
    EditFactor {
        seq: Option<u64>,
        factor: String,
        direction: String,
    },
    StartTrial {
        seq: Option<u64>,
    },
    EndReview {
        seq: Option<u64>,
    },
}

impl ClientMessage {
    pub fn seq(&self) -> Option<u64> {
        match self {
            ClientMessage::Hello { seq, .. }
            | ClientMessage::Input { seq, .. }
            | ClientMessage::EditFactor { seq, .. }
            | ClientMessage::StartTrial { seq }
            | ClientMessage::EndReview { seq } => *seq,
        }
    }
}

/// Why a client message could not be used.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolError {
    pub request: Option<u64>,
    pub reason: &'static str,
    pub detail: String,
}

impl ProtocolError {
    pub fn into_body(self) -> ServerBody {
        ServerBody::Error { request: self.request, reason: self.reason.to_string(), detail: self.detail }
    }
}

/// Parses one text frame. Malformed JSON or a missing `type` is `parse`; a
/// `type` outside the protocol is `unknown_type`; a known type with a bad body
/// is `invalid_message`.
pub fn parse_client(text: &str) -> Result<ClientMessage, ProtocolError> {
    let err = |request, reason, detail: String| ProtocolError { request, reason, detail };
    let value: Value = serde_json::from_str(text).map_err(|e| err(None, "parse", e.to_string()))?;
    let request = value.get("seq").and_then(Value::as_u64);
    let Some(kind) = value.get("type").and_then(Value::as_str) else {
        return Err(err(request, "parse", "missing string field `type`".into()));
    };
    if !CLIENT_TYPES.contains(&kind) {
        return Err(err(request, "unknown_type", format!("unknown message type `{kind}`")));
    }
    serde_json::from_value(value).map_err(|e| err(request, "invalid_message", e.to_string()))
}

/// Pose from an input message, normalizing near-unit quaternions.
pub fn ingest_pose(repr: &PoseRepr) -> Result<Pose, String> {
    Pose::from_repr(repr, INPUT_UNIT_TOLERANCE)
}
