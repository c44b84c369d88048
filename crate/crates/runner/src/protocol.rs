//! WebSocket messages of serve mode, one JSON document per text frame.

use pod_core::api::{CommandOutcome, MoveCommand};
use pod_core::scenario::GestureKind;
use pod_core::world::{GesturePhase, Input, Snapshot};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    UserMove {
        vx: f64,
        vy: f64,
        #[serde(default)]
        vheading: f64,
    },
    Gesture {
        kind: GestureKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        phase: Option<GesturePhase>,
    },
    Api {
        #[serde(rename = "move")]
        command: MoveCommand,
        /// Echoed back in the matching `api_result`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        id: Option<Value>,
    },
    Pause {},
    Resume {},
    Set {
        path: String,
        value: Value,
    },
}

impl ClientMessage {
    pub fn parse(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| format!("invalid message: {e}"))
    }

    /// The world input this message becomes, if any.
    pub fn into_input(self) -> Option<Input> {
        match self {
            Self::UserMove { vx, vy, vheading } => Some(Input::UserMove { vx, vy, vheading }),
            Self::Gesture { kind, phase } => Some(Input::Gesture { kind, phase }),
            Self::Api { command, .. } => Some(Input::Api { command }),
            Self::Set { path, value } => Some(Input::Set { path, value }),
            Self::Pause {} | Self::Resume {} => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Snapshot(Snapshot),
    ApiResult {
        #[serde(skip_serializing_if = "Option::is_none")]
        id: Option<Value>,
        #[serde(flatten)]
        outcome: CommandOutcome,
    },
    SetResult {
        path: String,
    },
    Error {
        reason: String,
    },
}

impl ServerMessage {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }
}
