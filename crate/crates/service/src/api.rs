//! JSON messages of the control API. One object per line over TCP, one object
//! per text frame over WebSocket.
//!
//! Requests look like `{"type": "insert", "request_id": "r1", "payload": {...}}`.
//! The server answers with `ack` / `reject` and, for subscribers, streams
//! `topology`, `metrics` and `alert` events.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use champ::cartridge::CartridgeState;
use champ::kernel::{Alert, StageRole};
use champ::protocol::CapabilityId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotAssignment {
    pub from: u32,
    pub to: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum ControlCommand {
    Insert { slot: u32, preset: String },
    Remove { slot: u32 },
    Reorder { assignments: Vec<SlotAssignment> },
    SetSourceRate { fps: f64 },
    LoadGallery {
        path: String,
        #[serde(default)]
        key_ref: Option<String>,
    },
    RunScenario { path: String },
    Shutdown,
}

impl ControlCommand {
    pub fn name(&self) -> &'static str {
        match self {
            ControlCommand::Insert { .. } => "insert",
            ControlCommand::Remove { .. } => "remove",
            ControlCommand::Reorder { .. } => "reorder",
            ControlCommand::SetSourceRate { .. } => "set_source_rate",
            ControlCommand::LoadGallery { .. } => "load_gallery",
            ControlCommand::RunScenario { .. } => "run_scenario",
            ControlCommand::Shutdown => "shutdown",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RequestBody {
    Command(ControlCommand),
    Snapshot,
    Subscribe,
    Unsubscribe,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiRequest {
    pub request_id: Option<String>,
    pub body: RequestBody,
}

impl ApiRequest {
    pub fn command(request_id: impl Into<String>, command: ControlCommand) -> Self {
        ApiRequest {
            request_id: Some(request_id.into()),
            body: RequestBody::Command(command),
        }
    }

    pub fn parse(line: &str) -> Result<Self, String> {
        let v: Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
        let obj = v.as_object().ok_or("request must be a JSON object")?;
        let kind = obj
            .get("type")
            .and_then(Value::as_str)
            .ok_or("request needs a string `type`")?;
        let request_id = match obj.get("request_id") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => return Err("`request_id` must be a string".into()),
        };
        let body = match kind {
            "snapshot" => RequestBody::Snapshot,
            "subscribe" => RequestBody::Subscribe,
            "unsubscribe" => RequestBody::Unsubscribe,
            "shutdown" => RequestBody::Command(ControlCommand::Shutdown),
            _ => {
                let payload = obj.get("payload").cloned().unwrap_or(Value::Null);
                let tagged = serde_json::json!({ "type": kind, "payload": payload });
                RequestBody::Command(
                    serde_json::from_value(tagged).map_err(|e| format!("bad `{kind}` request: {e}"))?,
                )
            }
        };
        Ok(ApiRequest { request_id, body })
    }

    pub fn to_line(&self) -> String {
        let mut v = match &self.body {
            RequestBody::Command(c) => serde_json::to_value(c).expect("command serializes"),
            RequestBody::Snapshot => serde_json::json!({"type": "snapshot"}),
            RequestBody::Subscribe => serde_json::json!({"type": "subscribe"}),
            RequestBody::Unsubscribe => serde_json::json!({"type": "unsubscribe"}),
        };
        if let Some(id) = &self.request_id {
            v["request_id"] = Value::String(id.clone());
        }
        v.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    OccupiedSlot,
    EmptySlot,
    BadPermutation,
    UnknownPreset,
    BadRequest,
    Gallery,
    Scenario,
    ShuttingDown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageInfo {
    pub slot: u32,
    pub capability: CapabilityId,
    pub preset: Option<String>,
    pub state: CartridgeState,
    pub bypassable: bool,
}

/// A slot still wired into the pipeline without a live cartridge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placeholder {
    pub slot: u32,
    pub capability: CapabilityId,
    pub role: StageRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologySnapshot {
    pub ts_ms: f64,
    pub phase: String,
    pub missing: Option<CapabilityId>,
    /// Live cartridges in slot order.
    pub stages: Vec<StageInfo>,
    pub placeholders: Vec<Placeholder>,
    /// Alerts for capabilities that are still missing.
    pub alerts: Vec<Alert>,
    /// Queue depth of each pipeline link, source side first.
    pub link_depths: Vec<usize>,
    pub holdback: usize,
    pub fps: f64,
    pub latency_ms: Option<f64>,
    pub accepted: u64,
    pub delivered: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTick {
    pub phase: String,
    pub fps: f64,
    pub latency_ms: Option<f64>,
    pub accepted: u64,
    pub delivered: u64,
    pub holdback: usize,
    pub link_depths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerEvent {
    Topology {
        seq: u64,
        ts_ms: f64,
        /// What triggered the snapshot: a phase name, a swap outcome, or "request".
        cause: Value,
        payload: TopologySnapshot,
    },
    Metrics {
        seq: u64,
        ts_ms: f64,
        payload: MetricsTick,
    },
    Alert {
        seq: u64,
        ts_ms: f64,
        payload: Alert,
    },
    Ack {
        request_id: Option<String>,
        payload: Value,
    },
    Reject {
        request_id: Option<String>,
        reason: RejectReason,
        message: String,
    },
}

impl ServerEvent {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("event serializes")
    }

    pub fn seq(&self) -> Option<u64> {
        match self {
            ServerEvent::Topology { seq, .. } | ServerEvent::Metrics { seq, .. } | ServerEvent::Alert { seq, .. } => {
                Some(*seq)
            }
            _ => None,
        }
    }

    pub fn request_id(&self) -> Option<&str> {
        match self {
            ServerEvent::Ack { request_id, .. } | ServerEvent::Reject { request_id, .. } => request_id.as_deref(),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_commands() {
        let r = ApiRequest::parse(r#"{"type":"insert","request_id":"a","payload":{"slot":1,"preset":"face-quality"}}"#).unwrap();
        assert_eq!(
            r,
            ApiRequest::command(
                "a",
                ControlCommand::Insert {
                    slot: 1,
                    preset: "face-quality".into()
                }
            )
        );
        let r = ApiRequest::parse(r#"{"type":"reorder","payload":{"assignments":[{"from":0,"to":1},{"from":1,"to":0}]}}"#).unwrap();
        assert_eq!(r.request_id, None);
        assert!(matches!(r.body, RequestBody::Command(ControlCommand::Reorder { .. })));
        assert_eq!(ApiRequest::parse(r#"{"type":"shutdown"}"#).unwrap().body, RequestBody::Command(ControlCommand::Shutdown));
        assert_eq!(ApiRequest::parse(r#"{"type":"subscribe"}"#).unwrap().body, RequestBody::Subscribe);
    }

    #[test]
    fn parse_errors_are_reported() {
        assert!(ApiRequest::parse("nope").is_err());
        assert!(ApiRequest::parse("[]").is_err());
        assert!(ApiRequest::parse(r#"{"type":"insert","payload":{"slot":1}}"#).is_err());
        assert!(ApiRequest::parse(r#"{"type":"teleport"}"#).is_err());
        assert!(ApiRequest::parse(r#"{"type":"remove","request_id":5,"payload":{"slot":1}}"#).is_err());
    }

    #[test]
    fn lines_round_trip() {
        for cmd in [
            ControlCommand::Remove { slot: 3 },
            ControlCommand::SetSourceRate { fps: 12.5 },
            ControlCommand::LoadGallery {
                path: "g.chgx".into(),
                key_ref: Some("env:KEY".into()),
            },
            ControlCommand::RunScenario { path: "s.json".into() },
            ControlCommand::Shutdown,
        ] {
            let req = ApiRequest::command("x", cmd);
            assert_eq!(ApiRequest::parse(&req.to_line()).unwrap(), req);
        }
    }
}
