//! Wire types shared by the live-run service and its clients.

use serde::{Deserialize, Serialize};

use crate::ccbp::Bound;
use crate::controller::ControllerId;
use crate::error::{Error, Result};
use crate::harness::{EpisodeLog, EpisodeStart, EvalLog, RunnerStatus, StepRecord};

/// Who supplies actions during human episodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    ScriptedHuman,
    LiveHuman,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeRequest {
    pub mode: Mode,
}

/// Operator displacement in environment units. One-dimensional
/// environments ignore `dy` and accept it missing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HumanAction {
    pub dx: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dy: Option<f64>,
}

impl HumanAction {
    pub fn planar(dx: f64, dy: f64) -> Self {
        Self { dx, dy: Some(dy) }
    }

    pub fn to_vec(self, action_dim: usize) -> Result<Vec<f64>> {
        let v = match (action_dim, self.dy) {
            (1, _) => vec![self.dx],
            (2, Some(dy)) => vec![self.dx, dy],
            (2, None) => return Err(Error::Shape("this environment needs both `dx` and `dy`".into())),
            (n, _) => return Err(Error::Shape(format!("no operator mapping for {n}-d actions"))),
        };
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("operator action".into()));
        }
        Ok(v)
    }

    pub fn from_slice(action: &[f64]) -> Result<Self> {
        match *action {
            [dx] => Ok(Self { dx, dy: None }),
            [dx, dy] => Ok(Self::planar(dx, dy)),
            _ => Err(Error::Shape(format!("no operator mapping for {}-d actions", action.len()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub id: String,
    pub env: String,
    pub mode: Mode,
    pub action_bounds: Vec<Bound>,
    /// The session is blocked on an operator action.
    pub awaiting_human: bool,
    /// No subscriber is attached, so nothing advances.
    pub paused: bool,
    pub finished: bool,
    /// Sequence number of the last event produced, if any.
    pub last_seq: Option<u64>,
    pub error: Option<String>,
    pub status: RunnerStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventKind {
    EpisodeStart {
        start: EpisodeStart,
    },
    Step {
        controller: ControllerId,
        record: StepRecord,
    },
    AwaitingHuman {
        episode: u64,
        step: u32,
        observation: Vec<f64>,
    },
    EpisodeEnd {
        log: EpisodeLog,
    },
    Evaluation {
        eval: EvalLog,
    },
    RunEnd {
        episodes: u64,
        cumulative_cost: f64,
    },
    RunError {
        message: String,
    },
}

/// One frame on the event channel. `seq` starts at 0 and has no gaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

impl Event {
    pub fn is_terminal(&self) -> bool {
        matches!(self.kind, EventKind::RunEnd { .. } | EventKind::RunError { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionAck {
    pub record: StepRecord,
    pub episode_end: Option<EpisodeLog>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<Box<SessionSnapshot>>,
}

/// Which of a session's log files `GET /sessions/{id}/log` returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogFormat {
    #[default]
    Episodes,
    Summary,
    Eval,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn events_carry_a_type_tag_and_sequence() {
        let ev = Event {
            seq: 3,
            kind: EventKind::Step {
                controller: ControllerId::Baseline,
                record: StepRecord {
                    episode: 0,
                    step: 1,
                    observation: vec![1.0, 0.5],
                    action: vec![0.1, 0.1],
                    reward: 0.0,
                    termination: None,
                },
            },
        };
        let text = serde_json::to_string(&ev).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["type"], "step");
        assert_eq!(v["seq"], 3);
        assert_eq!(serde_json::from_str::<Event>(&text).unwrap(), ev);

        let end = Event {
            seq: 9,
            kind: EventKind::RunEnd {
                episodes: 4,
                cumulative_cost: 2.0,
            },
        };
        assert!(end.is_terminal());
    }

    #[test]
    fn mode_and_action_wire_format() {
        let m: ModeRequest = serde_json::from_str(r#"{"mode":"live_human"}"#).unwrap();
        assert_eq!(m.mode, Mode::LiveHuman);
        assert!(serde_json::from_str::<ModeRequest>(r#"{"mode":"autopilot"}"#).is_err());
        let a: HumanAction = serde_json::from_str(r#"{"dx":0.1,"dy":-0.05}"#).unwrap();
        assert_eq!(a.to_vec(2).unwrap(), vec![0.1, -0.05]);
        let one: HumanAction = serde_json::from_str(r#"{"dx":0.02}"#).unwrap();
        assert_eq!(one.to_vec(1).unwrap(), vec![0.02]);
        assert!(one.to_vec(2).is_err());
        assert_eq!(HumanAction::from_slice(&[0.1, 0.2]).unwrap(), HumanAction::planar(0.1, 0.2));
    }
}
