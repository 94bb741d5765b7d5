use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::engine::{ContextSnapshot, Notification, NotificationThreshold, SourceEvent};
use crate::ids::{
    CategoryId, GateId, InstanceId, ModelId, ProcessModelId, RuleId, SourceId, Tick, VariantId,
};
use crate::model::ContextValue;

/// Participants of the choreography. `Harness` owns timers and instance
/// start-up; it never exchanges messages with the engines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Process,
    Rules,
    Context,
    External,
    Harness,
}

impl Pool {
    pub fn as_str(self) -> &'static str {
        match self {
            Pool::Process => "process",
            Pool::Rules => "rules",
            Pool::Context => "context",
            Pool::External => "external",
            Pool::Harness => "harness",
        }
    }
}

impl fmt::Display for Pool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RollbackTarget {
    Start,
    Gate(GateId),
}

impl fmt::Display for RollbackTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RollbackTarget::Start => f.write_str("start"),
            RollbackTarget::Gate(g) => write!(f, "{g}"),
        }
    }
}

/// process -> rules: a new instance asks for contextualization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegisterProcess {
    pub instance: InstanceId,
    pub process_model: ProcessModelId,
    pub master_id: ModelId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub share_with: Option<InstanceId>,
    /// Compensation children copy this instance's context model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub copy_from: Option<InstanceId>,
}

/// rules -> context: prepare (or bind to) an instance context model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegisterContext {
    pub instance: InstanceId,
    pub master_id: ModelId,
    pub thresholds: Vec<NotificationThreshold>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub share_with: Option<InstanceId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub copy_from: Option<InstanceId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextRequest {
    pub request: u64,
    pub instance: InstanceId,
    pub categories: BTreeSet<CategoryId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotReply {
    pub instance: InstanceId,
    /// Correlates with a [`ContextRequest`]; `None` for the initial post.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request: Option<u64>,
    pub initial: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<ContextSnapshot>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleEvalRequest {
    pub request: u64,
    pub instance: InstanceId,
    pub gate: GateId,
    /// Latest rollback generation the process engine had received when it
    /// sent the request.
    #[serde(default)]
    pub generation: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum DecisionOutcome {
    /// Initial context posted; the instance may run.
    Ready,
    InitFailed {
        reason: String,
    },
    SelectVariant {
        variant: VariantId,
    },
    Continue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionMsg {
    pub instance: InstanceId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<GateId>,
    #[serde(flatten)]
    pub outcome: DecisionOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<RuleId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BreakRollbackMsg {
    pub instance: InstanceId,
    pub target: RollbackTarget,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<RuleId>,
    /// Per-instance count of rollbacks issued, this one included.
    #[serde(default)]
    pub generation: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartCompensationMsg {
    pub parent: InstanceId,
    pub process_ref: String,
    /// Gate of the compensation model the triggering rule points at.
    pub variant: VariantId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<RuleId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceEventMsg {
    pub source: SourceId,
    /// Set for facts mirrored from one process instance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance: Option<InstanceId>,
    pub events: Vec<SourceEvent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PollRequestMsg {
    pub request: u64,
    pub source: SourceId,
    pub categories: BTreeSet<CategoryId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PollResponseMsg {
    pub request: u64,
    pub source: SourceId,
    pub values: Vec<ContextValue>,
    pub absent: BTreeSet<CategoryId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceMsg {
    pub instance: InstanceId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CancelMsg {
    pub instance: InstanceId,
    pub reason: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    Register,
    ContextRequest,
    ContextSnapshot,
    ContextNotification,
    RuleEvalRequest,
    Decision,
    BreakRollback,
    StartCompensation,
    SourceEvent,
    PollRequest,
    PollResponse,
    ProcessCompleted,
    ProcessCancelled,
    ShutdownModel,
}

impl MessageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::Register => "Register",
            MessageKind::ContextRequest => "ContextRequest",
            MessageKind::ContextSnapshot => "ContextSnapshot",
            MessageKind::ContextNotification => "ContextNotification",
            MessageKind::RuleEvalRequest => "RuleEvalRequest",
            MessageKind::Decision => "Decision",
            MessageKind::BreakRollback => "BreakRollback",
            MessageKind::StartCompensation => "StartCompensation",
            MessageKind::SourceEvent => "SourceEvent",
            MessageKind::PollRequest => "PollRequest",
            MessageKind::PollResponse => "PollResponse",
            MessageKind::ProcessCompleted => "ProcessCompleted",
            MessageKind::ProcessCancelled => "ProcessCancelled",
            MessageKind::ShutdownModel => "ShutdownModel",
        }
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Body {
    RegisterProcess(RegisterProcess),
    RegisterContext(RegisterContext),
    ContextRequest(ContextRequest),
    ContextSnapshot(SnapshotReply),
    ContextNotification(Notification),
    RuleEvalRequest(RuleEvalRequest),
    Decision(DecisionMsg),
    BreakRollback(BreakRollbackMsg),
    StartCompensation(StartCompensationMsg),
    SourceEvent(SourceEventMsg),
    PollRequest(PollRequestMsg),
    PollResponse(PollResponseMsg),
    ProcessCompleted(InstanceMsg),
    ProcessCancelled(CancelMsg),
    ShutdownModel(InstanceMsg),
}

impl Body {
    pub fn kind(&self) -> MessageKind {
        match self {
            Body::RegisterProcess(_) | Body::RegisterContext(_) => MessageKind::Register,
            Body::ContextRequest(_) => MessageKind::ContextRequest,
            Body::ContextSnapshot(_) => MessageKind::ContextSnapshot,
            Body::ContextNotification(_) => MessageKind::ContextNotification,
            Body::RuleEvalRequest(_) => MessageKind::RuleEvalRequest,
            Body::Decision(_) => MessageKind::Decision,
            Body::BreakRollback(_) => MessageKind::BreakRollback,
            Body::StartCompensation(_) => MessageKind::StartCompensation,
            Body::SourceEvent(_) => MessageKind::SourceEvent,
            Body::PollRequest(_) => MessageKind::PollRequest,
            Body::PollResponse(_) => MessageKind::PollResponse,
            Body::ProcessCompleted(_) => MessageKind::ProcessCompleted,
            Body::ProcessCancelled(_) => MessageKind::ProcessCancelled,
            Body::ShutdownModel(_) => MessageKind::ShutdownModel,
        }
    }

    /// The process instance a message concerns, if any.
    pub fn instance(&self) -> Option<&InstanceId> {
        match self {
            Body::RegisterProcess(m) => Some(&m.instance),
            Body::RegisterContext(m) => Some(&m.instance),
            Body::ContextRequest(m) => Some(&m.instance),
            Body::ContextSnapshot(m) => Some(&m.instance),
            Body::ContextNotification(m) => Some(&m.instance),
            Body::RuleEvalRequest(m) => Some(&m.instance),
            Body::Decision(m) => Some(&m.instance),
            Body::BreakRollback(m) => Some(&m.instance),
            Body::StartCompensation(m) => Some(&m.parent),
            Body::SourceEvent(m) => m.instance.as_ref(),
            Body::PollRequest(_) | Body::PollResponse(_) => None,
            Body::ProcessCompleted(m) | Body::ShutdownModel(m) => Some(&m.instance),
            Body::ProcessCancelled(m) => Some(&m.instance),
        }
    }

    pub fn to_json(&self) -> Value {
        let v = match self {
            Body::RegisterProcess(m) => serde_json::to_value(m),
            Body::RegisterContext(m) => serde_json::to_value(m),
            Body::ContextRequest(m) => serde_json::to_value(m),
            Body::ContextSnapshot(m) => serde_json::to_value(m),
            Body::ContextNotification(m) => serde_json::to_value(m),
            Body::RuleEvalRequest(m) => serde_json::to_value(m),
            Body::Decision(m) => serde_json::to_value(m),
            Body::BreakRollback(m) => serde_json::to_value(m),
            Body::StartCompensation(m) => serde_json::to_value(m),
            Body::SourceEvent(m) => serde_json::to_value(m),
            Body::PollRequest(m) => serde_json::to_value(m),
            Body::PollResponse(m) => serde_json::to_value(m),
            Body::ProcessCompleted(m) | Body::ShutdownModel(m) => serde_json::to_value(m),
            Body::ProcessCancelled(m) => serde_json::to_value(m),
        };
        v.expect("message bodies serialize")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub seq: u64,
    /// Tick the message was sent at.
    pub tick: Tick,
    pub deliver_at: Tick,
    pub sender: Pool,
    pub receiver: Pool,
    pub body: Body,
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        self.body.kind()
    }
}

/// Internal wake-ups scheduled by the engines.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Timer {
    StartInstance {
        instance: InstanceId,
    },
    TaskDone {
        instance: InstanceId,
        epoch: u64,
    },
    CancelInstance {
        instance: InstanceId,
        reason: String,
    },
    InitRound {
        instance: InstanceId,
    },
    PushSources,
    PeriodicPoll,
}

impl Timer {
    pub fn pool(&self) -> Pool {
        match self {
            Timer::StartInstance { .. } | Timer::TaskDone { .. } | Timer::CancelInstance { .. } => {
                Pool::Process
            }
            Timer::InitRound { .. } | Timer::PeriodicPoll => Pool::Context,
            Timer::PushSources => Pool::External,
        }
    }

    /// Background timers do not keep a finished simulation alive.
    pub fn is_background(&self) -> bool {
        matches!(self, Timer::PeriodicPoll | Timer::PushSources)
    }
}

/// A fact about a process instance to be mirrored into its context model.
#[derive(Clone, Debug, PartialEq)]
pub struct MirrorFact {
    pub instance: InstanceId,
    pub category: CategoryId,
    pub payload: crate::payload::Payload,
}

/// Effects produced by one engine step: outgoing messages, timers and
/// trace entries, in emission order.
#[derive(Debug, Default)]
pub struct Outbox {
    pub sends: Vec<(Pool, Body)>,
    pub timers: Vec<(Tick, Timer)>,
    pub traces: Vec<(String, Value)>,
    pub facts: Vec<MirrorFact>,
}

impl Outbox {
    pub fn send(&mut self, to: Pool, body: Body) {
        self.sends.push((to, body));
    }

    pub fn timer(&mut self, at: Tick, timer: Timer) {
        self.timers.push((at, timer));
    }

    pub fn trace(&mut self, kind: &str, payload: Value) {
        self.traces.push((kind.to_owned(), payload));
    }
}
