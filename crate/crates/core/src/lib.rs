//! Context-aware process execution.
//!
//! A process engine, a rules engine and a context engine cooperate over a
//! deterministic message choreography. Running process instances adapt to
//! context changes delivered by scripted external systems: decision gates
//! are re-evaluated when the context they read changes, and a decision can
//! break and roll back an instance or start a compensation process.
//!
//! Module map:
//!
//! * [`model`]: categories, values, leveled context intersections, master and
//!   instance context models.
//! * [`engine`]: the context engine (context cloud, conflict resolution,
//!   cause-and-effect propagation, derivation agents, thresholds).
//! * [`rules`]: the rule DSL and the rules engine.
//! * [`process`]: process models and the process engine.
//! * [`external`]: scripted external context sources.
//! * [`choreography`]: the message bus and the simulation loop.
//! * [`scenario`] and [`trace`]: file formats, validation and replay checks.

pub mod choreography;
pub mod engine;
pub mod external;
pub mod ids;
pub mod model;
pub mod payload;
pub mod process;
pub mod rules;
pub mod scenario;
pub mod trace;

pub use choreography::{run, RunOutcome, RunStatus, Simulation};
pub use ids::{
    CategoryId, GateId, InstanceId, ModelId, ProcessModelId, RuleId, SourceId, Tick, VariantId,
};
pub use model::{ContextCategory, ContextIntersection, ContextValue, MasterContextModel};
pub use payload::{Payload, ValueKind};
pub use scenario::Scenario;
pub use trace::{Trace, TraceRecord};
