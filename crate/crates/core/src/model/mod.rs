//! Context data structures: categories, values, leveled intersections and
//! master/instance context models with their configuration paths.

mod instance;
mod intersection;
mod value;

use thiserror::Error;

use crate::ids::{CategoryId, ModelId, Tick};
use crate::payload::ValueKind;

pub use instance::{
    ConfigurationPath, ConfigurationProblem, InstanceContextModel, MasterContextModel,
    ModelConstraint, PathEntry,
};
pub use intersection::{
    is_subgraph, ContextIntersection, Edge, Extension, StructuralDelta, ValidationReport,
    ValueSlot, Violation, DEFAULT_HISTORY_LIMIT,
};
pub use value::{ContextCategory, ContextValue};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid master model: {0}")]
    InvalidMaster(String),
    #[error("an instance model needs at least one bound process instance")]
    EmptyBinding,
    #[error("extension would remove or relocate structure: {0}")]
    DeletionRejected(String),
    #[error("level constraint violated: {0}")]
    LevelViolation(String),
    #[error("configuration step budget of {max_steps} exhausted")]
    StepBudgetExceeded { max_steps: u64 },
    #[error("invalid input graph: {0}")]
    InvalidInput(String),
    #[error("unknown category {0}")]
    UnknownCategory(CategoryId),
    #[error("payload does not match {expected} category {category}")]
    KindMismatch {
        category: CategoryId,
        expected: ValueKind,
    },
    #[error("stale write to {category}: ts {offered_ts} is not newer than {current_ts}")]
    StaleWrite {
        category: CategoryId,
        current_ts: Tick,
        offered_ts: Tick,
    },
    #[error("model {0} is closed")]
    Closed(ModelId),
}
