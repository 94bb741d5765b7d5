use serde::Serialize;

use super::ProcessError;
use crate::ids::{GateId, InstanceId, ProcessModelId, Tick, VariantId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Initializing,
    Running,
    AwaitingDecision,
    RolledBack,
    Compensating,
    Completed,
    Cancelled,
    Failed,
}

impl Status {
    pub fn is_terminal(self) -> bool {
        matches!(self, Status::Completed | Status::Cancelled | Status::Failed)
    }

    pub fn can_become(self, to: Status) -> bool {
        use Status::*;
        matches!(
            (self, to),
            (Initializing, Running | Failed | Cancelled)
                | (
                    Running,
                    AwaitingDecision | RolledBack | Compensating | Completed | Cancelled
                )
                | (
                    AwaitingDecision,
                    Running | RolledBack | Compensating | Cancelled
                )
                | (RolledBack, Running | Cancelled)
                | (Compensating, Cancelled)
        )
    }
}

/// Snapshot of an instance taken when it passed a gate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Checkpoint {
    pub gate: GateId,
    /// Program counter of the gate instruction.
    pub pc: usize,
    pub variant: VariantId,
    pub tick: Tick,
    /// Number of tasks completed before the gate.
    pub tasks_done: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProcessInstance {
    pub instance_id: InstanceId,
    pub process_model: ProcessModelId,
    pub principal: String,
    pub status: Status,
    pub pc: usize,
    /// Bumped whenever scheduled task completions become obsolete.
    pub epoch: u64,
    pub checkpoints: Vec<Checkpoint>,
    pub completed_tasks: Vec<String>,
    /// Outstanding rule evaluation: request id and gate.
    pub awaiting: Option<(u64, GateId)>,
    /// Latest rollback generation received; stamped on rule requests.
    pub generation: u64,
    pub parent: Option<InstanceId>,
    pub compensation: Option<InstanceId>,
    pub started_at: Tick,
    pub finished_at: Option<Tick>,
}

impl ProcessInstance {
    pub fn new(
        instance_id: InstanceId,
        process_model: ProcessModelId,
        principal: String,
        now: Tick,
    ) -> Self {
        Self {
            instance_id,
            process_model,
            principal,
            status: Status::Initializing,
            pc: 0,
            epoch: 0,
            checkpoints: Vec::new(),
            completed_tasks: Vec::new(),
            awaiting: None,
            generation: 0,
            parent: None,
            compensation: None,
            started_at: now,
            finished_at: None,
        }
    }

    pub fn transition(&mut self, to: Status, now: Tick) -> Result<Status, ProcessError> {
        let from = self.status;
        if !from.can_become(to) {
            return Err(ProcessError::IllegalTransition {
                instance: self.instance_id.clone(),
                from,
                to,
            });
        }
        self.status = to;
        if to.is_terminal() {
            self.finished_at = Some(now);
            self.epoch += 1;
            self.awaiting = None;
        }
        Ok(from)
    }

    /// Variant chosen the last time the instance passed `gate`.
    pub fn chosen(&self, gate: &str) -> Option<&VariantId> {
        self.checkpoints
            .iter()
            .rev()
            .find(|c| c.gate == gate)
            .map(|c| &c.variant)
    }

    /// Resets to a checkpoint (or the start with `None`), returning the
    /// completed tasks that are undone, most recent first.
    pub fn rewind(&mut self, to: Option<usize>) -> Vec<String> {
        let (pc, tasks_done, keep) = match to {
            Some(i) => (self.checkpoints[i].pc, self.checkpoints[i].tasks_done, i),
            None => (0, 0, 0),
        };
        self.checkpoints.truncate(keep);
        self.pc = pc;
        self.epoch += 1;
        self.awaiting = None;
        let mut undone = self.completed_tasks.split_off(tasks_done);
        undone.reverse();
        undone
    }
}
