//! Process models, instance state machines and the process engine pool.

mod instance;
mod model;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

pub use instance::{Checkpoint, ProcessInstance, Status};
pub use model::{compile, Instr, Node, ProcessModel, Program};

use crate::choreography::{
    Body, BreakRollbackMsg, CancelMsg, DecisionMsg, DecisionOutcome, InstanceMsg, Message,
    MirrorFact, Outbox, Pool, RegisterProcess, RollbackTarget, RuleEvalRequest,
    StartCompensationMsg, Timer,
};
use crate::external::MirrorSpec;
use crate::ids::{GateId, InstanceId, ProcessModelId, Tick, VariantId};
use crate::payload::Payload;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProcessError {
    #[error("invalid process model: {0}")]
    InvalidModel(String),
    #[error("unknown process model {0}")]
    UnknownProcessModel(String),
    #[error("unknown process instance {0}")]
    UnknownInstance(InstanceId),
    #[error("authentication failed for principal {principal:?}")]
    AuthFailed { principal: String },
    #[error("unexpected decision for {instance}: {detail}")]
    UnexpectedDecision {
        instance: InstanceId,
        detail: String,
    },
    #[error("{instance} has no checkpoint at gate {gate}")]
    UnknownCheckpoint { instance: InstanceId, gate: GateId },
    #[error("{instance} cannot go from {from:?} to {to:?}")]
    IllegalTransition {
        instance: InstanceId,
        from: Status,
        to: Status,
    },
}

/// A process instance the scenario starts at `start_tick`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub instance_id: InstanceId,
    pub process_model: ProcessModelId,
    pub principal: String,
    #[serde(default)]
    pub start_tick: Tick,
    /// Bind to the context model of an already registered instance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub share_with: Option<InstanceId>,
}

#[derive(Clone, Debug, Default)]
pub struct ProcessEngine {
    programs: BTreeMap<ProcessModelId, Program>,
    specs: BTreeMap<InstanceId, InstanceSpec>,
    mirrors: Vec<MirrorSpec>,
    denied: BTreeSet<String>,
    instances: BTreeMap<InstanceId, ProcessInstance>,
    next_request: u64,
}

impl ProcessEngine {
    pub fn new(
        programs: BTreeMap<ProcessModelId, Program>,
        specs: impl IntoIterator<Item = InstanceSpec>,
        mirrors: Vec<MirrorSpec>,
        denied: BTreeSet<String>,
    ) -> Self {
        Self {
            programs,
            specs: specs
                .into_iter()
                .map(|s| (s.instance_id.clone(), s))
                .collect(),
            mirrors,
            denied,
            ..Self::default()
        }
    }

    pub fn start_timers(&self) -> Vec<(Tick, Timer)> {
        self.specs
            .values()
            .map(|s| {
                (
                    s.start_tick,
                    Timer::StartInstance {
                        instance: s.instance_id.clone(),
                    },
                )
            })
            .collect()
    }

    pub fn instances(&self) -> &BTreeMap<InstanceId, ProcessInstance> {
        &self.instances
    }

    pub fn instance(&self, id: &str) -> Option<&ProcessInstance> {
        self.instances.get(id)
    }

    /// Every instance created so far has reached a terminal status.
    pub fn all_terminal(&self) -> bool {
        self.instances.len() >= self.specs.len()
            && self.instances.values().all(|i| i.status.is_terminal())
    }

    pub fn authenticate(&self, principal: &str) -> Result<(), ProcessError> {
        if principal.trim().is_empty() || self.denied.contains(principal) {
            return Err(ProcessError::AuthFailed {
                principal: principal.to_owned(),
            });
        }
        Ok(())
    }

    pub fn handle(&mut self, msg: &Message, now: Tick, out: &mut Outbox) {
        // Decisions cross termination in flight; the rules engine only learns
        // of it when the completion or cancellation arrives.
        if let Some((id, inst)) = msg
            .body
            .instance()
            .and_then(|id| Some((id, self.instances.get(id)?)))
        {
            if inst.status.is_terminal() {
                out.trace(
                    "dropped",
                    json!({"instance": id, "kind": msg.kind().as_str(), "reason": "instance terminated", "status": inst.status}),
                );
                return;
            }
        }
        let result = match &msg.body {
            Body::Decision(d) => self.apply_decision(d, now, out),
            Body::BreakRollback(b) => self.break_and_rollback(b, now, out),
            Body::StartCompensation(s) => self.start_compensation(s, now, out),
            other => {
                out.trace("unexpected", json!({"kind": other.kind().as_str()}));
                Ok(())
            }
        };
        if let Err(e) = result {
            out.trace(
                "error",
                json!({"instance": msg.body.instance(), "error": e.to_string()}),
            );
        }
    }

    pub fn on_timer(&mut self, timer: &Timer, now: Tick, out: &mut Outbox) {
        let result = match timer {
            Timer::StartInstance { instance } => self.start(instance, now, out),
            Timer::TaskDone { instance, epoch } => self.task_done(instance, *epoch, now, out),
            Timer::CancelInstance { instance, reason } => self.cancel(instance, reason, now, out),
            _ => Ok(()),
        };
        if let Err(e) = result {
            out.trace("error", json!({"error": e.to_string()}));
        }
    }

    fn get(&mut self, id: &InstanceId) -> Result<&mut ProcessInstance, ProcessError> {
        lookup(&mut self.instances, id)
    }

    fn set_status(
        &mut self,
        id: &InstanceId,
        to: Status,
        now: Tick,
        out: &mut Outbox,
    ) -> Result<(), ProcessError> {
        let from = self.get(id)?.transition(to, now)?;
        out.trace("status", json!({"instance": id, "from": from, "to": to}));
        Ok(())
    }

    fn start(&mut self, id: &InstanceId, now: Tick, out: &mut Outbox) -> Result<(), ProcessError> {
        let spec = self
            .specs
            .get(id)
            .cloned()
            .ok_or_else(|| ProcessError::UnknownInstance(id.clone()))?;
        let program = self
            .programs
            .get(&spec.process_model)
            .ok_or_else(|| ProcessError::UnknownProcessModel(spec.process_model.to_string()))?;
        let master_id = program.master_id.clone();
        let inst = ProcessInstance::new(
            id.clone(),
            spec.process_model.clone(),
            spec.principal.clone(),
            now,
        );
        self.instances.insert(id.clone(), inst);
        out.trace("instance_created", json!({"instance": id, "process_model": spec.process_model, "principal": spec.principal}));
        if let Err(e) = self.authenticate(&spec.principal) {
            out.trace(
                "auth_failed",
                json!({"instance": id, "error": e.to_string()}),
            );
            return self.set_status(id, Status::Failed, now, out);
        }
        out.send(
            Pool::Rules,
            Body::RegisterProcess(RegisterProcess {
                instance: id.clone(),
                process_model: spec.process_model,
                master_id,
                share_with: spec.share_with,
                copy_from: None,
            }),
        );
        Ok(())
    }

    pub fn apply_decision(
        &mut self,
        d: &DecisionMsg,
        now: Tick,
        out: &mut Outbox,
    ) -> Result<(), ProcessError> {
        let id = &d.instance;
        let inst = lookup(&mut self.instances, id)?;
        let unexpected = |detail: String| ProcessError::UnexpectedDecision {
            instance: id.clone(),
            detail,
        };
        match &d.outcome {
            DecisionOutcome::Ready => {
                if inst.status != Status::Initializing {
                    return Err(unexpected(format!("ready while {:?}", inst.status)));
                }
                self.set_status(id, Status::Running, now, out)?;
                self.run(id, now, out)
            }
            DecisionOutcome::InitFailed { reason } => {
                if inst.status != Status::Initializing {
                    return Err(unexpected(format!("init failure while {:?}", inst.status)));
                }
                out.trace("init_failed", json!({"instance": id, "reason": reason}));
                self.set_status(id, Status::Failed, now, out)?;
                self.terminated(id, now, out)
            }
            outcome @ (DecisionOutcome::SelectVariant { .. } | DecisionOutcome::Continue) => {
                let Some((request, gate)) = inst.awaiting.clone() else {
                    return Err(unexpected("no evaluation outstanding".into()));
                };
                if d.request != Some(request) || d.gate.as_ref() != Some(&gate) {
                    return Err(unexpected(format!(
                        "decision for request {:?} while awaiting {request}",
                        d.request
                    )));
                }
                let program = &self.programs[&inst.process_model];
                let Some(Instr::Gate { branches, .. }) = program.instrs.get(inst.pc) else {
                    return Err(unexpected("instance is not at a gate".into()));
                };
                let variant = match outcome {
                    DecisionOutcome::SelectVariant { variant } => variant.clone(),
                    _ => program.gates[&gate].default_variant.clone(),
                };
                let Some(&target) = branches.get(&variant) else {
                    return Err(unexpected(format!("gate {gate} has no variant {variant}")));
                };
                inst.checkpoints.push(Checkpoint {
                    gate: gate.clone(),
                    pc: inst.pc,
                    variant: variant.clone(),
                    tick: now,
                    tasks_done: inst.completed_tasks.len(),
                });
                inst.pc = target;
                inst.awaiting = None;
                out.trace(
                    "variant_selected",
                    json!({"instance": id, "gate": gate, "variant": variant, "rule": d.rule}),
                );
                self.set_status(id, Status::Running, now, out)?;
                self.run(id, now, out)
            }
        }
    }

    pub fn break_and_rollback(
        &mut self,
        b: &BreakRollbackMsg,
        now: Tick,
        out: &mut Outbox,
    ) -> Result<(), ProcessError> {
        let id = &b.instance;
        let inst = self.get(id)?;
        // A newer generation means the rules engine voids the outstanding
        // request, so an awaiting instance has to ask again whatever happens.
        let request_voided =
            inst.status == Status::AwaitingDecision && b.generation > inst.generation;
        inst.generation = inst.generation.max(b.generation);
        if !matches!(inst.status, Status::Running | Status::AwaitingDecision) {
            return Err(ProcessError::IllegalTransition {
                instance: id.clone(),
                from: inst.status,
                to: Status::RolledBack,
            });
        }
        // `Some(to)` rewinds to a checkpoint or the start; `None` re-enters
        // the gate currently awaiting its decision.
        let to = match &b.target {
            RollbackTarget::Start => Some(None),
            RollbackTarget::Gate(g) => match inst.checkpoints.iter().rposition(|c| &c.gate == g) {
                Some(i) => Some(Some(i)),
                None if request_voided || inst.awaiting.as_ref().is_some_and(|(_, a)| a == g) => {
                    None
                }
                None => {
                    return Err(ProcessError::UnknownCheckpoint {
                        instance: id.clone(),
                        gate: g.clone(),
                    })
                }
            },
        };
        out.trace(
            "break",
            json!({"instance": id, "target": b.target.to_string(), "rule": b.rule}),
        );
        self.set_status(id, Status::RolledBack, now, out)?;
        let inst = self.get(id)?;
        let undone = match to {
            Some(to) => inst.rewind(to),
            None => {
                inst.epoch += 1;
                inst.awaiting = None;
                Vec::new()
            }
        };
        for task in undone {
            out.trace("undo", json!({"instance": id, "task": task}));
        }
        out.trace(
            "rollback",
            json!({"instance": id, "target": b.target.to_string(), "pc": self.get(id)?.pc}),
        );
        self.set_status(id, Status::Running, now, out)?;
        self.run(id, now, out)
    }

    pub fn start_compensation(
        &mut self,
        s: &StartCompensationMsg,
        now: Tick,
        out: &mut Outbox,
    ) -> Result<(), ProcessError> {
        let parent = &s.parent;
        let program = self
            .programs
            .get(s.process_ref.as_str())
            .ok_or_else(|| ProcessError::UnknownProcessModel(s.process_ref.clone()))?;
        let master_id = program.master_id.clone();
        let p = self.get(parent)?;
        let principal = p.principal.clone();
        if !p.status.can_become(Status::Compensating) {
            return Err(ProcessError::IllegalTransition {
                instance: parent.clone(),
                from: p.status,
                to: Status::Compensating,
            });
        }
        let n = self
            .instances
            .keys()
            .filter(|k| k.as_str().starts_with(&format!("{parent}.c")))
            .count()
            + 1;
        let child = InstanceId::new(format!("{parent}.c{n}"));
        self.set_status(parent, Status::Compensating, now, out)?;
        let p = self.get(parent)?;
        p.epoch += 1;
        p.awaiting = None;
        p.compensation = Some(child.clone());
        let mut inst =
            ProcessInstance::new(child.clone(), s.process_ref.as_str().into(), principal, now);
        inst.parent = Some(parent.clone());
        self.instances.insert(child.clone(), inst);
        out.trace(
            "compensation_started",
            json!({"parent": parent, "child": child, "process_model": s.process_ref, "variant": s.variant, "rule": s.rule}),
        );
        out.send(
            Pool::Rules,
            Body::RegisterProcess(RegisterProcess {
                instance: child,
                process_model: s.process_ref.as_str().into(),
                master_id,
                share_with: None,
                copy_from: Some(parent.clone()),
            }),
        );
        Ok(())
    }

    fn cancel(
        &mut self,
        id: &InstanceId,
        reason: &str,
        now: Tick,
        out: &mut Outbox,
    ) -> Result<(), ProcessError> {
        let inst = self.get(id)?;
        if inst.status.is_terminal() {
            return Ok(());
        }
        let child = inst.compensation.clone();
        out.trace("cancel", json!({"instance": id, "reason": reason}));
        self.set_status(id, Status::Cancelled, now, out)?;
        out.send(
            Pool::Rules,
            Body::ProcessCancelled(CancelMsg {
                instance: id.clone(),
                reason: reason.to_owned(),
            }),
        );
        if let Some(child) = child {
            self.cancel(&child, &format!("parent {id} cancelled"), now, out)?;
        }
        Ok(())
    }

    /// Called once an instance reached a terminal status on its own.
    fn terminated(
        &mut self,
        id: &InstanceId,
        now: Tick,
        out: &mut Outbox,
    ) -> Result<(), ProcessError> {
        let inst = self.get(id)?;
        let parent = inst.parent.clone();
        // Rules and context already released a failed initialization.
        if inst.status == Status::Completed {
            out.send(
                Pool::Rules,
                Body::ProcessCompleted(InstanceMsg {
                    instance: id.clone(),
                }),
            );
        }
        if let Some(parent) = parent {
            if self.get(&parent)?.status == Status::Compensating {
                let reason = format!("compensated by {id}");
                self.cancel(&parent, &reason, now, out)?;
            }
        }
        Ok(())
    }

    fn task_done(
        &mut self,
        id: &InstanceId,
        epoch: u64,
        now: Tick,
        out: &mut Outbox,
    ) -> Result<(), ProcessError> {
        let inst = lookup(&mut self.instances, id)?;
        if inst.epoch != epoch || inst.status != Status::Running {
            return Ok(());
        }
        let Some(Instr::Task { task_id, .. }) = self.programs[&inst.process_model]
            .instrs
            .get(inst.pc)
            .cloned()
        else {
            return Ok(());
        };
        inst.completed_tasks.push(task_id.clone());
        inst.pc += 1;
        out.trace("task_completed", json!({"instance": id, "task": task_id}));
        let facts: Vec<MirrorFact> = self
            .mirrors
            .iter()
            .filter(|m| m.task == task_id)
            .filter_map(|m| {
                let payload = match (&m.value, &m.gate) {
                    (Some(v), _) => v.clone(),
                    (None, Some(g)) => Payload::Text(inst.chosen(g.as_str())?.to_string()),
                    (None, None) => return None,
                };
                Some(MirrorFact {
                    instance: id.clone(),
                    category: m.category.clone(),
                    payload,
                })
            })
            .collect();
        out.facts.extend(facts);
        self.run(id, now, out)
    }

    /// Executes from the current pc until the instance waits on a task
    /// timer, a gate decision or terminates.
    fn run(&mut self, id: &InstanceId, now: Tick, out: &mut Outbox) -> Result<(), ProcessError> {
        loop {
            let inst = lookup(&mut self.instances, id)?;
            let instr = self.programs[&inst.process_model].instrs[inst.pc].clone();
            match instr {
                Instr::Task { task_id, duration } => {
                    let inst = self.get(id)?;
                    out.trace(
                        "task_started",
                        json!({"instance": id, "task": task_id, "until": now + duration}),
                    );
                    out.timer(
                        now + duration,
                        Timer::TaskDone {
                            instance: id.clone(),
                            epoch: inst.epoch,
                        },
                    );
                    return Ok(());
                }
                Instr::Gate { gate_id, .. } => {
                    self.next_request += 1;
                    let request = self.next_request;
                    let inst = self.get(id)?;
                    inst.awaiting = Some((request, gate_id.clone()));
                    let generation = inst.generation;
                    out.trace(
                        "gate_reached",
                        json!({"instance": id, "gate": gate_id, "request": request}),
                    );
                    self.set_status(id, Status::AwaitingDecision, now, out)?;
                    out.send(
                        Pool::Rules,
                        Body::RuleEvalRequest(RuleEvalRequest {
                            request,
                            instance: id.clone(),
                            gate: gate_id,
                            generation,
                        }),
                    );
                    return Ok(());
                }
                Instr::Jump { to } => self.get(id)?.pc = to,
                Instr::End => {
                    self.set_status(id, Status::Completed, now, out)?;
                    return self.terminated(id, now, out);
                }
            }
        }
    }

    /// The variant an instance chose at `gate`, if it passed it.
    pub fn chosen(&self, instance: &str, gate: &str) -> Option<&VariantId> {
        self.instances.get(instance)?.chosen(gate)
    }
}

fn lookup<'a>(
    instances: &'a mut BTreeMap<InstanceId, ProcessInstance>,
    id: &InstanceId,
) -> Result<&'a mut ProcessInstance, ProcessError> {
    instances
        .get_mut(id)
        .ok_or_else(|| ProcessError::UnknownInstance(id.clone()))
}
