//! The rules engine pool: binds process instances to context models,
//! evaluates gates on request and re-evaluates stored decisions when the
//! context they read changes.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use serde_json::json;

use super::eval::{evaluate_gate, Decision, GateEvaluation, ValueMap};
use super::RuleBase;
use crate::choreography::{
    Body, BreakRollbackMsg, ContextRequest, DecisionMsg, DecisionOutcome, InstanceMsg, Message,
    Outbox, Pool, RegisterContext, RegisterProcess, RollbackTarget, RuleEvalRequest, SnapshotReply,
    StartCompensationMsg,
};
use crate::engine::{ContextSnapshot, Notification, NotificationThreshold};
use crate::ids::{CategoryId, GateId, InstanceId, ModelId, ProcessModelId, RuleId, Tick};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Native,
    Reevaluation,
}

/// One stored gate decision with the context it was based on.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvaluationRecord {
    pub record_id: String,
    pub gate: GateId,
    pub decision: Decision,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rule: Option<RuleId>,
    /// The relevant context: each referenced category with the ts read.
    pub relevant: BTreeMap<CategoryId, Option<Tick>>,
    pub kind: RecordKind,
    pub tick: Tick,
}

impl EvaluationRecord {
    pub fn reads_any(&self, changed: &BTreeSet<CategoryId>) -> bool {
        self.relevant.keys().any(|c| changed.contains(c))
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Binding {
    process_model: ProcessModelId,
    model_id: Option<ModelId>,
    listening: bool,
}

#[derive(Clone, Debug, PartialEq)]
enum PendingKind {
    Native { request: u64, gate: GateId },
    Reevaluation { record_id: String },
}

#[derive(Clone, Debug, PartialEq)]
struct Pending {
    instance: InstanceId,
    kind: PendingKind,
    epoch: u64,
}

#[derive(Clone, Debug, Default)]
pub struct RulesEngine {
    base: RuleBase,
    thresholds: Vec<NotificationThreshold>,
    bindings: BTreeMap<InstanceId, Binding>,
    records: BTreeMap<InstanceId, Vec<EvaluationRecord>>,
    pending: BTreeMap<u64, Pending>,
    /// Bumped on every rollback, compensation and unbind; pending
    /// evaluations from an older epoch are void.
    epochs: BTreeMap<InstanceId, u64>,
    /// Rollbacks issued per instance. Rule requests stamped with an older
    /// generation were sent before the process saw the latest rollback.
    generations: BTreeMap<InstanceId, u64>,
    /// Registered instances whose initial snapshot has not arrived yet.
    awaiting_initial: BTreeSet<InstanceId>,
    /// Terminated instances whose context shutdown waits for outstanding
    /// snapshot replies, so the context engine answers nothing after it.
    shutdown_deferred: BTreeSet<InstanceId>,
    next_request: u64,
    next_record: u64,
}

impl RulesEngine {
    pub fn new(base: RuleBase, thresholds: Vec<NotificationThreshold>) -> Self {
        Self {
            base,
            thresholds,
            ..Self::default()
        }
    }

    pub fn base(&self) -> &RuleBase {
        &self.base
    }

    pub fn records(&self, instance: &str) -> &[EvaluationRecord] {
        self.records.get(instance).map_or(&[], Vec::as_slice)
    }

    pub fn is_listening(&self, instance: &str) -> bool {
        self.bindings.get(instance).is_some_and(|b| b.listening)
    }

    fn epoch(&self, instance: &InstanceId) -> u64 {
        self.epochs.get(instance).copied().unwrap_or(0)
    }

    fn bump(&mut self, instance: &InstanceId) {
        *self.epochs.entry(instance.clone()).or_default() += 1;
    }

    /// Starts listening for `instance`'s context changes. Returns `false`
    /// when it was already listening.
    pub fn bind_and_listen(&mut self, instance: &InstanceId, model_id: ModelId) -> bool {
        let Some(b) = self.bindings.get_mut(instance) else {
            return false;
        };
        let fresh = !b.listening;
        b.listening = true;
        b.model_id = Some(model_id);
        fresh
    }

    /// Forgets the instance: binding, stored records and pending work.
    /// Returns the number of records cleared.
    pub fn unbind(&mut self, instance: &InstanceId) -> Option<usize> {
        self.bindings.remove(instance)?;
        self.bump(instance);
        Some(self.records.remove(instance).map_or(0, |r| r.len()))
    }

    fn has_pending(&self, instance: &InstanceId) -> bool {
        self.awaiting_initial.contains(instance)
            || self.pending.values().any(|p| &p.instance == instance)
    }

    /// Sends a deferred shutdown once the last outstanding reply is in.
    fn release_deferred(&mut self, instance: &InstanceId, out: &mut Outbox) {
        if !self.has_pending(instance) && self.shutdown_deferred.remove(instance) {
            out.send(
                Pool::Context,
                Body::ShutdownModel(InstanceMsg {
                    instance: instance.clone(),
                }),
            );
        }
    }

    pub fn handle(&mut self, msg: &Message, now: Tick, out: &mut Outbox) {
        match &msg.body {
            Body::RegisterProcess(r) => self.on_register(r, out),
            Body::ContextSnapshot(s) => self.on_snapshot(s, now, out),
            Body::RuleEvalRequest(r) => self.on_eval_request(r, now, out),
            Body::ContextNotification(n) => self.on_context_change(n, out),
            Body::ProcessCompleted(InstanceMsg { instance }) => {
                self.on_terminated(instance, "completed", out)
            }
            Body::ProcessCancelled(c) => self.on_terminated(&c.instance, "cancelled", out),
            other => out.trace("unexpected", json!({"kind": other.kind().as_str()})),
        }
    }

    fn on_register(&mut self, r: &RegisterProcess, out: &mut Outbox) {
        self.awaiting_initial.insert(r.instance.clone());
        self.bindings.insert(
            r.instance.clone(),
            Binding {
                process_model: r.process_model.clone(),
                model_id: None,
                listening: false,
            },
        );
        out.trace(
            "register",
            json!({"instance": r.instance, "process_model": r.process_model}),
        );
        out.send(
            Pool::Context,
            Body::RegisterContext(RegisterContext {
                instance: r.instance.clone(),
                master_id: r.master_id.clone(),
                thresholds: self.thresholds.clone(),
                share_with: r.share_with.clone(),
                copy_from: r.copy_from.clone(),
            }),
        );
    }

    fn on_snapshot(&mut self, s: &SnapshotReply, now: Tick, out: &mut Outbox) {
        if s.initial {
            return self.on_initial(s, out);
        }
        let Some(request) = s.request else {
            return out.trace(
                "unexpected",
                json!({"kind": "ContextSnapshot", "instance": s.instance}),
            );
        };
        let Some(p) = self.pending.remove(&request) else {
            return out.trace(
                "unexpected",
                json!({"kind": "ContextSnapshot", "request": request}),
            );
        };
        if p.epoch != self.epoch(&p.instance) {
            out.trace(
                "voided",
                json!({"instance": p.instance, "request": request}),
            );
            self.release_deferred(&p.instance, out);
            return;
        }
        match p.kind {
            PendingKind::Native { request, gate } => match &s.snapshot {
                Some(snap) => self.native(&p.instance, request, &gate, snap, now, out),
                None => {
                    let empty = ValueMap { now, values: BTreeMap::new() };
                    let mut eval = self.evaluate(&p.instance, &gate, &empty);
                    eval.error = s.error.clone().or(eval.error);
                    self.apply_native(&p.instance, request, eval, now, out);
                }
            },
            PendingKind::Reevaluation { record_id } => match &s.snapshot {
                Some(snap) => self.reevaluated(&p.instance, &record_id, snap, now, out),
                None => out.trace(
                    "reevaluation",
                    json!({"instance": p.instance, "record": record_id, "outcome": "failed", "error": s.error}),
                ),
            },
        }
    }

    fn on_initial(&mut self, s: &SnapshotReply, out: &mut Outbox) {
        let instance = &s.instance;
        let expected = self.awaiting_initial.remove(instance);
        if expected && !self.bindings.contains_key(instance) {
            out.trace("voided", json!({"instance": instance, "initial": true}));
            if s.error.is_some() {
                // A failed initialization is already released by the context engine.
                self.shutdown_deferred.remove(instance);
            }
            return self.release_deferred(instance, out);
        }
        let outcome = match (&s.snapshot, &s.error) {
            (Some(snap), None) => {
                let fresh = self.bind_and_listen(instance, snap.model_id.clone());
                out.trace(
                    "bind",
                    json!({"instance": instance, "model": snap.model_id, "already": !fresh}),
                );
                if !fresh {
                    return;
                }
                DecisionOutcome::Ready
            }
            (_, err) => {
                let reason = err.clone().unwrap_or_else(|| "no initial context".into());
                self.unbind(instance);
                out.trace(
                    "init_failed",
                    json!({"instance": instance, "reason": reason}),
                );
                DecisionOutcome::InitFailed { reason }
            }
        };
        out.send(
            Pool::Process,
            Body::Decision(DecisionMsg {
                instance: instance.clone(),
                request: None,
                gate: None,
                outcome,
                rule: None,
            }),
        );
    }

    fn gate_of(
        &self,
        instance: &InstanceId,
        gate: &GateId,
    ) -> Option<(&ProcessModelId, &super::GateRules)> {
        let pm = &self.bindings.get(instance)?.process_model;
        Some((pm, self.base.gate(pm.as_str(), gate.as_str())?))
    }

    fn evaluate(
        &self,
        instance: &InstanceId,
        gate: &GateId,
        ctx: &dyn super::eval::ContextView,
    ) -> GateEvaluation {
        match self.gate_of(instance, gate) {
            Some((pm, g)) => evaluate_gate(
                gate,
                &g.default_variant,
                &self.base.rules_for(pm.as_str(), gate.as_str()),
                ctx,
            ),
            None => unreachable!("gate checked before requesting context"),
        }
    }

    fn on_eval_request(&mut self, r: &RuleEvalRequest, now: Tick, out: &mut Outbox) {
        let issued = self.generations.get(&r.instance).copied().unwrap_or(0);
        if r.generation < issued {
            return out.trace(
                "voided",
                json!({"instance": r.instance, "eval_request": r.request, "generation": r.generation, "issued": issued}),
            );
        }
        let Some((pm, _)) = self.gate_of(&r.instance, &r.gate) else {
            out.trace("error", json!({"instance": r.instance, "error": format!("no rules bound for gate {}", r.gate)}));
            return;
        };
        let categories: BTreeSet<CategoryId> = self
            .base
            .rules_for(pm.as_str(), r.gate.as_str())
            .iter()
            .flat_map(|r| r.referenced_categories.iter().cloned())
            .collect();
        if categories.is_empty() {
            let eval = self.evaluate(
                &r.instance,
                &r.gate,
                &ValueMap {
                    now,
                    values: BTreeMap::new(),
                },
            );
            return self.apply_native(&r.instance, r.request, eval, now, out);
        }
        let id = self.fetch(&r.instance, categories, out);
        self.pending.insert(
            id,
            Pending {
                instance: r.instance.clone(),
                kind: PendingKind::Native {
                    request: r.request,
                    gate: r.gate.clone(),
                },
                epoch: self.epoch(&r.instance),
            },
        );
    }

    fn fetch(
        &mut self,
        instance: &InstanceId,
        categories: BTreeSet<CategoryId>,
        out: &mut Outbox,
    ) -> u64 {
        self.next_request += 1;
        let request = self.next_request;
        out.send(
            Pool::Context,
            Body::ContextRequest(ContextRequest {
                request,
                instance: instance.clone(),
                categories,
            }),
        );
        request
    }

    fn native(
        &mut self,
        instance: &InstanceId,
        request: u64,
        gate: &GateId,
        snap: &ContextSnapshot,
        now: Tick,
        out: &mut Outbox,
    ) {
        let eval = self.evaluate(instance, gate, snap);
        self.apply_native(instance, request, eval, now, out);
    }

    fn apply_native(
        &mut self,
        instance: &InstanceId,
        request: u64,
        mut eval: GateEvaluation,
        now: Tick,
        out: &mut Outbox,
    ) {
        // `continue` at a gate that has not been passed yet keeps the default.
        if eval.decision == Decision::Continue {
            let (_, g) = self
                .gate_of(instance, &eval.gate)
                .expect("gate checked before evaluation");
            eval.decision = Decision::Select {
                variant: g.default_variant.clone(),
            };
        }
        self.store(instance, &eval, now, out);
        let gate = eval.gate.clone();
        match &eval.decision {
            Decision::Select { variant } => out.send(
                Pool::Process,
                Body::Decision(DecisionMsg {
                    instance: instance.clone(),
                    request: Some(request),
                    gate: Some(gate),
                    outcome: DecisionOutcome::SelectVariant {
                        variant: variant.clone(),
                    },
                    rule: eval.fired.clone(),
                }),
            ),
            Decision::Continue => unreachable!("rewritten above"),
            Decision::Rollback { target } => {
                let target = target.clone();
                self.rollback(instance, &target, eval.fired.clone(), out);
            }
            Decision::StartCompensation {
                process_ref,
                variant,
            } => {
                self.drop_records(instance, 0, "compensation", out);
                self.bump(instance);
                out.send(
                    Pool::Process,
                    Body::StartCompensation(StartCompensationMsg {
                        parent: instance.clone(),
                        process_ref: process_ref.clone(),
                        variant: variant.clone(),
                        rule: eval.fired.clone(),
                    }),
                );
            }
        }
    }

    /// Stores a native record and traces it.
    fn store(&mut self, instance: &InstanceId, eval: &GateEvaluation, now: Tick, out: &mut Outbox) {
        self.next_record += 1;
        let record = EvaluationRecord {
            record_id: format!("r{}", self.next_record),
            gate: eval.gate.clone(),
            decision: eval.decision.clone(),
            rule: eval.fired.clone(),
            relevant: eval.relevant.clone(),
            kind: RecordKind::Native,
            tick: now,
        };
        trace_evaluation(instance, &record, eval, out);
        self.records
            .entry(instance.clone())
            .or_default()
            .push(record);
    }

    /// Drops records from index `from` onward.
    fn drop_records(&mut self, instance: &InstanceId, from: usize, reason: &str, out: &mut Outbox) {
        let Some(list) = self.records.get_mut(instance) else {
            return;
        };
        if from >= list.len() {
            return;
        }
        let dropped: Vec<String> = list.drain(from..).map(|r| r.record_id).collect();
        out.trace(
            "records_dropped",
            json!({"instance": instance, "records": dropped, "reason": reason}),
        );
    }

    /// Issues a rollback: stored records from the target onward no longer
    /// describe the instance, and pending evaluations are void.
    fn rollback(
        &mut self,
        instance: &InstanceId,
        target: &RollbackTarget,
        rule: Option<RuleId>,
        out: &mut Outbox,
    ) {
        let from = match target {
            RollbackTarget::Start => 0,
            RollbackTarget::Gate(g) => {
                let list = self.records(instance.as_str());
                list.iter()
                    .rposition(|r| &r.gate == g)
                    .unwrap_or(list.len())
            }
        };
        self.drop_records(instance, from, "rollback", out);
        self.bump(instance);
        let generation = self.generations.entry(instance.clone()).or_default();
        *generation += 1;
        out.send(
            Pool::Process,
            Body::BreakRollback(BreakRollbackMsg {
                instance: instance.clone(),
                target: target.clone(),
                rule,
                generation: *generation,
            }),
        );
    }

    /// Re-evaluation closure: every stored record whose relevant context
    /// intersects the changed categories is re-evaluated, nothing else.
    pub fn on_context_change(&mut self, n: &Notification, out: &mut Outbox) {
        let instance = &n.instance;
        let changed = n.categories();
        if !self.is_listening(instance.as_str()) {
            out.trace(
                "dropped",
                json!({"instance": instance, "kind": "ContextNotification", "reason": "instance not bound", "changed": changed}),
            );
            return;
        }
        let selected: Vec<String> = self
            .records(instance.as_str())
            .iter()
            .filter(|r| r.reads_any(&changed))
            .map(|r| r.record_id.clone())
            .collect();
        out.trace(
            "reevaluate",
            json!({"instance": instance, "changed": changed, "selected": selected}),
        );
        for record_id in selected {
            let record = self
                .records(instance.as_str())
                .iter()
                .find(|r| r.record_id == record_id)
                .unwrap();
            let categories = record.relevant.keys().cloned().collect();
            let id = self.fetch(instance, categories, out);
            self.pending.insert(
                id,
                Pending {
                    instance: instance.clone(),
                    kind: PendingKind::Reevaluation { record_id },
                    epoch: self.epoch(instance),
                },
            );
        }
    }

    fn reevaluated(
        &mut self,
        instance: &InstanceId,
        record_id: &str,
        snap: &ContextSnapshot,
        now: Tick,
        out: &mut Outbox,
    ) {
        let Some(pos) = self
            .records(instance.as_str())
            .iter()
            .position(|r| r.record_id == record_id)
        else {
            return out.trace("voided", json!({"instance": instance, "record": record_id}));
        };
        let previous = self.records[instance][pos].clone();
        let eval = self.evaluate(instance, &previous.gate, snap);
        let unchanged = eval.decision == previous.decision || eval.decision == Decision::Continue;
        let updated = EvaluationRecord {
            record_id: previous.record_id.clone(),
            gate: previous.gate.clone(),
            decision: if unchanged {
                previous.decision.clone()
            } else {
                eval.decision.clone()
            },
            rule: eval.fired.clone(),
            relevant: eval.relevant.clone(),
            kind: RecordKind::Reevaluation,
            tick: now,
        };
        trace_evaluation(instance, &updated, &eval, out);
        self.records.get_mut(instance).unwrap()[pos] = updated;
        let outcome = match &eval.decision {
            _ if unchanged => "unchanged",
            Decision::Select { .. } => {
                self.rollback(
                    instance,
                    &RollbackTarget::Gate(previous.gate.clone()),
                    eval.fired.clone(),
                    out,
                );
                "rollback"
            }
            Decision::Rollback { target } => {
                self.rollback(instance, target, eval.fired.clone(), out);
                "rollback"
            }
            Decision::StartCompensation {
                process_ref,
                variant,
            } => {
                self.rollback(instance, &RollbackTarget::Start, eval.fired.clone(), out);
                out.send(
                    Pool::Process,
                    Body::StartCompensation(StartCompensationMsg {
                        parent: instance.clone(),
                        process_ref: process_ref.clone(),
                        variant: variant.clone(),
                        rule: eval.fired.clone(),
                    }),
                );
                "compensation"
            }
            Decision::Continue => unreachable!("continue counts as unchanged"),
        };
        out.trace(
            "reevaluation",
            json!({"instance": instance, "record": record_id, "outcome": outcome, "decision": eval.decision}),
        );
    }

    fn on_terminated(&mut self, instance: &InstanceId, how: &str, out: &mut Outbox) {
        match self.unbind(instance) {
            Some(cleared) => {
                out.trace(
                    "unbound",
                    json!({"instance": instance, "records_cleared": cleared, "reason": how}),
                );
                if self.has_pending(instance) {
                    self.shutdown_deferred.insert(instance.clone());
                } else {
                    out.send(
                        Pool::Context,
                        Body::ShutdownModel(InstanceMsg {
                            instance: instance.clone(),
                        }),
                    );
                }
            }
            None => out.trace(
                "unbound",
                json!({"instance": instance, "records_cleared": 0, "reason": how, "already": true}),
            ),
        }
    }
}

fn trace_evaluation(
    instance: &InstanceId,
    record: &EvaluationRecord,
    eval: &GateEvaluation,
    out: &mut Outbox,
) {
    out.trace(
        "evaluation",
        json!({
            "instance": instance,
            "record": record.record_id,
            "gate": record.gate,
            "kind": record.kind,
            "decision": eval.decision,
            "rule": eval.fired,
            "relevant": record.relevant,
            "skipped": eval.skipped,
            "error": eval.error,
        }),
    );
}
