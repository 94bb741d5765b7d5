//! Message-driven side of the context engine: initialization polling,
//! request handling with on-demand extension, and shutdown.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::json;

use super::{ContextEngine, EngineError, IngestReport, InitState, PendingRequest, PollPurpose};
use crate::choreography::{
    Body, ContextRequest, Message, Outbox, PollRequestMsg, PollResponseMsg, Pool, RegisterContext,
    SnapshotReply, SourceEventMsg, Timer,
};
use crate::ids::{CategoryId, InstanceId, ModelId, SourceId, Tick};

impl ContextEngine {
    pub fn handle(&mut self, msg: &Message, now: Tick, out: &mut Outbox) {
        match &msg.body {
            Body::RegisterContext(m) => self.on_register(m, now, out),
            Body::ContextRequest(m) => self.on_request(m, now, out),
            Body::SourceEvent(m) => self.on_source_event(m, out),
            Body::PollResponse(m) => self.on_poll_response(m, now, out),
            Body::ShutdownModel(m) => self.on_shutdown(&m.instance, out),
            other => out.trace("unexpected", json!({"kind": other.kind().as_str()})),
        }
    }

    pub fn on_timer(&mut self, timer: &Timer, now: Tick, out: &mut Outbox) {
        match timer {
            Timer::InitRound { instance } => {
                if self.inits.contains_key(instance) {
                    self.poll_round(instance, now, out);
                }
            }
            Timer::PeriodicPoll => {
                for (source, categories) in self.poll_due_sources(now) {
                    self.send_poll(source, categories, PollPurpose::Periodic, out);
                }
                if let Some(next) = self.next_poll_tick(now) {
                    out.timer(next, Timer::PeriodicPoll);
                }
            }
            _ => {}
        }
    }

    fn on_register(&mut self, m: &RegisterContext, now: Tick, out: &mut Outbox) {
        let result = if let Some(parent) = &m.copy_from {
            match self.cloud.model_of(parent).cloned() {
                Some(from) => self.register_copy(&m.instance, m.thresholds.clone(), &from),
                None => Err(EngineError::UnknownSharedModel(parent.to_string())),
            }
        } else {
            let shared = match &m.share_with {
                Some(other) => match self.cloud.model_of(other).cloned() {
                    Some(model) => Some(model),
                    None => {
                        self.reply_init_failure(
                            &m.instance,
                            &EngineError::UnknownSharedModel(other.to_string()),
                            out,
                        );
                        return;
                    }
                },
                None => None,
            };
            self.register_instance(
                &m.instance,
                &m.master_id,
                m.thresholds.clone(),
                shared.as_ref(),
            )
        };
        match result {
            Ok(model_id) => {
                let reg = self
                    .cloud
                    .registrations
                    .get_mut(&m.instance)
                    .expect("just registered");
                reg.ready = false;
                let model = &self.cloud.instances[&model_id];
                out.trace(
                    "registered",
                    json!({
                        "instance": m.instance,
                        "model": model_id,
                        "bound": model.bound_instances,
                        "step": model.intersection().step(),
                    }),
                );
                self.inits.insert(
                    m.instance.clone(),
                    InitState {
                        rounds: 0,
                        outstanding: BTreeSet::new(),
                    },
                );
                self.advance_init(&m.instance, now, out);
            }
            Err(e) => self.reply_init_failure(&m.instance, &e, out),
        }
    }

    fn reply_init_failure(&mut self, instance: &InstanceId, e: &EngineError, out: &mut Outbox) {
        out.trace(
            "error",
            json!({"instance": instance, "error": e.to_string()}),
        );
        out.send(
            Pool::Rules,
            Body::ContextSnapshot(SnapshotReply {
                instance: instance.clone(),
                request: None,
                initial: true,
                snapshot: None,
                error: Some(e.to_string()),
            }),
        );
    }

    /// Finishes initialization when every category is valued, otherwise
    /// polls again or gives up once the budget is spent.
    fn advance_init(&mut self, instance: &InstanceId, now: Tick, out: &mut Outbox) {
        let Some(model_id) = self.cloud.model_of(instance).cloned() else {
            return;
        };
        let unvalued = self.cloud.instances[&model_id].intersection().unvalued();
        let rounds = self.inits.get(instance).map_or(0, |s| s.rounds);
        if unvalued.is_empty() {
            self.inits.remove(instance);
            self.cloud
                .registrations
                .get_mut(instance)
                .expect("registered")
                .ready = true;
            let all = self.cloud.instances[&model_id]
                .intersection()
                .category_ids();
            let snapshot = self.get_context(&model_id, &all, now).ok();
            out.trace(
                "init_ready",
                json!({"instance": instance, "model": model_id, "rounds": rounds, "step": snapshot.as_ref().map(|s| s.graph.step()), "categories": all}),
            );
            out.send(
                Pool::Rules,
                Body::ContextSnapshot(SnapshotReply {
                    instance: instance.clone(),
                    request: None,
                    initial: true,
                    snapshot,
                    error: None,
                }),
            );
        } else if rounds == 0 {
            self.poll_round(instance, now, out);
        } else if rounds >= self.config.poll_budget {
            self.fail_init(instance, rounds, &unvalued, out);
        } else {
            out.timer(
                now + 1,
                Timer::InitRound {
                    instance: instance.clone(),
                },
            );
        }
    }

    fn poll_round(&mut self, instance: &InstanceId, now: Tick, out: &mut Outbox) {
        let Some(model_id) = self.cloud.model_of(instance).cloned() else {
            return;
        };
        let unvalued = self.cloud.instances[&model_id].intersection().unvalued();
        if unvalued.is_empty() {
            return self.advance_init(instance, now, out);
        }
        let targets = self.poll_targets(&unvalued);
        let rounds = {
            let state = self.inits.get_mut(instance).expect("initializing");
            state.rounds += 1;
            state.rounds
        };
        if targets.is_empty() {
            return self.fail_init(instance, rounds - 1, &unvalued, out);
        }
        out.trace(
            "poll_round",
            json!({"instance": instance, "round": rounds, "unvalued": unvalued}),
        );
        for (source, categories) in targets {
            let id = self.send_poll(source, categories, PollPurpose::Init(instance.clone()), out);
            self.inits
                .get_mut(instance)
                .expect("initializing")
                .outstanding
                .insert(id);
        }
    }

    fn fail_init(
        &mut self,
        instance: &InstanceId,
        rounds: u32,
        unvalued: &BTreeSet<CategoryId>,
        out: &mut Outbox,
    ) {
        let missing = unvalued
            .iter()
            .map(|c| c.as_str())
            .collect::<Vec<_>>()
            .join(", ");
        let err = EngineError::InitializationTimeout {
            instance: instance.clone(),
            rounds,
            missing,
        };
        out.trace(
            "init_timeout",
            json!({"instance": instance, "rounds": rounds, "unvalued": unvalued}),
        );
        self.inits.remove(instance);
        self.release(instance, out);
        out.send(
            Pool::Rules,
            Body::ContextSnapshot(SnapshotReply {
                instance: instance.clone(),
                request: None,
                initial: true,
                snapshot: None,
                error: Some(err.to_string()),
            }),
        );
    }

    fn send_poll(
        &mut self,
        source: SourceId,
        categories: BTreeSet<CategoryId>,
        purpose: PollPurpose,
        out: &mut Outbox,
    ) -> u64 {
        self.next_poll += 1;
        let id = self.next_poll;
        self.polls.insert(id, purpose);
        out.send(
            Pool::External,
            Body::PollRequest(PollRequestMsg {
                request: id,
                source,
                categories,
            }),
        );
        id
    }

    fn on_request(&mut self, m: &ContextRequest, now: Tick, out: &mut Outbox) {
        let Some(model_id) = self.cloud.model_of(&m.instance).cloned() else {
            let e = EngineError::UnknownRegistration(m.instance.clone());
            out.trace(
                "error",
                json!({"instance": m.instance, "error": e.to_string()}),
            );
            out.send(
                Pool::Rules,
                Body::ContextSnapshot(SnapshotReply {
                    instance: m.instance.clone(),
                    request: Some(m.request),
                    initial: false,
                    snapshot: None,
                    error: Some(e.to_string()),
                }),
            );
            return;
        };
        let mut failures = BTreeMap::new();
        let graph = self.cloud.instances[&model_id].intersection();
        let missing: BTreeSet<CategoryId> = m
            .categories
            .iter()
            .filter(|c| !graph.contains(c.as_str()))
            .cloned()
            .collect();
        if !missing.is_empty() {
            match self.administer_extension(&model_id, &missing) {
                Ok(res) => {
                    if let Some(delta) = &res.delta {
                        out.trace(
                            "extend",
                            json!({"model": model_id, "step": self.cloud.instances[&model_id].intersection().step(),
                                   "delta": delta, "trigger": "request", "instance": m.instance}),
                        );
                    }
                    failures = res.failures;
                }
                Err(e) => {
                    failures = missing.iter().map(|c| (c.clone(), e.to_string())).collect();
                }
            }
        }
        let graph = self.cloud.instances[&model_id].intersection();
        let present: BTreeSet<CategoryId> = m
            .categories
            .iter()
            .filter(|c| graph.contains(c.as_str()))
            .cloned()
            .collect();
        let unvalued: BTreeSet<CategoryId> = present
            .iter()
            .filter(|c| graph.value(c.as_str()).is_none())
            .cloned()
            .collect();
        let mut waiting = BTreeSet::new();
        let mut to_fetch = BTreeSet::new();
        for c in unvalued {
            match self.fetches.get(&(model_id.clone(), c.clone())) {
                Some(id) => {
                    waiting.insert(*id);
                }
                None => {
                    to_fetch.insert(c);
                }
            }
        }
        for (source, cats) in self.poll_targets(&to_fetch) {
            let id = self.send_poll(
                source,
                cats.clone(),
                PollPurpose::Fetch {
                    model_id: model_id.clone(),
                },
                out,
            );
            for c in cats {
                self.fetches.insert((model_id.clone(), c), id);
            }
            waiting.insert(id);
        }
        let pending = PendingRequest {
            instance: m.instance.clone(),
            request: m.request,
            model_id,
            categories: present,
            waiting,
            failures,
        };
        if pending.waiting.is_empty() {
            self.respond(&pending, now, out);
        } else {
            self.pending.push(pending);
        }
    }

    fn respond(&self, p: &PendingRequest, now: Tick, out: &mut Outbox) {
        let (snapshot, mut error) = match self.get_context(&p.model_id, &p.categories, now) {
            Ok(s) => (Some(s), None),
            Err(e) => (None, Some(e.to_string())),
        };
        if !p.failures.is_empty() {
            let text = p
                .failures
                .iter()
                .map(|(c, e)| format!("{c}: {e}"))
                .collect::<Vec<_>>()
                .join("; ");
            error = Some(match error {
                Some(e) => format!("{e}; {text}"),
                None => text,
            });
        }
        out.send(
            Pool::Rules,
            Body::ContextSnapshot(SnapshotReply {
                instance: p.instance.clone(),
                request: Some(p.request),
                initial: false,
                snapshot,
                error,
            }),
        );
    }

    fn on_source_event(&mut self, m: &SourceEventMsg, out: &mut Outbox) {
        let report = self.ingest_batch(&m.events, m.instance.as_ref());
        self.emit_report(&report, out);
    }

    fn on_poll_response(&mut self, m: &PollResponseMsg, now: Tick, out: &mut Outbox) {
        let Some(purpose) = self.polls.remove(&m.request) else {
            out.trace(
                "dropped",
                json!({"reason": "unknown poll", "request": m.request}),
            );
            return;
        };
        let report = self.ingest_values(m.values.clone(), None);
        self.emit_report(&report, out);
        match purpose {
            PollPurpose::Init(instance) => {
                let done = match self.inits.get_mut(&instance) {
                    Some(state) => {
                        state.outstanding.remove(&m.request);
                        state.outstanding.is_empty()
                    }
                    None => false,
                };
                if done {
                    self.advance_init(&instance, now, out);
                }
            }
            PollPurpose::Fetch { model_id } => {
                self.fetches
                    .retain(|(mid, _), id| !(mid == &model_id && *id == m.request));
                let mut ready = Vec::new();
                for p in &mut self.pending {
                    p.waiting.remove(&m.request);
                }
                self.pending.retain(|p| {
                    if p.waiting.is_empty() {
                        ready.push(p.clone());
                        false
                    } else {
                        true
                    }
                });
                for p in &ready {
                    self.respond(p, now, out);
                }
            }
            PollPurpose::Periodic => {}
        }
    }

    pub(crate) fn emit_report(&self, report: &IngestReport, out: &mut Outbox) {
        for e in &report.errors {
            out.trace("error", json!({"error": e}));
        }
        for mi in &report.models {
            if let Some(delta) = &mi.extension {
                let step = self
                    .cloud
                    .instances
                    .get(&mi.model_id)
                    .map(|m| m.intersection().step());
                out.trace(
                    "extend",
                    json!({"model": mi.model_id, "step": step, "delta": delta, "trigger": "event"}),
                );
            }
            for c in &mi.conflicts {
                out.trace("conflict", serde_json::to_value(c).expect("serializable"));
            }
            for r in &mi.rejected {
                out.trace("stale_write", json!({"model": mi.model_id, "rejection": r}));
            }
            for e in &mi.errors {
                out.trace("error", json!({"model": mi.model_id, "error": e}));
            }
            if !mi.changes.is_empty() {
                let notified: BTreeMap<&InstanceId, BTreeSet<CategoryId>> = mi
                    .notifications
                    .iter()
                    .map(|n| (&n.instance, n.categories()))
                    .collect();
                out.trace(
                    "ingest",
                    json!({
                        "model": mi.model_id,
                        "step": self.cloud.instances.get(&mi.model_id).map(|m| m.intersection().step()),
                        "changes": mi.changes,
                        "listeners": mi.listeners,
                        "notified": notified,
                    }),
                );
            }
            for n in &mi.notifications {
                out.send(Pool::Rules, Body::ContextNotification(n.clone()));
            }
        }
    }

    fn on_shutdown(&mut self, instance: &InstanceId, out: &mut Outbox) {
        if !self.cloud.registrations.contains_key(instance) {
            let e = EngineError::UnknownRegistration(instance.clone());
            out.trace(
                "error",
                json!({"instance": instance, "error": e.to_string()}),
            );
            return;
        }
        self.release(instance, out);
    }

    fn release(&mut self, instance: &InstanceId, out: &mut Outbox) {
        match self.shutdown_model(instance) {
            Ok(closed) => {
                out.trace("unregistered", json!({"instance": instance}));
                if let Some(model_id) = closed {
                    self.model_closed(&model_id, out);
                }
            }
            Err(e) => out.trace(
                "error",
                json!({"instance": instance, "error": e.to_string()}),
            ),
        }
    }

    fn model_closed(&self, model_id: &ModelId, out: &mut Outbox) {
        let model = &self.cloud.instances[model_id];
        out.trace(
            "model_closed",
            json!({
                "model": model_id,
                "end_step": model.problem().end.as_ref().map(|g| g.step()),
                "path_len": model.path().len(),
            }),
        );
    }
}
