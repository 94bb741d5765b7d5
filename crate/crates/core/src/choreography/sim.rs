//! Discrete-event loop driving the four pools over one ordered queue.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use super::{Message, Outbox, Pool, Timer};
use crate::engine::ContextEngine;
use crate::external::{bpm_descriptor, ExternalSim};
use crate::ids::{InstanceId, Tick};
use crate::process::{ProcessEngine, Status};
use crate::rules::RulesEngine;
use crate::scenario::{CompileError, Latency, Scenario, Violation};
use crate::trace::Trace;

/// Channels the architecture allows. The process engine never talks to the
/// context engine directly; the rules engine mediates.
const ROUTES: [(Pool, Pool); 6] = [
    (Pool::Process, Pool::Rules),
    (Pool::Rules, Pool::Process),
    (Pool::Rules, Pool::Context),
    (Pool::Context, Pool::Rules),
    (Pool::Context, Pool::External),
    (Pool::External, Pool::Context),
];

pub fn forbidden(from: Pool, to: Pool) -> bool {
    !ROUTES.contains(&(from, to))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    /// Every instance reached a terminal status and no message is in flight.
    Completed,
    /// The step budget ran out first.
    Truncated,
    /// Nothing left to do but some instance is not terminal.
    Stalled,
}

#[derive(Debug)]
enum Event {
    Deliver(Box<Message>),
    Timer(Timer),
}

pub struct Simulation {
    pub process: ProcessEngine,
    pub rules: RulesEngine,
    pub context: ContextEngine,
    pub external: ExternalSim,
    queue: BTreeMap<(Tick, u64), Event>,
    next_order: u64,
    next_msg: u64,
    /// Events that keep an unfinished run alive (messages and
    /// non-background timers).
    foreground: usize,
    in_flight: usize,
    channel_tail: BTreeMap<(Pool, Pool), Tick>,
    latency: Latency,
    rng: ChaCha8Rng,
    trace: Trace,
    now: Tick,
    steps: u64,
    max_steps: u64,
}

pub struct RunOutcome {
    pub status: RunStatus,
    pub steps: u64,
    pub final_tick: Tick,
    pub sim: Simulation,
}

impl RunOutcome {
    pub fn trace(&self) -> &Trace {
        &self.sim.trace
    }

    pub fn instance_status(&self, id: &str) -> Option<Status> {
        self.sim.process.instance(id).map(|i| i.status)
    }
}

/// Validates, builds and runs a scenario to its end.
pub fn run(scenario: &Scenario) -> Result<RunOutcome, CompileError> {
    let mut sim = Simulation::new(scenario)?;
    let status = sim.run_to_end();
    Ok(RunOutcome {
        status,
        steps: sim.steps,
        final_tick: sim.now,
        sim,
    })
}

impl Simulation {
    pub fn new(scenario: &Scenario) -> Result<Self, CompileError> {
        let compiled = scenario.compile()?;
        let invalid = |e: crate::engine::EngineError| {
            CompileError::Invalid(vec![Violation {
                code: "InvalidContextConfig".into(),
                message: e.to_string(),
            }])
        };
        let mut descriptors: Vec<_> = scenario
            .sources
            .iter()
            .map(|s| s.descriptor.clone())
            .collect();
        if !scenario.mirrors.is_empty() {
            descriptors.push(bpm_descriptor(&scenario.mirrors));
        }
        let mut context = ContextEngine::new(
            compiled.catalog,
            descriptors,
            scenario.cause_effects.clone(),
            scenario.derivation_agents.clone(),
            scenario.engine_config(),
        )
        .map_err(invalid)?;
        for m in compiled.masters {
            context.add_master(m).map_err(invalid)?;
        }
        let process = ProcessEngine::new(
            compiled.programs,
            scenario.instances.iter().cloned(),
            scenario.mirrors.clone(),
            scenario.denied_principals.clone(),
        );
        let rules = RulesEngine::new(compiled.rule_base, scenario.thresholds.clone());
        let external = ExternalSim::new(scenario.sources.iter().cloned());

        let mut sim = Self {
            process,
            rules,
            context,
            external,
            queue: BTreeMap::new(),
            next_order: 0,
            next_msg: 0,
            foreground: 0,
            in_flight: 0,
            channel_tail: BTreeMap::new(),
            latency: scenario.latency.clone(),
            rng: ChaCha8Rng::seed_from_u64(scenario.seed),
            trace: Trace::default(),
            now: 0,
            steps: 0,
            max_steps: scenario.limits.max_steps,
        };
        sim.trace.push(
            0,
            Pool::Harness,
            "run_start",
            json!({
                "scenario": scenario.name,
                "instances": scenario.instances.iter().map(|i| &i.instance_id).collect::<Vec<_>>(),
            }),
        );
        let mut timers = sim.process.start_timers();
        timers.extend(scenario.cancellations.iter().map(|c| {
            (
                c.tick,
                Timer::CancelInstance {
                    instance: c.instance.clone(),
                    reason: c.reason.clone(),
                },
            )
        }));
        if let Some(t) = sim.context.next_poll_tick(0) {
            timers.push((t, Timer::PeriodicPoll));
        }
        if let Some(t) = sim.external.first_push_from(0) {
            timers.push((t, Timer::PushSources));
        }
        timers.sort();
        for (at, t) in timers {
            sim.schedule(at, t);
        }
        Ok(sim)
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn into_trace(self) -> Trace {
        self.trace
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn run_to_end(&mut self) -> RunStatus {
        let status = loop {
            if self.in_flight == 0 && self.process.all_terminal() {
                break RunStatus::Completed;
            }
            if self.foreground == 0 {
                break RunStatus::Stalled;
            }
            if self.steps >= self.max_steps {
                break RunStatus::Truncated;
            }
            self.step();
        };
        let statuses: BTreeMap<&InstanceId, Status> = self
            .process
            .instances()
            .iter()
            .map(|(id, i)| (id, i.status))
            .collect();
        self.trace.push(
            self.now,
            Pool::Harness,
            "run_end",
            json!({"status": status, "steps": self.steps, "instances": statuses}),
        );
        status
    }

    /// Processes the earliest queued event. Returns false on an empty queue.
    pub fn step(&mut self) -> bool {
        let Some(((at, _), event)) = self.queue.pop_first() else {
            return false;
        };
        self.now = at;
        self.steps += 1;
        let mut out = Outbox::default();
        let pool = match event {
            Event::Deliver(msg) => {
                self.foreground -= 1;
                self.in_flight -= 1;
                self.trace.push(
                    at,
                    msg.receiver,
                    msg.kind().as_str(),
                    json!({"msg": msg.seq, "from": msg.sender, "sent_at": msg.tick, "body": msg.body.to_json()}),
                );
                match msg.receiver {
                    Pool::Process => self.process.handle(&msg, at, &mut out),
                    Pool::Rules => self.rules.handle(&msg, at, &mut out),
                    Pool::Context => self.context.handle(&msg, at, &mut out),
                    Pool::External => self.external.handle(&msg, at, &mut out),
                    Pool::Harness => {}
                }
                msg.receiver
            }
            Event::Timer(t) => {
                if !t.is_background() {
                    self.foreground -= 1;
                }
                match t.pool() {
                    Pool::Process => self.process.on_timer(&t, at, &mut out),
                    Pool::Context => self.context.on_timer(&t, at, &mut out),
                    Pool::External => self.external.on_timer(&t, at, &mut out),
                    Pool::Rules | Pool::Harness => {}
                }
                t.pool()
            }
        };
        self.flush(pool, out);
        true
    }

    fn flush(&mut self, pool: Pool, out: Outbox) {
        for (kind, payload) in out.traces {
            self.trace.push(self.now, pool, &kind, payload);
        }
        for (to, body) in out.sends {
            self.route(pool, to, body);
        }
        for (at, t) in out.timers {
            self.schedule(at, t);
        }
        if !out.facts.is_empty() {
            let mut mirrored = Outbox::default();
            self.external.mirror(&out.facts, self.now, &mut mirrored);
            self.flush(Pool::External, mirrored);
        }
    }

    fn route(&mut self, from: Pool, to: Pool, body: super::Body) {
        if forbidden(from, to) {
            self.trace.push(
                self.now,
                from,
                "forbidden_route",
                json!({"from": from, "to": to, "kind": body.kind().as_str()}),
            );
            return;
        }
        let mut delay = self.latency.base(from, to);
        if self.latency.jitter > 0 {
            delay += self.rng.random_range(0..=self.latency.jitter);
        }
        // FIFO per channel: never deliver before an earlier message.
        let tail = self.channel_tail.entry((from, to)).or_insert(0);
        let deliver_at = (self.now + delay).max(*tail);
        *tail = deliver_at;
        let seq = self.next_msg;
        self.next_msg += 1;
        let msg = Message {
            seq,
            tick: self.now,
            deliver_at,
            sender: from,
            receiver: to,
            body,
        };
        self.foreground += 1;
        self.in_flight += 1;
        self.enqueue(deliver_at, Event::Deliver(Box::new(msg)));
    }

    fn schedule(&mut self, at: Tick, t: Timer) {
        if !t.is_background() {
            self.foreground += 1;
        }
        self.enqueue(at.max(self.now), Event::Timer(t));
    }

    fn enqueue(&mut self, at: Tick, e: Event) {
        self.queue.insert((at, self.next_order), e);
        self.next_order += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn only_the_rules_engine_reaches_context() {
        assert!(forbidden(Pool::Process, Pool::Context));
        assert!(forbidden(Pool::Context, Pool::Process));
        assert!(forbidden(Pool::Process, Pool::External));
        assert!(!forbidden(Pool::Rules, Pool::Context));
        assert!(!forbidden(Pool::External, Pool::Context));
    }
}
