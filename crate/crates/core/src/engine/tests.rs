use std::collections::BTreeSet;

use super::*;
use crate::choreography::{
    Body, ContextRequest, Message, Outbox, PollResponseMsg, Pool, RegisterContext,
};
use crate::model::ContextCategory;
use crate::payload::ValueKind;

fn entry(id: &str, kind: ValueKind, level: usize, parents: &[&str]) -> CatalogEntry {
    CatalogEntry {
        category: ContextCategory::new(id, kind),
        level,
        parents: parents.iter().map(|p| CategoryId::new(*p)).collect(),
    }
}

fn source(id: &str, mode: SourceMode, rel: f64, cats: &[&str]) -> SourceDescriptor {
    SourceDescriptor {
        source_id: id.into(),
        mode,
        poll_interval: (mode == SourceMode::Poll).then_some(10),
        reliability: rel,
        cost_per_value: 0.5,
        provided_categories: cats.iter().map(|c| CategoryId::new(*c)).collect(),
    }
}

fn ev(src: &str, cat: &str, payload: impl Into<Payload>, ts: Tick) -> SourceEvent {
    SourceEvent {
        source_id: src.into(),
        category_id: cat.into(),
        payload: payload.into(),
        ts,
    }
}

/// root(1) -> x(2) -> y(3); root -> weather(2) -> eta(3) -> fine(4);
/// shipping(2) is catalog-only.
fn fixture() -> ContextEngine {
    let catalog = CategoryCatalog::new([
        entry("root", ValueKind::Text, 1, &[]),
        entry("x", ValueKind::Numeric, 2, &["root"]),
        entry("y", ValueKind::Numeric, 3, &["x"]),
        entry("weather", ValueKind::Text, 2, &["root"]),
        entry("eta", ValueKind::Numeric, 3, &["weather"]),
        entry("fine", ValueKind::Numeric, 4, &["eta"]),
        entry("shipping", ValueKind::Text, 2, &["root"]),
        entry("orphan", ValueKind::Text, 2, &["root"]),
    ]);
    let relations = vec![
        CauseEffectRelation {
            relation_id: "double".into(),
            cause_category: "x".into(),
            effect_category: "y".into(),
            function: RelationFn::Linear { a: 2.0, b: 1.0 },
        },
        CauseEffectRelation {
            relation_id: "eta".into(),
            cause_category: "weather".into(),
            effect_category: "eta".into(),
            function: RelationFn::Lookup {
                table: [
                    ("clear".to_owned(), Payload::Number(40.0)),
                    ("storm".to_owned(), Payload::Number(72.0)),
                ]
                .into(),
                default: None,
            },
        },
        CauseEffectRelation {
            relation_id: "fine".into(),
            cause_category: "eta".into(),
            effect_category: "fine".into(),
            function: RelationFn::Expression {
                expr: Expr::parse("max(0, x - 47) * 1000").unwrap(),
            },
        },
    ];
    let sources = [
        source("sensor", SourceMode::Push, 0.9, &["x", "root"]),
        source("certified", SourceMode::Poll, 0.9, &["weather"]),
        source("social", SourceMode::Push, 0.4, &["weather"]),
        source("bpm", SourceMode::Push, 1.0, &["shipping"]),
    ];
    let mut e = ContextEngine::new(
        catalog.clone(),
        sources,
        relations,
        vec![],
        EngineConfig::default(),
    )
    .unwrap();
    let ids: BTreeSet<CategoryId> = ["root", "x", "y", "weather", "eta", "fine"]
        .iter()
        .map(|c| CategoryId::new(*c))
        .collect();
    let g = catalog.intersection_of(&ids);
    e.add_master(MasterContextModel::new("m", g, ["root".into()].into()).unwrap())
        .unwrap();
    e
}

fn inst(s: &str) -> InstanceId {
    InstanceId::new(s)
}

#[test]
fn register_fresh_shared_and_duplicate() {
    let mut e = fixture();
    let m1 = e
        .register_instance(&inst("p1"), &"m".into(), vec![], None)
        .unwrap();
    let start = e.model(&m1).unwrap().problem().start.clone();
    assert!(start.structure_eq(e.cloud().masters[&ModelId::new("m")].intersection()));
    let m2 = e
        .register_instance(&inst("p2"), &"m".into(), vec![], Some(&m1))
        .unwrap();
    assert_eq!(m1, m2);
    assert_eq!(e.model(&m1).unwrap().bound_instances.len(), 2);
    assert_eq!(
        e.register_instance(&inst("p1"), &"m".into(), vec![], None),
        Err(EngineError::DuplicateRegistration(inst("p1")))
    );
    assert!(matches!(
        e.register_instance(&inst("p3"), &"nope".into(), vec![], None),
        Err(EngineError::UnknownMaster(_))
    ));
    assert!(matches!(
        e.register_instance(&inst("p3"), &"m".into(), vec![], Some(&"ghost".into())),
        Err(EngineError::UnknownSharedModel(_))
    ));
    assert!(e.cloud().check_invariants().is_empty());
}

#[test]
fn linear_propagation_carries_causing_ts() {
    let mut e = fixture();
    let m = e
        .register_instance(&inst("p1"), &"m".into(), vec![], None)
        .unwrap();
    e.ingest(&ev("sensor", "x", 5.0, 1)).unwrap();
    let n = e.ingest(&ev("sensor", "x", 10.0, 4)).unwrap();
    let y = e
        .model(&m)
        .unwrap()
        .intersection()
        .value("y")
        .unwrap()
        .clone();
    assert_eq!(y.payload, Payload::Number(21.0));
    assert_eq!(y.causing_ts, Some(4));
    assert_eq!(y.source_id, "relation:double");
    assert_eq!(n.len(), 1);
    assert_eq!(n[0].categories(), ["x".into(), "y".into()].into());
}

#[test]
fn cascade_to_sla_fine() {
    let mut e = fixture();
    let m = e
        .register_instance(&inst("p1"), &"m".into(), vec![], None)
        .unwrap();
    e.ingest(&ev("social", "weather", "storm", 3)).unwrap();
    let g = e.model(&m).unwrap().intersection();
    assert_eq!(g.value("eta").unwrap().payload, Payload::Number(72.0));
    assert_eq!(g.value("fine").unwrap().payload, Payload::Number(25000.0));
    assert_eq!(g.value("fine").unwrap().causing_ts, Some(3));
}

#[test]
fn identical_redelivery_is_swallowed() {
    let mut e = fixture();
    e.register_instance(&inst("p1"), &"m".into(), vec![], None)
        .unwrap();
    assert_eq!(e.ingest(&ev("sensor", "x", 5.0, 1)).unwrap().len(), 1);
    let again = e.ingest_batch(&[ev("sensor", "x", 5.0, 1)], None);
    assert_eq!(again.notifications().count(), 0);
    assert_eq!(again.models[0].rejected[0].reason, "redelivery");
    assert!(again.models[0].changes.is_empty());
}

#[test]
fn same_tick_conflict_prefers_reliable_source() {
    for order in [["social", "certified"], ["certified", "social"]] {
        let mut e = fixture();
        let m = e
            .register_instance(&inst("p1"), &"m".into(), vec![], None)
            .unwrap();
        let payload = |s: &str| if s == "social" { "clear" } else { "storm" };
        let events: Vec<SourceEvent> = order
            .iter()
            .map(|s| ev(s, "weather", payload(s), 600))
            .collect();
        let r = e.ingest_batch(&events, None);
        assert_eq!(r.models[0].conflicts.len(), 1);
        let g = e.model(&m).unwrap().intersection();
        assert_eq!(g.value("weather").unwrap().source_id, "certified");
        assert_eq!(g.value("eta").unwrap().payload, Payload::Number(72.0));
    }
}

#[test]
fn admission_rules() {
    let cur = ContextValue::new("w", "a", 5, "s", 0.5);
    assert_eq!(admission(None, &cur), Admission::Update);
    assert_eq!(
        admission(Some(&cur), &ContextValue::new("w", "b", 6, "s", 0.1)),
        Admission::Update
    );
    assert_eq!(
        admission(Some(&cur), &ContextValue::new("w", "b", 4, "s", 0.9)),
        Admission::Stale
    );
    assert_eq!(admission(Some(&cur), &cur.clone()), Admission::Redelivery);
    assert_eq!(
        admission(Some(&cur), &ContextValue::new("w", "b", 5, "t", 0.9)),
        Admission::ConflictWon
    );
    assert_eq!(
        admission(Some(&cur), &ContextValue::new("w", "b", 5, "t", 0.1)),
        Admission::ConflictLost
    );
    let derived = ContextValue::new("w", "a", 5, "relation:r", 0.5).caused_by(5);
    let recomputed = ContextValue::new("w", "b", 5, "relation:r", 0.4).caused_by(5);
    assert_eq!(
        admission(Some(&derived), &recomputed),
        Admission::Recomputed
    );
}

#[test]
fn unknown_source_category_and_kind() {
    let mut e = fixture();
    e.register_instance(&inst("p1"), &"m".into(), vec![], None)
        .unwrap();
    assert!(matches!(
        e.ingest(&ev("ghost", "x", 1.0, 1)),
        Err(EngineError::UnknownSource(_))
    ));
    assert!(matches!(
        e.ingest(&ev("sensor", "nope", 1.0, 1)),
        Err(EngineError::UnknownCategory(_))
    ));
    assert!(matches!(
        e.ingest(&ev("sensor", "x", "text", 1)),
        Err(EngineError::KindMismatch { .. })
    ));
    assert!(matches!(
        e.ingest(&ev("sensor", "weather", "clear", 1)),
        Err(EngineError::NotProvided { .. })
    ));
}

#[test]
fn thresholds_gate_notifications() {
    let mut e = fixture();
    let t = vec![
        NotificationThreshold::numeric("x", 3.0),
        NotificationThreshold::numeric("y", 100.0),
    ];
    e.register_instance(&inst("p1"), &"m".into(), t, None)
        .unwrap();
    assert_eq!(
        e.ingest(&ev("sensor", "x", 1.0, 1)).unwrap()[0]
            .categories()
            .len(),
        2
    );
    assert!(e.ingest(&ev("sensor", "x", 2.0, 2)).unwrap().is_empty());
    let n = e.ingest(&ev("sensor", "x", 9.0, 3)).unwrap();
    assert_eq!(n[0].categories(), ["x".into()].into());
}

#[test]
fn shared_model_notifies_each_registration() {
    let mut e = fixture();
    let m = e
        .register_instance(&inst("p1"), &"m".into(), vec![], None)
        .unwrap();
    e.register_instance(&inst("p2"), &"m".into(), vec![], Some(&m))
        .unwrap();
    let n = e.ingest(&ev("sensor", "x", 1.0, 1)).unwrap();
    let who: Vec<&str> = n.iter().map(|n| n.instance.as_str()).collect();
    assert_eq!(who, ["p1", "p2"]);
}

#[test]
fn get_context_is_scoped_and_idempotent() {
    let mut e = fixture();
    let m = e
        .register_instance(&inst("p1"), &"m".into(), vec![], None)
        .unwrap();
    e.ingest(&ev("sensor", "x", 1.0, 1)).unwrap();
    e.ingest(&ev("social", "weather", "clear", 1)).unwrap();
    let want: BTreeSet<CategoryId> = ["eta".into()].into();
    let a = e.get_context(&m, &want, 5).unwrap();
    let b = e.get_context(&m, &want, 5).unwrap();
    assert_eq!(a, b);
    let ids = a.graph.category_ids();
    assert_eq!(ids, ["eta".into(), "root".into(), "weather".into()].into());
    assert!(a.value("x").is_none());
    assert!(matches!(
        e.get_context(&m, &["shipping".into()].into(), 5),
        Err(EngineError::Model(_))
    ));
    assert!(matches!(
        e.get_context(&"ghost".into(), &want, 5),
        Err(EngineError::UnknownModel(_))
    ));
}

#[test]
fn staleness_flags_in_snapshots() {
    let mut e = fixture();
    e.config.staleness = Some(StalenessPolicy {
        max_age: 5,
        decay: 0.5,
    });
    let m = e
        .register_instance(&inst("p1"), &"m".into(), vec![], None)
        .unwrap();
    e.ingest(&ev("sensor", "x", 1.0, 0)).unwrap();
    let s = e.get_context(&m, &["x".into()].into(), 100).unwrap();
    let f = s.freshness("x").unwrap();
    assert!(!f.fresh);
    assert!((f.effective_reliability - 0.45).abs() < 1e-12);
}

#[test]
fn administer_extension_adds_provided_categories_only() {
    let mut e = fixture();
    let m = e
        .register_instance(&inst("p1"), &"m".into(), vec![], None)
        .unwrap();
    let before = e.model(&m).unwrap().intersection().clone();
    let r = e
        .administer_extension(&m, &["orphan".into()].into())
        .unwrap();
    assert!(r.delta.is_none());
    assert!(r.failures[&CategoryId::new("orphan")].contains("no source provides"));
    assert_eq!(e.model(&m).unwrap().intersection(), &before);
    let r = e
        .administer_extension(&m, &["shipping".into()].into())
        .unwrap();
    let delta = r.delta.unwrap();
    assert_eq!(delta.added_categories, vec![("shipping".into(), 2)]);
    assert_eq!(delta.added_edges, vec![("root".into(), "shipping".into())]);
    let after = e.model(&m).unwrap().intersection();
    assert!(crate::model::is_subgraph(&before, after).unwrap());
    assert_eq!(after.step(), 1);
}

#[test]
fn scoped_events_extend_only_their_model() {
    let mut e = fixture();
    let m1 = e
        .register_instance(&inst("p1"), &"m".into(), vec![], None)
        .unwrap();
    let m2 = e
        .register_instance(&inst("p2"), &"m".into(), vec![], None)
        .unwrap();
    let r = e.ingest_batch(&[ev("bpm", "shipping", "truck", 3)], Some(&inst("p1")));
    assert!(r.models[0].extension.is_some());
    assert_eq!(
        e.model(&m1)
            .unwrap()
            .intersection()
            .value("shipping")
            .unwrap()
            .payload,
        "truck".into()
    );
    assert!(!e.model(&m2).unwrap().intersection().contains("shipping"));
}

#[test]
fn shutdown_closes_last_binding_and_spares_master() {
    let mut e = fixture();
    let master_json = e.cloud().masters[&ModelId::new("m")].to_canonical_json();
    let m = e
        .register_instance(&inst("p1"), &"m".into(), vec![], None)
        .unwrap();
    e.register_instance(&inst("p2"), &"m".into(), vec![], Some(&m))
        .unwrap();
    e.ingest(&ev("sensor", "x", 3.0, 2)).unwrap();
    assert_eq!(e.shutdown_model(&inst("p1")), Ok(None));
    assert!(!e.model(&m).unwrap().is_closed());
    assert_eq!(e.shutdown_model(&inst("p2")), Ok(Some(m.clone())));
    let closed = e.model(&m).unwrap();
    assert!(closed.is_closed());
    assert!(closed.problem().end.is_some());
    assert_eq!(
        e.shutdown_model(&inst("p2")),
        Err(EngineError::UnknownRegistration(inst("p2")))
    );
    assert_eq!(
        e.cloud().masters[&ModelId::new("m")].to_canonical_json(),
        master_json
    );
    assert!(e.cloud().check_invariants().is_empty());
}

#[test]
fn compose_split_and_aggregate_agents() {
    let catalog = CategoryCatalog::new([
        entry("root", ValueKind::Text, 1, &[]),
        entry("a", ValueKind::Numeric, 2, &["root"]),
        entry("b", ValueKind::Text, 2, &["root"]),
        entry("ab", ValueKind::Record, 3, &["a", "b"]),
        entry("a2", ValueKind::Numeric, 4, &["ab"]),
        entry("avg", ValueKind::Numeric, 3, &["a"]),
    ]);
    let agents = vec![
        DerivationAgent {
            agent_id: "join".into(),
            kind: AgentKind::Compose {
                inputs: vec!["a".into(), "b".into()],
                output: "ab".into(),
            },
        },
        DerivationAgent {
            agent_id: "part".into(),
            kind: AgentKind::Split {
                input: "ab".into(),
                outputs: [("a".to_owned(), CategoryId::new("a2"))].into(),
            },
        },
        DerivationAgent {
            agent_id: "mean".into(),
            kind: AgentKind::Aggregate {
                input: "a".into(),
                output: "avg".into(),
                window: 10,
                reducer: Reducer::Mean,
            },
        },
    ];
    let mut e = ContextEngine::new(
        catalog.clone(),
        [
            source("s", SourceMode::Push, 0.8, &["a", "b"]),
            source("t", SourceMode::Push, 0.6, &["b"]),
        ],
        vec![],
        agents,
        EngineConfig::default(),
    )
    .unwrap();
    let all: BTreeSet<CategoryId> = catalog
        .entries()
        .map(|e| e.category.category_id.clone())
        .collect();
    e.add_master(
        MasterContextModel::new("m", catalog.intersection_of(&all), BTreeSet::new()).unwrap(),
    )
    .unwrap();
    let m = e
        .register_instance(&inst("p"), &"m".into(), vec![], None)
        .unwrap();
    e.ingest(&ev("s", "a", 2.0, 1)).unwrap();
    assert!(e.model(&m).unwrap().intersection().value("ab").is_none());
    e.ingest(&ev("t", "b", "z", 3)).unwrap();
    e.ingest(&ev("s", "a", 4.0, 2)).unwrap();
    let g = e.model(&m).unwrap().intersection();
    let ab = g.value("ab").unwrap();
    assert_eq!(ab.ts, 3);
    assert_eq!(ab.causing_ts, Some(3));
    assert!((ab.reliability - 0.6).abs() < 1e-12);
    assert_eq!(g.value("a2").unwrap().payload, Payload::Number(4.0));
    assert_eq!(g.value("avg").unwrap().payload, Payload::Number(3.0));
}

fn deliver(e: &mut ContextEngine, body: Body, now: Tick) -> Outbox {
    let mut out = Outbox::default();
    let msg = Message {
        seq: 0,
        tick: now,
        deliver_at: now,
        sender: Pool::Rules,
        receiver: Pool::Context,
        body,
    };
    e.handle(&msg, now, &mut out);
    out
}

fn polls(out: &Outbox) -> Vec<(u64, SourceId, BTreeSet<CategoryId>)> {
    out.sends
        .iter()
        .filter_map(|(_, b)| match b {
            Body::PollRequest(p) => Some((p.request, p.source.clone(), p.categories.clone())),
            _ => None,
        })
        .collect()
}

fn register_msg(i: &str) -> Body {
    Body::RegisterContext(RegisterContext {
        instance: inst(i),
        master_id: "m".into(),
        thresholds: vec![],
        share_with: None,
        copy_from: None,
    })
}

#[test]
fn init_polls_until_valued_then_posts_snapshot() {
    let mut e = fixture();
    let out = deliver(&mut e, register_msg("p1"), 0);
    let p = polls(&out);
    // Only the poll-mode weather source can help; root and x stay push-only.
    assert_eq!(p.len(), 1);
    assert_eq!(p[0].1, "certified");
    let values = vec![ContextValue::new("weather", "clear", 1, "certified", 0.9)];
    let out = deliver(
        &mut e,
        Body::PollResponse(PollResponseMsg {
            request: p[0].0,
            source: "certified".into(),
            values,
            absent: BTreeSet::new(),
        }),
        1,
    );
    // root and x are never valued by polling, so rounds continue.
    assert!(out.timers.iter().any(|(t, _)| *t == 2));
}

#[test]
fn init_times_out_after_budget() {
    let mut e = fixture();
    e.config.poll_budget = 5;
    let mut now = 0;
    let mut out = deliver(&mut e, register_msg("p1"), now);
    let mut rounds = 0;
    loop {
        let p = polls(&out);
        if p.is_empty() {
            break;
        }
        rounds += 1;
        now += 1;
        out = deliver(
            &mut e,
            Body::PollResponse(PollResponseMsg {
                request: p[0].0,
                source: p[0].1.clone(),
                values: vec![],
                absent: p[0].2.clone(),
            }),
            now,
        );
        if let Some((_, t)) = out.timers.first().cloned() {
            let mut next = Outbox::default();
            now += 1;
            e.on_timer(&t, now, &mut next);
            out = next;
        }
    }
    assert_eq!(rounds, 5);
    assert!(out.traces.iter().any(|(k, _)| k == "init_timeout"));
    let reply = out.sends.iter().find_map(|(_, b)| match b {
        Body::ContextSnapshot(s) => Some(s.clone()),
        _ => None,
    });
    assert!(reply.unwrap().error.unwrap().contains("timed out after 5"));
    assert!(e.cloud().registrations.is_empty());
}

#[test]
fn concurrent_requests_share_one_extension_and_fetch() {
    let catalog = CategoryCatalog::new([
        entry("root", ValueKind::Text, 1, &[]),
        entry("ship", ValueKind::Text, 2, &["root"]),
    ]);
    let mut e = ContextEngine::new(
        catalog.clone(),
        [source("erp", SourceMode::Poll, 1.0, &["ship"])],
        vec![],
        vec![],
        EngineConfig::default(),
    )
    .unwrap();
    let mut g = catalog.intersection_of(&["root".into()].into());
    g.update_value(ContextValue::new("root", "order-1", 0, "seed", 1.0))
        .unwrap();
    e.add_master(MasterContextModel::new("m", g, ["root".into()].into()).unwrap())
        .unwrap();
    let out = deliver(&mut e, register_msg("p1"), 0);
    assert!(out.traces.iter().any(|(k, _)| k == "init_ready"));
    let req = |r| {
        Body::ContextRequest(ContextRequest {
            request: r,
            instance: inst("p1"),
            categories: ["ship".into()].into(),
        })
    };
    let mut out = deliver(&mut e, req(1), 3);
    let second = deliver(&mut e, req(2), 3);
    out.traces.extend(second.traces);
    out.sends.extend(second.sends);
    let extends = out.traces.iter().filter(|(k, _)| k == "extend").count();
    assert_eq!(extends, 1);
    let p = polls(&out);
    assert_eq!(p.len(), 1);
    let values = vec![ContextValue::new("ship", "plane", 4, "erp", 1.0)];
    let reply = deliver(
        &mut e,
        Body::PollResponse(PollResponseMsg {
            request: p[0].0,
            source: "erp".into(),
            values,
            absent: BTreeSet::new(),
        }),
        4,
    );
    let answered: Vec<u64> = reply
        .sends
        .iter()
        .filter_map(|(_, b)| match b {
            Body::ContextSnapshot(s) => {
                assert_eq!(
                    s.snapshot.as_ref().unwrap().value("ship").unwrap().payload,
                    "plane".into()
                );
                s.request
            }
            _ => None,
        })
        .collect();
    assert_eq!(answered, [1, 2]);
}

#[test]
fn poll_schedule_follows_live_models() {
    let mut e = fixture();
    assert!(e.poll_due_sources(10).is_empty());
    e.register_instance(&inst("p1"), &"m".into(), vec![], None)
        .unwrap();
    assert_eq!(
        e.poll_due_sources(10),
        vec![("certified".into(), ["weather".into()].into())]
    );
    assert!(e.poll_due_sources(11).is_empty());
    assert_eq!(e.next_poll_tick(10), Some(20));
}
