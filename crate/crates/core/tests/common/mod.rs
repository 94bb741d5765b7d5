//! Shared generators and trace checkers for the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use ctxflow_core::choreography::Pool;
use ctxflow_core::{Scenario, Trace, TraceRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(name)
}

pub fn logistics() -> Scenario {
    Scenario::load(&scenario_path("logistics.json")).expect("bundled scenario loads")
}

fn condition(rng: &mut ChaCha8Rng, cats: &[String], depth: u32) -> String {
    let pick = |rng: &mut ChaCha8Rng| cats[rng.random_range(0..cats.len())].clone();
    match rng.random_range(0..if depth == 0 { 5 } else { 8 }) {
        0..=3 => {
            let op = ["<", "<=", ">", ">=", "==", "!="][rng.random_range(0..6)];
            format!("{} {op} {}", pick(rng), rng.random_range(0..100))
        }
        4 => format!("fresh({}, {})", pick(rng), rng.random_range(20..400)),
        5 => format!(
            "{} AND {}",
            condition(rng, cats, depth - 1),
            condition(rng, cats, depth - 1)
        ),
        6 => format!(
            "({} OR {})",
            condition(rng, cats, depth - 1),
            condition(rng, cats, depth - 1)
        ),
        _ => format!("NOT {}", condition(rng, cats, depth - 1)),
    }
}

/// A random but valid scenario: numeric categories fed by a poll and a push
/// source, one derived category, a process with one to three gates and
/// optionally a compensation process. Deterministic in `seed`.
pub fn random_scenario(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(2..=4);
    let measures: Vec<String> = (0..k).map(|i| format!("m{i}")).collect();
    let mut readable = measures.clone();
    readable.push("d0".into());

    let mut catalog = vec![
        json!({"category_id": "root", "name": "Root", "value_kind": "text", "level": 1}),
        json!({"category_id": "d0", "name": "Derived", "value_kind": "numeric", "level": 3, "parents": ["m0"]}),
        json!({"category_id": "stage", "name": "Stage", "value_kind": "text", "level": 2, "parents": ["root"]}),
    ];
    for m in &measures {
        catalog.push(json!({"category_id": m, "name": m, "value_kind": "numeric", "level": 2, "parents": ["root"]}));
    }
    let mut master_cats: Vec<String> = vec!["root".into(), "d0".into()];
    master_cats.extend(measures.iter().cloned());

    let with_comp = rng.random_bool(0.4);
    let gates = rng.random_range(1..=3);
    let mut rules = Vec::new();
    let mut nodes = vec![
        json!({"type": "start"}),
        json!({"type": "task", "task_id": "t0", "duration": rng.random_range(5..40)}),
    ];
    for j in 0..gates {
        let g = format!("g{j}");
        let first = format!("{g} first");
        let second = format!("{g} second");
        rules.push(format!(
            "RULE {first}\nWHEN {}\nTHEN selectVariant({g}, a)\nEND",
            condition(&mut rng, &readable, 2)
        ));
        let action = match rng.random_range(0..20) {
            0 => "rollback(start)".to_string(),
            1 => "break".to_string(),
            2..=4 => "continue".to_string(),
            5..=8 if with_comp => "start process.comp.cg".to_string(),
            _ => format!("selectVariant({g}, b)"),
        };
        rules.push(format!(
            "RULE {second}\nWHEN {}\nTHEN {action}\nEND",
            condition(&mut rng, &readable, 2)
        ));
        nodes.push(json!({
            "type": "gate",
            "gate_id": g,
            "default_variant": if rng.random_bool(0.5) { "a" } else { "b" },
            "rules": [first, second],
            "variants": {
                "a": [{"type": "task", "task_id": format!("{g}a"), "duration": rng.random_range(5..80)}],
                "b": [{"type": "task", "task_id": format!("{g}b"), "duration": rng.random_range(5..80)}],
            }
        }));
        nodes.push(json!({"type": "task", "task_id": format!("after{j}"), "duration": rng.random_range(1..30)}));
    }
    nodes.push(json!({"type": "end"}));
    let mut process_models =
        vec![json!({"process_model_id": "flow", "master_id": "master", "nodes": nodes})];
    if with_comp {
        rules.push(format!(
            "RULE comp choice\nWHEN {}\nTHEN selectVariant(cg, b)\nEND",
            condition(&mut rng, &readable, 1)
        ));
        process_models.push(json!({
            "process_model_id": "comp",
            "master_id": "master",
            "nodes": [
                {"type": "start"},
                {"type": "gate", "gate_id": "cg", "default_variant": "a", "rules": ["comp choice"], "variants": {
                    "a": [{"type": "task", "task_id": "ca", "duration": rng.random_range(5..50)}],
                    "b": [{"type": "task", "task_id": "cb", "duration": rng.random_range(5..50)}]
                }},
                {"type": "end"}
            ]
        }));
    }

    let horizon = 400;
    let poll_table: BTreeMap<String, Value> = measures
        .iter()
        .map(|m| {
            let mut steps = vec![json!([0, rng.random_range(0..100)])];
            if rng.random_bool(0.5) {
                steps.push(json!([
                    rng.random_range(1..horizon),
                    rng.random_range(0..100)
                ]));
            }
            (m.clone(), Value::Array(steps))
        })
        .collect();
    let mut timeline: Vec<(u64, String, i64)> = (0..rng.random_range(0..8))
        .map(|_| {
            (
                rng.random_range(1..horizon),
                measures[rng.random_range(0..k)].clone(),
                rng.random_range(0..100),
            )
        })
        .collect();
    timeline.sort_by_key(|e| e.0);
    let timeline: Vec<Value> = timeline
        .into_iter()
        .map(|(t, c, v)| json!({"tick": t, "category_id": c, "payload": v}))
        .collect();

    let mut thresholds = Vec::new();
    for c in &readable {
        if rng.random_bool(0.5) {
            thresholds.push(json!({"category_id": c, "kind": "numeric_delta", "theta": rng.random_range(0..30)}));
        }
    }

    let n = rng.random_range(1..=3);
    let mut instances = Vec::new();
    let mut start = rng.random_range(0..10);
    for i in 0..n {
        let mut spec = json!({
            "instance_id": format!("p{i}"),
            "process_model": "flow",
            "principal": if rng.random_bool(0.1) { "intruder".to_string() } else { format!("user{i}") },
            "start_tick": start,
        });
        if i > 0 && rng.random_bool(0.3) {
            spec["share_with"] = json!(format!("p{}", i - 1));
        }
        instances.push(spec);
        start += rng.random_range(1..60);
    }
    let mut cancellations = Vec::new();
    if rng.random_bool(0.2) {
        cancellations.push(json!({
            "tick": rng.random_range(20..horizon),
            "instance": format!("p{}", rng.random_range(0..n)),
            "reason": "withdrawn",
        }));
    }

    let push_reliability = [0.6, 0.8, 0.95][rng.random_range(0..3)];
    let scenario = json!({
        "name": format!("random-{seed}"),
        "seed": seed,
        "category_catalog": catalog,
        "master_contexts": [{
            "model_id": "master",
            "categories": master_cats,
            "predefined": ["root"],
            "values": [{"category_id": "root", "payload": "generated"}],
        }],
        "process_models": process_models,
        "rules": rules,
        "thresholds": thresholds,
        "cause_effects": [{
            "relation_id": "shift",
            "cause_category": "m0",
            "effect_category": "d0",
            "function": {"kind": "linear", "a": 1, "b": rng.random_range(-20..20)},
        }],
        "sources": [
            {
                "source_id": "poller",
                "mode": "poll",
                "poll_interval": rng.random_range(20..120),
                "reliability": 0.8,
                "provided_categories": measures,
                "poll_table": poll_table,
            },
            {
                "source_id": "pusher",
                "mode": "push",
                "reliability": push_reliability,
                "provided_categories": measures,
                "timeline": timeline,
            }
        ],
        "mirrors": [{"task": "t0", "category": "stage", "value": "started"}],
        "instances": instances,
        "cancellations": cancellations,
        "denied_principals": ["intruder"],
        "limits": {"max_steps": 5000, "poll_budget": 8},
        "latency": {
            "default": rng.random_range(1..=2),
            "jitter": rng.random_range(0..=2),
            "channels": if rng.random_bool(0.3) {
                json!([{"from": "context", "to": "rules", "ticks": rng.random_range(1..6)}])
            } else {
                json!([])
            },
        },
    });
    serde_json::from_value(scenario).expect("generated scenario deserializes")
}

/// `count` lifecycles of one short process on a shared master, started one
/// after another with pushes landing around every shutdown. The gate reads
/// only `site`, so load pushes never roll an instance back.
pub fn lifecycle_scenario(count: usize) -> Scenario {
    let instances: Vec<Value> = (0..count)
        .map(|i| json!({"instance_id": format!("run{i}"), "process_model": "job", "principal": "operator", "start_tick": i * 100}))
        .collect();
    let timeline: Vec<Value> = (0..count * 20)
        .map(
            |i| json!({"tick": 5 + i * 5, "category_id": "load", "payload": (i * 37 % 100) as f64}),
        )
        .collect();
    let scenario = json!({
        "name": "lifecycles",
        "category_catalog": [
            {"category_id": "site", "name": "Site", "value_kind": "text", "level": 1},
            {"category_id": "load", "name": "Load", "value_kind": "numeric", "level": 2, "parents": ["site"]},
            {"category_id": "phase", "name": "Phase", "value_kind": "text", "level": 2, "parents": ["site"]}
        ],
        "master_contexts": [{
            "model_id": "plant",
            "categories": ["site", "load"],
            "predefined": ["site"],
            "values": [{"category_id": "site", "payload": "plant 1"}, {"category_id": "load", "payload": 50}]
        }],
        "process_models": [{
            "process_model_id": "job",
            "master_id": "plant",
            "nodes": [
                {"type": "start"},
                {"type": "task", "task_id": "prepare", "duration": 17},
                {"type": "gate", "gate_id": "mode", "default_variant": "normal", "rules": ["Second site"], "variants": {
                    "normal": [{"type": "task", "task_id": "runNormal", "duration": 33}],
                    "careful": [{"type": "task", "task_id": "runCareful", "duration": 41}]
                }},
                {"type": "end"}
            ]
        }],
        "rules": ["RULE Second site\nWHEN site == \"plant 2\"\nTHEN selectVariant(mode, careful)\nEND"],
        "sources": [{
            "source_id": "meter",
            "mode": "push",
            "reliability": 0.9,
            "provided_categories": ["load"],
            "timeline": timeline
        }],
        "mirrors": [{"task": "prepare", "category": "phase", "value": "prepared"}],
        "instances": instances,
        "latency": {"default": 1, "channels": [{"from": "context", "to": "rules", "ticks": 4}]}
    });
    serde_json::from_value(scenario).expect("lifecycle scenario deserializes")
}

pub fn body(r: &TraceRecord) -> Option<&Value> {
    r.payload.get("body")
}

pub fn body_instance(r: &TraceRecord) -> Option<&str> {
    let b = body(r)?;
    b.get("instance")
        .or_else(|| b.get("parent"))
        .and_then(Value::as_str)
}

fn string_set(v: &Value) -> BTreeSet<String> {
    v.as_array()
        .into_iter()
        .flatten()
        .filter_map(|x| x.as_str().map(str::to_owned))
        .collect()
}

fn string_list(v: &Value) -> Vec<String> {
    v.as_array()
        .into_iter()
        .flatten()
        .filter_map(|x| x.as_str().map(str::to_owned))
        .collect()
}

/// Outcome of checking every re-evaluation selection in a trace.
#[derive(Debug, Default)]
pub struct ClosureCheck {
    pub selections: usize,
    pub reevaluated: usize,
    pub problems: Vec<String>,
}

/// Replays the rules engine's record store from the trace and checks that
/// each `reevaluate` selection is exactly the stored records whose relevant
/// categories intersect the changed set, and that every re-evaluation
/// belongs to an earlier selection.
pub fn check_closure(trace: &Trace) -> ClosureCheck {
    let mut store: BTreeMap<String, Vec<(String, BTreeSet<String>)>> = BTreeMap::new();
    let mut selected: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut check = ClosureCheck::default();
    for r in trace.iter().filter(|r| r.pool == Pool::Rules) {
        let Some(instance) = r.str("instance").map(str::to_owned) else {
            continue;
        };
        match r.kind.as_str() {
            "evaluation" => {
                let id = r.str("record").unwrap_or_default().to_owned();
                let keys: BTreeSet<String> = r.payload["relevant"]
                    .as_object()
                    .map(|m| m.keys().cloned().collect())
                    .unwrap_or_default();
                let list = store.entry(instance.clone()).or_default();
                match r.str("kind") {
                    Some("native") => list.push((id, keys)),
                    _ => {
                        check.reevaluated += 1;
                        if !selected.get(&instance).is_some_and(|s| s.contains(&id)) {
                            check.problems.push(format!(
                                "seq {}: {id} re-evaluated without selection",
                                r.seq
                            ));
                        }
                        match list.iter_mut().find(|(rid, _)| *rid == id) {
                            Some(entry) => entry.1 = keys,
                            None => check
                                .problems
                                .push(format!("seq {}: re-evaluated {id} is not stored", r.seq)),
                        }
                    }
                }
            }
            "records_dropped" => {
                let gone = string_set(&r.payload["records"]);
                if let Some(list) = store.get_mut(&instance) {
                    list.retain(|(id, _)| !gone.contains(id));
                }
            }
            "unbound" => {
                store.remove(&instance);
            }
            "reevaluate" => {
                check.selections += 1;
                let changed = string_set(&r.payload["changed"]);
                let expected: Vec<String> = store
                    .get(&instance)
                    .into_iter()
                    .flatten()
                    .filter(|(_, keys)| !keys.is_disjoint(&changed))
                    .map(|(id, _)| id.clone())
                    .collect();
                let got = string_list(&r.payload["selected"]);
                if got != expected {
                    check.problems.push(format!(
                        "seq {}: selected {got:?}, expected {expected:?}",
                        r.seq
                    ));
                }
                selected.entry(instance).or_default().extend(got);
            }
            _ => {}
        }
    }
    check
}

/// Per-channel FIFO: delivery order equals send order, i.e. message ids
/// increase along each (sender, receiver) pair.
pub fn fifo_violations(trace: &Trace) -> Vec<String> {
    let mut last: BTreeMap<(String, Pool), u64> = BTreeMap::new();
    let mut out = Vec::new();
    for r in trace.iter() {
        let (Some(msg), Some(from)) = (r.payload.get("msg").and_then(Value::as_u64), r.str("from"))
        else {
            continue;
        };
        if body(r).is_none() {
            continue;
        }
        let key = (from.to_owned(), r.pool);
        if let Some(prev) = last.insert(key, msg) {
            if prev >= msg {
                out.push(format!(
                    "seq {}: message {msg} from {from} delivered after {prev}",
                    r.seq
                ));
            }
        }
    }
    out
}
