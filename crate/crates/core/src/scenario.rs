//! Scenario files: everything one simulation run needs, plus structural
//! and referential validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::choreography::Pool;
use crate::engine::{
    derivation_order, CatalogEntry, CategoryCatalog, CauseEffectRelation, DerivationAgent,
    EngineConfig, NotificationThreshold, StalenessPolicy, ThresholdKind,
};
use crate::external::{bpm_descriptor, MirrorSpec, ScriptedSource, BPM_SOURCE};
use crate::ids::{CategoryId, InstanceId, ModelId, ProcessModelId, RuleId, SourceId, Tick};
use crate::model::{ContextValue, MasterContextModel, DEFAULT_HISTORY_LIMIT};
use crate::payload::{Payload, ValueKind};
use crate::process::{compile, InstanceSpec, ProcessModel, Program};
use crate::rules::{parse_rules, GateRules, ParseError, Rule, RuleBase};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default)]
    pub seed: u64,
    pub category_catalog: Vec<CatalogEntry>,
    pub master_contexts: Vec<MasterSpec>,
    pub process_models: Vec<ProcessModel>,
    /// Rule DSL texts; each may hold several rules.
    #[serde(default)]
    pub rules: Vec<String>,
    /// Per rule: maximum age per category before the rule is skipped.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub rule_freshness: BTreeMap<RuleId, BTreeMap<CategoryId, Tick>>,
    #[serde(default)]
    pub thresholds: Vec<NotificationThreshold>,
    #[serde(default)]
    pub cause_effects: Vec<CauseEffectRelation>,
    #[serde(default)]
    pub derivation_agents: Vec<DerivationAgent>,
    #[serde(default)]
    pub sources: Vec<ScriptedSource>,
    /// Process facts the built-in `bpm` source mirrors into context.
    #[serde(default)]
    pub mirrors: Vec<MirrorSpec>,
    pub instances: Vec<InstanceSpec>,
    #[serde(default)]
    pub cancellations: Vec<Cancellation>,
    #[serde(default)]
    pub denied_principals: BTreeSet<String>,
    #[serde(default)]
    pub limits: Limits,
    #[serde(default)]
    pub latency: Latency,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MasterSpec {
    pub model_id: ModelId,
    /// Catalog categories making up the master intersection.
    pub categories: BTreeSet<CategoryId>,
    #[serde(default)]
    pub predefined: BTreeSet<CategoryId>,
    #[serde(default)]
    pub values: Vec<InitialValue>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialValue {
    pub category_id: CategoryId,
    pub payload: Payload,
    #[serde(default)]
    pub ts: Tick,
    #[serde(default = "master_source")]
    pub source_id: SourceId,
    #[serde(default = "full_reliability")]
    pub reliability: f64,
}

fn master_source() -> SourceId {
    SourceId::new("master")
}

fn full_reliability() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cancellation {
    pub tick: Tick,
    pub instance: InstanceId,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Limits {
    /// Configuration step budget `K` per instance model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_config_steps: Option<u64>,
    #[serde(default = "Limits::default_poll_budget")]
    pub poll_budget: u32,
    #[serde(default = "Limits::default_max_steps")]
    pub max_steps: u64,
    #[serde(default = "Limits::default_history")]
    pub history_limit: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub staleness: Option<StalenessPolicy>,
}

impl Limits {
    fn default_poll_budget() -> u32 {
        16
    }

    fn default_max_steps() -> u64 {
        100_000
    }

    fn default_history() -> usize {
        DEFAULT_HISTORY_LIMIT
    }
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_config_steps: None,
            poll_budget: Self::default_poll_budget(),
            max_steps: Self::default_max_steps(),
            history_limit: Self::default_history(),
            staleness: None,
        }
    }
}

/// Delivery delay per hop: `default` (or the channel override) plus a
/// uniform draw from `0..=jitter` taken from the seeded generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Latency {
    #[serde(default = "Latency::one")]
    pub default: Tick,
    #[serde(default)]
    pub jitter: Tick,
    #[serde(default)]
    pub channels: Vec<ChannelLatency>,
}

impl Latency {
    fn one() -> Tick {
        1
    }

    pub fn base(&self, from: Pool, to: Pool) -> Tick {
        self.channels
            .iter()
            .find(|c| c.from == from && c.to == to)
            .map_or(self.default, |c| c.ticks)
    }
}

impl Default for Latency {
    fn default() -> Self {
        Self {
            default: 1,
            jitter: 0,
            channels: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelLatency {
    pub from: Pool,
    pub to: Pool,
    pub ticks: Tick,
}

/// A file that could not be read as a scenario at all (exit code 3).
#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed scenario: {0}")]
    Json(#[from] serde_json::Error),
    #[error("rule text {index}: {error}")]
    Rule { index: usize, error: ParseError },
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Violation {
    pub code: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

/// Everything derived from a scenario that the engines are built from.
#[derive(Clone, Debug)]
pub struct Compiled {
    pub catalog: CategoryCatalog,
    pub masters: Vec<MasterContextModel>,
    pub programs: BTreeMap<ProcessModelId, Program>,
    pub rule_base: RuleBase,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn catalog(&self) -> CategoryCatalog {
        CategoryCatalog::new(self.category_catalog.iter().cloned())
    }

    /// Parses every rule text, attaching configured freshness bounds.
    pub fn parsed_rules(&self) -> Result<Vec<Rule>, ScenarioError> {
        let mut out = Vec::new();
        for (index, text) in self.rules.iter().enumerate() {
            for rule in parse_rules(text).map_err(|error| ScenarioError::Rule { index, error })? {
                let freshness = self
                    .rule_freshness
                    .get(&rule.rule_id)
                    .cloned()
                    .unwrap_or_default();
                out.push(rule.with_freshness(freshness));
            }
        }
        Ok(out)
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            history_limit: self.limits.history_limit,
            max_config_steps: self.limits.max_config_steps,
            poll_budget: self.limits.poll_budget,
            staleness: self.limits.staleness,
        }
    }

    /// Validates and builds the engine inputs. `Err` carries either a parse
    /// failure or the full violation list.
    pub fn compile(&self) -> Result<Compiled, CompileError> {
        let rules = self.parsed_rules().map_err(CompileError::Parse)?;
        let (compiled, violations) = self.check(rules);
        if violations.is_empty() {
            Ok(compiled)
        } else {
            Err(CompileError::Invalid(violations))
        }
    }

    pub fn validate(&self) -> Result<Vec<Violation>, ScenarioError> {
        let rules = self.parsed_rules()?;
        Ok(self.check(rules).1)
    }

    fn check(&self, rules: Vec<Rule>) -> (Compiled, Vec<Violation>) {
        let mut v = Vec::new();
        let mut push = |code: &str, message: String| {
            v.push(Violation {
                code: code.to_owned(),
                message,
            })
        };
        let catalog = self.catalog();
        if catalog.entries().count() != self.category_catalog.len() {
            push(
                "DuplicateId",
                "category catalog lists a category twice".into(),
            );
        }
        for p in catalog.check() {
            push("InvalidCatalog", p);
        }
        let kind_of = |c: &str| catalog.get(c).map(|e| e.category.value_kind);
        let known = |c: &CategoryId| catalog.contains(c.as_str());

        // Masters.
        let mut masters = Vec::new();
        let mut master_ids = BTreeSet::new();
        for m in &self.master_contexts {
            if !master_ids.insert(m.model_id.clone()) {
                push(
                    "DuplicateId",
                    format!("master {} declared twice", m.model_id),
                );
            }
            let unknown: Vec<_> = m.categories.iter().filter(|c| !known(c)).collect();
            if !unknown.is_empty() {
                push(
                    "UnknownCategory",
                    format!("master {}: unknown categories {unknown:?}", m.model_id),
                );
                continue;
            }
            let mut g = catalog.intersection_of(&m.categories);
            let mut ok = true;
            for iv in &m.values {
                let value = ContextValue::new(
                    iv.category_id.clone(),
                    iv.payload.clone(),
                    iv.ts,
                    iv.source_id.clone(),
                    iv.reliability,
                );
                if let Err(e) = g.update_value(value) {
                    push(
                        "InvalidMaster",
                        format!("master {}: value for {}: {e}", m.model_id, iv.category_id),
                    );
                    ok = false;
                }
            }
            match MasterContextModel::new(m.model_id.clone(), g, m.predefined.clone()) {
                Ok(master) if ok => masters.push(master),
                Ok(_) => {}
                Err(e) => push("InvalidMaster", format!("master {}: {e}", m.model_id)),
            }
        }

        // Derivations.
        for r in &self.cause_effects {
            for c in [&r.cause_category, &r.effect_category] {
                if !known(c) {
                    push(
                        "UnknownCategory",
                        format!("relation {}: unknown category {c}", r.relation_id),
                    );
                }
            }
        }
        for a in &self.derivation_agents {
            for c in a.inputs().into_iter().chain(a.outputs()) {
                if !known(c) {
                    push(
                        "UnknownCategory",
                        format!("agent {}: unknown category {c}", a.agent_id),
                    );
                }
            }
        }
        if let Err(e) = derivation_order(&self.cause_effects, &self.derivation_agents) {
            push("InvalidDerivation", e);
        }

        // Sources.
        let mut source_ids = BTreeSet::new();
        for s in &self.sources {
            if !source_ids.insert(s.id().clone()) || s.id() == BPM_SOURCE {
                push("DuplicateId", format!("source id {} is taken", s.id()));
            }
            for p in s.check() {
                push("InvalidSource", p);
            }
            for c in &s.descriptor.provided_categories {
                if !known(c) {
                    push(
                        "UnknownCategory",
                        format!("source {}: unknown category {c}", s.id()),
                    );
                }
            }
        }
        if !self.mirrors.is_empty() {
            if let Err(e) = bpm_descriptor(&self.mirrors).check() {
                push("InvalidSource", e);
            }
        }

        // Thresholds.
        let mut threshold_cats = BTreeSet::new();
        for t in &self.thresholds {
            if !threshold_cats.insert(&t.category_id) {
                push(
                    "DuplicateId",
                    format!("two thresholds for {}", t.category_id),
                );
            }
            match kind_of(t.category_id.as_str()) {
                None => push(
                    "UnknownCategory",
                    format!("threshold: unknown category {}", t.category_id),
                ),
                Some(k)
                    if matches!(t.kind, ThresholdKind::NumericDelta { .. })
                        && k != ValueKind::Numeric =>
                {
                    push(
                        "KindMismatch",
                        format!(
                            "threshold on {}: numeric delta on a {k} category",
                            t.category_id
                        ),
                    )
                }
                Some(_) => {}
            }
            if !(0.0..=1.0).contains(&t.min_reliability) {
                push(
                    "InvalidThreshold",
                    format!(
                        "threshold on {}: min_reliability outside [0, 1]",
                        t.category_id
                    ),
                );
            }
        }

        // Process models.
        let models: BTreeMap<ProcessModelId, ProcessModel> = self
            .process_models
            .iter()
            .map(|m| (m.process_model_id.clone(), m.clone()))
            .collect();
        if models.len() != self.process_models.len() {
            push("DuplicateId", "a process model id is declared twice".into());
        }
        let mut programs = BTreeMap::new();
        for id in models.keys() {
            match compile(&models, id.as_str()) {
                Ok(p) => {
                    if !master_ids.contains(&p.master_id) {
                        push(
                            "UnknownMaster",
                            format!("process model {id}: unknown master {}", p.master_id),
                        );
                    }
                    programs.insert(id.clone(), p);
                }
                Err(e) => push("InvalidProcessModel", e.to_string()),
            }
        }

        // Rules.
        let mut rule_map = BTreeMap::new();
        for r in rules {
            if let Some(prev) = rule_map.insert(r.rule_id.clone(), r) {
                push(
                    "DuplicateId",
                    format!("rule {} declared twice", prev.rule_id),
                );
            }
        }
        for (rule, fresh) in &self.rule_freshness {
            if !rule_map.contains_key(rule) {
                push(
                    "UnknownRule",
                    format!("freshness bound for unknown rule {rule}"),
                );
            }
            for c in fresh.keys().filter(|c| !known(c)) {
                push(
                    "UnknownCategory",
                    format!("freshness bound of {rule}: unknown category {c}"),
                );
            }
        }
        let gates: BTreeMap<ProcessModelId, BTreeMap<_, GateRules>> = programs
            .iter()
            .map(|(id, p)| (id.clone(), p.gates.clone()))
            .collect();
        let rule_base = RuleBase {
            rules: rule_map,
            gates,
        };
        for (code, message) in rule_base.check(&kind_of) {
            push(code, message);
        }

        // Mirrors.
        for m in &self.mirrors {
            if !known(&m.category) {
                push(
                    "UnknownCategory",
                    format!("mirror of task {}: unknown category {}", m.task, m.category),
                );
            }
            if m.gate.is_some() == m.value.is_some() {
                push(
                    "InvalidMirror",
                    format!(
                        "mirror of task {}: give exactly one of gate and value",
                        m.task
                    ),
                );
            }
            if !programs.values().any(|p| p.task_ids().any(|t| t == m.task)) {
                push(
                    "InvalidMirror",
                    format!("mirror: no process model has task {}", m.task),
                );
            }
            if let Some(g) = &m.gate {
                if !programs.values().any(|p| p.gates.contains_key(g)) {
                    push(
                        "InvalidMirror",
                        format!("mirror of task {}: unknown gate {g}", m.task),
                    );
                }
            }
        }

        // Instances.
        let mut instance_ids = BTreeSet::new();
        for i in &self.instances {
            if !instance_ids.insert(i.instance_id.clone()) {
                push(
                    "DuplicateId",
                    format!("instance {} declared twice", i.instance_id),
                );
            }
            if !models.contains_key(&i.process_model) {
                push(
                    "UnknownProcessModel",
                    format!(
                        "instance {}: unknown process model {}",
                        i.instance_id, i.process_model
                    ),
                );
            }
            if let Some(other) = &i.share_with {
                let earlier = self.instances.iter().find(|o| &o.instance_id == other);
                match earlier {
                    Some(o) if o.start_tick < i.start_tick => {}
                    _ => push(
                        "InvalidShare",
                        format!(
                            "instance {}: share_with {other} must name an instance started earlier",
                            i.instance_id
                        ),
                    ),
                }
            }
            if i.instance_id.as_str().contains(".c") {
                push(
                    "InvalidInstanceId",
                    format!(
                        "instance {}: `.c` is reserved for compensations",
                        i.instance_id
                    ),
                );
            }
        }
        for c in &self.cancellations {
            if !instance_ids.contains(&c.instance) {
                push(
                    "UnknownInstance",
                    format!("cancellation of unknown instance {}", c.instance),
                );
            }
        }

        // Latency.
        for c in &self.latency.channels {
            if crate::choreography::forbidden(c.from, c.to) {
                push(
                    "ForbiddenRoute",
                    format!(
                        "latency override for forbidden channel {:?} -> {:?}",
                        c.from, c.to
                    ),
                );
            }
        }

        v.sort();
        v.dedup();
        (
            Compiled {
                catalog,
                masters,
                programs,
                rule_base,
            },
            v,
        )
    }
}

#[derive(Debug, Error)]
pub enum CompileError {
    #[error(transparent)]
    Parse(ScenarioError),
    #[error("{} violation(s): {}", .0.len(), .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
}
