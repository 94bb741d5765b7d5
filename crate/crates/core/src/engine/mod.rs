//! The context engine: owns the context cloud, admits source values,
//! propagates derivations to quiescence and gates change notifications.
//!
//! Value admission per category:
//! - a newer timestamp replaces the current value, an older one is stale;
//! - at an equal timestamp a derived value from the same producer is a
//!   recomputation and replaces the current one, an identical value is a
//!   re-delivery, and anything else is a conflict decided by
//!   [`conflict_order`].

mod agent;
mod catalog;
mod cloud;
mod conflict;
mod pool;
mod relation;
mod source;
mod staleness;
mod threshold;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use agent::{AgentKind, AggregateWindow, DerivationAgent, Reducer};
pub use catalog::{derivation_order, CatalogEntry, CategoryCatalog};
pub use cloud::{ContextCloud, Registration};
pub use conflict::{conflict_order, resolve_conflict};
pub use relation::{CauseEffectRelation, Expr, RelationError, RelationFn};
pub use source::{SourceDescriptor, SourceEvent, SourceMode};
pub use staleness::{apply_staleness, Freshness, StalenessPolicy};
pub use threshold::{check_threshold, NotificationThreshold, ThresholdKind};

use crate::ids::{CategoryId, InstanceId, ModelId, SourceId, Tick};
use crate::model::{
    ContextIntersection, ContextValue, InstanceContextModel, MasterContextModel, ModelError,
    StructuralDelta, DEFAULT_HISTORY_LIMIT,
};
use crate::payload::{Payload, ValueKind};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("unknown master model {0}")]
    UnknownMaster(ModelId),
    #[error("unknown shared model {0}")]
    UnknownSharedModel(String),
    #[error("instance {0} is already registered")]
    DuplicateRegistration(InstanceId),
    #[error("unknown source {0}")]
    UnknownSource(SourceId),
    #[error("unknown category {0}")]
    UnknownCategory(CategoryId),
    #[error("source {source_id} does not provide {category}")]
    NotProvided {
        source_id: SourceId,
        category: CategoryId,
    },
    #[error("payload does not match {expected} category {category}")]
    KindMismatch {
        category: CategoryId,
        expected: ValueKind,
    },
    #[error("no source provides category {0}")]
    NoProvidingSource(CategoryId),
    #[error("unknown or closed model {0}")]
    UnknownModel(ModelId),
    #[error("no registration for instance {0}")]
    UnknownRegistration(InstanceId),
    #[error(
        "initialization of {instance} timed out after {rounds} poll round(s); unvalued: {missing}"
    )]
    InitializationTimeout {
        instance: InstanceId,
        rounds: u32,
        missing: String,
    },
    #[error("invalid engine configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub history_limit: usize,
    /// Configuration step budget `K` of every instance model.
    pub max_config_steps: Option<u64>,
    pub poll_budget: u32,
    pub staleness: Option<StalenessPolicy>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            history_limit: DEFAULT_HISTORY_LIMIT,
            max_config_steps: None,
            poll_budget: 16,
            staleness: None,
        }
    }
}

/// How an offered value relates to the current one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Admission {
    /// First value or strictly newer.
    Update,
    /// Same timestamp, replaces the current value.
    ConflictWon,
    Recomputed,
    /// Same timestamp, current value stays.
    ConflictLost,
    Redelivery,
    Stale,
}

impl Admission {
    pub fn is_accepted(self) -> bool {
        matches!(
            self,
            Admission::Update | Admission::ConflictWon | Admission::Recomputed
        )
    }
}

pub fn admission(current: Option<&ContextValue>, new: &ContextValue) -> Admission {
    let Some(cur) = current else {
        return Admission::Update;
    };
    match new.ts.cmp(&cur.ts) {
        Ordering::Greater => Admission::Update,
        Ordering::Less => Admission::Stale,
        Ordering::Equal => {
            let same_content = new.payload == cur.payload && new.reliability == cur.reliability;
            if new.source_id == cur.source_id && same_content {
                Admission::Redelivery
            } else if new.source_id == cur.source_id && new.causing_ts.is_some() {
                Admission::Recomputed
            } else if conflict_order(new, cur) == Ordering::Greater {
                Admission::ConflictWon
            } else {
                Admission::ConflictLost
            }
        }
    }
}

/// Change notification for one registration after one ingest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Notification {
    pub instance: InstanceId,
    pub model_id: ModelId,
    pub changed: Vec<ContextValue>,
}

impl Notification {
    pub fn categories(&self) -> BTreeSet<CategoryId> {
        self.changed.iter().map(|v| v.category_id.clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Change {
    pub category: CategoryId,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub old: Option<ContextValue>,
    pub new: ContextValue,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Rejection {
    pub category: CategoryId,
    pub source: SourceId,
    pub ts: Tick,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Conflict {
    pub category: CategoryId,
    pub ts: Tick,
    pub winner: SourceId,
    pub loser: SourceId,
}

/// Effects of one ingest on one instance model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelIngest {
    pub model_id: ModelId,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extension: Option<StructuralDelta>,
    /// Accepted values in admission order, derived ones included.
    pub admitted: Vec<ContextValue>,
    pub rejected: Vec<Rejection>,
    pub conflicts: Vec<Conflict>,
    /// Net change per category against the pre-ingest state.
    pub changes: Vec<Change>,
    /// Ready registrations bound to the model when the ingest happened.
    pub listeners: Vec<InstanceId>,
    pub notifications: Vec<Notification>,
    pub errors: Vec<String>,
}

impl ModelIngest {
    fn new(model_id: ModelId) -> Self {
        Self {
            model_id,
            extension: None,
            admitted: Vec::new(),
            rejected: Vec::new(),
            conflicts: Vec::new(),
            changes: Vec::new(),
            listeners: Vec::new(),
            notifications: Vec::new(),
            errors: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.extension.is_none()
            && self.admitted.is_empty()
            && self.rejected.is_empty()
            && self.errors.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct IngestReport {
    pub models: Vec<ModelIngest>,
    /// Events rejected before reaching any model.
    pub errors: Vec<String>,
}

impl IngestReport {
    pub fn notifications(&self) -> impl Iterator<Item = &Notification> {
        self.models.iter().flat_map(|m| m.notifications.iter())
    }
}

/// Immutable view of a relevant subgraph handed to the rules engine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextSnapshot {
    pub model_id: ModelId,
    pub tick: Tick,
    pub graph: ContextIntersection,
    pub freshness: BTreeMap<CategoryId, Freshness>,
}

impl ContextSnapshot {
    pub fn value(&self, category: &str) -> Option<&ContextValue> {
        self.graph.value(category)
    }

    pub fn freshness(&self, category: &str) -> Option<Freshness> {
        self.freshness.get(category).copied()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AdministeredExtension {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<StructuralDelta>,
    pub failures: BTreeMap<CategoryId, String>,
}

#[derive(Clone, Debug, PartialEq)]
enum PollPurpose {
    Init(InstanceId),
    Fetch { model_id: ModelId },
    Periodic,
}

#[derive(Clone, Debug, PartialEq)]
struct InitState {
    rounds: u32,
    outstanding: BTreeSet<u64>,
}

#[derive(Clone, Debug, PartialEq)]
struct PendingRequest {
    instance: InstanceId,
    request: u64,
    model_id: ModelId,
    categories: BTreeSet<CategoryId>,
    waiting: BTreeSet<u64>,
    failures: BTreeMap<CategoryId, String>,
}

#[derive(Clone, Debug)]
pub struct ContextEngine {
    cloud: ContextCloud,
    catalog: CategoryCatalog,
    sources: BTreeMap<SourceId, SourceDescriptor>,
    relations: Vec<CauseEffectRelation>,
    agents: Vec<DerivationAgent>,
    config: EngineConfig,
    windows: BTreeMap<(ModelId, String), AggregateWindow>,
    next_poll: u64,
    polls: BTreeMap<u64, PollPurpose>,
    inits: BTreeMap<InstanceId, InitState>,
    fetches: BTreeMap<(ModelId, CategoryId), u64>,
    pending: Vec<PendingRequest>,
}

impl ContextEngine {
    pub fn new(
        catalog: CategoryCatalog,
        sources: impl IntoIterator<Item = SourceDescriptor>,
        mut relations: Vec<CauseEffectRelation>,
        mut agents: Vec<DerivationAgent>,
        config: EngineConfig,
    ) -> Result<Self, EngineError> {
        let sources: BTreeMap<SourceId, SourceDescriptor> = sources
            .into_iter()
            .map(|s| (s.source_id.clone(), s))
            .collect();
        for s in sources.values() {
            s.check().map_err(EngineError::InvalidConfig)?;
        }
        derivation_order(&relations, &agents).map_err(EngineError::InvalidConfig)?;
        relations.sort_by(|a, b| a.relation_id.cmp(&b.relation_id));
        agents.sort_by(|a, b| a.agent_id.cmp(&b.agent_id));
        Ok(Self {
            cloud: ContextCloud::default(),
            catalog,
            sources,
            relations,
            agents,
            config,
            windows: BTreeMap::new(),
            next_poll: 0,
            polls: BTreeMap::new(),
            inits: BTreeMap::new(),
            fetches: BTreeMap::new(),
            pending: Vec::new(),
        })
    }

    pub fn add_master(&mut self, master: MasterContextModel) -> Result<(), EngineError> {
        master.check()?;
        self.cloud.masters.insert(master.model_id.clone(), master);
        Ok(())
    }

    pub fn cloud(&self) -> &ContextCloud {
        &self.cloud
    }

    pub fn catalog(&self) -> &CategoryCatalog {
        &self.catalog
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn sources(&self) -> impl Iterator<Item = &SourceDescriptor> {
        self.sources.values()
    }

    pub fn model(&self, id: &ModelId) -> Option<&InstanceContextModel> {
        self.cloud.instances.get(id)
    }

    fn live_model_mut(&mut self, id: &ModelId) -> Result<&mut InstanceContextModel, EngineError> {
        self.cloud
            .instances
            .get_mut(id)
            .filter(|m| !m.is_closed())
            .ok_or_else(|| EngineError::UnknownModel(id.clone()))
    }

    fn thresholds_map(
        thresholds: Vec<NotificationThreshold>,
    ) -> BTreeMap<CategoryId, NotificationThreshold> {
        thresholds
            .into_iter()
            .map(|t| (t.category_id.clone(), t))
            .collect()
    }

    /// Instantiates a fresh model from the master, or binds the instance to
    /// the live model `share_with`.
    pub fn register_instance(
        &mut self,
        instance: &InstanceId,
        master_id: &ModelId,
        thresholds: Vec<NotificationThreshold>,
        share_with: Option<&ModelId>,
    ) -> Result<ModelId, EngineError> {
        let model_id = self.bind(instance, master_id, share_with)?;
        self.cloud.registrations.insert(
            instance.clone(),
            Registration {
                model_id: model_id.clone(),
                thresholds: Self::thresholds_map(thresholds),
                ready: true,
            },
        );
        Ok(model_id)
    }

    fn bind(
        &mut self,
        instance: &InstanceId,
        master_id: &ModelId,
        share_with: Option<&ModelId>,
    ) -> Result<ModelId, EngineError> {
        if self.cloud.registrations.contains_key(instance) {
            return Err(EngineError::DuplicateRegistration(instance.clone()));
        }
        let master = self
            .cloud
            .masters
            .get(master_id)
            .ok_or_else(|| EngineError::UnknownMaster(master_id.clone()))?;
        if let Some(shared) = share_with {
            let model = self
                .cloud
                .instances
                .get_mut(shared)
                .filter(|m| !m.is_closed())
                .ok_or_else(|| EngineError::UnknownSharedModel(shared.to_string()))?;
            model.bound_instances.insert(instance.clone());
            return Ok(shared.clone());
        }
        let model_id = self.fresh_model_id(master_id, instance);
        let mut model = InstanceContextModel::instantiate_from_master(
            master,
            model_id.clone(),
            [instance.clone()].into(),
            self.config.max_config_steps,
        )?;
        model = self.with_history_limit(model)?;
        self.cloud.instances.insert(model_id.clone(), model);
        Ok(model_id)
    }

    fn with_history_limit(
        &self,
        model: InstanceContextModel,
    ) -> Result<InstanceContextModel, EngineError> {
        if model.intersection().history_limit() == self.config.history_limit {
            return Ok(model);
        }
        let start = model
            .intersection()
            .clone()
            .with_history_limit(self.config.history_limit);
        Ok(InstanceContextModel::from_intersection(
            model.model_id.clone(),
            model.master_id.clone(),
            start,
            model.bound_instances.clone(),
            self.config.max_config_steps,
        )?)
    }

    fn fresh_model_id(&self, master_id: &ModelId, instance: &InstanceId) -> ModelId {
        let base = format!("{master_id}@{instance}");
        let mut id = ModelId::new(base.clone());
        let mut n = 1;
        while self.cloud.instances.contains_key(&id) {
            n += 1;
            id = ModelId::new(format!("{base}#{n}"));
        }
        id
    }

    /// Registers `instance` on a new model that starts from a deep copy of
    /// `from`'s current intersection.
    pub fn register_copy(
        &mut self,
        instance: &InstanceId,
        thresholds: Vec<NotificationThreshold>,
        from: &ModelId,
    ) -> Result<ModelId, EngineError> {
        if self.cloud.registrations.contains_key(instance) {
            return Err(EngineError::DuplicateRegistration(instance.clone()));
        }
        let source = self
            .cloud
            .live_model(from)
            .ok_or_else(|| EngineError::UnknownSharedModel(from.to_string()))?;
        let master_id = source.master_id.clone();
        let start = source.intersection().clone();
        let model_id = self.fresh_model_id(&master_id, instance);
        let model = InstanceContextModel::from_intersection(
            model_id.clone(),
            master_id,
            start,
            [instance.clone()].into(),
            self.config.max_config_steps,
        )?;
        self.cloud.instances.insert(model_id.clone(), model);
        self.cloud.registrations.insert(
            instance.clone(),
            Registration {
                model_id: model_id.clone(),
                thresholds: Self::thresholds_map(thresholds),
                ready: true,
            },
        );
        Ok(model_id)
    }

    /// Removes the registration. Returns the model id when the model lost
    /// its last bound instance and was closed.
    pub fn shutdown_model(
        &mut self,
        instance: &InstanceId,
    ) -> Result<Option<ModelId>, EngineError> {
        let reg = self
            .cloud
            .registrations
            .remove(instance)
            .ok_or_else(|| EngineError::UnknownRegistration(instance.clone()))?;
        self.inits.remove(instance);
        self.pending.retain(|p| &p.instance != instance);
        let model = self
            .cloud
            .instances
            .get_mut(&reg.model_id)
            .expect("registration references a model");
        model.bound_instances.remove(instance);
        if model.bound_instances.is_empty() && !model.is_closed() {
            model.close();
            let id = reg.model_id.clone();
            self.fetches.retain(|(m, _), _| m != &id);
            self.windows.retain(|(m, _), _| m != &id);
            return Ok(Some(id));
        }
        Ok(None)
    }

    fn to_value(&self, e: &SourceEvent) -> Result<ContextValue, EngineError> {
        let src = self
            .sources
            .get(&e.source_id)
            .ok_or_else(|| EngineError::UnknownSource(e.source_id.clone()))?;
        let entry = self
            .catalog
            .get(e.category_id.as_str())
            .ok_or_else(|| EngineError::UnknownCategory(e.category_id.clone()))?;
        if !src.provides(e.category_id.as_str()) {
            return Err(EngineError::NotProvided {
                source_id: e.source_id.clone(),
                category: e.category_id.clone(),
            });
        }
        if !entry.category.accepts(&e.payload) {
            return Err(EngineError::KindMismatch {
                category: e.category_id.clone(),
                expected: entry.category.value_kind,
            });
        }
        Ok(ContextValue::new(
            e.category_id.clone(),
            e.payload.clone(),
            e.ts,
            e.source_id.clone(),
            src.reliability,
        )
        .with_cost(src.cost_per_value))
    }

    /// Ingests one event into every live model holding its category.
    pub fn ingest(&mut self, event: &SourceEvent) -> Result<Vec<Notification>, EngineError> {
        let v = self.to_value(event)?;
        let report = self.ingest_values(vec![v], None);
        Ok(report.notifications().cloned().collect())
    }

    /// Ingests a batch of events. With `scope`, the events target the model
    /// of that instance only, which is extended by any catalog categories it
    /// lacks; otherwise each event reaches every live model holding its
    /// category.
    pub fn ingest_batch(
        &mut self,
        events: &[SourceEvent],
        scope: Option<&InstanceId>,
    ) -> IngestReport {
        let mut errors = Vec::new();
        let mut values = Vec::new();
        for e in events {
            match self.to_value(e) {
                Ok(v) => values.push(v),
                Err(err) => errors.push(format!("{} from {}: {err}", e.category_id, e.source_id)),
            }
        }
        let mut report = self.ingest_values(values, scope);
        errors.append(&mut report.errors);
        report.errors = errors;
        report
    }

    pub fn ingest_values(
        &mut self,
        values: Vec<ContextValue>,
        scope: Option<&InstanceId>,
    ) -> IngestReport {
        let mut report = IngestReport::default();
        if let Some(instance) = scope {
            let Some(model_id) = self.cloud.model_of(instance).cloned() else {
                report
                    .errors
                    .push(format!("scoped event for unregistered instance {instance}"));
                return report;
            };
            let Some(model) = self.cloud.live_model(&model_id) else {
                report.errors.push(format!("model {model_id} is closed"));
                return report;
            };
            let missing: BTreeSet<CategoryId> = values
                .iter()
                .map(|v| v.category_id.clone())
                .filter(|c| !model.intersection().contains(c.as_str()))
                .collect();
            let mut extension = None;
            if !missing.is_empty() {
                let (ext, _) = self.catalog.extension_for(model.intersection(), &missing);
                match self
                    .live_model_mut(&model_id)
                    .and_then(|m| Ok(m.extend(&ext)?))
                {
                    Ok(delta) => extension = Some(delta),
                    Err(e) => report
                        .errors
                        .push(format!("extension of {model_id} failed: {e}")),
                }
            }
            let mut mi = self.ingest_into(&model_id, values);
            mi.extension = extension;
            report.models.push(mi);
            return report;
        }
        let targets: Vec<ModelId> = self
            .cloud
            .live_models()
            .map(|m| m.model_id.clone())
            .collect();
        for model_id in targets {
            let model = &self.cloud.instances[&model_id];
            let mine: Vec<ContextValue> = values
                .iter()
                .filter(|v| model.intersection().contains(v.category_id.as_str()))
                .cloned()
                .collect();
            if mine.is_empty() {
                continue;
            }
            report.models.push(self.ingest_into(&model_id, mine));
        }
        report
    }

    fn ingest_into(&mut self, model_id: &ModelId, values: Vec<ContextValue>) -> ModelIngest {
        let mut mi = ModelIngest::new(model_id.clone());
        let pre = self.cloud.instances[model_id]
            .intersection()
            .current_values();
        let mut queue = VecDeque::new();
        for v in values {
            self.admit(model_id, v, &mut mi, &mut queue);
        }
        while let Some(trigger) = queue.pop_front() {
            for d in self.derive(model_id, &trigger, &mut mi) {
                self.admit(model_id, d, &mut mi, &mut queue);
            }
        }
        let post = self.cloud.instances[model_id]
            .intersection()
            .current_values();
        for (c, new) in &post {
            let old = pre.get(c);
            if old != Some(new) {
                mi.changes.push(Change {
                    category: c.clone(),
                    old: old.cloned(),
                    new: new.clone(),
                });
            }
        }
        for (inst, reg) in self.cloud.listeners(model_id) {
            if !reg.ready {
                continue;
            }
            mi.listeners.push(inst.clone());
            let mut changed = Vec::new();
            for ch in &mi.changes {
                match check_threshold(ch.old.as_ref(), &ch.new, &reg.threshold_for(&ch.category)) {
                    Ok(true) => changed.push(ch.new.clone()),
                    Ok(false) => {}
                    Err(e) => mi.errors.push(format!("threshold for {inst}: {e}")),
                }
            }
            if !changed.is_empty() {
                mi.notifications.push(Notification {
                    instance: inst.clone(),
                    model_id: model_id.clone(),
                    changed,
                });
            }
        }
        mi
    }

    fn admit(
        &mut self,
        model_id: &ModelId,
        mut v: ContextValue,
        mi: &mut ModelIngest,
        queue: &mut VecDeque<ContextValue>,
    ) {
        v.value_id = format!("{model_id}/{}", v.category_id);
        let model = self
            .cloud
            .instances
            .get_mut(model_id)
            .expect("ingest targets a known model");
        let current = model.intersection().value(v.category_id.as_str()).cloned();
        let verdict = admission(current.as_ref(), &v);
        if let (Some(cur), Admission::ConflictWon | Admission::ConflictLost) = (&current, verdict) {
            let (winner, loser) = if verdict == Admission::ConflictWon {
                (v.source_id.clone(), cur.source_id.clone())
            } else {
                (cur.source_id.clone(), v.source_id.clone())
            };
            mi.conflicts.push(Conflict {
                category: v.category_id.clone(),
                ts: v.ts,
                winner,
                loser,
            });
        }
        let result = match verdict {
            Admission::Update => model.update_value(v.clone()),
            Admission::ConflictWon | Admission::Recomputed => model.supersede_value(v.clone()),
            rejected => {
                let reason = serde_json::to_value(rejected)
                    .ok()
                    .and_then(|r| r.as_str().map(str::to_owned));
                mi.rejected.push(Rejection {
                    category: v.category_id,
                    source: v.source_id,
                    ts: v.ts,
                    reason: reason.unwrap_or_default(),
                });
                return;
            }
        };
        match result {
            Ok(_) => {
                mi.admitted.push(v.clone());
                queue.push_back(v);
            }
            Err(e) => mi.rejected.push(Rejection {
                category: v.category_id,
                source: v.source_id,
                ts: v.ts,
                reason: e.to_string(),
            }),
        }
    }

    /// Values produced by relations and agents reacting to `trigger`.
    fn derive(
        &mut self,
        model_id: &ModelId,
        trigger: &ContextValue,
        mi: &mut ModelIngest,
    ) -> Vec<ContextValue> {
        let graph = self.cloud.instances[model_id].intersection();
        let cause = &trigger.category_id;
        let mut out = Vec::new();
        let derived = |cat: &CategoryId, p: Payload, src: SourceId, ts: Tick, rel: f64| {
            ContextValue::new(cat.clone(), p, ts, src, rel).caused_by(ts)
        };
        for r in self.relations.iter().filter(|r| &r.cause_category == cause) {
            if !graph.contains(r.effect_category.as_str()) {
                continue;
            }
            match r.apply(&trigger.payload) {
                Ok(Some(p)) => out.push(derived(
                    &r.effect_category,
                    p,
                    r.source_id(),
                    trigger.ts,
                    trigger.reliability,
                )),
                Ok(None) => {}
                Err(e) => mi.errors.push(format!("relation {}: {e}", r.relation_id)),
            }
        }
        for a in self.agents.iter().filter(|a| a.inputs().contains(&cause)) {
            let src = a.source_id();
            match &a.kind {
                AgentKind::Filter {
                    output, op, value, ..
                } => {
                    if let Some(p) = graph
                        .contains(output.as_str())
                        .then(|| agent::filter(&trigger.payload, *op, value))
                        .flatten()
                    {
                        out.push(derived(output, p, src, trigger.ts, trigger.reliability));
                    }
                }
                AgentKind::Translate {
                    output, field, map, ..
                } => {
                    let p = graph
                        .contains(output.as_str())
                        .then(|| agent::translate(&trigger.payload, field.as_deref(), map.as_ref()))
                        .flatten();
                    if let Some(p) = p {
                        out.push(derived(output, p, src, trigger.ts, trigger.reliability));
                    }
                }
                AgentKind::Aggregate {
                    output,
                    window,
                    reducer,
                    ..
                } => {
                    let Some(x) = trigger.payload.as_number() else {
                        mi.errors.push(format!(
                            "agent {}: non-numeric input {}",
                            a.agent_id, trigger.payload
                        ));
                        continue;
                    };
                    let w = self
                        .windows
                        .entry((model_id.clone(), a.agent_id.clone()))
                        .or_default();
                    let y = w.push(trigger.ts, x, *window, *reducer);
                    if graph.contains(output.as_str()) {
                        out.push(derived(
                            output,
                            Payload::Number(y),
                            src,
                            trigger.ts,
                            trigger.reliability,
                        ));
                    }
                }
                AgentKind::Compose { inputs, output } => {
                    if !graph.contains(output.as_str()) {
                        continue;
                    }
                    let vals: Option<Vec<&ContextValue>> =
                        inputs.iter().map(|i| graph.value(i.as_str())).collect();
                    if let Some(vals) = vals {
                        let record = vals
                            .iter()
                            .map(|v| (v.category_id.to_string(), v.payload.clone()))
                            .collect();
                        let ts = vals.iter().map(|v| v.ts).max().unwrap_or(trigger.ts);
                        let rel = vals.iter().map(|v| v.reliability).fold(1.0, f64::min);
                        out.push(derived(output, Payload::Record(record), src, ts, rel));
                    }
                }
                AgentKind::Split { outputs, .. } => {
                    for (cat, p) in agent::split(&trigger.payload, outputs) {
                        if graph.contains(cat.as_str()) {
                            out.push(derived(
                                &cat,
                                p,
                                src.clone(),
                                trigger.ts,
                                trigger.reliability,
                            ));
                        }
                    }
                }
            }
        }
        out
    }

    /// Snapshot of the relevant subgraph for `categories`.
    pub fn get_context(
        &self,
        model_id: &ModelId,
        categories: &BTreeSet<CategoryId>,
        now: Tick,
    ) -> Result<ContextSnapshot, EngineError> {
        let model = self
            .cloud
            .live_model(model_id)
            .ok_or_else(|| EngineError::UnknownModel(model_id.clone()))?;
        let graph = model
            .intersection()
            .relevant_subgraph(categories)?
            .without_history();
        let freshness = graph
            .current_values()
            .into_iter()
            .map(|(c, v)| {
                let f = match &self.config.staleness {
                    Some(p) => p.assess(&v, now),
                    None => Freshness {
                        fresh: true,
                        effective_reliability: v.reliability,
                    },
                };
                (c, f)
            })
            .collect();
        Ok(ContextSnapshot {
            model_id: model_id.clone(),
            tick: now,
            graph,
            freshness,
        })
    }

    /// Whether some source, relation or agent can supply `category`.
    pub fn has_provider(&self, category: &str) -> bool {
        self.sources.values().any(|s| s.provides(category))
            || self.relations.iter().any(|r| r.effect_category == category)
            || self
                .agents
                .iter()
                .any(|a| a.outputs().iter().any(|o| *o == category))
    }

    /// Adds the catalog categories in `missing` (and absent ancestors) that
    /// have a provider. Others are reported per category and leave the model
    /// unchanged.
    pub fn administer_extension(
        &mut self,
        model_id: &ModelId,
        missing: &BTreeSet<CategoryId>,
    ) -> Result<AdministeredExtension, EngineError> {
        let model = self
            .cloud
            .live_model(model_id)
            .ok_or_else(|| EngineError::UnknownModel(model_id.clone()))?;
        let mut result = AdministeredExtension::default();
        let mut add = BTreeSet::new();
        for c in missing
            .iter()
            .filter(|c| !model.intersection().contains(c.as_str()))
        {
            if !self.catalog.contains(c.as_str()) {
                result.failures.insert(
                    c.clone(),
                    EngineError::UnknownCategory(c.clone()).to_string(),
                );
            } else if !self.has_provider(c.as_str()) {
                result.failures.insert(
                    c.clone(),
                    EngineError::NoProvidingSource(c.clone()).to_string(),
                );
            } else {
                add.insert(c.clone());
            }
        }
        if add.is_empty() {
            return Ok(result);
        }
        let (ext, _) = self.catalog.extension_for(model.intersection(), &add);
        let delta = self.live_model_mut(model_id)?.extend(&ext)?;
        result.delta = Some(delta);
        Ok(result)
    }

    /// Poll-mode sources for `categories`, with the subset each provides.
    pub fn poll_targets(
        &self,
        categories: &BTreeSet<CategoryId>,
    ) -> BTreeMap<SourceId, BTreeSet<CategoryId>> {
        self.sources
            .values()
            .filter(|s| s.is_poll())
            .filter_map(|s| {
                let cats: BTreeSet<CategoryId> = categories
                    .intersection(&s.provided_categories)
                    .cloned()
                    .collect();
                (!cats.is_empty()).then(|| (s.source_id.clone(), cats))
            })
            .collect()
    }

    /// Poll-mode sources due at `now`, each with the categories it provides
    /// that some live model holds.
    pub fn poll_due_sources(&self, now: Tick) -> Vec<(SourceId, BTreeSet<CategoryId>)> {
        let held: BTreeSet<CategoryId> = self
            .cloud
            .live_models()
            .flat_map(|m| m.intersection().category_ids())
            .collect();
        self.sources
            .values()
            .filter(|s| s.due_at(now))
            .filter_map(|s| {
                let cats: BTreeSet<CategoryId> =
                    s.provided_categories.intersection(&held).cloned().collect();
                (!cats.is_empty()).then(|| (s.source_id.clone(), cats))
            })
            .collect()
    }

    pub fn next_poll_tick(&self, after: Tick) -> Option<Tick> {
        self.sources
            .values()
            .filter_map(|s| s.next_due_after(after))
            .min()
    }
}

#[cfg(test)]
mod tests;
