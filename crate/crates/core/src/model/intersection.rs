//! The leveled context DAG.
//!
//! Categories are partitioned into levels `V_1..V_k`; every edge runs from a
//! strictly lower level to a strictly higher one, which rules out cycles
//! without a separate check. Levels are 1-based in the public API.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::value::{ContextCategory, ContextValue};
use super::ModelError;
use crate::ids::{CategoryId, Tick};

pub const DEFAULT_HISTORY_LIMIT: usize = 8;

fn default_history_limit() -> usize {
    DEFAULT_HISTORY_LIMIT
}

pub type Edge = (CategoryId, CategoryId);

/// Current value of a category plus a bounded tail of the values it replaced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueSlot {
    pub current: ContextValue,
    #[serde(default, skip_serializing_if = "VecDeque::is_empty")]
    pub history: VecDeque<ContextValue>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextIntersection {
    levels: Vec<BTreeSet<CategoryId>>,
    edges: BTreeSet<Edge>,
    #[serde(default)]
    categories: BTreeMap<CategoryId, ContextCategory>,
    #[serde(default)]
    values: BTreeMap<CategoryId, ValueSlot>,
    #[serde(default)]
    step: u64,
    #[serde(default = "default_history_limit")]
    history_limit: usize,
}

impl Default for ContextIntersection {
    fn default() -> Self {
        Self {
            levels: Vec::new(),
            edges: BTreeSet::new(),
            categories: BTreeMap::new(),
            values: BTreeMap::new(),
            step: 0,
            history_limit: DEFAULT_HISTORY_LIMIT,
        }
    }
}

/// Structural and value additions applied by [`ContextIntersection::extended`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Extension {
    /// New categories with their 1-based target level.
    #[serde(default)]
    pub categories: Vec<(ContextCategory, usize)>,
    #[serde(default)]
    pub edges: Vec<Edge>,
    #[serde(default)]
    pub values: Vec<ContextValue>,
}

impl Extension {
    pub fn is_empty(&self) -> bool {
        self.categories.is_empty() && self.edges.is_empty() && self.values.is_empty()
    }
}

/// What an extension actually changed (no-op entries removed).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StructuralDelta {
    pub added_categories: Vec<(CategoryId, usize)>,
    pub added_edges: Vec<Edge>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    /// A category is a member of more than one level.
    OverlappingLevels {
        category: CategoryId,
        levels: Vec<usize>,
    },
    /// An edge does not go from a lower to a strictly higher level.
    EdgeNotDownward {
        from: CategoryId,
        to: CategoryId,
        from_level: usize,
        to_level: usize,
    },
    /// A category is referenced by an edge, value or definition but has no level.
    Unleveled { category: CategoryId },
    /// A leveled category has no definition.
    Undefined { category: CategoryId },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::OverlappingLevels { category, levels } => {
                write!(f, "category {category} appears in levels {levels:?}")
            }
            Violation::EdgeNotDownward {
                from,
                to,
                from_level,
                to_level,
            } => write!(
                f,
                "edge {from} -> {to} goes from level {from_level} to level {to_level}"
            ),
            Violation::Unleveled { category } => write!(f, "category {category} has no level"),
            Violation::Undefined { category } => write!(f, "category {category} has no definition"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

impl ContextIntersection {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds an intersection without checking any invariant. Use
    /// [`validate`](Self::validate) on the result.
    pub fn from_parts(
        levels: Vec<BTreeSet<CategoryId>>,
        edges: BTreeSet<Edge>,
        categories: BTreeMap<CategoryId, ContextCategory>,
    ) -> Self {
        Self {
            levels,
            edges,
            categories,
            ..Self::default()
        }
    }

    pub fn with_history_limit(mut self, limit: usize) -> Self {
        self.history_limit = limit.max(1);
        self
    }

    pub fn levels(&self) -> &[BTreeSet<CategoryId>] {
        &self.levels
    }

    pub fn edges(&self) -> &BTreeSet<Edge> {
        &self.edges
    }

    pub fn categories(&self) -> &BTreeMap<CategoryId, ContextCategory> {
        &self.categories
    }

    pub fn category(&self, id: &str) -> Option<&ContextCategory> {
        self.categories.get(id)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn history_limit(&self) -> usize {
        self.history_limit
    }

    pub fn contains(&self, id: &str) -> bool {
        self.levels.iter().any(|l| l.contains(id))
    }

    /// 1-based level of `id`, if leveled.
    pub fn level_of(&self, id: &str) -> Option<usize> {
        self.levels
            .iter()
            .position(|l| l.contains(id))
            .map(|i| i + 1)
    }

    /// All leveled categories.
    pub fn category_ids(&self) -> BTreeSet<CategoryId> {
        self.levels.iter().flatten().cloned().collect()
    }

    pub fn value(&self, id: &str) -> Option<&ContextValue> {
        self.values.get(id).map(|s| &s.current)
    }

    pub fn slot(&self, id: &str) -> Option<&ValueSlot> {
        self.values.get(id)
    }

    pub fn current_values(&self) -> BTreeMap<CategoryId, ContextValue> {
        self.values
            .iter()
            .map(|(k, s)| (k.clone(), s.current.clone()))
            .collect()
    }

    /// Leveled categories that do not yet hold a value.
    pub fn unvalued(&self) -> BTreeSet<CategoryId> {
        self.category_ids()
            .into_iter()
            .filter(|c| !self.values.contains_key(c))
            .collect()
    }

    pub fn parents_of<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a CategoryId> + 'a {
        self.edges
            .iter()
            .filter(move |(_, to)| to == id)
            .map(|(from, _)| from)
    }

    /// Checks level disjointness, downward edges and that every referenced
    /// category is leveled and defined. Violations are reported, never raised.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        let mut seen: BTreeMap<&CategoryId, Vec<usize>> = BTreeMap::new();
        for (i, level) in self.levels.iter().enumerate() {
            for c in level {
                seen.entry(c).or_default().push(i + 1);
            }
        }
        for (c, ls) in &seen {
            if ls.len() > 1 {
                violations.push(Violation::OverlappingLevels {
                    category: (*c).clone(),
                    levels: ls.clone(),
                });
            }
            if !self.categories.contains_key(*c) {
                violations.push(Violation::Undefined {
                    category: (*c).clone(),
                });
            }
        }

        let mut unleveled = BTreeSet::new();
        for (from, to) in &self.edges {
            match (seen.get(from), seen.get(to)) {
                (Some(fl), Some(tl)) => {
                    let (f, t) = (fl[0], tl[0]);
                    if f >= t {
                        violations.push(Violation::EdgeNotDownward {
                            from: from.clone(),
                            to: to.clone(),
                            from_level: f,
                            to_level: t,
                        });
                    }
                }
                (fl, tl) => {
                    if fl.is_none() {
                        unleveled.insert(from.clone());
                    }
                    if tl.is_none() {
                        unleveled.insert(to.clone());
                    }
                }
            }
        }
        for c in self.values.keys().chain(self.categories.keys()) {
            if !seen.contains_key(c) {
                unleveled.insert(c.clone());
            }
        }
        violations.extend(
            unleveled
                .into_iter()
                .map(|category| Violation::Unleveled { category }),
        );
        ValidationReport { violations }
    }

    /// Returns a copy extended by `ext`, with `step` incremented.
    ///
    /// Only additions are possible. Re-listing an existing category at its
    /// current level is a no-op; at any other level, or with a different
    /// definition, it would amount to a removal and is rejected.
    pub fn extended(
        &self,
        ext: &Extension,
    ) -> Result<(ContextIntersection, StructuralDelta), ModelError> {
        let mut next = self.clone();
        let mut delta = StructuralDelta::default();

        for (cat, level) in &ext.categories {
            let id = &cat.category_id;
            if *level == 0 {
                return Err(ModelError::LevelViolation(format!(
                    "category {id} has level 0"
                )));
            }
            if let Some(existing) = self.level_of(id.as_str()) {
                if existing != *level || self.categories.get(id) != Some(cat) {
                    return Err(ModelError::DeletionRejected(format!(
                        "category {id} already exists at level {existing}"
                    )));
                }
                continue;
            }
            if delta.added_categories.iter().any(|(c, _)| c == id) {
                continue;
            }
            while next.levels.len() < *level {
                next.levels.push(BTreeSet::new());
            }
            next.levels[level - 1].insert(id.clone());
            next.categories.insert(id.clone(), cat.clone());
            delta.added_categories.push((id.clone(), *level));
        }

        for (from, to) in &ext.edges {
            let f = next.level_of(from.as_str());
            let t = next.level_of(to.as_str());
            match (f, t) {
                (Some(f), Some(t)) if f < t => {
                    if next.edges.insert((from.clone(), to.clone())) {
                        delta.added_edges.push((from.clone(), to.clone()));
                    }
                }
                (Some(f), Some(t)) => {
                    return Err(ModelError::LevelViolation(format!(
                        "edge {from} -> {to} goes from level {f} to level {t}"
                    )))
                }
                _ => {
                    return Err(ModelError::LevelViolation(format!(
                        "edge {from} -> {to} references an unleveled category"
                    )))
                }
            }
        }

        next.step += 1;
        for v in &ext.values {
            next.update_value(v.clone())?;
        }
        Ok((next, delta))
    }

    /// Replaces the current value of `v.category_id`. Timestamps must be
    /// strictly increasing; an equal or older timestamp is a stale write and
    /// leaves the intersection untouched.
    pub fn update_value(&mut self, v: ContextValue) -> Result<Option<ContextValue>, ModelError> {
        self.check_value(&v)?;
        if let Some(cur) = self.value(v.category_id.as_str()) {
            if v.ts <= cur.ts {
                return Err(ModelError::StaleWrite {
                    category: v.category_id.clone(),
                    current_ts: cur.ts,
                    offered_ts: v.ts,
                });
            }
        }
        Ok(self.install(v))
    }

    /// Like [`update_value`](Self::update_value) but also accepts a value
    /// with the same timestamp as the current one. Used when a same-tick
    /// conflict is decided in favour of the newcomer, or a derived value is
    /// recomputed for the same cause.
    pub fn supersede_value(&mut self, v: ContextValue) -> Result<Option<ContextValue>, ModelError> {
        self.check_value(&v)?;
        if let Some(cur) = self.value(v.category_id.as_str()) {
            if v.ts < cur.ts {
                return Err(ModelError::StaleWrite {
                    category: v.category_id.clone(),
                    current_ts: cur.ts,
                    offered_ts: v.ts,
                });
            }
        }
        Ok(self.install(v))
    }

    fn check_value(&self, v: &ContextValue) -> Result<(), ModelError> {
        let cat = match self.categories.get(&v.category_id) {
            Some(c) if self.contains(v.category_id.as_str()) => c,
            _ => return Err(ModelError::UnknownCategory(v.category_id.clone())),
        };
        if !cat.accepts(&v.payload) {
            return Err(ModelError::KindMismatch {
                category: v.category_id.clone(),
                expected: cat.value_kind,
            });
        }
        Ok(())
    }

    fn install(&mut self, v: ContextValue) -> Option<ContextValue> {
        let limit = self.history_limit.max(1);
        match self.values.get_mut(&v.category_id) {
            Some(slot) => {
                let prev = std::mem::replace(&mut slot.current, v);
                slot.history.push_back(prev.clone());
                while slot.history.len() > limit {
                    slot.history.pop_front();
                }
                Some(prev)
            }
            None => {
                self.values.insert(
                    v.category_id.clone(),
                    ValueSlot {
                        current: v,
                        history: VecDeque::new(),
                    },
                );
                None
            }
        }
    }

    /// Requested categories plus all their ancestors, as an induced subgraph
    /// with current values attached. Level numbering is preserved.
    pub fn relevant_subgraph(
        &self,
        categories: &BTreeSet<CategoryId>,
    ) -> Result<ContextIntersection, ModelError> {
        if let Some(missing) = categories.iter().find(|c| !self.contains(c.as_str())) {
            return Err(ModelError::UnknownCategory(missing.clone()));
        }
        let closure = self.ancestor_closure(categories);
        Ok(self.induced(&closure))
    }

    pub fn ancestor_closure(&self, categories: &BTreeSet<CategoryId>) -> BTreeSet<CategoryId> {
        let mut closure: BTreeSet<CategoryId> = BTreeSet::new();
        let mut queue: VecDeque<CategoryId> = categories.iter().cloned().collect();
        while let Some(c) = queue.pop_front() {
            if closure.insert(c.clone()) {
                queue.extend(self.parents_of(c.as_str()).cloned());
            }
        }
        closure
    }

    fn induced(&self, keep: &BTreeSet<CategoryId>) -> ContextIntersection {
        ContextIntersection {
            levels: self
                .levels
                .iter()
                .map(|l| l.intersection(keep).cloned().collect())
                .collect(),
            edges: self
                .edges
                .iter()
                .filter(|(f, t)| keep.contains(f) && keep.contains(t))
                .cloned()
                .collect(),
            categories: self
                .categories
                .iter()
                .filter(|(k, _)| keep.contains(*k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            values: self
                .values
                .iter()
                .filter(|(k, _)| keep.contains(*k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            step: self.step,
            history_limit: self.history_limit,
        }
    }

    /// Same structure and current values; ignores history and step.
    pub fn same_state(&self, other: &ContextIntersection) -> bool {
        self.structure_eq(other) && self.current_values() == other.current_values()
    }

    pub fn structure_eq(&self, other: &ContextIntersection) -> bool {
        let trim = |ls: &[BTreeSet<CategoryId>]| {
            let mut v = ls.to_vec();
            while v.last().is_some_and(|l| l.is_empty()) {
                v.pop();
            }
            v
        };
        trim(&self.levels) == trim(&other.levels)
            && self.edges == other.edges
            && self.categories == other.categories
    }

    /// Copy with value histories dropped; current values are kept.
    pub fn without_history(&self) -> Self {
        let mut g = self.clone();
        for slot in g.values.values_mut() {
            slot.history.clear();
        }
        g
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Newest timestamp among current values.
    pub fn latest_ts(&self) -> Option<Tick> {
        self.values.values().map(|s| s.current.ts).max()
    }
}

/// Whether every level of `a` is contained in the same level of `b` and every
/// edge of `a` is an edge of `b`. Both graphs must be valid.
pub fn is_subgraph(a: &ContextIntersection, b: &ContextIntersection) -> Result<bool, ModelError> {
    for (name, g) in [("first", a), ("second", b)] {
        let report = g.validate();
        if !report.is_clean() {
            return Err(ModelError::InvalidInput(format!(
                "{name} graph has {} violation(s): {}",
                report.violations.len(),
                report.violations[0]
            )));
        }
    }
    let empty = BTreeSet::new();
    let levels_ok = a
        .levels
        .iter()
        .enumerate()
        .all(|(i, la)| la.is_subset(b.levels.get(i).unwrap_or(&empty)));
    Ok(levels_ok && a.edges.is_subset(&b.edges))
}
