use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::intersection::{ContextIntersection, Extension, StructuralDelta};
use super::value::ContextValue;
use super::ModelError;
use crate::ids::{CategoryId, InstanceId, ModelId};

/// Global context of a process model. Serves as the template from which
/// instance models are copied; never mutated by instance lifecycles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MasterContextModel {
    pub model_id: ModelId,
    #[serde(flatten)]
    intersection: ContextIntersection,
    pub predefined_categories: BTreeSet<CategoryId>,
}

impl MasterContextModel {
    /// Fails unless the intersection validates and every predefined category
    /// sits in the first level.
    pub fn new(
        model_id: impl Into<ModelId>,
        intersection: ContextIntersection,
        predefined_categories: BTreeSet<CategoryId>,
    ) -> Result<Self, ModelError> {
        let master = Self {
            model_id: model_id.into(),
            intersection,
            predefined_categories,
        };
        master.check()?;
        Ok(master)
    }

    pub fn check(&self) -> Result<(), ModelError> {
        let report = self.intersection.validate();
        if !report.is_clean() {
            return Err(ModelError::InvalidMaster(
                report
                    .violations
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join("; "),
            ));
        }
        let first = self
            .intersection
            .levels()
            .first()
            .cloned()
            .unwrap_or_default();
        if let Some(c) = self
            .predefined_categories
            .iter()
            .find(|c| !first.contains(*c))
        {
            return Err(ModelError::InvalidMaster(format!(
                "predefined category {c} is not in the first level"
            )));
        }
        Ok(())
    }

    pub fn intersection(&self) -> &ContextIntersection {
        &self.intersection
    }

    /// Canonical JSON form; byte-stable for equal masters.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(&serde_json::to_value(self).expect("master serializes"))
            .expect("value serializes")
    }
}

/// A structural rule every configuration step has to satisfy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelConstraint {
    DisjointLevels,
    DownwardEdges,
    ExtensionOnly,
}

/// Multi-step configuration problem of one instance model: constraint set,
/// step budget, start and (after shutdown) end configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigurationProblem {
    pub constraints: Vec<ModelConstraint>,
    /// `None` means unbounded.
    pub max_steps: Option<u64>,
    pub start: ContextIntersection,
    pub end: Option<ContextIntersection>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PathEntry {
    pub step: u64,
    #[serde(flatten)]
    pub delta: StructuralDelta,
    /// Values accepted while this configuration step was current.
    #[serde(default)]
    pub value_deltas: Vec<ContextValue>,
}

/// Sequence of configuration steps from `G_Start` on. Entry 0 is the start
/// configuration itself (empty structural delta).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfigurationPath {
    pub entries: Vec<PathEntry>,
}

impl ConfigurationPath {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// The live, extensible copy of a context model bound to one or more
/// process instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceContextModel {
    pub model_id: ModelId,
    pub master_id: ModelId,
    intersection: ContextIntersection,
    pub bound_instances: BTreeSet<InstanceId>,
    path: ConfigurationPath,
    problem: ConfigurationProblem,
    closed: bool,
}

impl InstanceContextModel {
    pub fn instantiate_from_master(
        master: &MasterContextModel,
        model_id: impl Into<ModelId>,
        instances: BTreeSet<InstanceId>,
        max_steps: Option<u64>,
    ) -> Result<Self, ModelError> {
        master.check()?;
        let mut start = master.intersection().clone();
        start.set_step(0);
        Self::from_intersection(
            model_id,
            master.model_id.clone(),
            start,
            instances,
            max_steps,
        )
    }

    /// Starts a model from an arbitrary valid intersection, e.g. a copy of
    /// another instance model's current configuration.
    pub fn from_intersection(
        model_id: impl Into<ModelId>,
        master_id: ModelId,
        start: ContextIntersection,
        instances: BTreeSet<InstanceId>,
        max_steps: Option<u64>,
    ) -> Result<Self, ModelError> {
        if instances.is_empty() {
            return Err(ModelError::EmptyBinding);
        }
        let report = start.validate();
        if !report.is_clean() {
            return Err(ModelError::InvalidMaster(format!(
                "{} violation(s)",
                report.violations.len()
            )));
        }
        Ok(Self {
            model_id: model_id.into(),
            master_id,
            path: ConfigurationPath {
                entries: vec![PathEntry {
                    step: start.step(),
                    ..Default::default()
                }],
            },
            problem: ConfigurationProblem {
                constraints: vec![
                    ModelConstraint::DisjointLevels,
                    ModelConstraint::DownwardEdges,
                    ModelConstraint::ExtensionOnly,
                ],
                max_steps,
                start: start.clone(),
                end: None,
            },
            intersection: start,
            bound_instances: instances,
            closed: false,
        })
    }

    pub fn intersection(&self) -> &ContextIntersection {
        &self.intersection
    }

    pub fn path(&self) -> &ConfigurationPath {
        &self.path
    }

    pub fn problem(&self) -> &ConfigurationProblem {
        &self.problem
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Applies an extension as a new configuration step.
    pub fn extend(&mut self, ext: &Extension) -> Result<StructuralDelta, ModelError> {
        if self.closed {
            return Err(ModelError::Closed(self.model_id.clone()));
        }
        let next_step = self.intersection.step() + 1;
        if let Some(k) = self.problem.max_steps {
            if next_step > k {
                return Err(ModelError::StepBudgetExceeded { max_steps: k });
            }
        }
        let structural = Extension {
            values: Vec::new(),
            ..ext.clone()
        };
        let (next, delta) = self.intersection.extended(&structural)?;
        self.intersection = next;
        self.path.entries.push(PathEntry {
            step: self.intersection.step(),
            delta: delta.clone(),
            value_deltas: Vec::new(),
        });
        for v in &ext.values {
            self.update_value(v.clone())?;
        }
        Ok(delta)
    }

    pub fn update_value(&mut self, v: ContextValue) -> Result<Option<ContextValue>, ModelError> {
        if self.closed {
            return Err(ModelError::Closed(self.model_id.clone()));
        }
        let prev = self.intersection.update_value(v.clone())?;
        self.record_value(v);
        Ok(prev)
    }

    pub fn supersede_value(&mut self, v: ContextValue) -> Result<Option<ContextValue>, ModelError> {
        if self.closed {
            return Err(ModelError::Closed(self.model_id.clone()));
        }
        let prev = self.intersection.supersede_value(v.clone())?;
        self.record_value(v);
        Ok(prev)
    }

    fn record_value(&mut self, v: ContextValue) {
        if let Some(last) = self.path.entries.last_mut() {
            last.value_deltas.push(v);
        }
    }

    /// Records `G_End` and stops accepting changes.
    pub fn close(&mut self) {
        self.problem.end = Some(self.intersection.clone());
        self.closed = true;
    }

    /// Rebuilds the current configuration from `G_Start` and the path.
    pub fn replay_path(&self) -> Result<ContextIntersection, ModelError> {
        let mut g = self.problem.start.clone();
        for (i, entry) in self.path.entries.iter().enumerate() {
            if i > 0 {
                let ext = Extension {
                    categories: entry
                        .delta
                        .added_categories
                        .iter()
                        .map(|(c, l)| {
                            let def = self
                                .intersection
                                .category(c.as_str())
                                .cloned()
                                .ok_or_else(|| ModelError::UnknownCategory(c.clone()))?;
                            Ok((def, *l))
                        })
                        .collect::<Result<_, ModelError>>()?,
                    edges: entry.delta.added_edges.clone(),
                    values: Vec::new(),
                };
                g = g.extended(&ext)?.0;
            }
            for v in &entry.value_deltas {
                g.supersede_value(v.clone())?;
            }
        }
        Ok(g)
    }

    /// Intersection snapshots along the path, one per configuration step.
    pub fn snapshots(&self) -> Result<Vec<ContextIntersection>, ModelError> {
        let mut out = Vec::with_capacity(self.path.len());
        let mut g = self.problem.start.clone();
        for (i, entry) in self.path.entries.iter().enumerate() {
            if i > 0 {
                let ext = Extension {
                    categories: entry
                        .delta
                        .added_categories
                        .iter()
                        .filter_map(|(c, l)| {
                            self.intersection
                                .category(c.as_str())
                                .map(|d| (d.clone(), *l))
                        })
                        .collect(),
                    edges: entry.delta.added_edges.clone(),
                    values: Vec::new(),
                };
                g = g.extended(&ext)?.0;
            }
            out.push(g.clone());
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::intersection::is_subgraph;
    use crate::model::ContextCategory;
    use crate::payload::ValueKind;

    fn master() -> MasterContextModel {
        let ext = Extension {
            categories: vec![
                (ContextCategory::new("geospatial", ValueKind::Text), 1),
                (ContextCategory::new("processObject", ValueKind::Text), 1),
                (ContextCategory::new("weather", ValueKind::Text), 2),
            ],
            edges: vec![("geospatial".into(), "weather".into())],
            values: vec![ContextValue::new("geospatial", "route A", 0, "master", 1.0)],
        };
        let (g, _) = ContextIntersection::new().extended(&ext).unwrap();
        MasterContextModel::new("logistics", g, ["geospatial".into()].into()).unwrap()
    }

    fn ids(xs: &[&str]) -> BTreeSet<InstanceId> {
        xs.iter().map(|x| InstanceId::from(*x)).collect()
    }

    #[test]
    fn predefined_must_be_first_level() {
        let m = master();
        let err =
            MasterContextModel::new("bad", m.intersection().clone(), ["weather".into()].into());
        assert!(matches!(err, Err(ModelError::InvalidMaster(_))));
    }

    #[test]
    fn instantiation_copies_and_isolates() {
        let m = master();
        let before = m.to_canonical_json();
        let mut a =
            InstanceContextModel::instantiate_from_master(&m, "m1", ids(&["p1"]), None).unwrap();
        let b =
            InstanceContextModel::instantiate_from_master(&m, "m2", ids(&["p2"]), None).unwrap();
        assert!(a.intersection().structure_eq(m.intersection()));
        assert!(a.intersection().structure_eq(b.intersection()));
        assert_ne!(a.model_id, b.model_id);
        assert_eq!(a.path().len(), 1);

        a.extend(&Extension {
            categories: vec![(ContextCategory::new("packagingMethod", ValueKind::Text), 2)],
            edges: vec![("processObject".into(), "packagingMethod".into())],
            values: vec![],
        })
        .unwrap();
        assert_eq!(m.to_canonical_json(), before);
    }

    #[test]
    fn empty_binding_rejected() {
        let m = master();
        assert!(matches!(
            InstanceContextModel::instantiate_from_master(&m, "m", BTreeSet::new(), None),
            Err(ModelError::EmptyBinding)
        ));
    }

    #[test]
    fn step_budget_and_path() {
        let m = master();
        let mut a =
            InstanceContextModel::instantiate_from_master(&m, "m1", ids(&["p1"]), Some(1)).unwrap();
        a.extend(&Extension::default()).unwrap();
        assert!(matches!(
            a.extend(&Extension::default()),
            Err(ModelError::StepBudgetExceeded { max_steps: 1 })
        ));
        assert_eq!(a.path().len(), 2);
    }

    #[test]
    fn path_replays_to_current_state() {
        let m = master();
        let mut a =
            InstanceContextModel::instantiate_from_master(&m, "m1", ids(&["p1"]), None).unwrap();
        a.update_value(ContextValue::new("weather", "clear", 1, "svc", 0.9))
            .unwrap();
        a.extend(&Extension {
            categories: vec![(ContextCategory::new("shippingMethod", ValueKind::Text), 2)],
            edges: vec![("processObject".into(), "shippingMethod".into())],
            values: vec![ContextValue::new("shippingMethod", "truck", 2, "bpm", 1.0)],
        })
        .unwrap();
        a.update_value(ContextValue::new("weather", "storm", 3, "svc", 0.9))
            .unwrap();
        let replayed = a.replay_path().unwrap();
        assert!(replayed.same_state(a.intersection()));
        let snaps = a.snapshots().unwrap();
        for w in snaps.windows(2) {
            assert!(is_subgraph(&w[0], &w[1]).unwrap());
        }
    }

    #[test]
    fn close_records_end() {
        let m = master();
        let mut a =
            InstanceContextModel::instantiate_from_master(&m, "m1", ids(&["p1"]), None).unwrap();
        a.close();
        assert!(a.is_closed());
        assert_eq!(a.problem().end.as_ref(), Some(a.intersection()));
        assert!(matches!(
            a.update_value(ContextValue::new("weather", "x", 9, "s", 1.0)),
            Err(ModelError::Closed(_))
        ));
    }
}
