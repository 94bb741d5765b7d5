use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::threshold::NotificationThreshold;
use crate::ids::{CategoryId, InstanceId, ModelId};
use crate::model::{InstanceContextModel, MasterContextModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Registration {
    pub model_id: ModelId,
    pub thresholds: BTreeMap<CategoryId, NotificationThreshold>,
    /// Notifications are withheld until the initial context was posted.
    pub ready: bool,
}

impl Registration {
    /// Declared threshold, or any-change with no reliability floor.
    pub fn threshold_for(&self, category: &CategoryId) -> NotificationThreshold {
        self.thresholds
            .get(category)
            .cloned()
            .unwrap_or_else(|| NotificationThreshold::any_change(category.clone()))
    }
}

/// Store of all master and instance context models. Closed instance models
/// are kept for inspection.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContextCloud {
    pub masters: BTreeMap<ModelId, MasterContextModel>,
    pub instances: BTreeMap<ModelId, InstanceContextModel>,
    pub registrations: BTreeMap<InstanceId, Registration>,
}

impl ContextCloud {
    pub fn live_model(&self, id: &ModelId) -> Option<&InstanceContextModel> {
        self.instances.get(id).filter(|m| !m.is_closed())
    }

    pub fn live_models(&self) -> impl Iterator<Item = &InstanceContextModel> {
        self.instances.values().filter(|m| !m.is_closed())
    }

    pub fn model_of(&self, instance: &InstanceId) -> Option<&ModelId> {
        self.registrations.get(instance).map(|r| &r.model_id)
    }

    /// Registrations bound to `model`, in instance order.
    pub fn listeners<'a>(
        &'a self,
        model: &'a ModelId,
    ) -> impl Iterator<Item = (&'a InstanceId, &'a Registration)> + 'a {
        self.registrations
            .iter()
            .filter(move |(_, r)| &r.model_id == model)
    }

    /// Cross-reference violations; empty when consistent.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, r) in &self.registrations {
            if self.live_model(&r.model_id).is_none() {
                out.push(format!(
                    "registration {i} references missing or closed model {}",
                    r.model_id
                ));
            }
        }
        for m in self.instances.values() {
            if !self.masters.contains_key(&m.master_id) {
                out.push(format!(
                    "model {} references unknown master {}",
                    m.model_id, m.master_id
                ));
            }
        }
        out
    }
}
