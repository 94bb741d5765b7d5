use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::agent::DerivationAgent;
use super::relation::CauseEffectRelation;
use crate::ids::CategoryId;
use crate::model::{ContextCategory, ContextIntersection, Extension};

/// A category definition together with where it sits in any context model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    #[serde(flatten)]
    pub category: ContextCategory,
    /// 1-based level.
    pub level: usize,
    #[serde(default)]
    pub parents: Vec<CategoryId>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryCatalog {
    entries: BTreeMap<CategoryId, CatalogEntry>,
}

impl CategoryCatalog {
    pub fn new(entries: impl IntoIterator<Item = CatalogEntry>) -> Self {
        Self {
            entries: entries
                .into_iter()
                .map(|e| (e.category.category_id.clone(), e))
                .collect(),
        }
    }

    pub fn get(&self, id: &str) -> Option<&CatalogEntry> {
        self.entries.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &CatalogEntry> {
        self.entries.values()
    }

    /// Parent-level and reference problems, one message each.
    pub fn check(&self) -> Vec<String> {
        let mut out = Vec::new();
        for e in self.entries.values() {
            let id = &e.category.category_id;
            if e.level == 0 {
                out.push(format!("category {id}: levels start at 1"));
            }
            for p in &e.parents {
                match self.entries.get(p) {
                    None => out.push(format!("category {id}: unknown parent {p}")),
                    Some(pe) if pe.level >= e.level => out.push(format!(
                        "category {id}: parent {p} at level {} is not above level {}",
                        pe.level, e.level
                    )),
                    Some(_) => {}
                }
            }
        }
        out
    }

    /// Extension adding `missing` plus any catalog ancestors absent from
    /// `model`. Categories unknown to the catalog are skipped and returned.
    pub fn extension_for(
        &self,
        model: &ContextIntersection,
        missing: &BTreeSet<CategoryId>,
    ) -> (Extension, BTreeSet<CategoryId>) {
        let mut add: BTreeSet<CategoryId> = BTreeSet::new();
        let mut unknown = BTreeSet::new();
        let mut queue: VecDeque<CategoryId> = missing.iter().cloned().collect();
        while let Some(c) = queue.pop_front() {
            if model.contains(c.as_str()) || add.contains(&c) {
                continue;
            }
            match self.entries.get(&c) {
                Some(e) => {
                    add.insert(c);
                    queue.extend(e.parents.iter().cloned());
                }
                None => {
                    unknown.insert(c);
                }
            }
        }
        let mut ext = Extension::default();
        for c in &add {
            let e = &self.entries[c];
            ext.categories.push((e.category.clone(), e.level));
            ext.edges
                .extend(e.parents.iter().map(|p| (p.clone(), c.clone())));
        }
        (ext, unknown)
    }

    /// Builds a standalone intersection over `ids` (and their catalog parents
    /// that are also in `ids`).
    pub fn intersection_of(&self, ids: &BTreeSet<CategoryId>) -> ContextIntersection {
        let (ext, _) = self.extension_for(&ContextIntersection::new(), ids);
        let mut levels: Vec<BTreeSet<CategoryId>> = Vec::new();
        let mut categories = BTreeMap::new();
        for (c, l) in &ext.categories {
            if !ids.contains(&c.category_id) {
                continue;
            }
            if levels.len() < *l {
                levels.resize(*l, BTreeSet::new());
            }
            levels[l - 1].insert(c.category_id.clone());
            categories.insert(c.category_id.clone(), c.clone());
        }
        let edges = ext
            .edges
            .into_iter()
            .filter(|(a, b)| ids.contains(a) && ids.contains(b))
            .collect();
        ContextIntersection::from_parts(levels, edges, categories)
    }
}

/// Checks that the category graph induced by relations and agents is acyclic
/// and that every derived category has a single producer. Returns a
/// topological order of all involved categories.
pub fn derivation_order(
    relations: &[CauseEffectRelation],
    agents: &[DerivationAgent],
) -> Result<Vec<CategoryId>, String> {
    let mut edges: BTreeMap<CategoryId, BTreeSet<CategoryId>> = BTreeMap::new();
    let mut producers: BTreeMap<CategoryId, Vec<String>> = BTreeMap::new();
    let mut nodes: BTreeSet<CategoryId> = BTreeSet::new();
    for r in relations {
        if r.cause_category == r.effect_category {
            return Err(format!(
                "relation {} maps {} onto itself",
                r.relation_id, r.cause_category
            ));
        }
        edges
            .entry(r.cause_category.clone())
            .or_default()
            .insert(r.effect_category.clone());
        producers
            .entry(r.effect_category.clone())
            .or_default()
            .push(format!("relation {}", r.relation_id));
        nodes.extend([r.cause_category.clone(), r.effect_category.clone()]);
    }
    for a in agents {
        for o in a.outputs() {
            producers
                .entry(o.clone())
                .or_default()
                .push(format!("agent {}", a.agent_id));
            nodes.insert(o.clone());
            for i in a.inputs() {
                edges.entry(i.clone()).or_default().insert(o.clone());
                nodes.insert(i.clone());
            }
        }
    }
    if let Some((c, ps)) = producers.iter().find(|(_, ps)| ps.len() > 1) {
        return Err(format!(
            "category {c} has several producers: {}",
            ps.join(", ")
        ));
    }
    let mut indeg: BTreeMap<&CategoryId, usize> = nodes.iter().map(|n| (n, 0)).collect();
    for targets in edges.values() {
        for t in targets {
            *indeg.get_mut(t).expect("node registered") += 1;
        }
    }
    let mut ready: VecDeque<&CategoryId> = indeg
        .iter()
        .filter(|(_, d)| **d == 0)
        .map(|(n, _)| *n)
        .collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(n) = ready.pop_front() {
        order.push(n.clone());
        for t in edges.get(n).into_iter().flatten() {
            let d = indeg.get_mut(t).expect("node registered");
            *d -= 1;
            if *d == 0 {
                ready.push_back(t);
            }
        }
    }
    if order.len() != nodes.len() {
        let stuck: Vec<String> = indeg
            .iter()
            .filter(|(_, d)| **d > 0)
            .map(|(n, _)| n.to_string())
            .collect();
        return Err(format!(
            "derivation graph has a cycle through {}",
            stuck.join(", ")
        ));
    }
    Ok(order)
}
