use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::ProcessError;
use crate::ids::{GateId, ModelId, ProcessModelId, RuleId, Tick, VariantId};
use crate::rules::GateRules;

/// A block-structured process model. Gates branch into one node sequence
/// per variant; control rejoins after the gate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessModel {
    pub process_model_id: ProcessModelId,
    /// Master context model instances of this process are bound to.
    pub master_id: ModelId,
    pub nodes: Vec<Node>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    Start,
    Task {
        task_id: String,
        duration: Tick,
    },
    Gate {
        gate_id: GateId,
        default_variant: VariantId,
        #[serde(default)]
        rules: Vec<RuleId>,
        variants: BTreeMap<VariantId, Vec<Node>>,
    },
    /// Inlined body of another process model (without its start and end).
    Subprocess {
        process_model: ProcessModelId,
    },
    End,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Instr {
    Task {
        task_id: String,
        duration: Tick,
    },
    Gate {
        gate_id: GateId,
        branches: BTreeMap<VariantId, usize>,
    },
    Jump {
        to: usize,
    },
    End,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Program {
    pub process_model_id: ProcessModelId,
    pub master_id: ModelId,
    pub instrs: Vec<Instr>,
    pub gates: BTreeMap<GateId, GateRules>,
}

impl Program {
    pub fn task_ids(&self) -> impl Iterator<Item = &str> {
        self.instrs.iter().filter_map(|i| match i {
            Instr::Task { task_id, .. } => Some(task_id.as_str()),
            _ => None,
        })
    }

    /// Sum of task durations along the branch chosen by `pick` at each gate.
    pub fn duration_along(&self, pick: impl Fn(&GateId) -> VariantId) -> Option<Tick> {
        let (mut pc, mut total, mut steps) = (0, 0, 0);
        loop {
            steps += 1;
            if steps > self.instrs.len() * 2 {
                return None;
            }
            match self.instrs.get(pc)? {
                Instr::Task { duration, .. } => {
                    total += duration;
                    pc += 1;
                }
                Instr::Gate { gate_id, branches } => pc = *branches.get(&pick(gate_id))?,
                Instr::Jump { to } => pc = *to,
                Instr::End => return Some(total),
            }
        }
    }
}

struct Compiler<'a> {
    models: &'a BTreeMap<ProcessModelId, ProcessModel>,
    instrs: Vec<Instr>,
    gates: BTreeMap<GateId, GateRules>,
    tasks: BTreeSet<String>,
    stack: Vec<ProcessModelId>,
}

impl Compiler<'_> {
    fn body(&mut self, nodes: &[Node], at: &str) -> Result<(), ProcessError> {
        for node in nodes {
            match node {
                Node::Start | Node::End => {
                    return Err(ProcessError::InvalidModel(format!(
                        "{at}: start and end may only open and close the model"
                    )))
                }
                Node::Task { task_id, duration } => {
                    if !self.tasks.insert(task_id.clone()) {
                        return Err(ProcessError::InvalidModel(format!(
                            "{at}: duplicate task {task_id}"
                        )));
                    }
                    self.instrs.push(Instr::Task {
                        task_id: task_id.clone(),
                        duration: *duration,
                    });
                }
                Node::Gate {
                    gate_id,
                    default_variant,
                    rules,
                    variants,
                } => {
                    if self.gates.contains_key(gate_id) {
                        return Err(ProcessError::InvalidModel(format!(
                            "{at}: duplicate gate {gate_id}"
                        )));
                    }
                    if !variants.contains_key(default_variant) {
                        return Err(ProcessError::InvalidModel(format!(
                            "{at}: gate {gate_id} default variant {default_variant} has no branch"
                        )));
                    }
                    self.gates.insert(
                        gate_id.clone(),
                        GateRules {
                            default_variant: default_variant.clone(),
                            variants: variants.keys().cloned().collect(),
                            rules: rules.clone(),
                        },
                    );
                    let gate_pc = self.instrs.len();
                    self.instrs.push(Instr::Gate {
                        gate_id: gate_id.clone(),
                        branches: BTreeMap::new(),
                    });
                    let mut branches = BTreeMap::new();
                    let mut exits = Vec::new();
                    for (variant, branch) in variants {
                        branches.insert(variant.clone(), self.instrs.len());
                        self.body(branch, &format!("{at}/{gate_id}.{variant}"))?;
                        exits.push(self.instrs.len());
                        self.instrs.push(Instr::Jump { to: usize::MAX });
                    }
                    let after = self.instrs.len();
                    for e in exits {
                        self.instrs[e] = Instr::Jump { to: after };
                    }
                    self.instrs[gate_pc] = Instr::Gate {
                        gate_id: gate_id.clone(),
                        branches,
                    };
                }
                Node::Subprocess { process_model } => {
                    if self.stack.contains(process_model) {
                        return Err(ProcessError::InvalidModel(format!(
                            "{at}: subprocess cycle through {process_model}"
                        )));
                    }
                    let sub = self.models.get(process_model).ok_or_else(|| {
                        ProcessError::InvalidModel(format!(
                            "{at}: unknown subprocess {process_model}"
                        ))
                    })?;
                    let inner = framed(sub)?;
                    self.stack.push(process_model.clone());
                    self.body(inner, process_model.as_str())?;
                    self.stack.pop();
                }
            }
        }
        Ok(())
    }
}

/// The model's nodes between its leading start and trailing end.
fn framed(model: &ProcessModel) -> Result<&[Node], ProcessError> {
    match model.nodes.as_slice() {
        [Node::Start, inner @ .., Node::End] => Ok(inner),
        _ => Err(ProcessError::InvalidModel(format!(
            "{}: must begin with start and finish with end",
            model.process_model_id
        ))),
    }
}

/// Compiles a model (inlining subprocesses) into a flat program.
pub fn compile(
    models: &BTreeMap<ProcessModelId, ProcessModel>,
    id: &str,
) -> Result<Program, ProcessError> {
    let model = models
        .get(id)
        .ok_or_else(|| ProcessError::UnknownProcessModel(id.into()))?;
    let mut c = Compiler {
        models,
        instrs: Vec::new(),
        gates: BTreeMap::new(),
        tasks: BTreeSet::new(),
        stack: vec![model.process_model_id.clone()],
    };
    c.body(framed(model)?, id)?;
    c.instrs.push(Instr::End);
    Ok(Program {
        process_model_id: model.process_model_id.clone(),
        master_id: model.master_id.clone(),
        instrs: c.instrs,
        gates: c.gates,
    })
}
