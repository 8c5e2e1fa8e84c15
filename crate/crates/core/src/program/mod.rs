//! Relation programs: compilation from templates, exhaustive enumeration,
//! neural execution with per-hop traces, option scoring, and the symbolic
//! graph-propagation baseline.

mod eval;
mod exec;
mod igp;

pub use eval::{evaluate, evaluate_igp, evaluate_kml, EvalReport, Method, TemplateScore};
pub use exec::{
    aggregate, answer, execute, ground, ground_ids, resolve_options, run, Aggregation,
    ExecutionTrace, HopTrace, OptionScores, RankedEntity,
};
pub use igp::{igp_answer, IgpAnswer};

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{KgError, KnowledgeGraph};
use crate::nn::NnError;
use crate::qa::{QaInstance, TemplateId};
use crate::schema::{EntityType, RelationId};

#[derive(Clone, Debug, PartialEq, Error)]
pub enum ProgramError {
    #[error("unknown template {0}")]
    UnknownTemplate(String),
    #[error("template {template} cannot start from {grounded}")]
    UngroundableTemplate {
        template: TemplateId,
        grounded: EntityType,
    },
    #[error("unknown relation {0}")]
    UnknownRelation(String),
    #[error("incompatible path: {0}")]
    IncompatiblePath(String),
    #[error("no module for relation {0}")]
    MissingModule(RelationId),
    #[error("unknown grounding category {0}")]
    UnknownCategory(String),
    #[error("grounding scores must be non-negative with a positive sum")]
    BadGrounding,
    #[error("no embedding for option {0}")]
    MissingOptionEmbedding(String),
    #[error("options mix graph entities and sidecar text embeddings")]
    MixedOptionSources,
    #[error("expected {expected} options, got {got}")]
    OptionCount { expected: usize, got: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl From<KgError> for ProgramError {
    fn from(e: KgError) -> Self {
        match e {
            KgError::IncompatiblePath(m) => ProgramError::IncompatiblePath(m),
            KgError::UnknownRelation(r) => ProgramError::UnknownRelation(r),
            KgError::UnknownEntity(e) => ProgramError::UnknownCategory(e),
            other => ProgramError::IncompatiblePath(other.to_string()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProgramSource {
    Template,
    Enumerated,
    Imported,
}

/// An ordered list of relation-module invocations.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Program {
    pub relations: Vec<RelationId>,
    pub source: ProgramSource,
}

impl Program {
    pub fn new(relations: Vec<RelationId>, source: ProgramSource) -> Result<Self, ProgramError> {
        KnowledgeGraph::check_path(&relations)?;
        Ok(Program { relations, source })
    }

    /// Parses `HAS_NEXT_STEP,HAS_TOOL`.
    pub fn parse(s: &str, source: ProgramSource) -> Result<Self, ProgramError> {
        let relations = s
            .split(',')
            .map(|n| {
                RelationId::parse(n).ok_or_else(|| ProgramError::UnknownRelation(n.trim().into()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Program::new(relations, source)
    }

    pub fn len(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }

    pub fn start_type(&self) -> EntityType {
        self.relations[0].info().head
    }

    pub fn answer_type(&self) -> EntityType {
        self.relations[self.relations.len() - 1].info().tail
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, r) in self.relations.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            f.write_str(r.name())?;
        }
        Ok(())
    }
}

/// Canonical programs of a template, starting at the grounded type `e_g`.
/// Step-level templates grounded on a task get a leading `HAS_STEP`.
pub fn compile_template(tid: TemplateId, e_g: EntityType) -> Result<Vec<Program>, ProgramError> {
    let spec = tid.spec();
    let prefix: &[RelationId] = match (spec.grounded, e_g) {
        (a, b) if a == b => &[],
        (EntityType::Step, EntityType::Task) => &[RelationId::HAS_STEP],
        _ => {
            return Err(ProgramError::UngroundableTemplate {
                template: tid,
                grounded: e_g,
            })
        }
    };
    spec.programs
        .iter()
        .map(|p| {
            let mut rels = prefix.to_vec();
            rels.extend_from_slice(p);
            Program::new(rels, ProgramSource::Template)
        })
        .collect()
}

/// [`compile_template`] keyed by a template name such as `Q6`.
pub fn compile_programs(template: &str, e_g: EntityType) -> Result<Vec<Program>, ProgramError> {
    let tid = TemplateId::parse(template)
        .ok_or_else(|| ProgramError::UnknownTemplate(template.into()))?;
    compile_template(tid, e_g)
}

/// Every schema-chainable relation sequence from `from` to `to` with at most
/// `max_hops` relations, shortest first.
pub fn enumerate_programs(from: EntityType, to: EntityType, max_hops: usize) -> Vec<Program> {
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<RelationId>> = vec![Vec::new()];
    for _ in 0..max_hops {
        let mut next = Vec::new();
        for path in &frontier {
            let at = path.last().map_or(from, |r| r.info().tail);
            for r in RelationId::all().filter(|r| r.info().head == at) {
                let mut p = path.clone();
                p.push(r);
                if r.info().tail == to {
                    out.push(Program {
                        relations: p.clone(),
                        source: ProgramSource::Enumerated,
                    });
                }
                next.push(p);
            }
        }
        frontier = next;
    }
    out
}

/// Parses externally generated programs (lists of relation names).
pub fn import_programs(lists: &[Vec<String>]) -> Result<Vec<Program>, ProgramError> {
    lists
        .iter()
        .map(|names| {
            let rels = names
                .iter()
                .map(|n| {
                    RelationId::parse(n).ok_or_else(|| ProgramError::UnknownRelation(n.clone()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            Program::new(rels, ProgramSource::Imported)
        })
        .collect()
}

/// Where the programs for a question come from.
#[derive(Clone, Debug, PartialEq)]
pub enum ProgramSet {
    Templates,
    /// All chainable programs up to the given length.
    Enumerated {
        max_hops: usize,
    },
    Imported(BTreeMap<TemplateId, Vec<Program>>),
}

impl ProgramSet {
    pub fn programs_for(&self, inst: &QaInstance) -> Result<Vec<Program>, ProgramError> {
        let e_g = inst.grounding.etype;
        match self {
            ProgramSet::Templates => compile_template(inst.tid, e_g),
            ProgramSet::Enumerated { max_hops } => {
                Ok(enumerate_programs(e_g, inst.tid.spec().answer, *max_hops))
            }
            ProgramSet::Imported(map) => Ok(map
                .get(&inst.tid)
                .map(|ps| {
                    ps.iter()
                        .filter(|p| p.start_type() == e_g)
                        .cloned()
                        .collect()
                })
                .unwrap_or_default()),
        }
    }
}

impl crate::train::ProgramProvider for ProgramSet {
    fn programs(&self, inst: &QaInstance) -> Vec<Program> {
        self.programs_for(inst).unwrap_or_default()
    }
}
