use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::Serialize;

use super::{Program, ProgramError};
use crate::graph::{EntityIdx, KnowledgeGraph};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IgpAnswer {
    pub index: usize,
    pub scores: Vec<f64>,
    /// No option received any mass; `index` falls back to 0.
    pub empty: bool,
}

fn propagate(
    kg: &KnowledgeGraph,
    start: &[(EntityIdx, f64)],
    program: &Program,
) -> BTreeMap<EntityIdx, f64> {
    let mut mass: BTreeMap<EntityIdx, f64> = BTreeMap::new();
    for &(e, s) in start {
        *mass.entry(e).or_default() += s;
    }
    for &rel in &program.relations {
        let mut next: BTreeMap<EntityIdx, f64> = BTreeMap::new();
        for (&h, &m) in &mass {
            for t in kg.tails(h, rel) {
                *next.entry(t).or_default() += m;
            }
        }
        mass = next;
    }
    mass
}

/// Graph-propagation baseline: pushes grounding scores along the program's
/// edges, summing whatever arrives at each entity, and picks the option
/// with the most mass. Several programs combine by elementwise max.
pub fn igp_answer(
    grounding: &[(EntityIdx, f64)],
    programs: &[Program],
    kg: &KnowledgeGraph,
    options: &[EntityIdx],
) -> Result<IgpAnswer, ProgramError> {
    let mut scores = alloc::vec![0.0f64; options.len()];
    for p in programs {
        KnowledgeGraph::check_path(&p.relations)?;
        let mass = propagate(kg, grounding, p);
        for (s, o) in scores.iter_mut().zip(options) {
            *s = s.max(mass.get(o).copied().unwrap_or(0.0));
        }
    }
    let mut index = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[index] {
            index = i;
        }
    }
    let empty = scores.iter().all(|&s| s == 0.0);
    Ok(IgpAnswer {
        index,
        scores,
        empty,
    })
}
