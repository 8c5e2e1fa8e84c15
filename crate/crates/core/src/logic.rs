//! Soft logical operators in entity-score space and their precision@k
//! evaluation against symbolic set operations on the graph.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use num_traits::Float;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{EntityIdx, KnowledgeGraph};
use crate::nn::NnError;
use crate::real::Real;
use crate::rng::derived;
use crate::schema::RelationId;
use crate::train::{EmbeddingTable, KnowledgeModules};

#[derive(Clone, Debug, PartialEq, Error)]
pub enum LogicError {
    #[error("score vectors differ in length: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("no module for relation {0}")]
    MissingModule(RelationId),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operator {
    And,
    Or,
    Not,
}

impl Operator {
    pub const ALL: [Operator; 3] = [Operator::Not, Operator::And, Operator::Or];

    pub fn name(self) -> &'static str {
        match self {
            Operator::And => "and",
            Operator::Or => "or",
            Operator::Not => "not",
        }
    }

    pub fn parse(s: &str) -> Option<Operator> {
        Operator::ALL
            .into_iter()
            .find(|o| o.name().eq_ignore_ascii_case(s.trim()))
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which entities a score vector ranges over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Only entities whose type the relation admits as a tail.
    #[default]
    TailType,
    All,
}

impl Scope {
    pub fn entities(self, kg: &KnowledgeGraph, rel: RelationId) -> Vec<EntityIdx> {
        match self {
            Scope::All => (0..kg.len() as u32).map(EntityIdx).collect(),
            Scope::TailType => {
                let mut out: Vec<EntityIdx> = rel
                    .info()
                    .tail_types()
                    .flat_map(|t| kg.entities_of(t))
                    .collect();
                out.sort();
                out
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntityScoreVector {
    pub entities: Vec<EntityIdx>,
    pub scores: Vec<f64>,
    pub operator: Option<Operator>,
}

impl EntityScoreVector {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Entities by descending score; equal scores keep ascending id order.
    pub fn ranking(&self, kg: &KnowledgeGraph) -> Vec<EntityIdx> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            self.scores[b]
                .total_cmp(&self.scores[a])
                .then_with(|| kg.id(self.entities[a]).cmp(kg.id(self.entities[b])))
        });
        order.into_iter().map(|i| self.entities[i]).collect()
    }

    pub fn top_k(&self, kg: &KnowledgeGraph, k: usize) -> Vec<EntityIdx> {
        let mut r = self.ranking(kg);
        r.truncate(k);
        r
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `σ(E·z)` over the given entities.
pub fn membership<T: Real>(
    z: &[T],
    embeddings: &EmbeddingTable<T>,
    entities: &[EntityIdx],
) -> Result<EntityScoreVector, LogicError> {
    if z.len() != embeddings.dim() {
        return Err(LogicError::DimensionMismatch {
            left: z.len(),
            right: embeddings.dim(),
        });
    }
    let scores = entities
        .iter()
        .map(|&e| sigmoid(crate::nn::dot(z, embeddings.unit(e)).f64()))
        .collect();
    Ok(EntityScoreVector {
        entities: entities.to_vec(),
        scores,
        operator: None,
    })
}

fn combine(
    a: &EntityScoreVector,
    b: &EntityScoreVector,
    op: Operator,
    f: impl Fn(f64, f64) -> f64,
) -> Result<EntityScoreVector, LogicError> {
    if a.entities != b.entities {
        return Err(LogicError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let scores = a
        .scores
        .iter()
        .zip(&b.scores)
        .map(|(&x, &y)| f(x, y))
        .collect();
    Ok(EntityScoreVector {
        entities: a.entities.clone(),
        scores,
        operator: Some(op),
    })
}

/// Soft intersection: elementwise product of the two membership vectors.
pub fn score_and<T: Real>(
    z_i: &[T],
    z_j: &[T],
    embeddings: &EmbeddingTable<T>,
    entities: &[EntityIdx],
) -> Result<EntityScoreVector, LogicError> {
    if z_i.len() != z_j.len() {
        return Err(LogicError::DimensionMismatch {
            left: z_i.len(),
            right: z_j.len(),
        });
    }
    let a = membership(z_i, embeddings, entities)?;
    let b = membership(z_j, embeddings, entities)?;
    combine(&a, &b, Operator::And, |x, y| x * y)
}

/// Soft union: elementwise sum, in `[0, 2]`.
pub fn score_or<T: Real>(
    z_i: &[T],
    z_j: &[T],
    embeddings: &EmbeddingTable<T>,
    entities: &[EntityIdx],
) -> Result<EntityScoreVector, LogicError> {
    if z_i.len() != z_j.len() {
        return Err(LogicError::DimensionMismatch {
            left: z_i.len(),
            right: z_j.len(),
        });
    }
    let a = membership(z_i, embeddings, entities)?;
    let b = membership(z_j, embeddings, entities)?;
    combine(&a, &b, Operator::Or, |x, y| x + y)
}

pub fn score_not<T: Real>(
    z: &[T],
    embeddings: &EmbeddingTable<T>,
    entities: &[EntityIdx],
) -> Result<EntityScoreVector, LogicError> {
    let mut v = membership(z, embeddings, entities)?;
    v.scores.iter_mut().for_each(|s| *s = 1.0 - *s);
    v.operator = Some(Operator::Not);
    Ok(v)
}

/// `|top-k ∩ oracle| / min(k, |oracle|)` as a percentage, or `None` for an
/// empty oracle set.
pub fn precision_at_k(
    v: &EntityScoreVector,
    oracle: &BTreeSet<EntityIdx>,
    kg: &KnowledgeGraph,
    k: usize,
) -> Option<f64> {
    if oracle.is_empty() || k == 0 {
        return None;
    }
    let hits = v.top_k(kg, k).iter().filter(|e| oracle.contains(e)).count();
    Some(100.0 * hits as f64 / k.min(oracle.len()) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogicConfig {
    pub k: usize,
    pub scope: Scope,
    /// Cap on head pairs per relation for AND/OR; larger sets are subsampled.
    pub max_pairs: usize,
    pub seed: u64,
}

impl Default for LogicConfig {
    fn default() -> Self {
        LogicConfig {
            k: 10,
            scope: Scope::TailType,
            max_pairs: 2000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogicCell {
    pub relation: RelationId,
    pub operator: Operator,
    /// Mean precision@k in percent; `None` when no pair could be scored.
    pub precision: Option<f64>,
    pub evaluated: usize,
    pub skipped_empty_oracle: usize,
}

impl LogicCell {
    /// `--` for relations without evaluable pairs.
    pub fn display_value(&self) -> String {
        match self.precision {
            Some(p) => alloc::format!("{p:.1}"),
            None => String::from("--"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogicReport {
    pub k: usize,
    pub scope: Scope,
    pub denominator: String,
    pub cells: Vec<LogicCell>,
}

impl LogicReport {
    pub fn cell(&self, rel: RelationId, op: Operator) -> Option<&LogicCell> {
        self.cells
            .iter()
            .find(|c| c.relation == rel && c.operator == op)
    }
}

fn head_pairs(
    heads: &[EntityIdx],
    max: usize,
    seed: u64,
    rel: RelationId,
) -> Vec<(EntityIdx, EntityIdx)> {
    let mut pairs: Vec<_> = heads
        .iter()
        .enumerate()
        .flat_map(|(i, &a)| heads[i + 1..].iter().map(move |&b| (a, b)))
        .collect();
    if pairs.len() > max {
        pairs.shuffle(&mut derived(seed, rel.name()));
        pairs.truncate(max);
        pairs.sort();
    }
    pairs
}

/// Scores every forward relation of `modules` under each operator against
/// the symbolic oracle: tail-set intersection (AND) and union (OR) for head
/// pairs, and the in-scope complement (NOT) for single heads.
pub fn evaluate_logic<T: Real>(
    modules: &KnowledgeModules<T>,
    embeddings: &EmbeddingTable<T>,
    kg: &KnowledgeGraph,
    ops: &[Operator],
    config: &LogicConfig,
) -> Result<LogicReport, LogicError> {
    let mut cells = Vec::new();
    for rel in RelationId::forward_relations() {
        let module = modules.get(rel).ok_or(LogicError::MissingModule(rel))?;
        let scope = config.scope.entities(kg, rel);
        let heads: Vec<EntityIdx> = kg.heads(rel).collect();
        let mut outputs = alloc::collections::BTreeMap::new();
        for &h in &heads {
            outputs.insert(h, module.forward(embeddings.unit(h))?.z_hat);
        }
        let scope_set: BTreeSet<EntityIdx> = scope.iter().copied().collect();
        for &op in ops {
            let mut sum = 0.0;
            let mut evaluated = 0;
            let mut skipped = 0;
            let mut record = |p: Option<f64>| match p {
                Some(p) => {
                    sum += p;
                    evaluated += 1;
                }
                None => skipped += 1,
            };
            match op {
                Operator::Not => {
                    for &h in &heads {
                        let v = score_not(&outputs[&h], embeddings, &scope)?;
                        let oracle: BTreeSet<_> = scope_set
                            .difference(&kg.tail_set(h, rel))
                            .copied()
                            .collect();
                        record(precision_at_k(&v, &oracle, kg, config.k));
                    }
                }
                Operator::And | Operator::Or => {
                    for (a, b) in head_pairs(&heads, config.max_pairs, config.seed, rel) {
                        let (ta, tb) = (kg.tail_set(a, rel), kg.tail_set(b, rel));
                        let (v, oracle): (_, BTreeSet<_>) = if op == Operator::And {
                            (
                                score_and(&outputs[&a], &outputs[&b], embeddings, &scope)?,
                                ta.intersection(&tb).copied().collect(),
                            )
                        } else {
                            (
                                score_or(&outputs[&a], &outputs[&b], embeddings, &scope)?,
                                ta.union(&tb).copied().collect(),
                            )
                        };
                        let oracle = oracle.intersection(&scope_set).copied().collect();
                        record(precision_at_k(&v, &oracle, kg, config.k));
                    }
                }
            }
            cells.push(LogicCell {
                relation: rel,
                operator: op,
                precision: (evaluated > 0).then(|| sum / evaluated as f64),
                evaluated,
                skipped_empty_oracle: skipped,
            });
        }
    }
    Ok(LogicReport {
        k: config.k,
        scope: config.scope,
        denominator: String::from("min(k, |oracle|)"),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixture::toy;
    use crate::train::{train, EmbeddingMode, TrainConfig};
    use alloc::vec;

    fn basis(n: usize) -> EmbeddingTable<f64> {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut r = vec![0.0; n];
                r[i] = 1.0;
                r
            })
            .collect();
        EmbeddingTable::from_rows(&rows, EmbeddingMode::Frozen).unwrap()
    }

    #[test]
    fn algebraic_identities() {
        let emb = basis(4);
        let all: Vec<EntityIdx> = (0..4u32).map(EntityIdx).collect();
        let z = [0.6, -0.8, 0.0, 0.0];
        let s = membership(&z, &emb, &all).unwrap();
        let and = score_and(&z, &z, &emb, &all).unwrap();
        let or = score_or(&z, &z, &emb, &all).unwrap();
        for i in 0..4 {
            assert!((and.scores[i] - s.scores[i] * s.scores[i]).abs() < 1e-15);
            assert!((or.scores[i] - 2.0 * s.scores[i]).abs() < 1e-15);
        }
        let flat = score_and(&[0.0; 4], &[0.0; 4], &emb, &all).unwrap();
        assert!(flat.scores.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let not = score_not(&[0.0; 4], &emb, &all).unwrap();
        assert!(not.scores.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        assert_eq!(
            score_and(&z, &[1.0, 0.0], &emb, &all).unwrap_err(),
            LogicError::DimensionMismatch { left: 4, right: 2 }
        );
    }

    #[test]
    fn precision_edges() {
        let kg = toy();
        let ents: Vec<EntityIdx> = kg.entities_of(crate::schema::EntityType::Tool);
        let v = EntityScoreVector {
            entities: ents.clone(),
            scores: vec![0.9, 0.1, 0.5],
            operator: None,
        };
        let top: BTreeSet<_> = [ents[0], ents[2]].into();
        assert_eq!(precision_at_k(&v, &top, &kg, 2), Some(100.0));
        assert_eq!(precision_at_k(&v, &[ents[1]].into(), &kg, 1), Some(0.0));
        assert_eq!(precision_at_k(&v, &BTreeSet::new(), &kg, 10), None);
        // Ties fall back to id order: cup < grinder < kettle.
        let tied = EntityScoreVector {
            entities: ents,
            scores: vec![0.5; 3],
            operator: None,
        };
        let ids: Vec<&str> = tied.ranking(&kg).iter().map(|&e| kg.id(e)).collect();
        assert_eq!(ids, ["cup", "grinder", "kettle"]);
    }

    fn converged() -> (KnowledgeGraph, crate::train::Trained<f64>) {
        let kg = toy();
        let cfg = TrainConfig {
            dim: 64,
            hidden: 32,
            epochs: 200,
            seed: 3,
            ..TrainConfig::default()
        };
        let t = train::<f64>(&kg, &cfg, None).unwrap();
        (kg, t)
    }

    #[test]
    fn fixture_operators_follow_the_oracle() {
        let (kg, t) = converged();
        let m = t.modules.get(RelationId::HAS_TOOL).unwrap();
        let tools = Scope::TailType.entities(&kg, RelationId::HAS_TOOL);
        let out = |s: &str| {
            m.forward(t.embeddings.unit(kg.idx(s).unwrap()))
                .unwrap()
                .z_hat
        };
        let and = score_and(
            &out("boil_water"),
            &out("pour_water"),
            &t.embeddings,
            &tools,
        )
        .unwrap();
        assert_eq!(kg.id(and.ranking(&kg)[0]), "kettle");
        let or = score_or(
            &out("boil_water"),
            &out("grind_beans"),
            &t.embeddings,
            &tools,
        )
        .unwrap();
        let top2: BTreeSet<&str> = or.top_k(&kg, 2).iter().map(|&e| kg.id(e)).collect();
        assert_eq!(top2, ["kettle", "grinder"].into());
        let not = score_not(&out("pour_water"), &t.embeddings, &tools).unwrap();
        assert_eq!(kg.id(not.ranking(&kg)[0]), "grinder");
        let plain = membership(&out("pour_water"), &t.embeddings, &tools).unwrap();
        let mut rev = plain.ranking(&kg);
        rev.reverse();
        assert_eq!(not.ranking(&kg), rev);
    }

    #[test]
    fn fixture_report_has_skip_markers_and_high_not() {
        let (kg, t) = converged();
        let report = evaluate_logic(
            &t.modules,
            &t.embeddings,
            &kg,
            &Operator::ALL,
            &LogicConfig::default(),
        )
        .unwrap();
        let task_and = report.cell(RelationId::HAS_TASK, Operator::And).unwrap();
        assert_eq!(task_and.display_value(), "--");
        for c in report.cells.iter().filter(|c| c.operator == Operator::Not) {
            if let Some(p) = c.precision {
                assert!(p >= 95.0, "{c:?}");
            }
        }
        for c in report
            .cells
            .iter()
            .filter(|c| c.operator == Operator::And && c.evaluated >= 3)
        {
            assert!(c.precision.unwrap() >= 80.0, "{c:?}");
        }
    }
}
