use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::{Program, ProgramError};
use crate::graph::{EntityIdx, KnowledgeGraph};
use crate::nn::{cosine, dot, normalize};
use crate::qa::Grounding;
use crate::real::Real;
use crate::train::{EmbeddingTable, KnowledgeModules};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankedEntity {
    pub id: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HopTrace {
    pub relation: crate::schema::RelationId,
    pub output: Vec<f64>,
    /// Entities of the hop's tail type ranked by softmax-normalized cosine.
    pub top: Vec<RankedEntity>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExecutionTrace {
    pub program: String,
    pub hops: Vec<HopTrace>,
}

/// `z_i = Σ_k S_k h(e_k)`, normalized.
pub fn ground<T: Real>(
    scores: &[f64],
    categories: &[EntityIdx],
    embeddings: &EmbeddingTable<T>,
) -> Result<Vec<T>, ProgramError> {
    if scores.is_empty() || scores.len() != categories.len() || scores.iter().any(|s| !(*s >= 0.0))
    {
        return Err(ProgramError::BadGrounding);
    }
    let mut z = alloc::vec![T::zero(); embeddings.dim()];
    for (&s, &c) in scores.iter().zip(categories) {
        if c.index() >= embeddings.len() {
            return Err(ProgramError::UnknownCategory(alloc::format!("#{}", c.0)));
        }
        crate::nn::axpy(T::of(s), embeddings.unit(c), &mut z);
    }
    normalize(&z, 1e-12).ok_or(ProgramError::BadGrounding)
}

/// [`ground`] for a question's grounding, resolving category ids.
pub fn ground_ids<T: Real>(
    g: &Grounding,
    kg: &KnowledgeGraph,
    embeddings: &EmbeddingTable<T>,
) -> Result<Vec<T>, ProgramError> {
    let cats = g
        .categories
        .iter()
        .map(|c| {
            kg.idx(c)
                .map_err(|_| ProgramError::UnknownCategory(c.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    ground(&g.scores, &cats, embeddings)
}

/// Runs the modules in sequence, normalizing after each hop; returns `z_f`.
pub fn run<T: Real>(
    program: &Program,
    z_i: &[T],
    modules: &KnowledgeModules<T>,
) -> Result<Vec<T>, ProgramError> {
    let mut z = z_i.to_vec();
    for &rel in &program.relations {
        let m = modules.get(rel).ok_or(ProgramError::MissingModule(rel))?;
        z = m.forward(&z)?.z_hat;
    }
    Ok(z)
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Like [`run`], recording each hop's output and its `top_k` readout over
/// entities of the relation's tail type.
pub fn execute<T: Real>(
    program: &Program,
    z_i: &[T],
    modules: &KnowledgeModules<T>,
    embeddings: &EmbeddingTable<T>,
    kg: &KnowledgeGraph,
    top_k: usize,
) -> Result<(ExecutionTrace, Vec<T>), ProgramError> {
    let mut z = z_i.to_vec();
    let mut hops = Vec::with_capacity(program.len());
    for &rel in &program.relations {
        let m = modules.get(rel).ok_or(ProgramError::MissingModule(rel))?;
        z = m.forward(&z)?.z_hat;
        let candidates: Vec<EntityIdx> = rel
            .info()
            .tail_types()
            .flat_map(|t| kg.entities_of(t))
            .collect();
        let cos: Vec<f64> = candidates
            .iter()
            .map(|&e| dot(&z, embeddings.unit(e)).f64())
            .collect();
        let p = softmax(&cos);
        let mut ranked: Vec<(f64, EntityIdx)> = p.into_iter().zip(candidates).collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| kg.id(a.1).cmp(kg.id(b.1))));
        hops.push(HopTrace {
            relation: rel,
            output: z.iter().map(|v| v.f64()).collect(),
            top: ranked
                .into_iter()
                .take(top_k)
                .map(|(score, e)| RankedEntity {
                    id: kg.id(e).into(),
                    score,
                })
                .collect(),
        });
    }
    Ok((
        ExecutionTrace {
            program: alloc::format!("{program}"),
            hops,
        },
        z,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OptionScores {
    pub scores: Vec<f64>,
    pub index: usize,
}

/// First index of the maximum.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Softmax over the cosines between `z_f` and each option embedding.
pub fn answer<T: Real>(z_f: &[T], options: &[Vec<T>]) -> OptionScores {
    let cos: Vec<f64> = options.iter().map(|o| cosine(z_f, o).f64()).collect();
    let scores = softmax(&cos);
    OptionScores {
        index: argmax(&scores),
        scores,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Max,
    Mean,
}

/// Combines per-program option scores elementwise.
pub fn aggregate(per_program: &[OptionScores], how: Aggregation) -> OptionScores {
    let n = per_program.first().map_or(0, |s| s.scores.len());
    let scores: Vec<f64> = (0..n)
        .map(|i| {
            let col = per_program.iter().map(|s| s.scores[i]);
            match how {
                Aggregation::Max => col.fold(f64::NEG_INFINITY, f64::max),
                Aggregation::Mean => col.sum::<f64>() / per_program.len() as f64,
            }
        })
        .collect();
    OptionScores {
        index: argmax(&scores),
        scores,
    }
}

/// Option vectors from the entity table when every option is an entity, or
/// from the sidecar when every option is listed there.
pub fn resolve_options<T: Real>(
    options: &[String],
    kg: &KnowledgeGraph,
    embeddings: &EmbeddingTable<T>,
    sidecar: Option<&BTreeMap<String, Vec<T>>>,
) -> Result<Vec<Vec<T>>, ProgramError> {
    let in_kg: Vec<Option<EntityIdx>> = options.iter().map(|o| kg.idx(o).ok()).collect();
    if in_kg.iter().all(Option::is_some) {
        return Ok(in_kg
            .into_iter()
            .map(|e| embeddings.unit(e.unwrap()).to_vec())
            .collect());
    }
    let side = |o: &String| sidecar.and_then(|s| s.get(o));
    if options.iter().all(|o| side(o).is_some()) {
        return Ok(options.iter().map(|o| side(o).unwrap().clone()).collect());
    }
    for (o, e) in options.iter().zip(&in_kg) {
        if e.is_none() && side(o).is_none() {
            return Err(ProgramError::MissingOptionEmbedding(o.clone()));
        }
    }
    Err(ProgramError::MixedOptionSources)
}

impl From<ProgramError> for crate::train::TrainError {
    fn from(e: ProgramError) -> Self {
        match e {
            ProgramError::Nn(n) => crate::train::TrainError::Nn(n),
            other => crate::train::TrainError::Program(alloc::format!("{other}")),
        }
    }
}
