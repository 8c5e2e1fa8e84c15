//! Numerical checks of multi-hop composition error bounds: an explicit ideal
//! operator per relation, sampled approximation errors, spectral Lipschitz
//! constants and measured deviations along programs.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{EntityIdx, KnowledgeGraph};
use crate::nn::{dot, lipschitz_upper_bound, normalize, NnError, RelationModule};
use crate::rng::{derived, unit_vector};
use crate::schema::RelationId;
use crate::train::{EmbeddingTable, KnowledgeModules};

/// Constant multiplying each per-hop error in the composition bound.
pub const EPS_CONSTANT: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Error)]
pub enum TheoryError {
    #[error("ideal operator for {0} is undefined on every sample")]
    NoDefinedSamples(RelationId),
    #[error("no module for relation {0}")]
    MissingModule(RelationId),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Ground-truth map for one relation: project the input onto its nearest
/// head-type entity, then return the unit-normalized mean of that entity's
/// tail embeddings.
#[derive(Clone, Debug)]
pub struct IdealOperator {
    pub relation: RelationId,
    domain: Vec<EntityIdx>,
}

impl IdealOperator {
    pub fn new(kg: &KnowledgeGraph, relation: RelationId) -> Self {
        let mut domain: Vec<EntityIdx> = relation
            .info()
            .head_types()
            .flat_map(|t| kg.entities_of(t))
            .collect();
        domain.sort();
        IdealOperator { relation, domain }
    }

    /// Closest head-type entity by cosine; ties go to the lowest index.
    pub fn nearest(&self, x: &[f64], emb: &EmbeddingTable<f64>) -> Option<EntityIdx> {
        let mut best: Option<(EntityIdx, f64)> = None;
        for &e in &self.domain {
            let s = dot(x, emb.unit(e));
            if best.map_or(true, |(_, b)| s > b) {
                best = Some((e, s));
            }
        }
        best.map(|(e, _)| e)
    }

    /// `None` when the nearest entity has no tails under the relation.
    pub fn apply(
        &self,
        x: &[f64],
        kg: &KnowledgeGraph,
        emb: &EmbeddingTable<f64>,
    ) -> Option<Vec<f64>> {
        let head = self.nearest(x, emb)?;
        let mut sum = alloc::vec![0.0; emb.dim()];
        let mut n = 0usize;
        for t in kg.tails(head, self.relation) {
            crate::nn::axpy(1.0, emb.unit(t), &mut sum);
            n += 1;
        }
        if n == 0 {
            return None;
        }
        normalize(&sum, 1e-12)
    }
}

fn learned_step(module: &RelationModule<f64>, x: &[f64]) -> Result<Vec<f64>, NnError> {
    Ok(module.forward(x)?.z_hat)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsEstimate {
    pub relation: RelationId,
    /// Largest observed `‖φ(u) − F(u)‖`; a lower bound on the supremum.
    pub eps: f64,
    pub defined_samples: usize,
    pub random_samples: usize,
}

/// Sampled worst-case error of a module against its ideal operator over the
/// head-type entity embeddings, `random` seeded unit vectors and any
/// `extra` inputs.
pub fn estimate_eps(
    module: &RelationModule<f64>,
    ideal: &IdealOperator,
    kg: &KnowledgeGraph,
    emb: &EmbeddingTable<f64>,
    random: usize,
    extra: &[Vec<f64>],
    seed: u64,
) -> Result<EpsEstimate, TheoryError> {
    let mut rng = derived(seed, ideal.relation.name());
    let entities = ideal.domain.iter().map(|&e| emb.unit(e).to_vec());
    let randoms = (0..random)
        .map(|_| unit_vector::<f64, _>(&mut rng, emb.dim()))
        .collect::<Vec<_>>();
    let mut eps = 0.0f64;
    let mut defined = 0;
    for u in entities.chain(randoms).chain(extra.iter().cloned()) {
        if let Some(f) = ideal.apply(&u, kg, emb) {
            eps = eps.max(dist(&learned_step(module, &u)?, &f));
            defined += 1;
        }
    }
    if defined == 0 {
        return Err(TheoryError::NoDefinedSamples(ideal.relation));
    }
    Ok(EpsEstimate {
        relation: ideal.relation,
        eps,
        defined_samples: defined,
        random_samples: random,
    })
}

/// Learned and ideal trajectories from the same start, or the hop at which
/// the ideal operator is undefined.
pub fn trajectories(
    program: &[RelationId],
    start: &[f64],
    modules: &KnowledgeModules<f64>,
    ideals: &BTreeMap<RelationId, IdealOperator>,
    kg: &KnowledgeGraph,
    emb: &EmbeddingTable<f64>,
) -> Result<Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), usize>, TheoryError> {
    let mut learned = alloc::vec![start.to_vec()];
    let mut ideal = alloc::vec![start.to_vec()];
    for (t, &rel) in program.iter().enumerate() {
        let m = modules.get(rel).ok_or(TheoryError::MissingModule(rel))?;
        let op = ideals.get(&rel).ok_or(TheoryError::MissingModule(rel))?;
        let Some(next) = op.apply(&ideal[t], kg, emb) else {
            return Ok(Err(t + 1));
        };
        learned.push(learned_step(m, &learned[t])?);
        ideal.push(next);
    }
    Ok(Ok((learned, ideal)))
}

/// `δ_0 = 0, δ_1, …, δ_T` for one program and start vector.
pub fn measure_delta(
    program: &[RelationId],
    start: &[f64],
    modules: &KnowledgeModules<f64>,
    ideals: &BTreeMap<RelationId, IdealOperator>,
    kg: &KnowledgeGraph,
    emb: &EmbeddingTable<f64>,
) -> Result<Result<Vec<f64>, usize>, TheoryError> {
    Ok(trajectories(program, start, modules, ideals, kg, emb)?
        .map(|(l, i)| l.iter().zip(&i).map(|(a, b)| dist(a, b)).collect()))
}

/// `Σ_t (Π_{i>t} L_i) · c · ε_t`.
pub fn composition_bound(lipschitz: &[f64], eps: &[f64], c: f64) -> f64 {
    let mut bound = 0.0;
    for (l, e) in lipschitz.iter().zip(eps) {
        bound = bound * l + c * e;
    }
    bound
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Linear,
    Geometric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformBoundRow {
    pub lipschitz: f64,
    pub eps: f64,
    pub hops: u32,
    pub regime: Regime,
    pub closed_form: f64,
    /// `ε / (1 − L)` for contractive modules.
    pub limit: Option<f64>,
}

/// Closed form of the uniform bound with constant Lipschitz factor `l` and
/// error `eps` over `hops` steps.
pub fn uniform_bound(l: f64, eps: f64, hops: u32) -> f64 {
    if l == 1.0 {
        hops as f64 * eps
    } else {
        // L^T − 1 via expm1 keeps precision near L = 1.
        eps * ((hops as f64) * (l - 1.0).ln_1p()).exp_m1() / (l - 1.0)
    }
}

pub fn uniform_bound_table(lipschitz: &[f64], eps: &[f64], hops: &[u32]) -> Vec<UniformBoundRow> {
    let mut rows = Vec::new();
    for &l in lipschitz {
        for &e in eps {
            for &t in hops {
                rows.push(UniformBoundRow {
                    lipschitz: l,
                    eps: e,
                    hops: t,
                    regime: if l == 1.0 {
                        Regime::Linear
                    } else {
                        Regime::Geometric
                    },
                    closed_form: uniform_bound(l, e, t),
                    limit: (l < 1.0).then(|| e / (1.0 - l)),
                });
            }
        }
    }
    rows
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub program: String,
    pub start: String,
    pub eps: Vec<f64>,
    pub lipschitz: Vec<f64>,
    pub delta: Vec<f64>,
    pub bound: f64,
    pub slack: f64,
    pub recursion_violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedProgram {
    pub program: String,
    pub start: String,
    pub undefined_at_hop: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundConfig {
    pub max_hops: usize,
    pub random_samples: usize,
    pub seed: u64,
}

impl Default for BoundConfig {
    fn default() -> Self {
        BoundConfig {
            max_hops: 3,
            random_samples: 1000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub constant: f64,
    pub records: Vec<BoundReport>,
    pub skipped: Vec<SkippedProgram>,
    pub eps: Vec<EpsEstimate>,
    pub lipschitz: BTreeMap<RelationId, f64>,
    pub violations: usize,
    pub recursion_violations: usize,
    /// Whether the sample set was enlarged tenfold after a first violation.
    pub escalated: bool,
    /// Smallest constant that would make every measured bound hold.
    pub c_star: f64,
}

/// Every relation path of length `1..=max_hops` whose consecutive types chain.
pub fn chainable_programs(max_hops: usize) -> Vec<Vec<RelationId>> {
    let mut out: Vec<Vec<RelationId>> = RelationId::all().map(|r| alloc::vec![r]).collect();
    let mut frontier = out.clone();
    for _ in 1..max_hops {
        let mut next = Vec::new();
        for p in &frontier {
            for r in RelationId::all() {
                let mut q = p.clone();
                q.push(r);
                if KnowledgeGraph::check_path(&q).is_ok() {
                    next.push(q);
                }
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn program_name(p: &[RelationId]) -> String {
    p.iter().map(|r| r.name()).collect::<Vec<_>>().join(",")
}

/// Measures `δ_T` for every chainable program from every entity of its start
/// type and compares it with the composition bound. A violation triggers one
/// re-estimate of every `ε̂` with ten times as many random samples.
pub fn check_bound(
    modules: &KnowledgeModules<f64>,
    kg: &KnowledgeGraph,
    emb: &EmbeddingTable<f64>,
    config: &BoundConfig,
) -> Result<BoundSummary, TheoryError> {
    let ideals: BTreeMap<RelationId, IdealOperator> = RelationId::all()
        .map(|r| (r, IdealOperator::new(kg, r)))
        .collect();
    let mut lipschitz = BTreeMap::new();
    for r in RelationId::all() {
        let m = modules.get(r).ok_or(TheoryError::MissingModule(r))?;
        lipschitz.insert(r, lipschitz_upper_bound(m));
    }

    // Runs plus the ideal states fed into each relation along the way.
    struct Run {
        program: Vec<RelationId>,
        start: EntityIdx,
        delta: Vec<f64>,
    }
    let mut runs = Vec::new();
    let mut skipped = Vec::new();
    let mut ideal_inputs: BTreeMap<RelationId, Vec<Vec<f64>>> = BTreeMap::new();
    for program in chainable_programs(config.max_hops) {
        let starts: Vec<EntityIdx> = program[0]
            .info()
            .head_types()
            .flat_map(|t| kg.entities_of(t))
            .collect();
        for s in starts {
            match trajectories(&program, emb.unit(s), modules, &ideals, kg, emb)? {
                Ok((learned, ideal)) => {
                    for (t, &rel) in program.iter().enumerate().skip(1) {
                        ideal_inputs.entry(rel).or_default().push(ideal[t].clone());
                    }
                    let delta = learned
                        .iter()
                        .zip(&ideal)
                        .map(|(a, b)| dist(a, b))
                        .collect();
                    runs.push(Run {
                        program: program.clone(),
                        start: s,
                        delta,
                    });
                }
                Err(hop) => skipped.push(SkippedProgram {
                    program: program_name(&program),
                    start: kg.id(s).to_string(),
                    undefined_at_hop: hop,
                }),
            }
        }
    }
    for v in ideal_inputs.values_mut() {
        v.sort_by(|a, b| {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(core::cmp::Ordering::Equal)
        });
        v.dedup();
    }

    let estimate = |random: usize| -> Result<BTreeMap<RelationId, EpsEstimate>, TheoryError> {
        let mut out = BTreeMap::new();
        for r in RelationId::all() {
            let m = modules.get(r).ok_or(TheoryError::MissingModule(r))?;
            let extra = ideal_inputs.get(&r).map_or(&[][..], |v| &v[..]);
            match estimate_eps(m, &ideals[&r], kg, emb, random, extra, config.seed) {
                Ok(e) => {
                    out.insert(r, e);
                }
                Err(TheoryError::NoDefinedSamples(_)) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    };

    let assess = |eps: &BTreeMap<RelationId, EpsEstimate>| {
        let mut records = Vec::new();
        let (mut violations, mut recursion, mut c_star) = (0, 0, 0.0f64);
        for run in &runs {
            let e: Vec<f64> = run
                .program
                .iter()
                .map(|r| eps.get(r).map_or(0.0, |x| x.eps))
                .collect();
            let l: Vec<f64> = run.program.iter().map(|r| lipschitz[r]).collect();
            let bound = composition_bound(&l, &e, EPS_CONSTANT);
            let d_t = *run.delta.last().expect("delta includes hop 0");
            let rec = (1..run.delta.len())
                .filter(|&t| {
                    run.delta[t] > l[t - 1] * run.delta[t - 1] + EPS_CONSTANT * e[t - 1] + 1e-12
                })
                .count();
            let unit = composition_bound(&l, &e, 1.0);
            if d_t > 0.0 {
                c_star = c_star.max(if unit > 0.0 {
                    d_t / unit
                } else {
                    f64::INFINITY
                });
            }
            violations += usize::from(d_t > bound + 1e-12);
            recursion += rec;
            records.push(BoundReport {
                program: program_name(&run.program),
                start: kg.id(run.start).to_string(),
                eps: e,
                lipschitz: l,
                delta: run.delta.clone(),
                bound,
                slack: bound - d_t,
                recursion_violations: rec,
            });
        }
        (records, violations, recursion, c_star)
    };

    let mut eps = estimate(config.random_samples)?;
    let (mut records, mut violations, mut recursion, mut c_star) = assess(&eps);
    let escalated = violations > 0 || recursion > 0;
    if escalated {
        eps = estimate(config.random_samples * 10)?;
        (records, violations, recursion, c_star) = assess(&eps);
    }
    Ok(BoundSummary {
        constant: EPS_CONSTANT,
        records,
        skipped,
        eps: eps.into_values().collect(),
        lipschitz,
        violations,
        recursion_violations: recursion,
        escalated,
        c_star,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzCheck {
    pub relation: RelationId,
    pub bound: f64,
    /// Largest `‖z(u) − z(v)‖ / ‖u − v‖` for the pre-normalization output.
    pub max_ratio: f64,
    /// Same ratio for the unit-normalized output, which the spectral bound
    /// does not cover.
    pub max_ratio_normalized: f64,
    pub violations: usize,
    pub pairs: usize,
}

/// Empirical check of the spectral Lipschitz bound on random unit pairs.
pub fn lipschitz_check(
    relation: RelationId,
    module: &RelationModule<f64>,
    pairs: usize,
    seed: u64,
) -> Result<LipschitzCheck, TheoryError> {
    let bound = lipschitz_upper_bound(module);
    let mut rng = derived(seed, relation.name());
    let (mut max_ratio, mut max_norm, mut violations) = (0.0f64, 0.0f64, 0);
    for _ in 0..pairs {
        let u = unit_vector::<f64, _>(&mut rng, module.d_in());
        let v = unit_vector::<f64, _>(&mut rng, module.d_in());
        let d = dist(&u, &v);
        if d < 1e-12 {
            continue;
        }
        let (a, b) = (module.forward(&u)?, module.forward(&v)?);
        let r = dist(&a.z, &b.z) / d;
        max_ratio = max_ratio.max(r);
        max_norm = max_norm.max(dist(&a.z_hat, &b.z_hat) / d);
        violations += usize::from(r > bound * (1.0 + 1e-9));
    }
    Ok(LipschitzCheck {
        relation,
        bound,
        max_ratio,
        max_ratio_normalized: max_norm,
        violations,
        pairs,
    })
}
