//! Multiple-choice question generation from traversal templates.

mod sampler;
mod templates;

pub use sampler::{BalancedSampler, ImbalanceReport};
pub use templates::{bindings, oracle_answers, Binding, TemplateId, TemplateSpec};

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{EntityIdx, KnowledgeGraph};
use crate::rng::{derived, SeededRng};
use crate::schema::{EntityType, RelationId};

pub const OPTION_COUNT: usize = 5;

#[derive(Clone, Debug, PartialEq, Error)]
pub enum QaError {
    #[error("unknown template {0}")]
    UnknownTemplate(String),
    #[error("template {0} has no realizable grounding in this graph")]
    NoRealizableGrounding(TemplateId),
    #[error("need at least {OPTION_COUNT} candidate {answer_type} entities, found {available}")]
    InsufficientVocabulary {
        answer_type: EntityType,
        available: usize,
    },
    #[error("knowledge graph must be frozen")]
    NotFrozen,
}

/// Recognition scores for the observed entity over a few categories of its
/// type, standing in for a perception model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grounding {
    pub etype: EntityType,
    /// The entity actually shown.
    pub entity: String,
    pub categories: Vec<String>,
    pub scores: Vec<f64>,
}

/// The symbolic query a question was generated from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleQuery {
    pub template: TemplateId,
    pub task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<String>,
    /// Primary relation path of the template, for display.
    pub path: Vec<RelationId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaInstance {
    pub tid: TemplateId,
    pub grounding: Grounding,
    pub question: String,
    pub options: Vec<String>,
    pub correct_index: usize,
    pub oracle_query: OracleQuery,
}

/// Redistributes grounding mass onto entities that look alike.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundingNoise {
    /// Probability that the highest score goes to a confusable entity.
    pub flip_prob: f64,
    /// Number of scored categories, the true entity included.
    pub top_k: usize,
}

impl Default for GroundingNoise {
    fn default() -> Self {
        GroundingNoise {
            flip_prob: 0.0,
            top_k: 1,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct QaConfig {
    pub noise: GroundingNoise,
    /// Extra phrasings per template; the built-in one is used when absent.
    pub phrasings: BTreeMap<TemplateId, Vec<String>>,
}

/// Same-type entities ranked by Jaccard overlap of their labelled
/// neighbourhoods, most similar first, ties by id.
pub fn confusables(kg: &KnowledgeGraph, e: EntityIdx) -> Vec<EntityIdx> {
    let hood = |x: EntityIdx| -> BTreeSet<(RelationId, EntityIdx)> {
        RelationId::all()
            .flat_map(|r| kg.tails(x, r).map(move |t| (r, t)))
            .collect()
    };
    let mine = hood(e);
    let mut scored: Vec<(f64, EntityIdx)> = kg
        .entities_of(kg.etype(e))
        .into_iter()
        .filter(|&x| x != e)
        .map(|x| {
            let other = hood(x);
            let inter = mine.intersection(&other).count() as f64;
            let union = mine.union(&other).count() as f64;
            (if union == 0.0 { 0.0 } else { inter / union }, x)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| kg.id(a.1).cmp(kg.id(b.1))));
    scored.into_iter().map(|(_, x)| x).collect()
}

/// One-hot by default; with noise, `top_k` categories receive exponential
/// random weights and the largest lands on a confusable with `flip_prob`.
pub fn make_grounding(
    kg: &KnowledgeGraph,
    e: EntityIdx,
    noise: &GroundingNoise,
    rng: &mut SeededRng,
) -> Grounding {
    let etype = kg.etype(e);
    let mut cats = alloc::vec![e];
    cats.extend(
        confusables(kg, e)
            .into_iter()
            .take(noise.top_k.saturating_sub(1)),
    );
    let mut weights: Vec<f64> = (0..cats.len())
        .map(|_| -(1.0 - rng.gen::<f64>()).ln())
        .collect();
    weights.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = weights.iter().sum();
    let mut order: Vec<usize> = (1..cats.len()).collect();
    order.shuffle(rng);
    let mut assign = alloc::vec![0.0; cats.len()];
    if cats.len() > 1 && rng.gen::<f64>() < noise.flip_prob {
        let wrong = order.remove(0);
        assign[wrong] = weights[0];
        order.insert(0, 0);
    } else {
        assign[0] = weights[0];
    }
    for (slot, &w) in order.iter().zip(&weights[1..]) {
        assign[*slot] = w;
    }
    Grounding {
        etype,
        entity: kg.id(e).into(),
        categories: cats.iter().map(|&c| kg.id(c).into()).collect(),
        scores: assign.iter().map(|w| w / total).collect(),
    }
}

fn candidate_pool(
    kg: &KnowledgeGraph,
    answer: EntityType,
    exclude: &BTreeSet<EntityIdx>,
) -> Vec<EntityIdx> {
    kg.entities_of(answer)
        .into_iter()
        .filter(|e| !exclude.contains(e))
        .collect()
}

fn excluded(b: Binding, answers: &BTreeSet<EntityIdx>) -> BTreeSet<EntityIdx> {
    let mut ex = answers.clone();
    ex.insert(b.task);
    ex.extend(b.step);
    ex
}

/// Bindings whose answer set is non-empty and leaves enough distractors.
pub fn realizable_bindings(
    kg: &KnowledgeGraph,
    tid: TemplateId,
) -> Vec<(Binding, BTreeSet<EntityIdx>)> {
    let answer = tid.spec().answer;
    templates::bindings(kg, tid)
        .into_iter()
        .filter_map(|b| {
            let ans = oracle_answers(kg, tid, b);
            let ok = !ans.is_empty()
                && candidate_pool(kg, answer, &excluded(b, &ans)).len() >= OPTION_COUNT - 1;
            ok.then_some((b, ans))
        })
        .collect()
}

/// Generates `count` questions of one template. Bindings are visited in a
/// seeded shuffled cycle; distractors are drawn by a sampler that balances
/// how often each label is correct versus wrong.
pub fn instantiate(
    tid: TemplateId,
    kg: &KnowledgeGraph,
    seed: u64,
    count: usize,
    config: &QaConfig,
) -> Result<(Vec<QaInstance>, ImbalanceReport), QaError> {
    if !kg.is_frozen() {
        return Err(QaError::NotFrozen);
    }
    let spec = tid.spec();
    let available = kg.entities_of(spec.answer).len();
    if available < OPTION_COUNT {
        return Err(QaError::InsufficientVocabulary {
            answer_type: spec.answer,
            available,
        });
    }
    let mut pool = realizable_bindings(kg, tid);
    if pool.is_empty() {
        return Err(QaError::NoRealizableGrounding(tid));
    }
    let mut rng = derived(seed, &alloc::format!("qa/{tid}"));
    let mut sampler = BalancedSampler::default();
    let mut out = Vec::with_capacity(count);
    let mut cursor = pool.len();
    for _ in 0..count {
        if cursor == pool.len() {
            pool.shuffle(&mut rng);
            cursor = 0;
        }
        let (b, answers) = &pool[cursor];
        cursor += 1;
        let answers_v: Vec<EntityIdx> = answers.iter().copied().collect();
        let correct = sampler.choose_correct(&answers_v, &mut rng);
        let candidates = candidate_pool(kg, spec.answer, &excluded(*b, answers));
        let distractors = sampler.sample_distractors(spec.answer, &candidates, &mut rng)?;
        let mut options: Vec<EntityIdx> = distractors.to_vec();
        let correct_index = rng.gen_range(0..OPTION_COUNT);
        options.insert(correct_index, correct);

        let shown = match spec.grounded {
            EntityType::Task => b.task,
            _ => b.step.expect("step templates bind a step"),
        };
        let grounding = make_grounding(kg, shown, &config.noise, &mut rng);
        let question = match config.phrasings.get(&tid).filter(|p| !p.is_empty()) {
            Some(p) => p[rng.gen_range(0..p.len())].clone(),
            None => spec.question.into(),
        };
        out.push(QaInstance {
            tid,
            grounding,
            question,
            options: options.iter().map(|&o| kg.id(o).into()).collect(),
            correct_index,
            oracle_query: OracleQuery {
                template: tid,
                task: kg.id(b.task).into(),
                step: b.step.map(|s| kg.id(s).into()),
                path: spec.programs[0].to_vec(),
            },
        });
    }
    Ok((out, sampler.imbalance()))
}

/// Draws 4 distractors of `answer_type` outside `correct` with a fresh
/// balancing state.
pub fn sample_distractors(
    kg: &KnowledgeGraph,
    answer_type: EntityType,
    correct: &BTreeSet<EntityIdx>,
    rng: &mut SeededRng,
) -> Result<[EntityIdx; OPTION_COUNT - 1], QaError> {
    let available = kg.entities_of(answer_type).len();
    if available < OPTION_COUNT {
        return Err(QaError::InsufficientVocabulary {
            answer_type,
            available,
        });
    }
    BalancedSampler::default().sample_distractors(
        answer_type,
        &candidate_pool(kg, answer_type, correct),
        rng,
    )
}

/// True iff the instance is well formed and its oracle query selects exactly
/// the option marked correct.
pub fn validate(inst: &QaInstance, kg: &KnowledgeGraph) -> bool {
    let q = &inst.oracle_query;
    if q.template != inst.tid
        || inst.options.len() != OPTION_COUNT
        || inst.correct_index >= OPTION_COUNT
    {
        return false;
    }
    let spec = inst.tid.spec();
    let Ok(task) = kg.idx(&q.task) else {
        return false;
    };
    if kg.etype(task) != EntityType::Task {
        return false;
    }
    let step = match (&q.step, spec.grounded) {
        (None, EntityType::Task) => None,
        (Some(s), EntityType::Step) => match kg.idx(s) {
            Ok(s) if kg.has_edge(task, RelationId::HAS_STEP, s) => Some(s),
            _ => return false,
        },
        _ => return false,
    };
    let mut options = Vec::with_capacity(OPTION_COUNT);
    for o in &inst.options {
        match kg.idx(o) {
            Ok(e) if kg.etype(e) == spec.answer && !options.contains(&e) => options.push(e),
            _ => return false,
        }
    }
    let answers = oracle_answers(kg, inst.tid, Binding { task, step });
    options
        .iter()
        .enumerate()
        .all(|(i, o)| answers.contains(o) == (i == inst.correct_index))
}

/// Accuracy of uniform random guessing over `trials` draws.
pub fn random_guess_accuracy(instances: &[QaInstance], trials: usize, seed: u64) -> f64 {
    if instances.is_empty() || trials == 0 {
        return 0.0;
    }
    let mut rng = derived(seed, "random-guess");
    let hits = (0..trials)
        .filter(|_| {
            let inst = &instances[rng.gen_range(0..instances.len())];
            rng.gen_range(0..inst.options.len()) == inst.correct_index
        })
        .count();
    hits as f64 / trials as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{fixture, Entity, Triplet};
    use crate::rng::seeded;

    /// The toy graph plus four unused tools, enough for tool distractors.
    fn toy_with_spare_tools() -> KnowledgeGraph {
        let (mut e, t) = fixture::toy_parts();
        for name in ["ladle", "whisk", "sieve", "tongs"] {
            e.push(Entity::new(name, EntityType::Tool, name));
        }
        KnowledgeGraph::build(&e, &t).unwrap()
    }

    #[test]
    fn q1_on_extended_fixture() {
        let kg = toy_with_spare_tools();
        let q1 = TemplateId::new(1).unwrap();
        let (qs, _) = instantiate(q1, &kg, 3, 40, &QaConfig::default()).unwrap();
        for q in &qs {
            assert!(validate(q, &kg));
            if q.oracle_query.step.as_deref() == Some("pour_water") {
                assert!(["kettle", "cup"].contains(&q.options[q.correct_index].as_str()));
                let wrong: Vec<_> = q
                    .options
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != q.correct_index)
                    .collect();
                assert!(wrong
                    .iter()
                    .all(|(_, o)| !["kettle", "cup"].contains(&o.as_str())));
            }
        }
    }

    #[test]
    fn three_tools_are_not_enough() {
        let kg = fixture::toy();
        let kettle = kg.idx("kettle").unwrap();
        let err = sample_distractors(&kg, EntityType::Tool, &[kettle].into(), &mut seeded(1))
            .unwrap_err();
        assert_eq!(
            err,
            QaError::InsufficientVocabulary {
                answer_type: EntityType::Tool,
                available: 3
            }
        );
        let kg = toy_with_spare_tools();
        let all: BTreeSet<_> = kg.entities_of(EntityType::Tool).into_iter().collect();
        assert!(sample_distractors(&kg, EntityType::Tool, &all, &mut seeded(1)).is_err());
    }

    #[test]
    fn negation_can_empty_every_answer_set() {
        // Each tool's purposes coincide with the purposes of its step's action.
        let (mut e, mut t) = fixture::toy_parts();
        e.push(Entity::new("heat", EntityType::Action, "heat"));
        e.push(Entity::new("pour", EntityType::Action, "pour"));
        e.push(Entity::new("grind", EntityType::Action, "grind"));
        for p in ["p4", "p5"] {
            e.push(Entity::new(p, EntityType::Purpose, p));
        }
        let t_ = Triplet::new;
        t.extend([
            t_("boil_water", "HAS_ACTION", "heat"),
            t_("pour_water", "HAS_ACTION", "pour"),
            t_("brew", "HAS_ACTION", "pour"),
            t_("grind_beans", "HAS_ACTION", "grind"),
            t_("heat", "ACTION_HAS_PURPOSE", "heat_water"),
            t_("pour", "ACTION_HAS_PURPOSE", "heat_water"),
            t_("pour", "ACTION_HAS_PURPOSE", "hold_liquid"),
            t_("grind", "ACTION_HAS_PURPOSE", "grind_things"),
        ]);
        let kg = KnowledgeGraph::build(&e, &t).unwrap();
        let q13 = TemplateId::new(13).unwrap();
        assert_eq!(
            instantiate(q13, &kg, 1, 5, &QaConfig::default()).unwrap_err(),
            QaError::NoRealizableGrounding(q13)
        );
    }

    #[test]
    fn validate_rejects_perturbations() {
        let kg = toy_with_spare_tools();
        let (qs, _) = instantiate(
            TemplateId::new(1).unwrap(),
            &kg,
            9,
            10,
            &QaConfig::default(),
        )
        .unwrap();
        let mut swapped = qs[0].clone();
        swapped.correct_index = (swapped.correct_index + 1) % OPTION_COUNT;
        assert!(!validate(&swapped, &kg));

        // Replace a distractor with another valid answer of the same step.
        let q = qs
            .iter()
            .find(|q| q.oracle_query.step.as_deref() == Some("pour_water"))
            .unwrap();
        let mut ambiguous = q.clone();
        let other = if q.options[q.correct_index] == "kettle" {
            "cup"
        } else {
            "kettle"
        };
        let slot = (q.correct_index + 1) % OPTION_COUNT;
        ambiguous.options[slot] = other.into();
        assert!(!validate(&ambiguous, &kg));

        let mut short = qs[0].clone();
        short.options.pop();
        assert!(!validate(&short, &kg));
    }

    #[test]
    fn generation_is_deterministic() {
        let kg = toy_with_spare_tools();
        let noise = GroundingNoise {
            flip_prob: 0.3,
            top_k: 3,
        };
        let cfg = QaConfig {
            noise,
            ..QaConfig::default()
        };
        let q1 = TemplateId::new(1).unwrap();
        let a = instantiate(q1, &kg, 5, 20, &cfg).unwrap().0;
        let b = instantiate(q1, &kg, 5, 20, &cfg).unwrap().0;
        assert_eq!(a, b);
        for q in &a {
            assert_eq!(q.grounding.categories.len(), 3);
            assert!((q.grounding.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(q.grounding.scores.iter().all(|&s| s >= 0.0));
        }
    }

    #[test]
    fn one_hot_grounding_by_default() {
        let kg = fixture::toy();
        let g = make_grounding(
            &kg,
            kg.idx("brew").unwrap(),
            &GroundingNoise::default(),
            &mut seeded(0),
        );
        assert_eq!(g.categories, ["brew"]);
        assert_eq!(g.scores, [1.0]);
    }

    #[test]
    fn confusables_rank_by_shared_neighbours() {
        let kg = fixture::toy();
        let c = confusables(&kg, kg.idx("kettle").unwrap());
        // cup shares pour_water with kettle, grinder shares nothing.
        assert_eq!(kg.id(c[0]), "cup");
    }
}
