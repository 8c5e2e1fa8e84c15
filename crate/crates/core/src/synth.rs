//! Seeded generator for schema-valid synthetic procedural graphs.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Entity, KgError, KnowledgeGraph, Triplet};
use crate::rng::{derived, SeededRng};
use crate::schema::EntityType;

/// Smallest vocabulary for an answer type that still leaves four distractors.
pub const MIN_ANSWER_VOCABULARY: usize = 5;

#[derive(Clone, Debug, PartialEq, Error)]
pub enum SynthError {
    #[error("{what} count {got} is below the minimum of {min}")]
    SpecTooSmall {
        what: &'static str,
        got: usize,
        min: usize,
    },
    #[error("invalid spec: {0}")]
    BadSpec(String),
    #[error("generated graph is invalid: {0:?}")]
    Invalid(Vec<KgError>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticKgSpec {
    pub domains: usize,
    pub tasks: usize,
    pub steps: usize,
    pub actions: usize,
    pub objects: usize,
    pub tools: usize,
    pub purposes: usize,
    /// Inclusive range of steps per task.
    pub steps_per_task: (usize, usize),
    pub objects_per_step: (usize, usize),
    pub tools_per_step: (usize, usize),
    pub purposes_per_tool: (usize, usize),
    pub similar_per_purpose: (usize, usize),
    /// Zipf exponent over tool popularity; 0 is uniform.
    pub tool_skew: f64,
    /// Inclusive range of demonstrations per task; each one adds 1 to the
    /// frequency of every transition of the task.
    pub demos_per_task: (u32, u32),
    pub seed: u64,
}

impl Default for SyntheticKgSpec {
    fn default() -> Self {
        SyntheticKgSpec {
            domains: 1,
            tasks: 2,
            steps: 6,
            actions: 5,
            objects: 5,
            tools: 5,
            purposes: 5,
            steps_per_task: (3, 4),
            objects_per_step: (1, 2),
            tools_per_step: (1, 2),
            purposes_per_tool: (1, 2),
            similar_per_purpose: (0, 1),
            tool_skew: 0.0,
            demos_per_task: (1, 3),
            seed: 0,
        }
    }
}

impl SyntheticKgSpec {
    /// Roughly 200 entities across five domains.
    pub fn medium(seed: u64) -> Self {
        SyntheticKgSpec {
            domains: 5,
            tasks: 16,
            steps: 55,
            actions: 24,
            objects: 36,
            tools: 30,
            purposes: 30,
            steps_per_task: (4, 7),
            objects_per_step: (1, 2),
            tools_per_step: (1, 2),
            purposes_per_tool: (1, 2),
            similar_per_purpose: (0, 2),
            tool_skew: 0.3,
            demos_per_task: (1, 5),
            seed,
        }
    }

    /// Twenty tools with mildly skewed popularity.
    pub fn twenty_tools(seed: u64) -> Self {
        SyntheticKgSpec {
            domains: 2,
            tasks: 12,
            steps: 80,
            actions: 10,
            objects: 10,
            tools: 20,
            purposes: 10,
            steps_per_task: (6, 8),
            tools_per_step: (1, 2),
            tool_skew: 0.2,
            seed,
            ..SyntheticKgSpec::default()
        }
    }

    pub fn entity_count(&self) -> usize {
        2 + self.domains
            + self.tasks
            + self.steps
            + self.actions
            + self.objects
            + self.tools
            + self.purposes
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        for (what, got) in [("tool", self.tools), ("purpose", self.purposes)] {
            if got < MIN_ANSWER_VOCABULARY {
                return Err(SynthError::SpecTooSmall {
                    what,
                    got,
                    min: MIN_ANSWER_VOCABULARY,
                });
            }
        }
        for (what, got) in [
            ("domain", self.domains),
            ("task", self.tasks),
            ("step", self.steps),
            ("action", self.actions),
            ("object", self.objects),
        ] {
            if got == 0 {
                return Err(SynthError::SpecTooSmall { what, got, min: 1 });
            }
        }
        let ranges = [
            ("steps_per_task", self.steps_per_task, self.steps),
            ("objects_per_step", self.objects_per_step, self.objects),
            ("tools_per_step", self.tools_per_step, self.tools),
            ("purposes_per_tool", self.purposes_per_tool, self.purposes),
            (
                "similar_per_purpose",
                self.similar_per_purpose,
                self.purposes - 1,
            ),
        ];
        for (name, (lo, hi), cap) in ranges {
            if lo > hi || hi > cap || (lo == 0 && name != "similar_per_purpose") {
                return Err(SynthError::BadSpec(format!(
                    "{name} range {lo}..={hi} with {cap} available"
                )));
            }
        }
        if self.tasks * self.steps_per_task.1 < self.steps {
            return Err(SynthError::BadSpec(format!(
                "{} tasks of at most {} steps cannot cover {} steps",
                self.tasks, self.steps_per_task.1, self.steps
            )));
        }
        if self.demos_per_task.0 == 0 || self.demos_per_task.0 > self.demos_per_task.1 {
            return Err(SynthError::BadSpec(String::from(
                "demos_per_task must be a positive range",
            )));
        }
        if !(self.tool_skew >= 0.0 && self.tool_skew.is_finite()) {
            return Err(SynthError::BadSpec(String::from(
                "tool_skew must be finite and non-negative",
            )));
        }
        Ok(())
    }
}

fn ids(prefix: &str, n: usize) -> Vec<String> {
    let width = format!("{}", n.saturating_sub(1)).len();
    (0..n).map(|i| format!("{prefix}_{i:0width$}")).collect()
}

fn in_range(rng: &mut SeededRng, (lo, hi): (usize, usize)) -> usize {
    rng.gen_range(lo..=hi)
}

/// `k` distinct indices drawn with probability proportional to `weights`
/// (sequential draws without replacement), always including `must`.
fn weighted_subset(
    rng: &mut SeededRng,
    weights: &[f64],
    k: usize,
    must: Option<usize>,
) -> Vec<usize> {
    let mut picked: Vec<usize> = must.into_iter().collect();
    while picked.len() < k {
        let total: f64 = (0..weights.len())
            .filter(|i| !picked.contains(i))
            .map(|i| weights[i])
            .sum();
        let mut r = rng.gen::<f64>() * total;
        let mut choice = None;
        for i in (0..weights.len()).filter(|i| !picked.contains(i)) {
            choice = Some(i);
            r -= weights[i];
            if r <= 0.0 {
                break;
            }
        }
        picked.push(choice.expect("k never exceeds the population"));
    }
    picked.sort_unstable();
    picked
}

/// Entities and forward triplets of a synthetic graph. Every step belongs to
/// at least one task, so every step is reachable from `START`.
pub fn generate_parts(spec: &SyntheticKgSpec) -> Result<(Vec<Entity>, Vec<Triplet>), SynthError> {
    spec.validate()?;
    let mut rng = derived(spec.seed, "synth");
    let domains = ids("domain", spec.domains);
    let tasks = ids("task", spec.tasks);
    let steps = ids("step", spec.steps);
    let actions = ids("action", spec.actions);
    let objects = ids("object", spec.objects);
    let tools = ids("tool", spec.tools);
    let purposes = ids("purpose", spec.purposes);

    let mut entities = alloc::vec![
        Entity::new("START", EntityType::Start, ""),
        Entity::new("END", EntityType::End, "")
    ];
    for (list, t) in [
        (&domains, EntityType::Domain),
        (&tasks, EntityType::Task),
        (&steps, EntityType::Step),
        (&actions, EntityType::Action),
        (&objects, EntityType::Object),
        (&tools, EntityType::Tool),
        (&purposes, EntityType::Purpose),
    ] {
        entities.extend(
            list.iter()
                .map(|id| Entity::new(id.as_str(), t, id.replace('_', " "))),
        );
    }

    let mut triplets = Vec::new();
    for (i, task) in tasks.iter().enumerate() {
        triplets.push(Triplet::new(&domains[i % domains.len()], "HAS_TASK", task));
    }

    // Step sequences: a shuffled cover of the step pool first, then random fill.
    let mut cover: Vec<usize> = (0..spec.steps).collect();
    cover.shuffle(&mut rng);
    let mut lengths: Vec<usize> = (0..spec.tasks)
        .map(|_| in_range(&mut rng, spec.steps_per_task))
        .collect();
    let mut grow = 0;
    while lengths.iter().sum::<usize>() < spec.steps {
        if lengths[grow] < spec.steps_per_task.1 {
            lengths[grow] += 1;
        }
        grow = (grow + 1) % spec.tasks;
    }
    let mut sequences: Vec<Vec<usize>> = lengths.iter().map(|&n| Vec::with_capacity(n)).collect();
    let mut t = 0;
    while let Some(s) = cover.pop() {
        while sequences[t].len() >= lengths[t] {
            t = (t + 1) % spec.tasks;
        }
        sequences[t].push(s);
        t = (t + 1) % spec.tasks;
    }
    for (seq, &n) in sequences.iter_mut().zip(&lengths) {
        while seq.len() < n {
            let s = rng.gen_range(0..spec.steps);
            if !seq.contains(&s) {
                seq.push(s);
            }
        }
        seq.shuffle(&mut rng);
    }

    let mut transitions: BTreeMap<(String, String), u32> = BTreeMap::new();
    for (task, seq) in tasks.iter().zip(&sequences) {
        let demos = rng.gen_range(spec.demos_per_task.0..=spec.demos_per_task.1);
        let mut prev = String::from("START");
        for &s in seq {
            triplets.push(Triplet::new(task, "HAS_STEP", &steps[s]));
            *transitions.entry((prev, steps[s].clone())).or_default() += demos;
            prev = steps[s].clone();
        }
        *transitions.entry((prev, String::from("END"))).or_default() += demos;
    }
    for ((h, t), f) in transitions {
        triplets.push(Triplet::new(&h, "HAS_NEXT_STEP", &t).with_freq(f));
    }

    let tool_weights: Vec<f64> = (0..spec.tools)
        .map(|r| 1.0 / ((r + 1) as f64).powf(spec.tool_skew))
        .collect();
    let flat = |n: usize| alloc::vec![1.0; n];
    for (i, step) in steps.iter().enumerate() {
        triplets.push(Triplet::new(
            step,
            "HAS_ACTION",
            &actions[(i + rng.gen_range(0..spec.actions)) % spec.actions],
        ));
        let k = in_range(&mut rng, spec.objects_per_step);
        for o in weighted_subset(
            &mut rng,
            &flat(spec.objects),
            k,
            (i < spec.objects).then_some(i),
        ) {
            triplets.push(Triplet::new(step, "HAS_OBJECT", &objects[o]));
        }
        let k = in_range(&mut rng, spec.tools_per_step);
        for o in weighted_subset(&mut rng, &tool_weights, k, (i < spec.tools).then_some(i)) {
            triplets.push(Triplet::new(step, "HAS_TOOL", &tools[o]));
        }
    }
    for (i, tool) in tools.iter().enumerate() {
        let k = in_range(&mut rng, spec.purposes_per_tool);
        for p in weighted_subset(&mut rng, &flat(spec.purposes), k, Some(i % spec.purposes)) {
            triplets.push(Triplet::new(tool, "HAS_PURPOSE", &purposes[p]));
        }
    }
    for a in &actions {
        triplets.push(Triplet::new(
            a,
            "ACTION_HAS_PURPOSE",
            &purposes[rng.gen_range(0..spec.purposes)],
        ));
    }
    for o in &objects {
        triplets.push(Triplet::new(
            o,
            "OBJECT_HAS_PURPOSE",
            &purposes[rng.gen_range(0..spec.purposes)],
        ));
    }
    for (i, p) in purposes.iter().enumerate() {
        let k = in_range(&mut rng, spec.similar_per_purpose);
        let mut w = flat(spec.purposes);
        w[i] = 0.0;
        let others: Vec<usize> = weighted_subset(&mut rng, &w, k, None)
            .into_iter()
            .filter(|&j| j != i)
            .collect();
        for j in others {
            triplets.push(Triplet::new(p, "HAS_SIMILAR_PURPOSE", &purposes[j]));
        }
    }
    Ok((entities, triplets))
}

pub fn generate(spec: &SyntheticKgSpec) -> Result<KnowledgeGraph, SynthError> {
    let (e, t) = generate_parts(spec)?;
    KnowledgeGraph::build(&e, &t).map_err(SynthError::Invalid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::RelationId;
    use alloc::collections::BTreeSet;

    fn reachable_steps(kg: &KnowledgeGraph) -> BTreeSet<crate::graph::EntityIdx> {
        let start = kg.sentinel(EntityType::Start).unwrap();
        let mut seen = BTreeSet::new();
        let mut stack = alloc::vec![start];
        while let Some(h) = stack.pop() {
            for t in kg.tails(h, RelationId::HAS_NEXT_STEP) {
                if seen.insert(t) {
                    stack.push(t);
                }
            }
        }
        seen
    }

    #[test]
    fn small_spec_is_schema_valid_and_connected() {
        let kg = generate(&SyntheticKgSpec::default()).unwrap();
        assert_eq!(kg.schema_violations(), 0);
        assert_eq!(kg.inverse_closure_violations(), 0);
        let reach = reachable_steps(&kg);
        for s in kg.entities_of(EntityType::Step) {
            assert!(reach.contains(&s), "{} unreachable", kg.id(s));
        }
        assert_eq!(kg.entities_of(EntityType::Task).len(), 2);
        assert_eq!(kg.entities_of(EntityType::Step).len(), 6);
    }

    #[test]
    fn too_few_tools_is_rejected() {
        let spec = SyntheticKgSpec {
            tools: 3,
            ..SyntheticKgSpec::default()
        };
        assert_eq!(
            generate(&spec).unwrap_err(),
            SynthError::SpecTooSmall {
                what: "tool",
                got: 3,
                min: 5
            }
        );
    }

    #[test]
    fn same_seed_same_graph() {
        let spec = SyntheticKgSpec::medium(11);
        let a = generate_parts(&spec).unwrap();
        assert_eq!(a, generate_parts(&spec).unwrap());
        assert_ne!(a.1, generate_parts(&SyntheticKgSpec::medium(12)).unwrap().1);
    }

    #[test]
    fn presets_are_valid() {
        for spec in [SyntheticKgSpec::medium(0), SyntheticKgSpec::twenty_tools(0)] {
            let kg = generate(&spec).unwrap();
            assert_eq!(kg.len(), spec.entity_count());
            let used: BTreeSet<_> = kg
                .heads(RelationId::HAS_TOOL)
                .flat_map(|h| kg.tails(h, RelationId::HAS_TOOL))
                .collect();
            assert_eq!(used.len(), spec.tools);
        }
        let n = SyntheticKgSpec::medium(0).entity_count();
        assert!((180..=220).contains(&n), "{n}");
    }
}
