use std::collections::BTreeSet;

use kml_core::graph::fixture;
use kml_core::logic::{membership, score_and, score_not, score_or};
use kml_core::nn::{lipschitz_upper_bound, RelationModule};
use kml_core::program::answer;
use kml_core::rng::{derived, unit_vector};
use kml_core::synth::{generate, SyntheticKgSpec};
use kml_core::theory::lipschitz_check;
use kml_core::train::{train, EmbeddingMode, EmbeddingTable, TrainConfig};
use kml_core::{EntityIdx, KnowledgeGraph, RelationId};
use proptest::prelude::*;

fn small_graph(seed: u64) -> KnowledgeGraph {
    generate(&SyntheticKgSpec {
        seed,
        ..SyntheticKgSpec::default()
    })
    .unwrap()
}

/// Image of `start` under `path`, computed from the raw edge list.
fn edge_list_image(
    kg: &KnowledgeGraph,
    start: &BTreeSet<EntityIdx>,
    path: &[RelationId],
) -> BTreeSet<EntityIdx> {
    let edges: Vec<_> = kg.edges().map(|(h, r, t, _)| (h, r, t)).collect();
    let mut cur = start.clone();
    for &rel in path {
        cur = edges
            .iter()
            .filter(|(h, r, _)| *r == rel && cur.contains(h))
            .map(|e| e.2)
            .collect();
    }
    cur
}

fn random_table(n: usize, dim: usize, seed: u64) -> EmbeddingTable<f64> {
    EmbeddingTable::random(n, dim, EmbeddingMode::Frozen, &mut derived(seed, "table"))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn traverse_matches_edge_fold(seed in 0u64..6, rels in prop::collection::vec(0usize..40, 1..4), pick in 0usize..1000) {
        let kg = small_graph(seed);
        let path: Vec<RelationId> = rels.iter().map(|&i| RelationId::from_index(i % RelationId::all().count()).unwrap()).collect();
        prop_assume!(KnowledgeGraph::check_path(&path).is_ok());
        let heads = kg.entities_of(path[0].info().head_types().next().unwrap());
        prop_assume!(!heads.is_empty());
        let start: BTreeSet<_> = [heads[pick % heads.len()]].into();
        prop_assert_eq!(kg.traverse(&start, &path).unwrap(), edge_list_image(&kg, &start, &path));
    }

    #[test]
    fn synthetic_graphs_are_inverse_closed(seed in 0u64..1000) {
        let kg = small_graph(seed);
        prop_assert_eq!(kg.inverse_closure_violations(), 0);
        prop_assert_eq!(kg.schema_violations(), 0);
        for (h, r, t, _) in kg.edges() {
            prop_assert!(kg.has_edge(t, r.inverse(), h));
        }
    }

    #[test]
    fn soft_operators_respect_bounds(seed in 0u64..1000) {
        let emb = random_table(12, 8, seed);
        let mut rng = derived(seed, "queries");
        let (zi, zj) = (unit_vector::<f64, _>(&mut rng, 8), unit_vector::<f64, _>(&mut rng, 8));
        let ents: Vec<EntityIdx> = (0..12).map(EntityIdx).collect();
        let a = membership(&zi, &emb, &ents).unwrap();
        let b = membership(&zj, &emb, &ents).unwrap();
        let and = score_and(&zi, &zj, &emb, &ents).unwrap();
        let or = score_or(&zi, &zj, &emb, &ents).unwrap();
        let not = score_not(&zi, &emb, &ents).unwrap();
        for i in 0..ents.len() {
            let (x, y) = (a.scores[i], b.scores[i]);
            prop_assert!(and.scores[i] <= x.min(y) + 1e-15);
            prop_assert!(or.scores[i] >= x.max(y) - 1e-15);
            prop_assert!((not.scores[i] - (1.0 - x)).abs() < 1e-15);
        }
        // NOT reverses the membership order.
        for i in 0..ents.len() {
            for j in 0..ents.len() {
                if a.scores[i] > a.scores[j] {
                    prop_assert!(not.scores[i] < not.scores[j]);
                }
            }
        }
    }

    #[test]
    fn answer_is_scale_invariant(seed in 0u64..1000, scale in 1e-3f64..1e3) {
        let mut rng = derived(seed, "answer");
        let z = unit_vector::<f64, _>(&mut rng, 16);
        let options: Vec<Vec<f64>> = (0..5).map(|_| unit_vector::<f64, _>(&mut rng, 16)).collect();
        let scaled: Vec<f64> = z.iter().map(|v| v * scale).collect();
        let (a, b) = (answer(&z, &options), answer(&scaled, &options));
        prop_assert_eq!(a.index, b.index);
        for (x, y) in a.scores.iter().zip(&b.scores) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert!((a.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn spectral_bound_covers_random_pairs() {
    for seed in 0..5u64 {
        let module = RelationModule::<f64>::init(24, 12, 24, &mut derived(seed, "lipschitz"));
        let check = lipschitz_check(RelationId::HAS_STEP, &module, 1000, seed).unwrap();
        assert_eq!(check.violations, 0, "{check:?}");
        assert!(check.max_ratio <= lipschitz_upper_bound(&module));
        assert_eq!(check.pairs, 1000);
    }
}

#[test]
fn training_is_deterministic() {
    let kg = fixture::toy();
    let config = TrainConfig {
        dim: 16,
        hidden: 8,
        epochs: 10,
        seed: 11,
        ..TrainConfig::default()
    };
    let a = train::<f64>(&kg, &config, None).unwrap();
    let b = train::<f64>(&kg, &config, None).unwrap();
    assert_eq!(a.modules, b.modules);
    assert_eq!(a.log, b.log);
    let c = train::<f64>(&kg, &TrainConfig { seed: 12, ..config }, None).unwrap();
    assert_ne!(a.modules, c.modules);
}

#[test]
fn synthetic_generation_is_deterministic() {
    let a = generate(&SyntheticKgSpec::medium(4)).unwrap();
    let b = generate(&SyntheticKgSpec::medium(4)).unwrap();
    let edges = |kg: &KnowledgeGraph| {
        kg.edges()
            .map(|(h, r, t, f)| (kg.id(h).to_string(), r, kg.id(t).to_string(), f))
            .collect::<Vec<_>>()
    };
    assert_eq!(edges(&a), edges(&b));
    assert_eq!(a.len(), SyntheticKgSpec::medium(4).entity_count());
}
