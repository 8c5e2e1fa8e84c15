//! Contrastive training of one module per relation, separation monitoring
//! and end-to-end fine-tuning on multiple-choice questions.

mod embed;
mod finetune;
mod loss;
mod separation;

pub use embed::{EmbeddingMode, EmbeddingTable};
pub use finetune::{vqa_finetune, FinetuneConfig, FinetuneLog, ProgramProvider};
pub use loss::{contrastive_loss, multi_positive_loss, ContrastiveLoss};
pub use separation::{separation_report, SeparationRecord, SeparationReport, SeparationSummary};

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{EntityIdx, KnowledgeGraph};
use crate::nn::{AdamW, AdamWConfig, Matrix, ModuleGrads, NnError, RelationModule, DEFAULT_HIDDEN};
use crate::real::{Precision, Real};
use crate::rng::derived;
use crate::schema::RelationId;

#[derive(Clone, Debug, PartialEq, Error)]
pub enum TrainError {
    #[error("knowledge graph has no entities")]
    EmptyGraph,
    #[error("knowledge graph must be frozen before training")]
    NotFrozen,
    #[error("{head} has no tails under {relation}")]
    EmptyPositiveSet { head: String, relation: String },
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("invalid embedding table: {0}")]
    BadEmbeddings(String),
    #[error("no executable program for question {0}")]
    NoProgramAvailable(usize),
    #[error("program execution failed: {0}")]
    Program(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dim: usize,
    pub hidden: usize,
    /// Heads per batch; every batch holds a single relation.
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub temperature: f64,
    pub seed: u64,
    pub embedding_mode: EmbeddingMode,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 512,
            hidden: DEFAULT_HIDDEN,
            batch_size: 256,
            lr: 0.01,
            weight_decay: 0.01,
            epochs: 100,
            temperature: 0.07,
            seed: 0,
            embedding_mode: EmbeddingMode::Trainable,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::BadConfig(m.into()));
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.dim == 0 || self.hidden == 0 {
            return bad("dim and hidden must be positive");
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr must be positive and weight_decay non-negative");
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// One module per relation, including relations that had nothing to train on.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeModules<T> {
    modules: BTreeMap<RelationId, RelationModule<T>>,
    untrained: BTreeSet<RelationId>,
}

impl<T> Default for KnowledgeModules<T> {
    fn default() -> Self {
        KnowledgeModules {
            modules: BTreeMap::new(),
            untrained: BTreeSet::new(),
        }
    }
}

impl<T: Real> KnowledgeModules<T> {
    pub fn insert(&mut self, rel: RelationId, module: RelationModule<T>, trained: bool) {
        self.modules.insert(rel, module);
        if trained {
            self.untrained.remove(&rel);
        } else {
            self.untrained.insert(rel);
        }
    }

    pub fn get(&self, rel: RelationId) -> Option<&RelationModule<T>> {
        self.modules.get(&rel)
    }

    pub fn get_mut(&mut self, rel: RelationId) -> Option<&mut RelationModule<T>> {
        self.modules.get_mut(&rel)
    }

    pub fn is_trained(&self, rel: RelationId) -> bool {
        self.modules.contains_key(&rel) && !self.untrained.contains(&rel)
    }

    pub fn untrained(&self) -> impl Iterator<Item = RelationId> + '_ {
        self.untrained.iter().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (RelationId, &RelationModule<T>)> {
        self.modules.iter().map(|(r, m)| (*r, m))
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.modules
            .values()
            .map(RelationModule::parameter_count)
            .sum()
    }

    pub fn cast<U: Real>(&self) -> KnowledgeModules<U> {
        KnowledgeModules {
            modules: self.modules.iter().map(|(r, m)| (*r, m.cast())).collect(),
            untrained: self.untrained.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub epoch: usize,
    pub relation: RelationId,
    pub mean_loss: Option<f64>,
    pub n_examples: usize,
    #[serde(default, skip_serializing_if = "core::ops::Not::not")]
    pub untrained: bool,
}

#[derive(Clone, Debug)]
pub struct Trained<T> {
    pub modules: KnowledgeModules<T>,
    pub embeddings: EmbeddingTable<T>,
    pub log: Vec<LogEntry>,
}

impl<T: Real> Trained<T> {
    /// Last logged mean loss per relation.
    pub fn final_losses(&self) -> BTreeMap<RelationId, f64> {
        self.log
            .iter()
            .filter_map(|e| e.mean_loss.map(|l| (e.relation, l)))
            .collect()
    }
}

/// Trains a module for every relation and inverse relation of the schema.
///
/// Each epoch shuffles the heads of every relation, cuts them into batches
/// and shuffles the batch order. The softmax denominator always spans the
/// whole entity table.
pub fn train<T: Real>(
    kg: &KnowledgeGraph,
    config: &TrainConfig,
    embeddings: Option<EmbeddingTable<T>>,
) -> Result<Trained<T>, TrainError> {
    config.validate()?;
    if kg.is_empty() {
        return Err(TrainError::EmptyGraph);
    }
    if !kg.is_frozen() {
        return Err(TrainError::NotFrozen);
    }
    let n = kg.len();
    let mut embeddings = match embeddings {
        Some(e) if e.len() != n || e.dim() != config.dim => {
            return Err(TrainError::BadEmbeddings(alloc::format!(
                "table is {}x{}, graph needs {}x{}",
                e.len(),
                e.dim(),
                n,
                config.dim
            )))
        }
        Some(e) => e,
        None => EmbeddingTable::random(
            n,
            config.dim,
            config.embedding_mode,
            &mut derived(config.seed, "embeddings"),
        ),
    };

    let mut modules = KnowledgeModules::default();
    let mut heads: BTreeMap<RelationId, Vec<EntityIdx>> = BTreeMap::new();
    for rel in RelationId::all() {
        let mut rng = derived(config.seed, rel.name());
        let module = RelationModule::init(config.dim, config.hidden, config.dim, &mut rng);
        let hs: Vec<EntityIdx> = kg.heads(rel).collect();
        modules.insert(rel, module, !hs.is_empty());
        if !hs.is_empty() {
            heads.insert(rel, hs);
        }
    }

    let mut optimizers: BTreeMap<RelationId, AdamW<T>> = heads
        .keys()
        .map(|r| (*r, AdamW::new(config.optimizer())))
        .collect();
    let trainable = embeddings.mode.is_trainable();
    let mut emb_opt = AdamW::<T>::new(config.optimizer());
    let mut shuffle = derived(config.seed, "batches");
    let mut mask = vec![false; n];
    let mut log = Vec::new();

    for epoch in 1..=config.epochs {
        let mut batches: Vec<(RelationId, Vec<EntityIdx>)> = Vec::new();
        for (rel, hs) in &heads {
            let mut hs = hs.clone();
            hs.shuffle(&mut shuffle);
            batches.extend(hs.chunks(config.batch_size).map(|c| (*rel, c.to_vec())));
        }
        batches.shuffle(&mut shuffle);

        let mut sums: BTreeMap<RelationId, (f64, usize)> = BTreeMap::new();
        for (rel, batch) in batches {
            let module = modules.get(rel).expect("module exists for every relation");
            let mut acc = ModuleGrads::zeros_like(module);
            let mut emb_acc = trainable.then(|| Matrix::zeros(n, config.dim));
            let mut total = 0.0;
            for &h in &batch {
                let l = loss::accumulate_example(
                    module,
                    &embeddings,
                    kg,
                    h,
                    rel,
                    config.temperature,
                    &mut mask,
                    &mut acc,
                    emb_acc.as_mut(),
                )?;
                total += l.f64();
            }
            let scale = T::of(1.0 / batch.len() as f64);
            acc.scale(scale);
            let module = modules
                .get_mut(rel)
                .expect("module exists for every relation");
            let opt = optimizers
                .get_mut(&rel)
                .expect("optimizer per trained relation");
            opt.step(&mut module.slices_mut(), &acc.slices())?;
            if let Some(mut g) = emb_acc {
                loss::project_to_tangent(&embeddings, &mut g);
                g.scale(scale);
                emb_opt.step(
                    &mut [embeddings.matrix_mut().as_mut_slice()],
                    &[g.as_slice()],
                )?;
                embeddings.renormalize();
            }
            let s = sums.entry(rel).or_insert((0.0, 0));
            s.0 += total;
            s.1 += batch.len();
        }

        for rel in RelationId::all() {
            match sums.get(&rel) {
                Some(&(total, count)) => log.push(LogEntry {
                    epoch,
                    relation: rel,
                    mean_loss: Some(total / count as f64),
                    n_examples: count,
                    untrained: false,
                }),
                None if epoch == 1 => log.push(LogEntry {
                    epoch,
                    relation: rel,
                    mean_loss: None,
                    n_examples: 0,
                    untrained: true,
                }),
                None => {}
            }
        }
    }

    Ok(Trained {
        modules,
        embeddings,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixture::toy;
    use crate::nn::{dot, norm};
    use crate::rng::seeded;

    fn small_config() -> TrainConfig {
        TrainConfig {
            dim: 32,
            hidden: 16,
            epochs: 3,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn equal_similarities_give_log_ratio() {
        let logits = [0.3f64; 10];
        let mut pos = [false; 10];
        pos[2] = true;
        pos[7] = true;
        assert!((multi_positive_loss(&logits, &pos) - 5f64.ln()).abs() < 1e-12);
        assert!(multi_positive_loss(&logits, &[true; 10]).abs() < 1e-12);
    }

    #[test]
    fn residual_sums_to_zero() {
        let logits = [0.1f64, 2.0, -1.0, 0.5];
        let (_, r) = loss::loss_and_residual(&logits, &[true, false, true, false]);
        assert!(r.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn fixture_loss_matches_straight_line_oracle() {
        let kg = toy();
        let emb =
            EmbeddingTable::<f64>::random(kg.len(), 16, EmbeddingMode::Frozen, &mut seeded(3));
        let module = RelationModule::<f64>::init(16, 8, 16, &mut seeded(4));
        let head = kg.idx("pour_water").unwrap();
        let got = contrastive_loss(&module, &emb, head, RelationId::HAS_TOOL, &kg, 0.07).unwrap();

        // Recompute from raw arrays: forward, normalize, cosine logits, loss.
        let x = emb.unit(head);
        let mut h = [0.0f64; 8];
        for j in 0..8 {
            let mut a = module.b1[j];
            for i in 0..16 {
                a += module.w1.get(j, i) * x[i];
            }
            h[j] = a.tanh();
        }
        let mut z = [0.0f64; 16];
        for k in 0..16 {
            z[k] = module.b2[k] + (0..8).map(|j| module.w2.get(k, j) * h[j]).sum::<f64>();
        }
        let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let positives = ["kettle", "cup"];
        let (mut num, mut den) = (0.0, 0.0);
        for (idx, e) in kg.entities() {
            let s = (0..16).map(|k| z[k] / zn * emb.unit(idx)[k]).sum::<f64>();
            let w = (s / 0.07).exp();
            den += w;
            if positives.contains(&e.id.as_str()) {
                num += w;
            }
        }
        assert!((got.loss - (-(num / den).ln())).abs() < 1e-8);
        assert!(got.embedding_grads.is_none());
    }

    #[test]
    fn embedding_gradients_match_finite_differences() {
        let kg = toy();
        let mut emb =
            EmbeddingTable::<f64>::random(kg.len(), 8, EmbeddingMode::Trainable, &mut seeded(5));
        let module = RelationModule::<f64>::init(8, 6, 8, &mut seeded(6));
        let head = kg.idx("boil_water").unwrap();
        let rel = RelationId::HAS_NEXT_STEP;
        let g = contrastive_loss(&module, &emb, head, rel, &kg, 0.5).unwrap();
        let grads = g.embedding_grads.unwrap();
        // Perturb along a tangent direction of each row, then renormalize.
        let mut rng = seeded(8);
        for r in [0usize, 5, 6, 9] {
            let u = emb.matrix().row(r).to_vec();
            let mut v: Vec<f64> = crate::rng::unit_vector(&mut rng, 8);
            let p = dot(&u, &v);
            v.iter_mut().zip(&u).for_each(|(vi, ui)| *vi -= ui * p);
            let vn = norm(&v);
            v.iter_mut().for_each(|vi| *vi /= vn);
            let eps = 1e-6;
            let mut eval = |sign: f64| {
                let row = emb.matrix_mut().row_mut(r);
                for k in 0..8 {
                    row[k] = u[k] + sign * eps * v[k];
                }
                emb.renormalize();
                let l = contrastive_loss(&module, &emb, head, rel, &kg, 0.5)
                    .unwrap()
                    .loss;
                emb.matrix_mut().row_mut(r).copy_from_slice(&u);
                l
            };
            let numeric = (eval(1.0) - eval(-1.0)) / (2.0 * eps);
            let analytic = dot(grads.row(r), &v);
            assert!(
                (numeric - analytic).abs() < 1e-5 * (1.0 + numeric.abs()),
                "row {r}: {numeric} vs {analytic}"
            );
        }
    }

    #[test]
    fn empty_positive_set_is_an_error() {
        let kg = toy();
        let emb = EmbeddingTable::<f64>::random(kg.len(), 8, EmbeddingMode::Frozen, &mut seeded(1));
        let module = RelationModule::<f64>::init(8, 4, 8, &mut seeded(2));
        let kettle = kg.idx("kettle").unwrap();
        assert!(matches!(
            contrastive_loss(&module, &emb, kettle, RelationId::HAS_TOOL, &kg, 0.07),
            Err(TrainError::EmptyPositiveSet { .. })
        ));
    }

    #[test]
    fn zero_epochs_leaves_initialization() {
        let kg = toy();
        let config = TrainConfig {
            epochs: 0,
            ..small_config()
        };
        let a = train::<f32>(&kg, &config, None).unwrap();
        assert!(a.log.is_empty());
        let b = train::<f32>(
            &kg,
            &TrainConfig {
                epochs: 1,
                ..config.clone()
            },
            None,
        )
        .unwrap();
        let init = RelationModule::<f32>::init(32, 16, 32, &mut derived(7, "HAS_TOOL"));
        assert_eq!(a.modules.get(RelationId::HAS_TOOL), Some(&init));
        assert_ne!(b.modules.get(RelationId::HAS_TOOL), Some(&init));
    }

    #[test]
    fn relations_without_triplets_are_flagged() {
        let kg = toy();
        let t = train::<f32>(&kg, &small_config(), None).unwrap();
        assert_eq!(t.modules.len(), RelationId::COUNT);
        let untrained: Vec<_> = t.modules.untrained().collect();
        assert!(untrained.contains(&RelationId::HAS_ACTION));
        assert!(!untrained.contains(&RelationId::HAS_TOOL));
        let flagged: Vec<_> = t
            .log
            .iter()
            .filter(|e| e.untrained)
            .map(|e| e.relation)
            .collect();
        assert_eq!(flagged, untrained);
        assert!(t.log.iter().all(|e| e.untrained || e.n_examples > 0));
    }

    #[test]
    fn training_is_deterministic_in_f64() {
        let kg = toy();
        let config = TrainConfig {
            precision: Precision::F64,
            ..small_config()
        };
        let a = train::<f64>(&kg, &config, None).unwrap();
        let b = train::<f64>(&kg, &config, None).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.modules, b.modules);
        assert_eq!(a.embeddings, b.embeddings);
    }

    #[test]
    fn rejects_bad_config() {
        let kg = toy();
        let c = TrainConfig {
            temperature: 0.0,
            ..small_config()
        };
        assert!(matches!(
            train::<f32>(&kg, &c, None),
            Err(TrainError::BadConfig(_))
        ));
        let c = TrainConfig {
            batch_size: 0,
            ..small_config()
        };
        assert!(matches!(
            train::<f32>(&kg, &c, None),
            Err(TrainError::BadConfig(_))
        ));
    }

    #[test]
    fn has_tool_converges_below_separation_threshold() {
        let kg = toy();
        let config = TrainConfig {
            epochs: 200,
            seed: 7,
            ..TrainConfig::default()
        };
        let t = train::<f32>(&kg, &config, None).unwrap();
        let rel = RelationId::HAS_TOOL;
        let heads: Vec<_> = kg.heads(rel).collect();
        let max_y = heads
            .iter()
            .map(|&h| kg.tails(h, rel).count())
            .max()
            .unwrap();
        let threshold = (1.0 + 1.0 / max_y as f64).ln();
        let module = t.modules.get(rel).unwrap();
        let below = heads
            .iter()
            .filter(|&&h| {
                let l = contrastive_loss(module, &t.embeddings, h, rel, &kg, config.temperature)
                    .unwrap();
                l.loss.f64() < threshold
            })
            .count();
        assert!(below * 10 >= heads.len() * 9, "{below}/{}", heads.len());
    }
}
