use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{loss, EmbeddingTable, KnowledgeModules, TrainError};
use crate::graph::{EntityIdx, KnowledgeGraph};
use crate::nn::{dot, normalize_backward, AdamW, AdamWConfig, ForwardOutput, Matrix, ModuleGrads};
use crate::program::{ground_ids, Program, ProgramError};
use crate::qa::QaInstance;
use crate::real::Real;
use crate::rng::derived;
use crate::schema::RelationId;

/// Supplies the programs used to answer a question.
pub trait ProgramProvider {
    fn programs(&self, inst: &QaInstance) -> Vec<Program>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Also update the embedding table (modules only by default).
    pub train_embeddings: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            lr: 0.001,
            weight_decay: 0.01,
            epochs: 100,
            batch_size: 64,
            train_embeddings: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Mean softmax probability of the correct option after the epoch.
    pub mean_correct_prob: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FinetuneLog {
    pub epochs: Vec<FinetuneEpoch>,
}

struct Prepared<T> {
    z_i: Vec<T>,
    options: Vec<EntityIdx>,
    categories: Vec<(EntityIdx, f64)>,
    correct: usize,
    programs: Vec<Program>,
}

fn softmax<T: Real>(xs: &[T]) -> Vec<T> {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = xs.iter().map(|&x| (x - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn forward_chain<T: Real>(
    program: &Program,
    z_i: &[T],
    modules: &KnowledgeModules<T>,
) -> Result<Vec<ForwardOutput<T>>, TrainError> {
    let mut outs: Vec<ForwardOutput<T>> = Vec::with_capacity(program.len());
    for &rel in &program.relations {
        let m = modules.get(rel).ok_or(ProgramError::MissingModule(rel))?;
        let x = outs.last().map_or(z_i, |o| &o.z_hat[..]);
        let o = m.forward(x)?;
        outs.push(o);
    }
    Ok(outs)
}

fn option_probs<T: Real>(z_f: &[T], options: &[EntityIdx], emb: &EmbeddingTable<T>) -> Vec<T> {
    let cos: Vec<T> = options.iter().map(|&o| dot(z_f, emb.unit(o))).collect();
    softmax(&cos)
}

/// Mean correct-option probability over programs, averaged over questions.
fn mean_correct_prob<T: Real>(
    prepared: &[Prepared<T>],
    modules: &KnowledgeModules<T>,
    emb: &EmbeddingTable<T>,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for p in prepared {
        let mut s = 0.0;
        for prog in &p.programs {
            let outs = forward_chain(prog, &p.z_i, modules)?;
            let z_f = &outs.last().expect("programs are non-empty").z_hat;
            s += option_probs(z_f, &p.options, emb)[p.correct].f64();
        }
        total += s / p.programs.len() as f64;
    }
    Ok(total / prepared.len().max(1) as f64)
}

/// Cross-entropy fine-tuning of every module on the questions' execution
/// paths. The loss of a question is the mean over its programs of
/// `−log softmax(cos(z_f, h(o)))[correct]`.
pub fn vqa_finetune<T: Real>(
    modules: &mut KnowledgeModules<T>,
    embeddings: &mut EmbeddingTable<T>,
    qa: &[QaInstance],
    provider: &dyn ProgramProvider,
    kg: &KnowledgeGraph,
    config: &FinetuneConfig,
) -> Result<FinetuneLog, TrainError> {
    if config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(TrainError::BadConfig(
            "batch_size and lr must be positive".into(),
        ));
    }
    let mut prepared = Vec::with_capacity(qa.len());
    for (i, q) in qa.iter().enumerate() {
        let programs = provider.programs(q);
        if programs.is_empty() {
            return Err(TrainError::NoProgramAvailable(i));
        }
        let options = q
            .options
            .iter()
            .map(|o| {
                kg.idx(o)
                    .map_err(|_| ProgramError::MissingOptionEmbedding(o.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let categories = q
            .grounding
            .categories
            .iter()
            .zip(&q.grounding.scores)
            .map(|(c, &s)| {
                kg.idx(c)
                    .map(|e| (e, s))
                    .map_err(|_| ProgramError::UnknownCategory(c.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        prepared.push(Prepared {
            z_i: ground_ids(&q.grounding, kg, embeddings)?,
            options,
            categories,
            correct: q.correct_index,
            programs,
        });
    }

    let opt_config = AdamWConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    };
    let mut optimizers: BTreeMap<RelationId, AdamW<T>> = BTreeMap::new();
    let mut emb_opt = AdamW::<T>::new(opt_config);
    let mut rng = derived(config.seed, "finetune");
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut log = FinetuneLog::default();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut acc: BTreeMap<RelationId, ModuleGrads<T>> = BTreeMap::new();
            let mut emb_acc = config
                .train_embeddings
                .then(|| Matrix::zeros(embeddings.len(), embeddings.dim()));
            for &i in batch {
                let p = &prepared[i];
                let weight = T::of(1.0 / p.programs.len() as f64);
                for prog in &p.programs {
                    let outs = forward_chain(prog, &p.z_i, modules)?;
                    let z_f = &outs.last().expect("programs are non-empty").z_hat;
                    let probs = option_probs(z_f, &p.options, embeddings);
                    loss_sum += -probs[p.correct].f64().ln() * weight.f64();
                    // ∂L/∂cos_i = p_i − 1[i = correct]
                    let resid: Vec<T> = probs
                        .iter()
                        .enumerate()
                        .map(|(k, &pk)| {
                            (pk - if k == p.correct { T::one() } else { T::zero() }) * weight
                        })
                        .collect();
                    let mut g_hat = alloc::vec![T::zero(); embeddings.dim()];
                    for (&r, &o) in resid.iter().zip(&p.options) {
                        crate::nn::axpy(r, embeddings.unit(o), &mut g_hat);
                        if let Some(e) = emb_acc.as_mut() {
                            crate::nn::axpy(r, z_f, e.row_mut(o.index()));
                        }
                    }
                    for (t, &rel) in prog.relations.iter().enumerate().rev() {
                        let out = &outs[t];
                        let g_z = normalize_backward(&out.z_hat, out.z_norm, &g_hat);
                        let m = modules.get(rel).expect("checked in forward");
                        let a = acc.entry(rel).or_insert_with(|| ModuleGrads::zeros_like(m));
                        g_hat = m.backward_accumulate(&out.cache, &g_z, a);
                    }
                    if let Some(e) = emb_acc.as_mut() {
                        // z_i = normalize(Σ s_k u_k)
                        let mut raw = alloc::vec![T::zero(); embeddings.dim()];
                        for &(c, s) in &p.categories {
                            crate::nn::axpy(T::of(s), embeddings.unit(c), &mut raw);
                        }
                        let g_raw = normalize_backward(&p.z_i, crate::nn::norm(&raw), &g_hat);
                        for &(c, s) in &p.categories {
                            crate::nn::axpy(T::of(s), &g_raw, e.row_mut(c.index()));
                        }
                    }
                }
            }
            let scale = T::of(1.0 / batch.len() as f64);
            for (rel, mut g) in acc {
                g.scale(scale);
                let m = modules.get_mut(rel).expect("module used in forward");
                let opt = optimizers
                    .entry(rel)
                    .or_insert_with(|| AdamW::new(opt_config));
                opt.step(&mut m.slices_mut(), &g.slices())?;
            }
            if let Some(mut g) = emb_acc {
                loss::project_to_tangent(embeddings, &mut g);
                g.scale(scale);
                emb_opt.step(
                    &mut [embeddings.matrix_mut().as_mut_slice()],
                    &[g.as_slice()],
                )?;
                embeddings.renormalize();
                for p in prepared.iter_mut() {
                    let cats: Vec<EntityIdx> = p.categories.iter().map(|c| c.0).collect();
                    let s: Vec<f64> = p.categories.iter().map(|c| c.1).collect();
                    p.z_i = crate::program::ground(&s, &cats, embeddings)?;
                }
            }
        }
        log.epochs.push(FinetuneEpoch {
            epoch,
            mean_loss: loss_sum / prepared.len().max(1) as f64,
            mean_correct_prob: mean_correct_prob(&prepared, modules, embeddings)?,
        });
    }
    Ok(log)
}
