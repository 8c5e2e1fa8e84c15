use alloc::vec;
use alloc::vec::Vec;

use super::{EmbeddingTable, TrainError};
use crate::graph::{EntityIdx, KnowledgeGraph};
use crate::nn::{normalize_backward, Matrix, ModuleGrads, RelationModule};
use crate::real::Real;
use crate::schema::RelationId;

fn log_sum_exp<T: Real>(xs: impl Iterator<Item = T> + Clone) -> T {
    let m = xs.clone().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<T>().ln()
}

/// `LSE(logits) − LSE(logits over positives)`.
pub fn multi_positive_loss<T: Real>(logits: &[T], positive: &[bool]) -> T {
    let all = log_sum_exp(logits.iter().copied());
    let pos = log_sum_exp(logits.iter().zip(positive).filter(|p| *p.1).map(|p| *p.0));
    all - pos
}

/// Loss plus `∂L/∂logit = p − q`, with `p` the softmax over all logits and
/// `q` the softmax restricted to positives.
pub(crate) fn loss_and_residual<T: Real>(logits: &[T], positive: &[bool]) -> (T, Vec<T>) {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z_all: T = e.iter().copied().sum();
    let z_pos: T = e.iter().zip(positive).filter(|p| *p.1).map(|p| *p.0).sum();
    let loss = z_all.ln() - z_pos.ln();
    let residual = e
        .iter()
        .zip(positive)
        .map(|(&ei, &pos)| ei / z_all - if pos { ei / z_pos } else { T::zero() })
        .collect();
    (loss, residual)
}

/// Loss of one head with gradients for the module and, when the table is
/// trainable, for the embedding rows.
#[derive(Clone, Debug)]
pub struct ContrastiveLoss<T> {
    pub loss: T,
    pub module_grads: ModuleGrads<T>,
    /// Gradient with respect to the stored (unit) rows, projected onto the
    /// tangent space of the sphere.
    pub embedding_grads: Option<Matrix<T>>,
}

pub fn contrastive_loss<T: Real>(
    module: &RelationModule<T>,
    embeddings: &EmbeddingTable<T>,
    head: EntityIdx,
    relation: RelationId,
    kg: &KnowledgeGraph,
    tau: f64,
) -> Result<ContrastiveLoss<T>, TrainError> {
    let mut module_grads = ModuleGrads::zeros_like(module);
    let mut emb = embeddings
        .mode
        .is_trainable()
        .then(|| Matrix::zeros(embeddings.len(), embeddings.dim()));
    let mut mask = vec![false; embeddings.len()];
    let loss = accumulate_example(
        module,
        embeddings,
        kg,
        head,
        relation,
        tau,
        &mut mask,
        &mut module_grads,
        emb.as_mut(),
    )?;
    if let Some(g) = emb.as_mut() {
        project_to_tangent(embeddings, g);
    }
    Ok(ContrastiveLoss {
        loss,
        module_grads,
        embedding_grads: emb,
    })
}

/// Adds one example's gradients into the accumulators and returns its loss.
/// `mask` is scratch space of length `|X|`, left all-false on return.
#[allow(clippy::too_many_arguments)]
pub(crate) fn accumulate_example<T: Real>(
    module: &RelationModule<T>,
    embeddings: &EmbeddingTable<T>,
    kg: &KnowledgeGraph,
    head: EntityIdx,
    relation: RelationId,
    tau: f64,
    mask: &mut [bool],
    module_acc: &mut ModuleGrads<T>,
    emb_acc: Option<&mut Matrix<T>>,
) -> Result<T, TrainError> {
    let mut any = false;
    for t in kg.tails(head, relation) {
        mask[t.index()] = true;
        any = true;
    }
    if !any {
        return Err(TrainError::EmptyPositiveSet {
            head: kg.id(head).into(),
            relation: relation.name().into(),
        });
    }
    let out = module.forward(embeddings.unit(head))?;
    let inv_tau = T::of(1.0 / tau);
    let logits: Vec<T> = embeddings
        .scores(&out.z_hat)
        .into_iter()
        .map(|s| s * inv_tau)
        .collect();
    let (loss, residual) = loss_and_residual(&logits, mask);
    mask.iter_mut().for_each(|m| *m = false);

    let mut g_hat = embeddings.matrix().matvec_t(&residual);
    g_hat.iter_mut().for_each(|g| *g = *g * inv_tau);
    let g_z = normalize_backward(&out.z_hat, out.z_norm, &g_hat);
    let g_x = module.backward_accumulate(&out.cache, &g_z, module_acc);
    if let Some(acc) = emb_acc {
        let scaled: Vec<T> = residual.iter().map(|&r| r * inv_tau).collect();
        acc.add_outer(T::one(), &scaled, &out.z_hat);
        let row = acc.row_mut(head.index());
        for (a, g) in row.iter_mut().zip(&g_x) {
            *a = *a + *g;
        }
    }
    Ok(loss)
}

/// Rows are unit vectors, so the gradient through `r/|r|` at `|r| = 1` is the
/// tangent projection `g − u⟨u, g⟩`.
pub(crate) fn project_to_tangent<T: Real>(embeddings: &EmbeddingTable<T>, grads: &mut Matrix<T>) {
    for r in 0..grads.rows() {
        let u = embeddings.matrix().row(r);
        let g = grads.row_mut(r);
        let p = crate::nn::dot(u, g);
        for (gi, &ui) in g.iter_mut().zip(u) {
            *gi = *gi - ui * p;
        }
    }
}
