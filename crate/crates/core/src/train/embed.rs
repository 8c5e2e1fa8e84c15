use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::graph::EntityIdx;
use crate::nn::{norm, normalize, Matrix};
use crate::real::Real;
use crate::rng::unit_vector;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    Frozen,
    /// Randomly initialized and learned with the modules.
    #[default]
    Trainable,
    /// Loaded from a file, then learned with the modules.
    Loaded,
}

impl EmbeddingMode {
    pub fn is_trainable(self) -> bool {
        !matches!(self, EmbeddingMode::Frozen)
    }
}

/// One row per graph entity, always stored at unit norm.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable<T> {
    pub mode: EmbeddingMode,
    rows: Matrix<T>,
}

impl<T: Real> EmbeddingTable<T> {
    pub fn random<R: Rng + ?Sized>(n: usize, dim: usize, mode: EmbeddingMode, rng: &mut R) -> Self {
        let mut data = Vec::with_capacity(n * dim);
        for _ in 0..n {
            data.extend(unit_vector::<T, _>(rng, dim));
        }
        EmbeddingTable {
            mode,
            rows: Matrix::from_vec(n, dim, data),
        }
    }

    /// Normalizes each row; zero rows are rejected. Rows already at unit
    /// norm are kept bit for bit.
    pub fn from_rows(rows: &[Vec<T>], mode: EmbeddingMode) -> Result<Self, TrainError> {
        let dim = rows.first().map_or(0, Vec::len);
        if dim == 0 {
            return Err(TrainError::BadEmbeddings("empty table".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(TrainError::BadEmbeddings(alloc::format!(
                    "row {i} has {} columns, expected {dim}",
                    r.len()
                )));
            }
            if (norm(r).f64() - 1.0).abs() <= 1e-6 {
                data.extend_from_slice(r);
                continue;
            }
            let u = normalize(r, 1e-12)
                .ok_or_else(|| TrainError::BadEmbeddings(alloc::format!("row {i} is zero")))?;
            data.extend(u);
        }
        Ok(EmbeddingTable {
            mode,
            rows: Matrix::from_vec(rows.len(), dim, data),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    /// Unit-norm view of an entity's row.
    pub fn unit(&self, idx: EntityIdx) -> &[T] {
        self.rows.row(idx.index())
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.rows
    }

    pub(crate) fn matrix_mut(&mut self) -> &mut Matrix<T> {
        &mut self.rows
    }

    pub fn renormalize(&mut self) {
        for r in 0..self.len() {
            let row = self.rows.row_mut(r);
            if let Some(u) = normalize(row, 1e-12) {
                row.copy_from_slice(&u);
            }
        }
    }

    pub fn cast<U: Real>(&self) -> EmbeddingTable<U> {
        EmbeddingTable {
            mode: self.mode,
            rows: self.rows.map(|x| U::of(x.f64())),
        }
    }

    /// Dot products of every row with `q`.
    pub fn scores(&self, q: &[T]) -> Vec<T> {
        self.rows.matvec(q)
    }
}
