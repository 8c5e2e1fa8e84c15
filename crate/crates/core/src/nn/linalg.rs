use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Matrix { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    /// `out = self · x`
    pub fn matvec_into(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(r), x);
        }
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.rows];
        self.matvec_into(x, &mut out);
        out
    }

    /// `selfᵀ · y`
    pub fn matvec_t(&self, y: &[T]) -> Vec<T> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![T::zero(); self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr != T::zero() {
                axpy(yr, self.row(r), &mut out);
            }
        }
        out
    }

    /// `self += a · u vᵀ`
    pub fn add_outer(&mut self, a: T, u: &[T], v: &[T]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (r, &ur) in u.iter().enumerate() {
            let s = a * ur;
            if s != T::zero() {
                axpy(s, v, self.row_mut(r));
            }
        }
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&mut self, a: T) {
        self.data.iter_mut().for_each(|x| *x = *x * a);
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    // Four partial sums keep the loop vectorizable without changing results
    // between runs.
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] = acc[0] + a[j] * b[j];
        acc[1] = acc[1] + a[j + 1] * b[j + 1];
        acc[2] = acc[2] + a[j + 2] * b[j + 2];
        acc[3] = acc[3] + a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s = s + a[j] * b[j];
    }
    s
}

#[inline]
pub fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

pub fn norm<T: Real>(x: &[T]) -> T {
    dot(x, x).sqrt()
}

/// Unit-norm copy of `x`, or `None` when the norm is below `min_norm`.
pub fn normalize<T: Real>(x: &[T], min_norm: f64) -> Option<Vec<T>> {
    let n = norm(x);
    if n.f64() < min_norm || !n.is_finite() {
        return None;
    }
    Some(x.iter().map(|&v| v / n).collect())
}

pub fn cosine<T: Real>(a: &[T], b: &[T]) -> T {
    let d = norm(a) * norm(b);
    if d == T::zero() {
        T::zero()
    } else {
        dot(a, b) / d
    }
}

/// Gradient through `ẑ = z / |z|`: `(g − ẑ⟨ẑ, g⟩) / |z|`.
pub fn normalize_backward<T: Real>(z_hat: &[T], z_norm: T, grad_hat: &[T]) -> Vec<T> {
    let p = dot(z_hat, grad_hat);
    z_hat
        .iter()
        .zip(grad_hat)
        .map(|(&u, &g)| (g - u * p) / z_norm)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_and_transpose_agree_with_definition() {
        let m = Matrix::from_vec(2, 3, alloc::vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(m.matvec(&[1.0, 0.0, -1.0]), [-2.0, -2.0]);
        assert_eq!(m.matvec_t(&[1.0, -1.0]), [-3.0, -3.0, -3.0]);
        let mut o = Matrix::<f64>::zeros(2, 2);
        o.add_outer(2.0, &[1.0, 2.0], &[3.0, 4.0]);
        assert_eq!(o.as_slice(), &[6.0, 8.0, 12.0, 16.0]);
    }

    #[test]
    fn dot_handles_remainders() {
        let a: Vec<f64> = (0..7).map(|i| i as f64).collect();
        assert_eq!(dot(&a, &a), 91.0);
    }

    #[test]
    fn normalize_rejects_zero() {
        assert!(normalize(&[0.0f64, 0.0], 1e-12).is_none());
        let u = normalize(&[3.0f64, 4.0], 1e-12).unwrap();
        assert!((u[0] - 0.6).abs() < 1e-15 && (u[1] - 0.8).abs() < 1e-15);
    }
}
