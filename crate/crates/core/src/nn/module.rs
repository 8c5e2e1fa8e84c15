use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;
use serde::Serialize;

use super::linalg::{dot, norm, normalize_backward, Matrix};
use super::NnError;
use crate::real::Real;

pub const DEFAULT_HIDDEN: usize = 128;

/// Tolerance on `|x| = 1` for module inputs.
const UNIT_TOL: f64 = 1e-6;
/// Outputs with a smaller norm cannot be normalized.
const MIN_OUTPUT_NORM: f64 = 1e-12;

/// `z = W2 · tanh(W1 · x + b1) + b2`
#[derive(Clone, Debug, PartialEq)]
pub struct RelationModule<T> {
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardCache<T> {
    input: Vec<T>,
    hidden: Vec<T>,
}

impl<T> ForwardCache<T> {
    pub fn is_empty(&self) -> bool {
        self.input.is_empty() || self.hidden.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub z: Vec<T>,
    pub z_hat: Vec<T>,
    pub z_norm: T,
    pub cache: ForwardCache<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModuleGrads<T> {
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
}

impl<T: Real> ModuleGrads<T> {
    pub fn zeros_like(m: &RelationModule<T>) -> Self {
        ModuleGrads {
            w1: Matrix::zeros(m.w1.rows(), m.w1.cols()),
            b1: vec![T::zero(); m.b1.len()],
            w2: Matrix::zeros(m.w2.rows(), m.w2.cols()),
            b2: vec![T::zero(); m.b2.len()],
        }
    }

    pub fn add_assign(&mut self, other: &ModuleGrads<T>) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            super::axpy(T::one(), b, a);
        }
    }

    pub fn scale(&mut self, s: T) {
        for sl in self.slices_mut() {
            sl.iter_mut().for_each(|x| *x = *x * s);
        }
    }

    pub fn slices(&self) -> [&[T]; 4] {
        [self.w1.as_slice(), &self.b1, self.w2.as_slice(), &self.b2]
    }

    pub fn slices_mut(&mut self) -> [&mut [T]; 4] {
        [
            self.w1.as_mut_slice(),
            &mut self.b1,
            self.w2.as_mut_slice(),
            &mut self.b2,
        ]
    }

    pub fn is_zero(&self) -> bool {
        self.slices()
            .iter()
            .all(|s| s.iter().all(|&x| x == T::zero()))
    }
}

impl<T: Real> RelationModule<T> {
    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_hidden: usize, d_out: usize, rng: &mut R) -> Self {
        let mut uniform = |rows: usize, cols: usize| {
            let bound = 1.0 / (cols as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| T::of(rng.gen_range(-bound..bound)))
                .collect();
            Matrix::from_vec(rows, cols, data)
        };
        let w1 = uniform(d_hidden, d_in);
        let w2 = uniform(d_out, d_hidden);
        RelationModule {
            w1,
            b1: vec![T::zero(); d_hidden],
            w2,
            b2: vec![T::zero(); d_out],
        }
    }

    pub fn zeros(d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        RelationModule {
            w1: Matrix::zeros(d_hidden, d_in),
            b1: vec![T::zero(); d_hidden],
            w2: Matrix::zeros(d_out, d_hidden),
            b2: vec![T::zero(); d_out],
        }
    }

    pub fn d_in(&self) -> usize {
        self.w1.cols()
    }

    pub fn d_hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn d_out(&self) -> usize {
        self.w2.rows()
    }

    pub fn parameter_count(&self) -> usize {
        module_parameter_count(self.d_in(), self.d_hidden(), self.d_out())
    }

    pub fn slices(&self) -> [&[T]; 4] {
        [self.w1.as_slice(), &self.b1, self.w2.as_slice(), &self.b2]
    }

    pub fn slices_mut(&mut self) -> [&mut [T]; 4] {
        [
            self.w1.as_mut_slice(),
            &mut self.b1,
            self.w2.as_mut_slice(),
            &mut self.b2,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|s| s.iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> RelationModule<U> {
        let c = |v: &Vec<T>| v.iter().map(|&x| U::of(x.f64())).collect();
        RelationModule {
            w1: self.w1.map(|x| U::of(x.f64())),
            b1: c(&self.b1),
            w2: self.w2.map(|x| U::of(x.f64())),
            b2: c(&self.b2),
        }
    }

    /// Unnormalized output and cache; no precondition on `x`.
    pub fn forward_raw(&self, x: &[T]) -> (Vec<T>, ForwardCache<T>) {
        let mut hidden = self.w1.matvec(x);
        for (h, &b) in hidden.iter_mut().zip(&self.b1) {
            *h = (*h + b).tanh();
        }
        let mut z = self.w2.matvec(&hidden);
        for (zi, &b) in z.iter_mut().zip(&self.b2) {
            *zi = *zi + b;
        }
        (
            z,
            ForwardCache {
                input: x.to_vec(),
                hidden,
            },
        )
    }

    /// Forward pass on a unit-norm input, returning `z` and `ẑ = z/|z|`.
    pub fn forward(&self, x: &[T]) -> Result<ForwardOutput<T>, NnError> {
        if x.len() != self.d_in() {
            return Err(NnError::ShapeMismatch {
                expected: self.d_in(),
                got: x.len(),
            });
        }
        let xn = norm(x).f64();
        if (xn - 1.0).abs() > UNIT_TOL {
            return Err(NnError::NonUnitInput(xn));
        }
        let (z, cache) = self.forward_raw(x);
        let z_norm = norm(&z);
        if !(z_norm.f64() >= MIN_OUTPUT_NORM) {
            return Err(NnError::DegenerateOutput(z_norm.f64()));
        }
        let z_hat = z.iter().map(|&v| v / z_norm).collect();
        Ok(ForwardOutput {
            z,
            z_hat,
            z_norm,
            cache,
        })
    }

    /// Normalized output only.
    pub fn apply(&self, x: &[T]) -> Result<Vec<T>, NnError> {
        self.forward(x).map(|o| o.z_hat)
    }

    /// Reverse pass for an upstream gradient on `z`; returns parameter
    /// gradients and the gradient on the input.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        grad_z: &[T],
    ) -> Result<(ModuleGrads<T>, Vec<T>), NnError> {
        if cache.is_empty() {
            return Err(NnError::MissingForwardCache);
        }
        if grad_z.len() != self.d_out() {
            return Err(NnError::ShapeMismatch {
                expected: self.d_out(),
                got: grad_z.len(),
            });
        }
        let mut g = ModuleGrads::zeros_like(self);
        let gx = self.backward_accumulate(cache, grad_z, &mut g);
        Ok((g, gx))
    }

    /// Adds this pass's parameter gradients into `acc`; returns the input
    /// gradient.
    pub fn backward_accumulate(
        &self,
        cache: &ForwardCache<T>,
        grad_z: &[T],
        acc: &mut ModuleGrads<T>,
    ) -> Vec<T> {
        super::axpy(T::one(), grad_z, &mut acc.b2);
        acc.w2.add_outer(T::one(), grad_z, &cache.hidden);
        let gh = self.w2.matvec_t(grad_z);
        // tanh' = 1 - tanh²
        let ga: Vec<T> = gh
            .iter()
            .zip(&cache.hidden)
            .map(|(&g, &h)| g * (T::one() - h * h))
            .collect();
        super::axpy(T::one(), &ga, &mut acc.b1);
        acc.w1.add_outer(T::one(), &ga, &cache.input);
        self.w1.matvec_t(&ga)
    }
}

pub fn module_parameter_count(d_in: usize, d_hidden: usize, d_out: usize) -> usize {
    d_hidden * d_in + d_hidden + d_out * d_hidden + d_out
}

pub fn total_parameter_count(modules: usize, dim: usize, hidden: usize) -> usize {
    modules * module_parameter_count(dim, hidden, dim)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst relative error per parameter block (`w1`, `b1`, `w2`, `b2`, `x`).
    pub per_parameter: Vec<(String, f64)>,
}

/// Compares analytic gradients of `f(x) = ⟨c, ẑ(x)⟩` against central finite
/// differences with step `h`.
pub fn grad_check(
    module: &RelationModule<f64>,
    x: &[f64],
    c: &[f64],
    h: f64,
) -> Result<GradCheckReport, NnError> {
    let objective = |m: &RelationModule<f64>, x: &[f64]| -> f64 {
        let (z, _) = m.forward_raw(x);
        let n = norm(&z);
        dot(&z, c) / n
    };
    let out = module.forward(x)?;
    let g_hat = normalize_backward(&out.z_hat, out.z_norm, c);
    let (grads, gx) = module.backward(&out.cache, &g_hat)?;

    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
    let names = ["w1", "b1", "w2", "b2"];
    let mut per_parameter = Vec::new();
    let mut probe = module.clone();
    for (k, name) in names.iter().enumerate() {
        let analytic = grads.slices()[k];
        let mut worst: f64 = 0.0;
        for i in 0..analytic.len() {
            let orig = probe.slices()[k][i];
            probe.slices_mut()[k][i] = orig + h;
            let fp = objective(&probe, x);
            probe.slices_mut()[k][i] = orig - h;
            let fm = objective(&probe, x);
            probe.slices_mut()[k][i] = orig;
            worst = worst.max(rel(analytic[i], (fp - fm) / (2.0 * h)));
        }
        per_parameter.push((String::from(*name), worst));
    }
    let mut xp = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = objective(module, &xp);
        xp[i] = orig - h;
        let fm = objective(module, &xp);
        xp[i] = orig;
        worst = worst.max(rel(gx[i], (fp - fm) / (2.0 * h)));
    }
    per_parameter.push((String::from("x"), worst));
    let max_rel_error = per_parameter.iter().map(|p| p.1).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_parameter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, unit_vector};

    #[test]
    fn bias_only_forward() {
        let mut m = RelationModule::<f64>::zeros(3, 2, 3);
        m.b2 = alloc::vec![1.0, 0.0, 0.0];
        let out = m.forward(&[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(out.z_hat, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn all_zero_module_is_degenerate() {
        let m = RelationModule::<f64>::zeros(3, 2, 3);
        assert!(matches!(
            m.forward(&[1.0, 0.0, 0.0]),
            Err(NnError::DegenerateOutput(_))
        ));
    }

    #[test]
    fn rejects_non_unit_input() {
        let m = RelationModule::<f64>::init(3, 2, 3, &mut seeded(1));
        assert!(matches!(
            m.forward(&[1.0, 1.0, 0.0]),
            Err(NnError::NonUnitInput(_))
        ));
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let mut rng = seeded(42);
        let m = RelationModule::<f64>::init(16, 8, 16, &mut rng);
        let x: Vec<f64> = unit_vector(&mut rng, 16);
        let got = m.forward(&x).unwrap().z;
        // Independent scalar loops over the raw parameter arrays.
        let (w1, w2) = (m.w1.as_slice(), m.w2.as_slice());
        let mut expect = [0.0f64; 16];
        let mut hidden = [0.0f64; 8];
        for j in 0..8 {
            let mut a = m.b1[j];
            for i in 0..16 {
                a += w1[j * 16 + i] * x[i];
            }
            hidden[j] = libm_tanh(a);
        }
        for k in 0..16 {
            let mut a = m.b2[k];
            for j in 0..8 {
                a += w2[k * 8 + j] * hidden[j];
            }
            expect[k] = a;
        }
        for k in 0..16 {
            assert!((got[k] - expect[k]).abs() < 1e-10);
        }
    }

    fn libm_tanh(a: f64) -> f64 {
        let e = num_traits::Float::exp(2.0 * a);
        (e - 1.0) / (e + 1.0)
    }

    #[test]
    fn gradcheck_random_modules() {
        let mut rng = seeded(7);
        for _ in 0..5 {
            let mut m = RelationModule::<f64>::init(16, 8, 16, &mut rng);
            for b in m.b1.iter_mut().chain(m.b2.iter_mut()) {
                *b = rng.gen_range(-0.5..0.5);
            }
            let x: Vec<f64> = unit_vector(&mut rng, 16);
            let c: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let report = grad_check(&m, &x, &c, 1e-5).unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = seeded(3);
        let m = RelationModule::<f64>::init(4, 3, 4, &mut rng);
        let x: Vec<f64> = unit_vector(&mut rng, 4);
        let out = m.forward(&x).unwrap();
        let (g, gx) = m.backward(&out.cache, &[0.0; 4]).unwrap();
        assert!(g.is_zero());
        assert!(gx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn squared_norm_gradient_on_b2_is_two_z() {
        // f = |z|², so df/db2 = 2z directly (no normalization on this path).
        let mut rng = seeded(11);
        let mut m = RelationModule::<f64>::init(2, 2, 2, &mut rng);
        m.b2 = alloc::vec![0.3, -0.2];
        let x = [0.6, 0.8];
        let out = m.forward(&x).unwrap();
        let upstream: Vec<f64> = out.z.iter().map(|v| 2.0 * v).collect();
        let (g, _) = m.backward(&out.cache, &upstream).unwrap();
        // Hand derivation for d = 2.
        let h0 = libm_tanh(m.w1.get(0, 0) * 0.6 + m.w1.get(0, 1) * 0.8);
        let h1 = libm_tanh(m.w1.get(1, 0) * 0.6 + m.w1.get(1, 1) * 0.8);
        let z0 = m.w2.get(0, 0) * h0 + m.w2.get(0, 1) * h1 + 0.3;
        let z1 = m.w2.get(1, 0) * h0 + m.w2.get(1, 1) * h1 - 0.2;
        assert!((g.b2[0] - 2.0 * z0).abs() < 1e-12);
        assert!((g.b2[1] - 2.0 * z1).abs() < 1e-12);
    }

    #[test]
    fn backward_without_cache_fails() {
        let m = RelationModule::<f64>::zeros(2, 2, 2);
        assert_eq!(
            m.backward(&ForwardCache::default(), &[1.0, 0.0])
                .unwrap_err(),
            NnError::MissingForwardCache
        );
    }

    #[test]
    fn parameter_accounting() {
        assert_eq!(module_parameter_count(512, 128, 512), 131_712);
        assert_eq!(total_parameter_count(16, 512, 128), 2_107_392);
    }
}
