use alloc::vec::Vec;
use num_traits::Float;

use super::linalg::Matrix;
use super::module::RelationModule;
use crate::real::Real;
use crate::rng;

#[derive(Clone, Copy, Debug)]
pub struct PowerIteration {
    pub rel_tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for PowerIteration {
    fn default() -> Self {
        PowerIteration {
            rel_tol: 1e-6,
            max_iter: 500,
            seed: 0x5eed,
        }
    }
}

/// Largest singular value of `m` by power iteration on `mᵀm`, in `f64`.
pub fn spectral_norm<T: Real>(m: &Matrix<T>, opts: PowerIteration) -> f64 {
    let m = m.map(|x| x.f64());
    if m.rows() == 0 || m.cols() == 0 || m.as_slice().iter().all(|&x| x == 0.0) {
        return 0.0;
    }
    let mut v: Vec<f64> = rng::unit_vector(&mut rng::seeded(opts.seed), m.cols());
    let mut sigma = 0.0;
    for _ in 0..opts.max_iter {
        let u = m.matvec(&v);
        let w = m.matvec_t(&u);
        let wn: f64 = super::norm(&w);
        if wn == 0.0 {
            // Start vector landed in the null space; nudge it.
            v = rng::unit_vector(&mut rng::seeded(opts.seed.wrapping_add(1)), m.cols());
            continue;
        }
        let next = wn.sqrt();
        v = w.iter().map(|x| x / wn).collect();
        let done = (next - sigma).abs() <= opts.rel_tol * next;
        sigma = next;
        if done {
            break;
        }
    }
    // Rayleigh quotient on the final vector is slightly sharper.
    super::norm(&m.matvec(&v)).max(sigma)
}

/// `‖W2‖₂·‖W1‖₂`; tanh is 1-Lipschitz so this bounds the unnormalized map.
pub fn lipschitz_upper_bound<T: Real>(module: &RelationModule<T>) -> f64 {
    let opts = PowerIteration::default();
    spectral_norm(&module.w2, opts) * spectral_norm(&module.w1, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    /// One-sided Jacobi SVD: orthogonalize columns of a copy of `a` and read
    /// singular values off the column norms.
    fn jacobi_singular_values(a: &Matrix<f64>) -> Vec<f64> {
        let (m, n) = (a.rows(), a.cols());
        let mut u = a.clone();
        for _sweep in 0..100 {
            let mut off = 0.0f64;
            for p in 0..n {
                for q in p + 1..n {
                    let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                    for i in 0..m {
                        alpha += u.get(i, p) * u.get(i, p);
                        beta += u.get(i, q) * u.get(i, q);
                        gamma += u.get(i, p) * u.get(i, q);
                    }
                    off = off.max(gamma.abs() / (alpha * beta).sqrt().max(1e-300));
                    if gamma.abs() < 1e-300 {
                        continue;
                    }
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let t = if zeta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for i in 0..m {
                        let (up, uq) = (u.get(i, p), u.get(i, q));
                        u.set(i, p, c * up - s * uq);
                        u.set(i, q, s * up + c * uq);
                    }
                }
            }
            if off < 1e-15 {
                break;
            }
        }
        let mut sv: Vec<f64> = (0..n)
            .map(|j| {
                (0..m)
                    .map(|i| u.get(i, j) * u.get(i, j))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        sv
    }

    #[test]
    fn identity_and_scalar_bounds() {
        let mut m = RelationModule::<f64>::zeros(4, 4, 4);
        m.w1 = Matrix::identity(4);
        m.w2 = Matrix::identity(4);
        assert!((lipschitz_upper_bound(&m) - 1.0).abs() < 1e-9);
        m.w1.scale(2.0);
        m.w2.scale(3.0);
        assert!((lipschitz_upper_bound(&m) - 6.0).abs() < 1e-9);
    }

    #[test]
    fn matches_jacobi_svd_on_random_matrices() {
        let mut r = seeded(99);
        for _ in 0..10 {
            let data = (0..64).map(|_| r.gen_range(-1.0..1.0)).collect();
            let a = Matrix::from_vec(8, 8, data);
            let oracle = jacobi_singular_values(&a)[0];
            let got = spectral_norm(
                &a,
                PowerIteration {
                    rel_tol: 1e-12,
                    max_iter: 5000,
                    seed: 1,
                },
            );
            assert!((got - oracle).abs() <= 1e-5 * oracle, "{got} vs {oracle}");
            let got = spectral_norm(&a, PowerIteration::default());
            assert!(
                (got - oracle).abs() <= 1e-5 * oracle.max(1.0) * 10.0,
                "{got} vs {oracle}"
            );
        }
    }

    #[test]
    fn zero_matrix_has_zero_norm() {
        assert_eq!(
            spectral_norm(&Matrix::<f64>::zeros(3, 5), PowerIteration::default()),
            0.0
        );
    }
}
