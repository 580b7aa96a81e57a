//! Gauss-Hermite rules for expectations under a standard normal.
use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::scalar::Real;

/// Nodes and weights with Σ w f(x) ≈ E[f(ξ)], ξ ~ N(0, 1).
#[derive(Clone, Debug)]
pub struct GaussHermite<T: Real = f64> {
    pub nodes: Vec<T>,
    pub weights: Vec<T>,
}

impl<T: Real> GaussHermite<T> {
    /// Builds the rule in double precision (Newton on the physicists' recurrence), then casts.
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "Gauss-Hermite order must be positive");
        let (x, w) = physicists(order);
        let scale = 1.0 / PI.sqrt();
        GaussHermite {
            nodes: x.iter().map(|&t| T::lit(t * 2f64.sqrt())).collect(),
            weights: w.iter().map(|&v| T::lit(v * scale)).collect(),
        }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn expect<F: FnMut(T) -> T>(&self, mut f: F) -> T {
        self.nodes
            .iter()
            .zip(&self.weights)
            .fold(T::zero(), |acc, (&x, &w)| acc + w * f(x))
    }
}

// Roots of H_n with weight exp(-t²): Jacobi-matrix eigenvalues as seeds, then Newton on the
// normalized Hermite functions, which stay bounded for large n.
fn physicists(n: usize) -> (Vec<f64>, Vec<f64>) {
    let pim4 = PI.powf(-0.25);
    let nf = n as f64;
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64 / 2.0).sqrt()
        } else {
            0.0
        }
    });
    let mut seeds: Vec<f64> = jacobi.symmetric_eigenvalues().iter().copied().collect();
    seeds.sort_by(|a, b| b.total_cmp(a));
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = seeds[i];
        let mut pp = 0.0;
        for _ in 0..20 {
            let mut p1 = pim4 * (-0.5 * z * z).exp();
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        if n % 2 == 1 && i == n / 2 {
            z = 0.0;
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        // pp carries the factor e^{-z²/2}; the weight needs 2 / (pp e^{z²/2})².
        let r = 2f64.sqrt() * (-0.5 * z * z).exp() / pp;
        w[i] = r * r;
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrates_gaussian_moments() {
        for order in [5usize, 20, 30, 60, 100] {
            let gh = GaussHermite::<f64>::new(order);
            assert!((gh.expect(|_| 1.0) - 1.0).abs() < 1e-13, "order {order}");
            assert!(gh.expect(|x| x).abs() < 1e-13);
            assert!((gh.expect(|x| x * x) - 1.0).abs() < 1e-12);
            if order >= 3 {
                assert!((gh.expect(|x| x.powi(4)) - 3.0).abs() < 1e-11);
            }
        }
    }

    #[test]
    fn odd_order_has_zero_node() {
        let gh = GaussHermite::<f64>::new(7);
        assert!(gh.nodes.iter().any(|x| x.abs() < 1e-14));
    }

    #[test]
    fn exponential_moment() {
        // E[exp(t ξ)] = exp(t²/2)
        let gh = GaussHermite::<f64>::new(60);
        let got = gh.expect(|x| (0.7 * x).exp());
        assert!((got - (0.245f64).exp()).abs() < 1e-13);
    }

    #[test]
    fn single_precision_rule() {
        let gh = GaussHermite::<f32>::new(30);
        assert!((gh.expect(|x| x * x) - 1.0).abs() < 1e-5);
    }
}
