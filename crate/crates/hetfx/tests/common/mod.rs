//! Dense brute-force oracles for the acceptance suite.
//!
//! Everything here works on explicit dense matrices through nalgebra
//! factorizations and inverses, independent of the sparse/operator paths in
//! the library, so agreement is a meaningful cross-check.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use hetfx::design::{DesignMatrix, EffectLabel, ObsLabel, UnitKind};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// eta_hat = (Z'Z)^{-1} Z'y by explicit inverse.
pub fn dense_eta(z: &DMatrix<f64>, y: &[f64]) -> DVector<f64> {
    let g = z.transpose() * z;
    let ginv = g.try_inverse().expect("oracle design must be full rank");
    ginv * z.transpose() * DVector::from_column_slice(y)
}

/// S = (Z'Z)^{-1} Z' diag(omega) Z (Z'Z)^{-1} as a dense matrix.
pub fn dense_s(z: &DMatrix<f64>, omega: &[f64]) -> DMatrix<f64> {
    let g = z.transpose() * z;
    let ginv = g.try_inverse().expect("oracle design must be full rank");
    let mut zw = z.clone();
    for (mut row, w) in zw.row_iter_mut().zip(omega) {
        row *= *w;
    }
    &ginv * z.transpose() * zw * &ginv
}

/// Diagonal of the projection Z (Z'Z)^{-1} Z'.
pub fn dense_leverages(z: &DMatrix<f64>) -> Vec<f64> {
    let g = z.transpose() * z;
    let ginv = g.try_inverse().expect("oracle design must be full rank");
    (0..z.nrows())
        .map(|i| {
            let zi = z.row(i).transpose();
            (zi.transpose() * &ginv * &zi)[(0, 0)]
        })
        .collect()
}

/// Posterior mean and covariance by explicit inverses:
/// G = (S^{-1} + Sigma^{-1})^{-1}, m = G (S^{-1} eta_hat + Sigma^{-1} mu).
pub fn dense_posterior(
    z: &DMatrix<f64>,
    omega: &[f64],
    sigma: &DMatrix<f64>,
    mu: &[f64],
    y: &[f64],
) -> (DVector<f64>, DMatrix<f64>) {
    let eta = dense_eta(z, y);
    let s = dense_s(z, omega);
    let sinv = s.try_inverse().expect("S must be invertible");
    let siginv = sigma.clone().try_inverse().expect("Sigma must be invertible");
    let g = (&sinv + &siginv).try_inverse().expect("precision must be invertible");
    let m = &g * (&sinv * eta + &siginv * DVector::from_column_slice(mu));
    (m, g)
}

/// Gaussian log-likelihood of y under N(Z mu, Z Sigma Z' + diag(omega)).
pub fn dense_loglik(
    z: &DMatrix<f64>,
    y: &[f64],
    mu: &[f64],
    sigma: &DMatrix<f64>,
    omega: &[f64],
) -> f64 {
    let n = z.nrows();
    let mut v = z * sigma * z.transpose();
    for i in 0..n {
        v[(i, i)] += omega[i];
    }
    let chol = v.cholesky().expect("oracle covariance must be PD");
    let logdet: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let resid = DVector::from_column_slice(y) - z * DVector::from_column_slice(mu);
    let quad = resid.dot(&chol.solve(&resid));
    -0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * logdet - 0.5 * quad
}

/// Random full-rank sparse design for oracle comparisons: n rows, p columns,
/// every column seeded with a guaranteed entry so the Gram matrix is
/// nonsingular with probability one.
pub fn random_sparse_design(n: usize, p: usize, density: f64, seed: u64) -> DesignMatrix {
    let mut r = rng(seed);
    let mut entries = std::collections::BTreeMap::new();
    for i in 0..n {
        for j in 0..p {
            if r.random::<f64>() < density {
                entries.insert((i, j), r.sample::<f64, _>(StandardNormal));
            }
        }
    }
    for j in 0..p {
        // One guaranteed entry per column, spread across rows.
        let i = (j * 7919) % n;
        entries.insert((i, j), 1.0 + r.random::<f64>());
    }
    let triplets: Vec<(usize, usize, f64)> =
        entries.into_iter().map(|((i, j), v)| (i, j, v)).collect();
    let labels = (0..p)
        .map(|j| EffectLabel::new(UnitKind::Firm, format!("f{j:03}")))
        .collect();
    let rows = (0..n as u32).map(ObsLabel::Index).collect();
    let z = DesignMatrix::from_triplets(n, p, &triplets, labels, rows).unwrap();
    // A full-rank design passes the identification probe unchanged; this
    // also exercises the real finalization path.
    hetfx::design::finalize_identification(z, hetfx::design::NormalizationRule::DropLastFirm)
        .expect("random oracle design is full rank")
}

/// Random strictly positive of length n in [lo, hi].
pub fn random_positive(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| lo + (hi - lo) * r.random::<f64>()).collect()
}

pub fn random_normal(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Max entrywise difference relative to the oracle vector's scale.
pub fn max_rel_diff(a: &[f64], oracle: &[f64]) -> f64 {
    let scale = oracle.iter().map(|v| v.abs()).fold(0.0f64, f64::max).max(1e-300);
    max_abs_diff(a, oracle) / scale
}
