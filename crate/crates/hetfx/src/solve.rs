//! Sparse least squares and the sampling-covariance operator.
//!
//! The central object is [`GramSolver`], a handle that applies
//! `(Z' diag(w) Z)^{-1}` to vectors. Four backends are selected
//! automatically:
//!
//! - diagonal, when every row has at most one nonzero;
//! - an exact two-level Schur-complement factorization for two-way layouts
//!   (one indicator block whose Gram is diagonal plus a low-dimensional
//!   second block), which makes worker/firm designs cheap at scale;
//! - dense Cholesky for small column counts;
//! - Jacobi-preconditioned conjugate gradients as the general fallback.
//!
//! On top of the solver sit the OLS fit ([`ols_fit`]), the sampling
//! covariance operator `S(Z) = (Z'Z)^{-1} Z' Omega Z (Z'Z)^{-1}`
//! ([`apply_s`]), hat-matrix diagonals ([`leverage_diagonals`]), and
//! `Trace(Q S(Z))` ([`trace_qs`]) with both a structured exact path and a
//! Hutchinson estimator with Rademacher probes.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::design::DesignMatrix;
use crate::error::{Error, Result};
use crate::noise::NoiseSpec;
use crate::rng::{stream_rng, StreamDomain};

/// Solver configuration shared across the estimation pipeline.
#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Relative residual target for iterative solves.
    pub rel_tol: f64,
    /// CG iteration cap as a multiple of the column count.
    pub max_iter_factor: usize,
    /// Dense factorizations are enabled when p does not exceed this cap.
    pub dense_cap: usize,
    /// Exact leverage computation is refused when n exceeds this cap.
    pub leverage_exact_cap: usize,
    /// Force a particular backend (tests and oracle comparisons).
    pub force: Option<SolverKind>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            rel_tol: 1e-10,
            max_iter_factor: 10,
            dense_cap: 2000,
            leverage_exact_cap: 50_000,
            force: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    Diagonal,
    TwoLevel,
    DenseCholesky,
    ConjugateGradient,
}

enum Backend {
    Diagonal { inv_diag: Vec<f64> },
    TwoLevel(TwoLevelFactor),
    Dense { chol: Cholesky<f64, Dyn> },
    Cg { jacobi_inv: Vec<f64> },
}

struct TwoLevelFactor {
    split: usize,
    inv_d: Vec<f64>,
    /// Cross block A12 = B1' diag(w) B2, stored per block-1 column as
    /// (block-2 local index, value).
    a12: Vec<Vec<(usize, f64)>>,
    schur_chol: Cholesky<f64, Dyn>,
}

/// Shareable handle applying `(Z' diag(w) Z)^{-1}`; weights default to one.
pub struct GramSolver {
    design: Arc<DesignMatrix>,
    weights: Option<Vec<f64>>,
    backend: Backend,
    opts: SolveOptions,
}

impl GramSolver {
    pub fn new(design: Arc<DesignMatrix>, weights: Option<Vec<f64>>, opts: &SolveOptions) -> Result<Self> {
        if let Some(w) = &weights {
            if w.len() != design.n_obs() {
                return Err(Error::input("weight vector length does not match rows"));
            }
        }
        let kind = match opts.force {
            Some(k) => k,
            None => Self::auto_kind(&design, opts),
        };
        let backend = Self::build_backend(&design, weights.as_deref(), kind, opts)?;
        Ok(GramSolver { design, weights, backend, opts: opts.clone() })
    }

    fn auto_kind(design: &DesignMatrix, opts: &SolveOptions) -> SolverKind {
        if design.gram_is_diagonal() {
            return SolverKind::Diagonal;
        }
        if let Some(tl) = design.two_level() {
            let p2 = design.n_effects().saturating_sub(tl.split);
            if p2 <= opts.dense_cap && two_level_rows_ok(design, tl.split) {
                return SolverKind::TwoLevel;
            }
        }
        if design.n_effects() <= opts.dense_cap {
            return SolverKind::DenseCholesky;
        }
        SolverKind::ConjugateGradient
    }

    fn build_backend(
        design: &DesignMatrix,
        w: Option<&[f64]>,
        kind: SolverKind,
        _opts: &SolveOptions,
    ) -> Result<Backend> {
        match kind {
            SolverKind::Diagonal => {
                if !design.gram_is_diagonal() {
                    return Err(Error::input("diagonal solver requires a diagonal Gram matrix"));
                }
                let d = design.weighted_gram_diag(w);
                let mut inv = Vec::with_capacity(d.len());
                for (j, dj) in d.iter().enumerate() {
                    if *dj <= 0.0 {
                        return Err(Error::numerical(format!(
                            "rank deficient design: zero Gram diagonal at column {j}"
                        )));
                    }
                    inv.push(1.0 / dj);
                }
                Ok(Backend::Diagonal { inv_diag: inv })
            }
            SolverKind::TwoLevel => {
                let split = design
                    .two_level()
                    .ok_or_else(|| Error::input("two-level solver requires a two-level design"))?
                    .split;
                if !two_level_rows_ok(design, split) {
                    return Err(Error::input("two-level solver: first block Gram is not diagonal"));
                }
                Ok(Backend::TwoLevel(build_two_level(design, w, split)?))
            }
            SolverKind::DenseCholesky => {
                let g = dense_weighted_gram(design, w);
                let chol = checked_cholesky(g)
                    .ok_or_else(|| Error::numerical("rank deficient design: Cholesky factorization failed"))?;
                Ok(Backend::Dense { chol })
            }
            SolverKind::ConjugateGradient => {
                let d = design.weighted_gram_diag(w);
                let mut inv = Vec::with_capacity(d.len());
                for dj in &d {
                    inv.push(if *dj > 0.0 { 1.0 / dj } else { 1.0 });
                }
                Ok(Backend::Cg { jacobi_inv: inv })
            }
        }
    }

    pub fn design(&self) -> &Arc<DesignMatrix> {
        &self.design
    }

    pub fn options(&self) -> &SolveOptions {
        &self.opts
    }

    pub fn kind(&self) -> SolverKind {
        match self.backend {
            Backend::Diagonal { .. } => SolverKind::Diagonal,
            Backend::TwoLevel(_) => SolverKind::TwoLevel,
            Backend::Dense { .. } => SolverKind::DenseCholesky,
            Backend::Cg { .. } => SolverKind::ConjugateGradient,
        }
    }

    /// Solve `(Z' diag(w) Z) x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.solve_with_tol(b, self.opts.rel_tol)
    }

    pub fn solve_with_tol(&self, b: &[f64], tol: f64) -> Result<Vec<f64>> {
        let p = self.design.n_effects();
        if b.len() != p {
            return Err(Error::input("right-hand side length does not match columns"));
        }
        match &self.backend {
            Backend::Diagonal { inv_diag } => {
                Ok(b.iter().zip(inv_diag).map(|(bi, di)| bi * di).collect())
            }
            Backend::TwoLevel(f) => Ok(f.solve(b)),
            Backend::Dense { chol } => {
                let x = chol.solve(&DVector::from_column_slice(b));
                Ok(x.data.into())
            }
            Backend::Cg { jacobi_inv } => self.cg_solve(b, jacobi_inv, tol),
        }
    }

    fn cg_solve(&self, b: &[f64], jacobi_inv: &[f64], tol: f64) -> Result<Vec<f64>> {
        let p = self.design.n_effects();
        let n = self.design.n_obs();
        let bnorm = norm2(b);
        if bnorm == 0.0 {
            return Ok(vec![0.0; p]);
        }
        let max_iter = (self.opts.max_iter_factor * p).max(50);
        let w = self.weights.as_deref();
        let mut x = vec![0.0; p];
        let mut r = b.to_vec();
        let mut z: Vec<f64> = r.iter().zip(jacobi_inv).map(|(ri, mi)| ri * mi).collect();
        let mut pdir = z.clone();
        let mut rz = dot(&r, &z);
        let mut scratch = vec![0.0; n];
        let mut ap = vec![0.0; p];
        for _ in 0..max_iter {
            self.design.weighted_gram_matvec(w, &pdir, &mut scratch, &mut ap);
            let pap = dot(&pdir, &ap);
            if pap <= 0.0 || !pap.is_finite() {
                return Err(Error::numerical(format!(
                    "conjugate gradient breakdown: curvature {pap:.3e} (matrix not positive definite)"
                )));
            }
            let alpha = rz / pap;
            for j in 0..p {
                x[j] += alpha * pdir[j];
                r[j] -= alpha * ap[j];
            }
            if norm2(&r) <= tol * bnorm {
                return Ok(x);
            }
            for j in 0..p {
                z[j] = r[j] * jacobi_inv[j];
            }
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            for j in 0..p {
                pdir[j] = z[j] + beta * pdir[j];
            }
            rz = rz_new;
        }
        Err(Error::numerical(format!(
            "conjugate gradient did not converge: relative residual {:.3e} after {} iterations",
            norm2(&r) / bnorm,
            max_iter
        )))
    }
}

fn two_level_rows_ok(design: &DesignMatrix, split: usize) -> bool {
    (0..design.n_obs()).all(|i| design.row(i).0.iter().filter(|&&c| c < split).count() <= 1)
}

fn build_two_level(design: &DesignMatrix, w: Option<&[f64]>, split: usize) -> Result<TwoLevelFactor> {
    let p = design.n_effects();
    let p2 = p - split;
    let mut d = vec![0.0; split];
    let mut a12: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); split];
    let mut a22 = DMatrix::<f64>::zeros(p2, p2);
    for i in 0..design.n_obs() {
        let wi = w.map_or(1.0, |w| w[i]);
        let (cols, vals) = design.row(i);
        let mut b1: Option<(usize, f64)> = None;
        let mut b2: Vec<(usize, f64)> = Vec::new();
        for (c, v) in cols.iter().zip(vals) {
            if *c < split {
                b1 = Some((*c, *v));
            } else {
                b2.push((*c - split, *v));
            }
        }
        if let Some((a, va)) = b1 {
            d[a] += wi * va * va;
            for (f, vf) in &b2 {
                *a12[a].entry(*f).or_insert(0.0) += wi * va * vf;
            }
        }
        for (f, vf) in &b2 {
            for (g, vg) in &b2 {
                a22[(*f, *g)] += wi * vf * vg;
            }
        }
    }
    let mut inv_d = Vec::with_capacity(split);
    for (a, da) in d.iter().enumerate() {
        if *da <= 0.0 {
            return Err(Error::numerical(format!(
                "rank deficient design: zero Gram diagonal at column {a}"
            )));
        }
        inv_d.push(1.0 / da);
    }
    let a12: Vec<Vec<(usize, f64)>> =
        a12.into_iter().map(|m| m.into_iter().collect()).collect();
    // Schur complement A22 - A12' D^{-1} A12.
    for (a, entries) in a12.iter().enumerate() {
        let da_inv = inv_d[a];
        for (f, vf) in entries {
            for (g, vg) in entries {
                a22[(*f, *g)] -= vf * vg * da_inv;
            }
        }
    }
    let schur_chol = checked_cholesky(a22)
        .ok_or_else(|| Error::numerical("rank deficient design: Schur complement is singular"))?;
    Ok(TwoLevelFactor { split, inv_d, a12, schur_chol })
}

impl TwoLevelFactor {
    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let split = self.split;
        let p2 = b.len() - split;
        let mut t2 = DVector::from_column_slice(&b[split..]);
        for (a, entries) in self.a12.iter().enumerate() {
            let s = b[a] * self.inv_d[a];
            for (f, vf) in entries {
                t2[*f] -= vf * s;
            }
        }
        let x2 = self.schur_chol.solve(&t2);
        let mut x = vec![0.0; split + p2];
        for (a, entries) in self.a12.iter().enumerate() {
            let mut acc = b[a];
            for (f, vf) in entries {
                acc -= vf * x2[*f];
            }
            x[a] = acc * self.inv_d[a];
        }
        x[split..].copy_from_slice(x2.as_slice());
        x
    }
}

/// Cholesky that rejects numerically singular matrices: nalgebra accepts a
/// zero trailing pivot on PSD-singular input, so require every pivot to
/// clear a relative floor.
pub(crate) fn checked_cholesky(m: DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let chol = Cholesky::new(m)?;
    let diag = chol.l_dirty().diagonal();
    let max = diag.iter().fold(0.0f64, |a, b| a.max(*b));
    let min = diag.iter().fold(f64::INFINITY, |a, b| a.min(*b));
    if !min.is_finite() || min <= 1e-7 * max {
        return None;
    }
    Some(chol)
}

fn dense_weighted_gram(design: &DesignMatrix, w: Option<&[f64]>) -> DMatrix<f64> {
    let p = design.n_effects();
    let mut g = DMatrix::zeros(p, p);
    for i in 0..design.n_obs() {
        let wi = w.map_or(1.0, |w| w[i]);
        let (cols, vals) = design.row(i);
        for (c1, v1) in cols.iter().zip(vals) {
            for (c2, v2) in cols.iter().zip(vals) {
                g[(*c1, *c2)] += wi * v1 * v2;
            }
        }
    }
    g
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Nonsingularity probe: a factorization (or converged CG) must reproduce
/// five seeded random right-hand sides with relative residuals below 1e-8.
/// Factorization success alone is not trusted: an exactly singular Gram
/// matrix can slip through Cholesky with a rounding-level trailing pivot,
/// but its solutions blow up along the null direction and fail the residual
/// check.
pub(crate) fn probe_nonsingular(design: &DesignMatrix) -> bool {
    let design = Arc::new(design.clone());
    let opts = SolveOptions::default();
    let solver = match GramSolver::new(design.clone(), None, &opts) {
        Ok(s) => s,
        Err(_) => return false,
    };
    let p = design.n_effects();
    let n = design.n_obs();
    let mut scratch = vec![0.0; n];
    let mut gz = vec![0.0; p];
    for probe in 0..5u64 {
        let mut rng = stream_rng(0xD5, StreamDomain::IdentificationProbe, probe);
        let b: Vec<f64> = (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        match solver.solve_with_tol(&b, 1e-8) {
            Ok(x) => {
                design.weighted_gram_matvec(None, &x, &mut scratch, &mut gz);
                let rnorm = (0..p).map(|j| (gz[j] - b[j]).powi(2)).sum::<f64>().sqrt();
                if !rnorm.is_finite() || rnorm > 1e-8 * norm2(&b) {
                    return false;
                }
            }
            Err(_) => return false,
        }
    }
    true
}

/// OLS effect estimates together with the Gram solver that produced them.
pub struct EstimateBundle {
    eta_hat: Vec<f64>,
    gram: Arc<GramSolver>,
}

impl EstimateBundle {
    pub fn eta_hat(&self) -> &[f64] {
        &self.eta_hat
    }

    pub fn design(&self) -> &Arc<DesignMatrix> {
        self.gram.design()
    }

    pub fn gram(&self) -> &Arc<GramSolver> {
        &self.gram
    }

    /// Fitted values Z eta_hat.
    pub fn fitted(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.design().n_obs()];
        self.design().matvec(&self.eta_hat, &mut out);
        out
    }

    pub fn residuals(&self, y: &[f64]) -> Vec<f64> {
        self.fitted().iter().zip(y).map(|(f, yi)| yi - f).collect()
    }
}

/// Fit eta by least squares on a finalized design. The normal-equation
/// residual is verified to satisfy |Z'(Y - Z eta)| <= 1e-8 |Z'Y|.
pub fn ols_fit(design: Arc<DesignMatrix>, y: &[f64], opts: &SolveOptions) -> Result<EstimateBundle> {
    if !design.is_finalized() {
        return Err(Error::input("design must be finalized before fitting"));
    }
    if y.len() != design.n_obs() {
        return Err(Error::input(format!(
            "outcome length {} does not match {} rows",
            y.len(),
            design.n_obs()
        )));
    }
    let gram = Arc::new(GramSolver::new(design, None, opts)?);
    ols_fit_with_solver(gram, y)
}

/// Fit reusing an existing solver handle.
pub fn ols_fit_with_solver(gram: Arc<GramSolver>, y: &[f64]) -> Result<EstimateBundle> {
    let design = gram.design().clone();
    let p = design.n_effects();
    let mut zty = vec![0.0; p];
    design.tmatvec(y, &mut zty);
    let eta_hat = gram.solve(&zty)?;
    // Orthogonality check.
    let n = design.n_obs();
    let mut scratch = vec![0.0; n];
    let mut gz = vec![0.0; p];
    design.weighted_gram_matvec(None, &eta_hat, &mut scratch, &mut gz);
    let resid = (0..p).map(|j| (zty[j] - gz[j]).powi(2)).sum::<f64>().sqrt();
    let scale = norm2(&zty);
    if scale > 0.0 && resid > 1e-8 * scale {
        return Err(Error::numerical(format!(
            "normal equations not satisfied: relative residual {:.3e}",
            resid / scale
        )));
    }
    Ok(EstimateBundle { eta_hat, gram })
}

/// Apply the sampling covariance `S(Z) g` for a diagonal error covariance.
pub(crate) fn apply_s_omega(bundle: &EstimateBundle, omega: &[f64], g: &[f64]) -> Result<Vec<f64>> {
    let design = bundle.design();
    let n = design.n_obs();
    let t = bundle.gram.solve(g)?;
    let mut u = vec![0.0; n];
    design.matvec(&t, &mut u);
    for (ui, wi) in u.iter_mut().zip(omega) {
        *ui *= wi;
    }
    let mut v = vec![0.0; design.n_effects()];
    design.tmatvec(&u, &mut v);
    bundle.gram.solve(&v)
}

/// S(Z) g = (Z'Z)^{-1} Z' Omega Z (Z'Z)^{-1} g via two Gram solves and one
/// weighted sandwich; linear in g.
pub fn apply_s(bundle: &EstimateBundle, noise: &NoiseSpec, g: &[f64]) -> Result<Vec<f64>> {
    let omega = noise.omega_diag(bundle.design().n_obs())?;
    apply_s_omega(bundle, &omega, g)
}

/// Hat-matrix diagonal computation mode.
#[derive(Debug, Clone, Copy)]
pub enum LeverageMode {
    Exact,
    /// Random-projection sketch with `probes` Gaussian probes; expected
    /// relative error O(1/sqrt(probes)).
    Sketched { probes: usize, seed: u64 },
}

/// Diagonal of the projection P = Z (Z'Z)^{-1} Z'.
pub fn leverage_diagonals(gram: &GramSolver, mode: LeverageMode) -> Result<Vec<f64>> {
    let design = gram.design();
    let n = design.n_obs();
    let p = design.n_effects();
    match mode {
        LeverageMode::Exact => {
            if n > gram.opts.leverage_exact_cap {
                return Err(Error::input(format!(
                    "exact leverage refused: n = {n} exceeds cap {}",
                    gram.opts.leverage_exact_cap
                )));
            }
            match &gram.backend {
                Backend::Diagonal { inv_diag } => {
                    let mut out = vec![0.0; n];
                    for i in 0..n {
                        let (cols, vals) = design.row(i);
                        out[i] =
                            cols.iter().zip(vals).map(|(c, v)| v * v * inv_diag[*c]).sum();
                    }
                    Ok(out)
                }
                Backend::Dense { chol } => {
                    let inv = chol.inverse();
                    let mut out = vec![0.0; n];
                    for i in 0..n {
                        let (cols, vals) = design.row(i);
                        let mut acc = 0.0;
                        for (c1, v1) in cols.iter().zip(vals) {
                            for (c2, v2) in cols.iter().zip(vals) {
                                acc += v1 * v2 * inv[(*c1, *c2)];
                            }
                        }
                        out[i] = acc;
                    }
                    Ok(out)
                }
                _ => (0..n)
                    .into_par_iter()
                    .map_init(
                        || vec![0.0; p],
                        |rhs, i| {
                            rhs.fill(0.0);
                            let (cols, vals) = design.row(i);
                            for (c, v) in cols.iter().zip(vals) {
                                rhs[*c] = *v;
                            }
                            let x = gram.solve(rhs)?;
                            Ok(design.row_dot(i, &x))
                        },
                    )
                    .collect(),
            }
        }
        LeverageMode::Sketched { probes, seed } => {
            if probes == 0 {
                return Err(Error::input("sketched leverage requires at least one probe"));
            }
            const BATCH: usize = 16;
            let n_batches = probes.div_ceil(BATCH);
            let partials: Vec<Result<Vec<f64>>> = (0..n_batches)
                .into_par_iter()
                .map(|b| {
                    let lo = b * BATCH;
                    let hi = ((b + 1) * BATCH).min(probes);
                    let mut acc = vec![0.0; n];
                    let mut t = vec![0.0; p];
                    let mut u = vec![0.0; n];
                    for probe in lo..hi {
                        let mut rng =
                            stream_rng(seed, StreamDomain::LeverageProbe, probe as u64);
                        let g: Vec<f64> =
                            (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                        design.tmatvec(&g, &mut t);
                        let x = gram.solve(&t)?;
                        design.matvec(&x, &mut u);
                        for i in 0..n {
                            acc[i] += u[i] * u[i];
                        }
                    }
                    Ok(acc)
                })
                .collect();
            let mut out = vec![0.0; n];
            for part in partials {
                let part = part?;
                for i in 0..n {
                    out[i] += part[i];
                }
            }
            for v in &mut out {
                *v /= probes as f64;
            }
            Ok(out)
        }
    }
}

/// Sparse linear combination c'eta.
#[derive(Debug, Clone)]
pub struct LinearFormSpec {
    entries: Vec<(usize, f64)>,
}

impl LinearFormSpec {
    pub fn new(entries: Vec<(usize, f64)>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (j, v) in &entries {
            if !v.is_finite() {
                return Err(Error::input("linear form entry is not finite"));
            }
            if !seen.insert(*j) {
                return Err(Error::input(format!("linear form index {j} repeated")));
            }
        }
        Ok(LinearFormSpec { entries })
    }

    /// Uniform average over an index set.
    pub fn uniform_mean(indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let idx: Vec<usize> = indices.into_iter().collect();
        if idx.is_empty() {
            return Err(Error::input("empty index set for mean"));
        }
        let w = 1.0 / idx.len() as f64;
        LinearFormSpec::new(idx.into_iter().map(|j| (j, w)).collect())
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn dot(&self, eta: &[f64]) -> f64 {
        self.entries.iter().map(|(j, v)| eta[*j] * v).sum()
    }
}

/// Quadratic form eta' Q eta.
#[derive(Debug, Clone)]
pub enum QuadraticFormSpec {
    /// Q = diag(w) - w w' on an index set: the w-weighted variance around
    /// the w-weighted mean. Weights are nonnegative and sum to one.
    WeightedVariance { weights: Vec<(usize, f64)> },
    /// Paired covariance: sum_r w_r (eta_{a_r} - mean_a)(eta_{b_r} - mean_b)
    /// with means taken under the pairing weights. Each pair is
    /// (a column, b column, weight); weights are nonnegative and sum to one.
    WeightedCovariance { pairs: Vec<(usize, usize, f64)> },
    /// Arbitrary symmetric sparse Q given as (row, col, value) triplets.
    CustomSparse { triplets: Vec<(usize, usize, f64)> },
}

impl QuadraticFormSpec {
    pub fn weighted_variance(weights: Vec<(usize, f64)>) -> Result<Self> {
        validate_weights(weights.iter().map(|(_, w)| *w))?;
        let mut seen = BTreeSet::new();
        for (j, _) in &weights {
            if !seen.insert(*j) {
                return Err(Error::input(format!("variance weight index {j} repeated")));
            }
        }
        Ok(QuadraticFormSpec::WeightedVariance { weights })
    }

    pub fn uniform_variance(indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let idx: Vec<usize> = indices.into_iter().collect();
        if idx.is_empty() {
            return Err(Error::input("empty index set for variance"));
        }
        let w = 1.0 / idx.len() as f64;
        QuadraticFormSpec::weighted_variance(idx.into_iter().map(|j| (j, w)).collect())
    }

    /// Uniform variance over a unit family of `total` members of which only
    /// `indices` remain as columns; the missing members are pinned at zero by
    /// the identification normalization. Each listed column gets weight
    /// 1/total, so the form equals the variance over all `total` values with
    /// the dropped ones at zero (variances are shift-invariant, so this
    /// matches the variance of the unnormalized effects).
    pub fn uniform_variance_with_total(
        indices: impl IntoIterator<Item = usize>,
        total: usize,
    ) -> Result<Self> {
        let idx: Vec<usize> = indices.into_iter().collect();
        if idx.is_empty() || total < idx.len() {
            return Err(Error::input("variance index set inconsistent with family size"));
        }
        let w = 1.0 / total as f64;
        let mut seen = BTreeSet::new();
        for j in &idx {
            if !seen.insert(*j) {
                return Err(Error::input(format!("variance weight index {j} repeated")));
            }
        }
        Ok(QuadraticFormSpec::WeightedVariance {
            weights: idx.into_iter().map(|j| (j, w)).collect(),
        })
    }

    pub fn weighted_covariance(pairs: Vec<(usize, usize, f64)>) -> Result<Self> {
        validate_weights(pairs.iter().map(|(_, _, w)| *w))?;
        Ok(QuadraticFormSpec::WeightedCovariance { pairs })
    }

    pub fn custom_sparse(triplets: Vec<(usize, usize, f64)>) -> Result<Self> {
        let mut map: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (j, k, v) in &triplets {
            if !v.is_finite() {
                return Err(Error::input("custom Q entry is not finite"));
            }
            if map.insert((*j, *k), *v).is_some() {
                return Err(Error::input(format!("custom Q entry ({j},{k}) repeated")));
            }
        }
        for ((j, k), v) in &map {
            if j != k {
                let mirror = map.get(&(*k, *j)).copied().unwrap_or(0.0);
                if (mirror - v).abs() > 1e-12 * v.abs().max(1.0) {
                    return Err(Error::input(format!("custom Q is not symmetric at ({j},{k})")));
                }
            }
        }
        Ok(QuadraticFormSpec::CustomSparse { triplets })
    }

    /// (1/p) I restricted to `0..p`, the average-diagonal form.
    pub fn scaled_identity(p: usize, scale: f64) -> Self {
        QuadraticFormSpec::CustomSparse {
            triplets: (0..p).map(|j| (j, j, scale)).collect(),
        }
    }

    /// eta' Q eta.
    pub fn quad(&self, eta: &[f64]) -> f64 {
        match self {
            QuadraticFormSpec::WeightedVariance { weights } => {
                let mean: f64 = weights.iter().map(|(j, w)| w * eta[*j]).sum();
                let sq: f64 = weights.iter().map(|(j, w)| w * eta[*j] * eta[*j]).sum();
                sq - mean * mean
            }
            QuadraticFormSpec::WeightedCovariance { pairs } => {
                let mean_a: f64 = pairs.iter().map(|(a, _, w)| w * eta[*a]).sum();
                let mean_b: f64 = pairs.iter().map(|(_, b, w)| w * eta[*b]).sum();
                let cross: f64 = pairs.iter().map(|(a, b, w)| w * eta[*a] * eta[*b]).sum();
                cross - mean_a * mean_b
            }
            QuadraticFormSpec::CustomSparse { triplets } => {
                triplets.iter().map(|(j, k, v)| v * eta[*j] * eta[*k]).sum()
            }
        }
    }

    /// Q g.
    pub fn matvec(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.len()];
        match self {
            QuadraticFormSpec::WeightedVariance { weights } => {
                let wg: f64 = weights.iter().map(|(j, w)| w * g[*j]).sum();
                for (j, w) in weights {
                    out[*j] += w * (g[*j] - wg);
                }
            }
            QuadraticFormSpec::WeightedCovariance { pairs } => {
                let mut avec: Vec<(usize, f64)> = Vec::new();
                let mut bvec: Vec<(usize, f64)> = Vec::new();
                let mut amap: BTreeMap<usize, f64> = BTreeMap::new();
                let mut bmap: BTreeMap<usize, f64> = BTreeMap::new();
                for (a, b, w) in pairs {
                    *amap.entry(*a).or_insert(0.0) += w;
                    *bmap.entry(*b).or_insert(0.0) += w;
                }
                avec.extend(amap);
                bvec.extend(bmap);
                let ag: f64 = avec.iter().map(|(j, w)| w * g[*j]).sum();
                let bg: f64 = bvec.iter().map(|(j, w)| w * g[*j]).sum();
                for (a, b, w) in pairs {
                    out[*a] += 0.5 * w * g[*b];
                    out[*b] += 0.5 * w * g[*a];
                }
                for (j, w) in &avec {
                    out[*j] -= 0.5 * w * bg;
                }
                for (j, w) in &bvec {
                    out[*j] -= 0.5 * w * ag;
                }
            }
            QuadraticFormSpec::CustomSparse { triplets } => {
                for (j, k, v) in triplets {
                    out[*j] += v * g[*k];
                }
            }
        }
        out
    }

    /// Dense Q for oracle comparisons.
    pub fn to_dense(&self, p: usize) -> DMatrix<f64> {
        let mut q = DMatrix::zeros(p, p);
        match self {
            QuadraticFormSpec::WeightedVariance { weights } => {
                for (j, wj) in weights {
                    q[(*j, *j)] += wj;
                    for (k, wk) in weights {
                        q[(*j, *k)] -= wj * wk;
                    }
                }
            }
            QuadraticFormSpec::WeightedCovariance { pairs } => {
                let mut amap: BTreeMap<usize, f64> = BTreeMap::new();
                let mut bmap: BTreeMap<usize, f64> = BTreeMap::new();
                for (a, b, w) in pairs {
                    q[(*a, *b)] += 0.5 * w;
                    q[(*b, *a)] += 0.5 * w;
                    *amap.entry(*a).or_insert(0.0) += w;
                    *bmap.entry(*b).or_insert(0.0) += w;
                }
                for (a, wa) in &amap {
                    for (b, wb) in &bmap {
                        q[(*a, *b)] -= 0.5 * wa * wb;
                        q[(*b, *a)] -= 0.5 * wa * wb;
                    }
                }
            }
            QuadraticFormSpec::CustomSparse { triplets } => {
                for (j, k, v) in triplets {
                    q[(*j, *k)] += *v;
                }
            }
        }
        q
    }

    /// Number of Gram solves the structured exact trace path needs.
    fn exact_trace_cost(&self) -> usize {
        match self {
            QuadraticFormSpec::WeightedVariance { weights } => weights.len() + 1,
            QuadraticFormSpec::WeightedCovariance { pairs } => {
                let da: BTreeSet<usize> = pairs.iter().map(|(a, _, _)| *a).collect();
                let db: BTreeSet<usize> = pairs.iter().map(|(_, b, _)| *b).collect();
                2 * da.len().min(db.len()) + 2
            }
            QuadraticFormSpec::CustomSparse { triplets } => {
                let cols: BTreeSet<usize> = triplets.iter().map(|(_, k, _)| *k).collect();
                2 * cols.len()
            }
        }
    }
}

fn validate_weights(weights: impl Iterator<Item = f64>) -> Result<()> {
    let mut total = 0.0;
    let mut any = false;
    for w in weights {
        any = true;
        if !w.is_finite() || w < 0.0 {
            return Err(Error::input("weights must be finite and nonnegative"));
        }
        total += w;
    }
    if !any {
        return Err(Error::input("weight set is empty"));
    }
    if (total - 1.0).abs() > 1e-8 {
        return Err(Error::input(format!("weights must sum to one, got {total}")));
    }
    Ok(())
}

/// Result of a Trace(Q S(Z)) computation.
#[derive(Debug, Clone, Copy)]
pub struct TraceEstimate {
    pub value: f64,
    /// True when the structured exact path was taken; false for the
    /// Hutchinson estimate.
    pub exact: bool,
}

impl TraceEstimate {
    /// Negative corrections are legitimate (they feed a bias correction) but
    /// worth surfacing.
    pub fn is_negative(&self) -> bool {
        self.value < 0.0
    }
}

/// Trace(Q S(Z)). Takes the structured exact path when its solve count is
/// competitive with the requested probe budget (always for small designs),
/// and the Hutchinson estimator with Rademacher probes otherwise.
/// Deterministic given the seed.
pub fn trace_qs(
    q: &QuadraticFormSpec,
    bundle: &EstimateBundle,
    noise: &NoiseSpec,
    probes: usize,
    seed: u64,
) -> Result<TraceEstimate> {
    if probes == 0 {
        return Err(Error::input("trace estimation requires probes >= 1"));
    }
    let omega = noise.omega_diag(bundle.design().n_obs())?;
    let cost = q.exact_trace_cost();
    if cost <= (2 * probes).max(128) || bundle.design().n_effects() <= bundle.gram.opts.dense_cap {
        Ok(TraceEstimate { value: trace_qs_exact_omega(q, bundle, &omega)?, exact: true })
    } else {
        trace_qs_hutchinson_omega(q, bundle, &omega, probes, seed)
    }
}

/// Force the Hutchinson probe estimator (testing and diagnostics).
pub fn trace_qs_hutchinson(
    q: &QuadraticFormSpec,
    bundle: &EstimateBundle,
    noise: &NoiseSpec,
    probes: usize,
    seed: u64,
) -> Result<TraceEstimate> {
    let omega = noise.omega_diag(bundle.design().n_obs())?;
    trace_qs_hutchinson_omega(q, bundle, &omega, probes, seed)
}

/// Force the structured exact path.
pub fn trace_qs_exact(
    q: &QuadraticFormSpec,
    bundle: &EstimateBundle,
    noise: &NoiseSpec,
) -> Result<TraceEstimate> {
    let omega = noise.omega_diag(bundle.design().n_obs())?;
    Ok(TraceEstimate { value: trace_qs_exact_omega(q, bundle, &omega)?, exact: true })
}

fn trace_qs_hutchinson_omega(
    q: &QuadraticFormSpec,
    bundle: &EstimateBundle,
    omega: &[f64],
    probes: usize,
    seed: u64,
) -> Result<TraceEstimate> {
    let p = bundle.design().n_effects();
    let vals: Vec<Result<f64>> = (0..probes)
        .into_par_iter()
        .map(|probe| {
            let mut rng = stream_rng(seed, StreamDomain::TraceProbe, probe as u64);
            let g: Vec<f64> =
                (0..p).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
            let sg = apply_s_omega(bundle, omega, &g)?;
            let qg = q.matvec(&g);
            Ok(dot(&qg, &sg))
        })
        .collect();
    let mut total = 0.0;
    for v in vals {
        total += v?;
    }
    Ok(TraceEstimate { value: total / probes as f64, exact: false })
}

fn trace_qs_exact_omega(
    q: &QuadraticFormSpec,
    bundle: &EstimateBundle,
    omega: &[f64],
) -> Result<f64> {
    let design = bundle.design();
    let p = design.n_effects();
    let n = design.n_obs();
    // S_{jk} = (Z c_j)' Omega (Z c_k) with c_j = (Z'Z)^{-1} e_j; every path
    // below reduces to Gram solves plus weighted inner products in R^n.
    let z_times_solve = |v: &[f64]| -> Result<Vec<f64>> {
        let c = bundle.gram.solve(v)?;
        let mut u = vec![0.0; n];
        design.matvec(&c, &mut u);
        Ok(u)
    };
    let wdot = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).zip(omega).map(|((x, y), w)| x * y * w).sum()
    };
    match q {
        QuadraticFormSpec::WeightedVariance { weights } => {
            let parts: Vec<Result<f64>> = weights
                .par_iter()
                .map(|(j, wj)| {
                    let mut e = vec![0.0; p];
                    e[*j] = 1.0;
                    let u = z_times_solve(&e)?;
                    Ok(wj * wdot(&u, &u))
                })
                .collect();
            let mut diag_term = 0.0;
            for v in parts {
                diag_term += v?;
            }
            let mut wvec = vec![0.0; p];
            for (j, wj) in weights {
                wvec[*j] = *wj;
            }
            let uw = z_times_solve(&wvec)?;
            Ok(diag_term - wdot(&uw, &uw))
        }
        QuadraticFormSpec::WeightedCovariance { pairs } => {
            let da: BTreeSet<usize> = pairs.iter().map(|(a, _, _)| *a).collect();
            let db: BTreeSet<usize> = pairs.iter().map(|(_, b, _)| *b).collect();
            // Work from the smaller side; S is symmetric so the pairing can
            // be flipped freely.
            let flipped = da.len() < db.len();
            let mut grouped: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
            for (a, b, w) in pairs {
                let (pivot, other) = if flipped { (*a, *b) } else { (*b, *a) };
                grouped.entry(pivot).or_default().push((other, *w));
            }
            let items: Vec<(usize, Vec<(usize, f64)>)> = grouped.into_iter().collect();
            let parts: Vec<Result<f64>> = items
                .par_iter()
                .map(|(pivot, others)| {
                    let mut v = vec![0.0; p];
                    for (col, w) in others {
                        v[*col] += w;
                    }
                    let sv = apply_s_omega(bundle, omega, &v)?;
                    Ok(sv[*pivot])
                })
                .collect();
            let mut cross = 0.0;
            for v in parts {
                cross += v?;
            }
            let mut avec = vec![0.0; p];
            let mut bvec = vec![0.0; p];
            for (a, b, w) in pairs {
                avec[*a] += w;
                bvec[*b] += w;
            }
            let ua = z_times_solve(&avec)?;
            let ub = z_times_solve(&bvec)?;
            Ok(cross - wdot(&ua, &ub))
        }
        QuadraticFormSpec::CustomSparse { triplets } => {
            let mut by_col: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
            for (j, k, v) in triplets {
                by_col.entry(*k).or_default().push((*j, *v));
            }
            let items: Vec<(usize, Vec<(usize, f64)>)> = by_col.into_iter().collect();
            let parts: Vec<Result<f64>> = items
                .par_iter()
                .map(|(k, rows)| {
                    let mut e = vec![0.0; p];
                    e[*k] = 1.0;
                    let sk = apply_s_omega(bundle, omega, &e)?;
                    Ok(rows.iter().map(|(j, v)| v * sk[*j]).sum::<f64>())
                })
                .collect();
            let mut total = 0.0;
            for v in parts {
                total += v?;
            }
            Ok(total)
        }
    }
}

/// How to obtain the diagonal of S(Z).
#[derive(Debug, Clone, Copy)]
pub enum SDiagMethod {
    /// Exact when the backend solves are cheap or p is small, probed
    /// otherwise.
    Auto,
    Exact,
    Probed { probes: usize, seed: u64 },
}

/// Diagonal of the sampling covariance S(Z). The exact path costs one Gram
/// solve per column via S_jj = (Z c_j)' Omega (Z c_j); the probed path is the
/// Rademacher diagonal estimator mean(g .* S g).
pub fn s_diagonal(bundle: &EstimateBundle, noise: &NoiseSpec, method: SDiagMethod) -> Result<Vec<f64>> {
    let design = bundle.design();
    let p = design.n_effects();
    let n = design.n_obs();
    let omega = noise.omega_diag(n)?;
    let exact = match method {
        SDiagMethod::Exact => true,
        SDiagMethod::Probed { .. } => false,
        SDiagMethod::Auto => {
            p <= bundle.gram.opts.dense_cap
                || matches!(bundle.gram.kind(), SolverKind::Diagonal | SolverKind::TwoLevel)
        }
    };
    if exact {
        let parts: Vec<Result<f64>> = (0..p)
            .into_par_iter()
            .map(|j| {
                let mut e = vec![0.0; p];
                e[j] = 1.0;
                let c = bundle.gram.solve(&e)?;
                let mut u = vec![0.0; n];
                design.matvec(&c, &mut u);
                Ok(u.iter().zip(&omega).map(|(x, w)| x * x * w).sum())
            })
            .collect();
        let mut out = Vec::with_capacity(p);
        for v in parts {
            out.push(v?);
        }
        Ok(out)
    } else {
        let (probes, seed) = match method {
            SDiagMethod::Probed { probes, seed } => (probes, seed),
            _ => (512, 0x5d1a6),
        };
        let vals: Vec<Result<Vec<f64>>> = (0..probes)
            .into_par_iter()
            .map(|probe| {
                let mut rng = stream_rng(seed, StreamDomain::DiagProbe, probe as u64);
                let g: Vec<f64> =
                    (0..p).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
                let sg = apply_s_omega(bundle, &omega, &g)?;
                Ok(g.iter().zip(&sg).map(|(gi, si)| gi * si).collect())
            })
            .collect();
        let mut out = vec![0.0; p];
        for v in vals {
            let v = v?;
            for j in 0..p {
                out[j] += v[j];
            }
        }
        for v in &mut out {
            *v /= probes as f64;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{
        build_akm_design, build_block_design, finalize_identification, identity_design,
        NormalizationRule, Spell,
    };
    use approx::assert_relative_eq;

    fn opts() -> SolveOptions {
        SolveOptions::default()
    }

    #[test]
    fn ols_identity_returns_outcomes() {
        let z = Arc::new(identity_design(4));
        let y = vec![0.5, -1.0, 2.0, 0.0];
        let fit = ols_fit(z, &y, &opts()).unwrap();
        for (a, b) in fit.eta_hat().iter().zip(&y) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn ols_block_design_recovers_group_mean() {
        let units: Vec<String> = ["A", "A", "B"].iter().map(|s| s.to_string()).collect();
        let z = build_block_design(&units, None).unwrap();
        let z = finalize_identification(z, NormalizationRule::DropLastFirm).unwrap();
        let fit = ols_fit(Arc::new(z), &[1.0, 3.0, 7.0], &opts()).unwrap();
        assert_relative_eq!(fit.eta_hat()[0], 2.0, epsilon = 1e-10);
        assert_relative_eq!(fit.eta_hat()[1], 7.0, epsilon = 1e-10);
    }

    fn akm_fixture() -> Arc<DesignMatrix> {
        let spells = vec![
            Spell { worker: "w1".into(), firm: "f1".into(), period: 1 },
            Spell { worker: "w1".into(), firm: "f1".into(), period: 2 },
            Spell { worker: "w2".into(), firm: "f1".into(), period: 1 },
            Spell { worker: "w2".into(), firm: "f2".into(), period: 2 },
        ];
        let (z, _) = build_akm_design(&spells).unwrap();
        Arc::new(finalize_identification(z, NormalizationRule::DropLastFirm).unwrap())
    }

    #[test]
    fn ols_akm_recovers_effects_up_to_normalization() {
        // alpha = (0.3, -0.2), psi = (0.1, 0.4); dropping f2 shifts worker
        // effects by psi_2 and firm effects by -psi_2.
        let z = akm_fixture();
        let (a1, a2, p1, p2) = (0.3, -0.2, 0.1, 0.4);
        let y = vec![a1 + p1, a1 + p1, a2 + p1, a2 + p2];
        let fit = ols_fit(z, &y, &opts()).unwrap();
        let eta = fit.eta_hat();
        assert_relative_eq!(eta[0], a1 + p2, epsilon = 1e-8);
        assert_relative_eq!(eta[1], a2 + p2, epsilon = 1e-8);
        assert_relative_eq!(eta[2], p1 - p2, epsilon = 1e-8);
    }

    #[test]
    fn solver_backends_agree_on_akm() {
        let z = akm_fixture();
        let y = vec![1.0, 0.5, -0.25, 2.0];
        let mut results = Vec::new();
        for kind in [
            SolverKind::TwoLevel,
            SolverKind::DenseCholesky,
            SolverKind::ConjugateGradient,
        ] {
            let o = SolveOptions { force: Some(kind), ..opts() };
            let fit = ols_fit(z.clone(), &y, &o).unwrap();
            results.push(fit.eta_hat().to_vec());
        }
        for r in &results[1..] {
            for (a, b) in r.iter().zip(&results[0]) {
                assert_relative_eq!(a, b, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn apply_s_scalar_case() {
        // Z = (1,1)', sigma2 = 1: S = 1/2.
        let units: Vec<String> = vec!["A".to_string(), "A".to_string()];
        let z = build_block_design(&units, None).unwrap();
        let z = finalize_identification(z, NormalizationRule::DropLastFirm).unwrap();
        let fit = ols_fit(Arc::new(z), &[0.0, 0.0], &opts()).unwrap();
        let noise = NoiseSpec::homoskedastic(1.0).unwrap();
        let s = apply_s(&fit, &noise, &[1.0]).unwrap();
        assert_relative_eq!(s[0], 0.5, epsilon = 1e-12);
        let z0 = apply_s(&fit, &noise, &[0.0]).unwrap();
        assert_eq!(z0[0], 0.0);
    }

    #[test]
    fn apply_s_is_symmetric_psd() {
        let z = akm_fixture();
        let y = vec![1.0, 0.5, -0.25, 2.0];
        let fit = ols_fit(z, &y, &opts()).unwrap();
        let noise = NoiseSpec::homoskedastic(0.3).unwrap();
        let mut rng = stream_rng(11, StreamDomain::TraceProbe, 99);
        for _ in 0..5 {
            let g: Vec<f64> = (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let h: Vec<f64> = (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let sg = apply_s(&fit, &noise, &g).unwrap();
            let sh = apply_s(&fit, &noise, &h).unwrap();
            assert_relative_eq!(dot(&g, &sh), dot(&h, &sg), epsilon = 1e-10);
            assert!(dot(&g, &sg) >= -1e-10);
        }
    }

    #[test]
    fn leverage_of_group_mean() {
        let units: Vec<String> = vec!["A".into(), "A".into(), "A".into(), "A".into()];
        let z = build_block_design(&units, None).unwrap();
        let z = finalize_identification(z, NormalizationRule::DropLastFirm).unwrap();
        let gram = GramSolver::new(Arc::new(z), None, &opts()).unwrap();
        let lev = leverage_diagonals(&gram, LeverageMode::Exact).unwrap();
        for l in lev {
            assert_relative_eq!(l, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn leverages_sum_to_p_and_stay_in_unit_interval() {
        let z = akm_fixture();
        let p = z.n_effects();
        let gram = GramSolver::new(z, None, &opts()).unwrap();
        let lev = leverage_diagonals(&gram, LeverageMode::Exact).unwrap();
        let total: f64 = lev.iter().sum();
        assert_relative_eq!(total, p as f64, epsilon = 1e-8);
        for l in lev {
            assert!((-1e-12..=1.0 + 1e-12).contains(&l));
        }
    }

    #[test]
    fn sketched_leverages_close_to_exact() {
        let spells: Vec<Spell> = (0..100)
            .flat_map(|k| {
                let w = format!("w{k:03}");
                (1..=8u32).map(move |t| Spell {
                    worker: w.clone(),
                    firm: format!("f{:02}", (k + t as usize) % 12),
                    period: t,
                })
            })
            .collect();
        let (z, _) = build_akm_design(&spells).unwrap();
        let z = finalize_identification(z, NormalizationRule::DropLastFirm).unwrap();
        let gram = GramSolver::new(Arc::new(z), None, &opts()).unwrap();
        let exact = leverage_diagonals(&gram, LeverageMode::Exact).unwrap();
        let sketch =
            leverage_diagonals(&gram, LeverageMode::Sketched { probes: 500, seed: 3 }).unwrap();
        let max_err = exact
            .iter()
            .zip(&sketch)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err < 0.05, "max leverage sketch error {max_err}");
    }

    #[test]
    fn exact_leverage_refused_above_cap() {
        let z = Arc::new(identity_design(4));
        let o = SolveOptions { leverage_exact_cap: 2, ..opts() };
        let gram = GramSolver::new(z, None, &o).unwrap();
        let err = leverage_diagonals(&gram, LeverageMode::Exact).unwrap_err();
        assert!(err.to_string().contains("exceeds cap"));
    }

    #[test]
    fn trace_uniform_variance_small_instance() {
        // p = 2, S = 0.1 I, uniform weighted variance: trace = 0.05.
        let z = Arc::new(identity_design(2));
        let fit = ols_fit(z, &[0.0, 0.0], &opts()).unwrap();
        let noise = NoiseSpec::homoskedastic(0.1).unwrap();
        let q = QuadraticFormSpec::uniform_variance(0..2).unwrap();
        let t = trace_qs(&q, &fit, &noise, 1, 7).unwrap();
        assert!(t.exact);
        assert_relative_eq!(t.value, 0.05, epsilon = 1e-12);
    }

    #[test]
    fn trace_zero_custom_q() {
        let z = Arc::new(identity_design(3));
        let fit = ols_fit(z, &[0.0; 3], &opts()).unwrap();
        let noise = NoiseSpec::homoskedastic(1.0).unwrap();
        let q = QuadraticFormSpec::custom_sparse(vec![]).unwrap();
        let t = trace_qs(&q, &fit, &noise, 4, 7).unwrap();
        assert_eq!(t.value, 0.0);
    }

    #[test]
    fn hutchinson_matches_exact_on_akm() {
        let z = akm_fixture();
        let y = vec![1.0, 0.5, -0.25, 2.0];
        let fit = ols_fit(z, &y, &opts()).unwrap();
        let noise = NoiseSpec::homoskedastic(0.5).unwrap();
        let q = QuadraticFormSpec::uniform_variance(0..3).unwrap();
        let exact = trace_qs_exact(&q, &fit, &noise).unwrap().value;
        let probe = trace_qs_hutchinson(&q, &fit, &noise, 4000, 123).unwrap();
        assert!(!probe.exact);
        assert_relative_eq!(probe.value, exact, max_relative = 0.05);
    }

    #[test]
    fn hutchinson_is_bit_reproducible() {
        let z = akm_fixture();
        let y = vec![1.0, 0.5, -0.25, 2.0];
        let fit = ols_fit(z, &y, &opts()).unwrap();
        let noise = NoiseSpec::homoskedastic(0.5).unwrap();
        let q = QuadraticFormSpec::uniform_variance(0..3).unwrap();
        let a = trace_qs_hutchinson(&q, &fit, &noise, 64, 9).unwrap().value;
        let b = trace_qs_hutchinson(&q, &fit, &noise, 64, 9).unwrap().value;
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn covariance_trace_matches_dense_oracle() {
        let z = akm_fixture();
        let y = vec![1.0, 0.5, -0.25, 2.0];
        let fit = ols_fit(z.clone(), &y, &opts()).unwrap();
        let noise = NoiseSpec::homoskedastic(0.7).unwrap();
        // Pair worker columns with the remaining firm column.
        let q = QuadraticFormSpec::weighted_covariance(vec![(0, 2, 0.5), (1, 2, 0.5)]).unwrap();
        let t = trace_qs_exact(&q, &fit, &noise).unwrap().value;

        let zd = z.to_dense();
        let gram_inv = (zd.transpose() * &zd).try_inverse().unwrap();
        let s = &gram_inv * zd.transpose() * 0.7 * &zd * &gram_inv;
        let qd = q.to_dense(3);
        let oracle = (qd * s).trace();
        assert_relative_eq!(t, oracle, epsilon = 1e-10);
    }

    #[test]
    fn linear_form_dot() {
        let c = LinearFormSpec::new(vec![(1, 2.0), (3, -1.0)]).unwrap();
        assert_eq!(c.dot(&[1.0, 10.0, 0.0, 4.0]), 16.0);
    }
}
