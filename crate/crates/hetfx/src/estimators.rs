//! Estimators for functionals of the effects: three strategies.
//!
//! 1. Fixed-effects: linear combinations `c' eta_hat` are unbiased as they
//!    stand; quadratic forms are debiased by subtracting `Trace(Q S(Z))`
//!    ([`fe_linear`], [`fe_quadratic_bc`]).
//! 2. Model-based: evaluate closed forms on the fitted mean and covariance
//!    functions -- `c' mu`, `mu' Q mu + Trace(Q Sigma)`, the normal-mixture
//!    CDF, and Monte Carlo integration over `N(mu, Sigma)` for general
//!    functionals ([`model_linear`], [`model_quadratic`], [`model_cdf`],
//!    [`model_nonlinear`]).
//! 3. Posterior: evaluate under the conditional law of the effects given the
//!    data, `N(E[eta | Y, Z], G(Z))` with `G = (S^{-1} + Sigma^{-1})^{-1}`,
//!    which tends to the model-based answer when the estimates are noisy and
//!    recovers the plug-in answer when they are precise
//!    ([`posterior_state`], [`posterior_nonlinear`]).
//!
//! The scalar i.i.d. shrinkage formula is kept as a reference implementation
//! ([`simple_shrinkage`]); the posterior mean reduces to it coordinate-wise
//! whenever both S and Sigma are diagonal.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use statrs::function::erf::erfc;

use crate::design::DesignMatrix;
use crate::error::{Error, Result};
use crate::noise::NoiseSpec;
use crate::rc::{RCSpec, SigmaOp};
use crate::rng::{stream_rng, StreamDomain};
use crate::solve::{
    trace_qs, EstimateBundle, GramSolver, LinearFormSpec, QuadraticFormSpec, SolverKind,
    TraceEstimate,
};

fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Fixed-effects estimator of a linear combination: c' eta_hat.
pub fn fe_linear(c: &LinearFormSpec, bundle: &EstimateBundle) -> f64 {
    c.dot(bundle.eta_hat())
}

/// Plug-in and bias-corrected fixed-effects estimates of a quadratic form.
#[derive(Debug, Clone, Copy)]
pub struct FeQuadratic {
    /// eta_hat' Q eta_hat.
    pub plug_in: f64,
    /// plug_in - Trace(Q S(Z)).
    pub corrected: f64,
    pub trace: TraceEstimate,
}

/// Bias-corrected fixed-effects estimator of `E[eta' Q eta]`. Under
/// homoskedastic noise the correction equals `sigma2 Trace(Q (Z'Z)^{-1})`.
pub fn fe_quadratic_bc(
    q: &QuadraticFormSpec,
    bundle: &EstimateBundle,
    noise: &NoiseSpec,
    probes: usize,
    seed: u64,
) -> Result<FeQuadratic> {
    let plug_in = q.quad(bundle.eta_hat());
    let trace = trace_qs(q, bundle, noise, probes, seed)?;
    Ok(FeQuadratic { plug_in, corrected: plug_in - trace.value, trace })
}

/// Model-based estimate of a linear combination: c' mu(Z).
pub fn model_linear(c: &LinearFormSpec, rc: &RCSpec, p: usize) -> Result<f64> {
    Ok(c.dot(&rc.mu_vector(p)?))
}

/// Model-based estimate of a quadratic form:
/// mu' Q mu + Trace(Q Sigma), both in closed form.
pub fn model_quadratic(q: &QuadraticFormSpec, rc: &RCSpec, p: usize) -> Result<f64> {
    let mu = rc.mu_vector(p)?;
    let sigma = rc.sigma_op(p)?;
    Ok(q.quad(&mu) + sigma.trace_q(q))
}

/// Nonlinear functionals of the effect vector.
#[derive(Clone)]
pub enum NonlinearFunctional {
    /// Uniform central moment of order k (2, 3, 4): the variance, skewness,
    /// and kurtosis building blocks.
    MomentPower { k: u8 },
    /// Weighted CDF at a: sum_j w_j 1{eta_j <= a}.
    CdfAt { a: f64, weights: Vec<(usize, f64)> },
    /// Weighted density at a, via a Gaussian kernel over the draws;
    /// `bandwidth: None` applies Silverman's rule to the realized draws (a
    /// smoothing choice of this crate, not part of the model).
    DensityAt { a: f64, weights: Vec<(usize, f64)>, bandwidth: Option<f64> },
    /// Arbitrary functional of the effect vector.
    Custom(Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>),
}

impl NonlinearFunctional {
    pub fn cdf_at(a: f64, weights: Vec<(usize, f64)>) -> Result<Self> {
        validate_prob_weights(&weights)?;
        Ok(NonlinearFunctional::CdfAt { a, weights })
    }

    pub fn uniform_cdf_at(a: f64, p: usize) -> Result<Self> {
        NonlinearFunctional::cdf_at(a, (0..p).map(|j| (j, 1.0 / p as f64)).collect())
    }

    pub fn density_at(a: f64, weights: Vec<(usize, f64)>, bandwidth: Option<f64>) -> Result<Self> {
        validate_prob_weights(&weights)?;
        if let Some(h) = bandwidth {
            if !(h > 0.0) {
                return Err(Error::input("bandwidth must be positive"));
            }
        }
        Ok(NonlinearFunctional::DensityAt { a, weights, bandwidth })
    }

    pub fn moment_power(k: u8) -> Result<Self> {
        if !(2..=4).contains(&k) {
            return Err(Error::input("moment power must be 2, 3, or 4"));
        }
        Ok(NonlinearFunctional::MomentPower { k })
    }

    pub fn custom(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        NonlinearFunctional::Custom(Arc::new(f))
    }

    fn eval(&self, eta: &[f64], bandwidth: Option<f64>) -> f64 {
        match self {
            NonlinearFunctional::MomentPower { k } => {
                let p = eta.len() as f64;
                let mean = eta.iter().sum::<f64>() / p;
                eta.iter().map(|e| (e - mean).powi(*k as i32)).sum::<f64>() / p
            }
            NonlinearFunctional::CdfAt { a, weights } => {
                weights.iter().map(|(j, w)| if eta[*j] <= *a { *w } else { 0.0 }).sum()
            }
            NonlinearFunctional::DensityAt { a, weights, .. } => {
                let h = bandwidth.expect("density evaluation requires a bandwidth");
                let norm = 1.0 / (h * (2.0 * std::f64::consts::PI).sqrt());
                weights
                    .iter()
                    .map(|(j, w)| {
                        let u = (a - eta[*j]) / h;
                        w * norm * (-0.5 * u * u).exp()
                    })
                    .sum()
            }
            NonlinearFunctional::Custom(f) => f(eta),
        }
    }

    fn support(&self) -> Option<Vec<usize>> {
        match self {
            NonlinearFunctional::DensityAt { weights, .. } => {
                Some(weights.iter().filter(|(_, w)| *w > 0.0).map(|(j, _)| *j).collect())
            }
            _ => None,
        }
    }

    fn needs_bandwidth(&self) -> bool {
        matches!(self, NonlinearFunctional::DensityAt { bandwidth: None, .. })
    }

    fn given_bandwidth(&self) -> Option<f64> {
        match self {
            NonlinearFunctional::DensityAt { bandwidth, .. } => *bandwidth,
            _ => None,
        }
    }
}

fn validate_prob_weights(weights: &[(usize, f64)]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::input("weight set is empty"));
    }
    let mut total = 0.0;
    for (_, w) in weights {
        if !w.is_finite() || *w < 0.0 {
            return Err(Error::input("weights must be finite and nonnegative"));
        }
        total += w;
    }
    if (total - 1.0).abs() > 1e-8 {
        return Err(Error::input(format!("weights must sum to one, got {total}")));
    }
    Ok(())
}

/// Model-based weighted CDF in closed form:
/// sum_j w_j Phi((a - mu_j) / sqrt(Sigma_jj)); a zero-variance unit
/// contributes the degenerate step 1{mu_j <= a}.
pub fn model_cdf(f: &NonlinearFunctional, rc: &RCSpec, p: usize) -> Result<f64> {
    let NonlinearFunctional::CdfAt { a, weights } = f else {
        return Err(Error::input("model_cdf expects a cdf_at functional"));
    };
    let mu = rc.mu_vector(p)?;
    let sigma = rc.sigma_op(p)?;
    let mut total = 0.0;
    for (j, w) in weights {
        let sjj = sigma.entry(*j, *j);
        total += if sjj > 0.0 {
            w * normal_cdf((a - mu[*j]) / sjj.sqrt())
        } else if mu[*j] <= *a {
            *w
        } else {
            0.0
        };
    }
    Ok(total)
}

/// A sampler writes `center + sign * L eps` into `out` for the draw stream
/// `rng`; antithetic pairs reuse one stream with opposite signs.
trait DrawSampler: Sync {
    fn draw(&self, rng: &mut rand_chacha::ChaCha8Rng, sign: f64, out: &mut [f64]);
    fn center(&self) -> &[f64];
}

struct ModelSampler<'a> {
    mu: &'a [f64],
    sigma: &'a SigmaOp,
}

impl DrawSampler for ModelSampler<'_> {
    fn draw(&self, rng: &mut rand_chacha::ChaCha8Rng, sign: f64, out: &mut [f64]) {
        out.copy_from_slice(self.mu);
        self.sigma.sample_add_signed(rng, sign, out);
    }

    fn center(&self) -> &[f64] {
        self.mu
    }
}

/// Antithetic Monte Carlo over draws from a sampler, deterministic given the
/// seed: pair i uses the stream (seed, pair i) with signs +1/-1, and partial
/// sums are reduced in pair order.
fn mc_functional(
    f: &NonlinearFunctional,
    sampler: &dyn DrawSampler,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    if draws == 0 {
        return Err(Error::input("Monte Carlo integration requires draws >= 1"));
    }
    let p = sampler.center().len();
    let bandwidth = if f.needs_bandwidth() {
        Some(silverman_bandwidth(f, sampler, seed)?)
    } else {
        f.given_bandwidth()
    };
    let pairs = draws.div_ceil(2);
    let sums: Vec<f64> = (0..pairs)
        .into_par_iter()
        .map_init(
            || vec![0.0; p],
            |buf, pair| {
                let mut rng = stream_rng(seed, StreamDomain::DrawBatch, pair as u64);
                sampler.draw(&mut rng, 1.0, buf);
                let mut acc = f.eval(buf, bandwidth);
                if 2 * pair + 1 < draws {
                    let mut rng = stream_rng(seed, StreamDomain::DrawBatch, pair as u64);
                    sampler.draw(&mut rng, -1.0, buf);
                    acc += f.eval(buf, bandwidth);
                }
                acc
            },
        )
        .collect();
    Ok(sums.iter().sum::<f64>() / draws as f64)
}

/// Silverman's rule on a pilot sample of draws restricted to the
/// functional's support.
fn silverman_bandwidth(
    f: &NonlinearFunctional,
    sampler: &dyn DrawSampler,
    seed: u64,
) -> Result<f64> {
    let support = f.support().unwrap_or_default();
    if support.is_empty() {
        return Err(Error::input("density functional has empty support"));
    }
    let p = sampler.center().len();
    const PILOT_PAIRS: usize = 128;
    let mut pool = Vec::with_capacity(2 * PILOT_PAIRS * support.len());
    let mut buf = vec![0.0; p];
    for pair in 0..PILOT_PAIRS {
        for sign in [1.0, -1.0] {
            let mut rng = stream_rng(seed ^ 0xBA4D, StreamDomain::DrawBatch, pair as u64);
            sampler.draw(&mut rng, sign, &mut buf);
            pool.extend(support.iter().map(|&j| buf[j]));
        }
    }
    pool.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = pool.len();
    let mean = pool.iter().sum::<f64>() / m as f64;
    let sd = (pool.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64).sqrt();
    let iqr = pool[(3 * m) / 4] - pool[m / 4];
    let spread = sd.min(iqr / 1.34).max(1e-12);
    Ok(0.9 * spread * (m as f64).powf(-0.2))
}

/// Model-based Monte Carlo estimate of `E[H(eta)]` over `N(mu, Sigma)` with
/// antithetic pairs; grouped covariances are respected by the draws.
pub fn model_nonlinear(
    f: &NonlinearFunctional,
    rc: &RCSpec,
    p: usize,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let mu = rc.mu_vector(p)?;
    let sigma = rc.sigma_op(p)?;
    mc_functional(f, &ModelSampler { mu: &mu, sigma: &sigma }, draws, seed)
}

/// Options for the posterior computation.
#[derive(Debug, Clone)]
pub struct PosteriorOptions {
    /// Relative tolerance for the conjugate-gradient solve on
    /// S^{-1} + Sigma^{-1}.
    pub rel_tol: f64,
    pub max_iter_factor: usize,
    /// Exact G diagonal (one solve per effect) when p is at most this cap;
    /// probed beyond it.
    pub exact_diag_cap: usize,
    pub diag_probes: usize,
    /// Realize within-group blocks of G for grouped Sigma when p is at most
    /// this cap.
    pub block_cap: usize,
    /// Seed for probed diagonals.
    pub seed: u64,
    /// Disable the closed-form diagonal shortcut (testing).
    pub force_operator: bool,
}

impl Default for PosteriorOptions {
    fn default() -> Self {
        PosteriorOptions {
            rel_tol: 1e-8,
            max_iter_factor: 40,
            exact_diag_cap: 512,
            diag_probes: 128,
            block_cap: 2000,
            seed: 0x9057,
            force_operator: false,
        }
    }
}

/// Posterior means and covariance operator of the effects given the data.
pub struct PosteriorState {
    post_mean: Vec<f64>,
    g_diag: Vec<f64>,
    blocks: Option<Vec<GBlock>>,
    op: PosteriorOp,
    /// Nonpositive noise moments were floored to keep S positive definite.
    pub noise_floored: bool,
}

struct GBlock {
    indices: Vec<usize>,
    /// Square-root factor of the within-group block of G.
    sqrt: DMatrix<f64>,
}

struct PosteriorOp {
    design: Arc<DesignMatrix>,
    weighted: GramSolver,
    sigma: SigmaOp,
    precond_inv: Vec<f64>,
    rel_tol: f64,
    max_iter: usize,
}

impl PosteriorOp {
    /// S^{-1} v = (Z'Z) (Z' Omega Z)^{-1} (Z'Z) v.
    fn apply_sinv(&self, v: &[f64]) -> Result<Vec<f64>> {
        let n = self.design.n_obs();
        let p = self.design.n_effects();
        let mut scratch = vec![0.0; n];
        let mut t = vec![0.0; p];
        self.design.weighted_gram_matvec(None, v, &mut scratch, &mut t);
        let u = self.weighted.solve(&t)?;
        let mut out = vec![0.0; p];
        self.design.weighted_gram_matvec(None, &u, &mut scratch, &mut out);
        Ok(out)
    }

    fn apply_a(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.apply_sinv(v)?;
        for (o, s) in out.iter_mut().zip(self.sigma.inv_matvec(v)?) {
            *o += s;
        }
        Ok(out)
    }

    fn solve_a(&self, b: &[f64]) -> Result<Vec<f64>> {
        cg_operator(|v| self.apply_a(v), b, &self.precond_inv, self.rel_tol, self.max_iter)
    }
}

fn cg_operator<F>(
    apply: F,
    b: &[f64],
    precond_inv: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let p = b.len();
    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if bnorm == 0.0 {
        return Ok(vec![0.0; p]);
    }
    let mut x = vec![0.0; p];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(precond_inv).map(|(ri, mi)| ri * mi).collect();
    let mut pdir = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    for _ in 0..max_iter {
        let ap = apply(&pdir)?;
        let pap: f64 = pdir.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 || !pap.is_finite() {
            return Err(Error::numerical(format!(
                "posterior solve breakdown: curvature {pap:.3e}"
            )));
        }
        let alpha = rz / pap;
        for j in 0..p {
            x[j] += alpha * pdir[j];
            r[j] -= alpha * ap[j];
        }
        let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rnorm <= tol * bnorm {
            return Ok(x);
        }
        for j in 0..p {
            z[j] = r[j] * precond_inv[j];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        for j in 0..p {
            pdir[j] = z[j] + beta * pdir[j];
        }
        rz = rz_new;
    }
    Err(Error::numerical(format!(
        "posterior conjugate gradient did not converge in {max_iter} iterations"
    )))
}

/// Posterior mean and covariance of the effects: solves
/// `(S^{-1} + Sigma^{-1}) m = S^{-1} eta_hat + Sigma^{-1} mu` on the operator
/// form without materializing inverses, and exposes G through an operator
/// handle plus an exact or probed diagonal. When both S and Sigma are
/// diagonal the closed-form precision-weighted average is used directly.
pub fn posterior_state(
    bundle: &EstimateBundle,
    noise: &NoiseSpec,
    rc: &RCSpec,
    opts: &PosteriorOptions,
) -> Result<PosteriorState> {
    let design = bundle.design().clone();
    let n = design.n_obs();
    let p = design.n_effects();
    let mut omega = noise.omega_diag(n)?;
    // S must be positive definite in the precision form. Raw leave-out
    // moments can be nonpositive; floor them at 1% of the mean absolute
    // level so no observation carries unbounded precision.
    let mut noise_floored = false;
    let scale = omega.iter().map(|w| w.abs()).sum::<f64>() / n as f64;
    let floor = (1e-2 * scale).max(1e-300);
    for w in &mut omega {
        if *w < floor {
            *w = floor;
            noise_floored = true;
        }
    }
    let sigma = rc.sigma_op(p)?.ensure_pd(1e-12);
    let mu = rc.mu_vector(p)?;
    let eta = bundle.eta_hat();

    let diagonal_path = !opts.force_operator
        && bundle.gram().kind() == SolverKind::Diagonal
        && sigma.is_diagonal();
    if diagonal_path {
        // S_jj = (sum_i w_i z_ij^2) / (sum_i z_ij^2)^2 when the Gram matrix
        // is diagonal.
        let d = design.weighted_gram_diag(None);
        let wd = design.weighted_gram_diag(Some(&omega));
        let mut post_mean = Vec::with_capacity(p);
        let mut g_diag = Vec::with_capacity(p);
        for j in 0..p {
            let sjj = wd[j] / (d[j] * d[j]);
            let sigjj = sigma.entry(j, j);
            let prec = 1.0 / sjj + 1.0 / sigjj;
            post_mean.push((eta[j] / sjj + mu[j] / sigjj) / prec);
            g_diag.push(1.0 / prec);
        }
        let weighted = GramSolver::new(design.clone(), Some(omega), bundle.gram().options())?;
        let op = PosteriorOp {
            design,
            weighted,
            sigma,
            precond_inv: g_diag.clone(),
            rel_tol: opts.rel_tol,
            max_iter: (opts.max_iter_factor * p).max(50),
        };
        return Ok(PosteriorState { post_mean, g_diag, blocks: None, op, noise_floored });
    }

    let weighted = GramSolver::new(design.clone(), Some(omega.clone()), bundle.gram().options())?;
    // Jacobi preconditioner from the diagonal approximation of
    // S^{-1} + Sigma^{-1}; exact whenever both pieces are diagonal.
    let d = design.weighted_gram_diag(None);
    let wd = design.weighted_gram_diag(Some(&omega));
    let sdiag = sigma.diag_entries();
    let precond_inv: Vec<f64> =
        (0..p).map(|j| 1.0 / (d[j] * d[j] / wd[j] + 1.0 / sdiag[j].max(1e-300))).collect();
    let op = PosteriorOp {
        design: design.clone(),
        weighted,
        sigma,
        precond_inv,
        rel_tol: opts.rel_tol,
        max_iter: (opts.max_iter_factor * p).max(50),
    };

    let mut rhs = op.apply_sinv(eta)?;
    for (r, s) in rhs.iter_mut().zip(op.sigma.inv_matvec(&mu)?) {
        *r += s;
    }
    let post_mean = op.solve_a(&rhs)?;

    // G diagonal: exact column solves for small p, Rademacher probes beyond.
    let g_diag = if p <= opts.exact_diag_cap {
        let cols: Vec<Result<f64>> = (0..p)
            .into_par_iter()
            .map(|j| {
                let mut e = vec![0.0; p];
                e[j] = 1.0;
                Ok(op.solve_a(&e)?[j])
            })
            .collect();
        let mut out = Vec::with_capacity(p);
        for c in cols {
            out.push(c?);
        }
        out
    } else {
        let probes = opts.diag_probes.max(1);
        let vals: Vec<Result<Vec<f64>>> = (0..probes)
            .into_par_iter()
            .map(|probe| {
                let mut rng = stream_rng(opts.seed, StreamDomain::DiagProbe, probe as u64);
                let g: Vec<f64> =
                    (0..p).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
                let gg = op.solve_a(&g)?;
                Ok(g.iter().zip(&gg).map(|(a, b)| a * b).collect())
            })
            .collect();
        let mut out = vec![0.0; p];
        for v in vals {
            for (o, x) in out.iter_mut().zip(v?) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= probes as f64;
        }
        out
    };

    // Within-group blocks of G for grouped Sigma: dense square roots per
    // group, never a full p x p factor.
    let blocks = match (&rc.grouping, p <= opts.block_cap) {
        (Some(grouping), true) if !op.sigma.is_diagonal() => {
            let mut blocks = Vec::new();
            for mem in grouping.members() {
                let m = mem.len();
                let cols: Vec<Result<Vec<f64>>> = mem
                    .par_iter()
                    .map(|&j| {
                        let mut e = vec![0.0; p];
                        e[j] = 1.0;
                        op.solve_a(&e)
                    })
                    .collect();
                let mut block = DMatrix::zeros(m, m);
                for (ci, col) in cols.into_iter().enumerate() {
                    let col = col?;
                    for (ri, &j) in mem.iter().enumerate() {
                        block[(ri, ci)] = col[j];
                    }
                }
                let sym = 0.5 * (&block + block.transpose());
                let eig = SymmetricEigen::new(sym);
                let mut sqrt = DMatrix::zeros(m, m);
                for (k, ev) in eig.eigenvalues.iter().enumerate() {
                    if *ev > 0.0 {
                        let col = eig.eigenvectors.column(k) * ev.sqrt();
                        sqrt.set_column(k, &col);
                    }
                }
                blocks.push(GBlock { indices: mem, sqrt });
            }
            Some(blocks)
        }
        _ => None,
    };

    Ok(PosteriorState { post_mean, g_diag, blocks, op, noise_floored })
}

impl PosteriorState {
    pub fn post_mean(&self) -> &[f64] {
        &self.post_mean
    }

    pub fn g_diag(&self) -> &[f64] {
        &self.g_diag
    }

    /// Apply the posterior covariance operator G to a vector.
    pub fn apply_g(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.op.solve_a(v)
    }

    pub fn n_effects(&self) -> usize {
        self.post_mean.len()
    }
}

struct PosteriorSampler<'a> {
    state: &'a PosteriorState,
}

impl DrawSampler for PosteriorSampler<'_> {
    fn draw(&self, rng: &mut rand_chacha::ChaCha8Rng, sign: f64, out: &mut [f64]) {
        out.copy_from_slice(&self.state.post_mean);
        match &self.state.blocks {
            Some(blocks) => {
                for block in blocks {
                    let m = block.indices.len();
                    let eps = DVector::from_iterator(
                        m,
                        (0..m).map(|_| sign * rng.sample::<f64, _>(StandardNormal)),
                    );
                    let shift = &block.sqrt * eps;
                    for (k, &j) in block.indices.iter().enumerate() {
                        out[j] += shift[k];
                    }
                }
            }
            None => {
                for (o, g) in out.iter_mut().zip(&self.state.g_diag) {
                    *o += sign * g.max(0.0).sqrt() * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
    }

    fn center(&self) -> &[f64] {
        &self.state.post_mean
    }
}

/// Posterior estimator of `E[H(eta)]`: Monte Carlo mean of
/// `H(post_mean + G^{1/2} eps)` with antithetic pairs, using the
/// grouped-block or diagonal square root of G. Deterministic given the seed.
pub fn posterior_nonlinear(
    f: &NonlinearFunctional,
    state: &PosteriorState,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    mc_functional(f, &PosteriorSampler { state }, draws, seed)
}

/// Scalar linear shrinkage for the i.i.d. normal-means case:
/// (s_eta2 / (s_eta2 + s_v2)) eta_hat_j + (s_v2 / (s_eta2 + s_v2)) mu.
/// Kept as a reference implementation; the posterior mean reduces to this
/// coordinate-wise on diagonal instances.
pub fn simple_shrinkage(
    eta_hat: &[f64],
    mu: f64,
    sigma_eta2: f64,
    sigma_v2: f64,
) -> Result<Vec<f64>> {
    if sigma_eta2 < 0.0 || sigma_v2 < 0.0 {
        return Err(Error::input("variances must be nonnegative"));
    }
    let total = sigma_eta2 + sigma_v2;
    if total == 0.0 {
        return Err(Error::input("at least one of the variances must be positive"));
    }
    let w = sigma_eta2 / total;
    Ok(eta_hat.iter().map(|e| w * e + (1.0 - w) * mu).collect())
}
