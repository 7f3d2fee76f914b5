//! The random-coefficient model: mean and covariance of the effects.
//!
//! Under the model the effects satisfy `E[eta | Z] = mu(Z)` and
//! `Var[eta | Z] = Sigma(Z)`, which combine with the sampling covariance into
//! the fitting identities
//!
//! ```text
//!   E[eta_hat - mu(Z) | Z] = 0
//!   Var[eta_hat | Z]       = Sigma(Z) + S(Z)
//! ```
//!
//! Fitting proceeds by two-step minimum distance: project `eta_hat` on the
//! mean model's regressors, then match second moments of the centered
//! estimates against `Sigma + S`. Grouped specifications discretize units
//! into a small number of k-means groups and let means, variances, and
//! group-pair covariances depend on group membership only. The dense
//! quasi-log-likelihood is kept as a diagnostic, not a fitting path.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::design::DesignMatrix;
use crate::error::{Error, Result};
use crate::noise::NoiseSpec;
use crate::rng::{stream_rng, StreamDomain};
use crate::solve::{
    apply_s, checked_cholesky, s_diagonal, EstimateBundle, QuadraticFormSpec, SDiagMethod,
};

/// Assignment of the p effects to G groups.
#[derive(Debug, Clone)]
pub struct GroupAssignment {
    labels: Vec<usize>,
    centers: Vec<Vec<f64>>,
}

impl GroupAssignment {
    pub fn new(labels: Vec<usize>, centers: Vec<Vec<f64>>) -> Result<Self> {
        let g = centers.len();
        if g == 0 {
            return Err(Error::input("group assignment needs at least one group"));
        }
        let mut counts = vec![0usize; g];
        for (j, &l) in labels.iter().enumerate() {
            if l >= g {
                return Err(Error::input(format!("effect {j} assigned to missing group {l}")));
            }
            counts[l] += 1;
        }
        if let Some(gi) = counts.iter().position(|&c| c == 0) {
            return Err(Error::input(format!("group {gi} is empty")));
        }
        Ok(GroupAssignment { labels, centers })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    pub fn n_groups(&self) -> usize {
        self.centers.len()
    }

    pub fn n_effects(&self) -> usize {
        self.labels.len()
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_groups()];
        for (j, &l) in self.labels.iter().enumerate() {
            out[l].push(j);
        }
        out
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means over unit summary vectors (e.g. within-unit outcome deciles):
/// k-means++ seeding, 50 restarts on independent seed streams, Lloyd
/// iterations to relative inertia change below 1e-10, empty clusters repaired
/// by splitting the largest. Returns the restart with minimal inertia, with
/// groups renumbered in order of first appearance.
pub fn kmeans_groups(summaries: &[Vec<f64>], g: usize, seed: u64) -> Result<GroupAssignment> {
    let p = summaries.len();
    if p == 0 {
        return Err(Error::input("no unit summaries"));
    }
    if g == 0 || g > p {
        return Err(Error::input(format!("group count {g} must be in 1..={p}")));
    }
    let m = summaries[0].len();
    if m == 0 {
        return Err(Error::input("unit summaries have no columns"));
    }
    for (j, s) in summaries.iter().enumerate() {
        if s.len() != m {
            return Err(Error::input(format!("summary row {j} has wrong length")));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::input(format!("summary row {j} is not finite")));
        }
    }

    const RESTARTS: u64 = 50;
    let runs: Vec<(f64, Vec<usize>, Vec<Vec<f64>>)> = (0..RESTARTS)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, StreamDomain::KmeansRestart, r);
            kmeans_single(summaries, g, &mut rng)
        })
        .collect();
    let best = runs
        .into_iter()
        .enumerate()
        .min_by(|(ia, a), (ib, b)| a.0.partial_cmp(&b.0).unwrap().then(ia.cmp(ib)))
        .map(|(_, run)| run)
        .expect("at least one restart");

    // Canonical numbering: groups in order of first appearance.
    let (_, labels, centers) = best;
    let mut remap = vec![usize::MAX; g];
    let mut next = 0usize;
    let mut new_labels = Vec::with_capacity(p);
    for &l in &labels {
        if remap[l] == usize::MAX {
            remap[l] = next;
            next += 1;
        }
        new_labels.push(remap[l]);
    }
    let mut new_centers = vec![Vec::new(); next];
    for (old, &new) in remap.iter().enumerate() {
        if new != usize::MAX {
            new_centers[new] = centers[old].clone();
        }
    }
    GroupAssignment::new(new_labels, new_centers)
}

fn kmeans_single(
    points: &[Vec<f64>],
    g: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> (f64, Vec<usize>, Vec<Vec<f64>>) {
    let p = points.len();
    // k-means++ seeding.
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(g);
    let first = rng.random_range(0..p);
    centers.push(points[first].clone());
    let mut d2: Vec<f64> = points.iter().map(|x| sq_dist(x, &centers[0])).collect();
    while centers.len() < g {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = p - 1;
            for (i, w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All remaining points coincide with a center; take the first
            // index not already used so seeding stays deterministic.
            (0..p).find(|i| !centers.contains(&points[*i])).unwrap_or(0)
        };
        centers.push(points[pick].clone());
        for (i, x) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, centers.last().unwrap()));
        }
    }

    let mut labels = vec![0usize; p];
    let mut inertia = f64::INFINITY;
    for _ in 0..1000 {
        // Assign.
        for (i, x) in points.iter().enumerate() {
            let mut best = 0usize;
            let mut bd = sq_dist(x, &centers[0]);
            for (c, center) in centers.iter().enumerate().skip(1) {
                let d = sq_dist(x, center);
                if d < bd {
                    bd = d;
                    best = c;
                }
            }
            labels[i] = best;
        }
        // Repair empty clusters by splitting the largest.
        loop {
            let mut counts = vec![0usize; g];
            for &l in &labels {
                counts[l] += 1;
            }
            let Some(empty) = counts.iter().position(|&c| c == 0) else { break };
            let largest = counts.iter().enumerate().max_by_key(|(_, c)| **c).unwrap().0;
            let farthest = (0..p)
                .filter(|&i| labels[i] == largest)
                .max_by(|&a, &b| {
                    sq_dist(&points[a], &centers[largest])
                        .partial_cmp(&sq_dist(&points[b], &centers[largest]))
                        .unwrap()
                        .then(a.cmp(&b))
                })
                .unwrap();
            labels[farthest] = empty;
            centers[empty] = points[farthest].clone();
        }
        // Update centers.
        let m = points[0].len();
        let mut sums = vec![vec![0.0; m]; g];
        let mut counts = vec![0usize; g];
        for (i, x) in points.iter().enumerate() {
            counts[labels[i]] += 1;
            for (s, v) in sums[labels[i]].iter_mut().zip(x) {
                *s += v;
            }
        }
        for c in 0..g {
            for s in sums[c].iter_mut() {
                *s /= counts[c] as f64;
            }
        }
        centers = sums;
        let new_inertia: f64 =
            points.iter().zip(&labels).map(|(x, &l)| sq_dist(x, &centers[l])).sum();
        let rel = (inertia - new_inertia).abs() / inertia.max(1e-300);
        inertia = new_inertia;
        if rel < 1e-10 {
            break;
        }
    }
    (inertia, labels, centers)
}

/// Per-unit covariates for linear mean/variance specifications (p rows).
#[derive(Debug, Clone)]
pub struct UnitCovariates {
    data: Vec<f64>,
    n_rows: usize,
    n_cols: usize,
}

impl UnitCovariates {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::input("unit covariates are empty"));
        }
        let d = rows[0].len();
        if d == 0 {
            return Err(Error::input("unit covariates have no columns"));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d || r.iter().any(|v| !v.is_finite()) {
                return Err(Error::input(format!("unit covariate row {i} invalid")));
            }
            data.extend_from_slice(r);
        }
        Ok(UnitCovariates { data, n_rows: rows.len(), n_cols: d })
    }

    pub fn intercept_and(x: &[f64]) -> Result<Self> {
        UnitCovariates::new(x.iter().map(|&v| vec![1.0, v]).collect())
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    fn dot_row(&self, i: usize, beta: &[f64]) -> f64 {
        self.row(i).iter().zip(beta).map(|(x, b)| x * b).sum()
    }
}

/// Fitted mean function mu(Z).
#[derive(Debug, Clone)]
pub enum MeanModel {
    Constant { mu0: f64 },
    LinearInW { coefs: Vec<f64>, covariates: UnitCovariates },
    Grouped { means: Vec<f64> },
}

/// Fitted covariance function Sigma(Z).
#[derive(Debug, Clone)]
pub enum CovModel {
    /// Sigma = tau2 * I.
    ScalarDiag { tau2: f64 },
    /// Diagonal with Sigma_jj = max(w_j' coefs, floor).
    DiagLinearInW { coefs: Vec<f64>, covariates: UnitCovariates, floor: f64 },
    /// Group-level structure: within-group variance per group and one
    /// covariance entry per group pair (the diagonal of `covariances` is the
    /// within-group off-diagonal covariance).
    GroupedBlocks { variances: Vec<f64>, covariances: DMatrix<f64> },
}

/// Mean specification to fit.
pub enum MeanSpec<'a> {
    Constant,
    LinearInW(&'a UnitCovariates),
    Grouped,
}

/// Covariance specification to fit.
pub enum CovSpec<'a> {
    ScalarDiag,
    DiagLinearInW(&'a UnitCovariates),
    GroupedBlocks,
}

/// A fitted random-coefficient specification.
#[derive(Debug, Clone)]
pub struct RCSpec {
    pub mean: MeanModel,
    pub cov: CovModel,
    pub grouping: Option<GroupAssignment>,
}

impl RCSpec {
    pub fn new(mean: MeanModel, cov: CovModel, grouping: Option<GroupAssignment>) -> Result<Self> {
        let spec = RCSpec { mean, cov, grouping };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if matches!(self.mean, MeanModel::Grouped { .. })
            || matches!(self.cov, CovModel::GroupedBlocks { .. })
        {
            let grouping = self
                .grouping
                .as_ref()
                .ok_or_else(|| Error::input("grouped model requires a group assignment"))?;
            if let MeanModel::Grouped { means } = &self.mean {
                if means.len() != grouping.n_groups() {
                    return Err(Error::input("grouped means do not match group count"));
                }
            }
            if let CovModel::GroupedBlocks { variances, covariances } = &self.cov {
                let g = grouping.n_groups();
                if variances.len() != g || covariances.nrows() != g || covariances.ncols() != g {
                    return Err(Error::input("grouped covariance does not match group count"));
                }
            }
        }
        Ok(())
    }

    /// The fitted mean vector across all p effects.
    pub fn mu_vector(&self, p: usize) -> Result<Vec<f64>> {
        match &self.mean {
            MeanModel::Constant { mu0 } => Ok(vec![*mu0; p]),
            MeanModel::LinearInW { coefs, covariates } => {
                if covariates.n_rows() != p {
                    return Err(Error::input("mean covariates do not match effect count"));
                }
                Ok((0..p).map(|j| covariates.dot_row(j, coefs)).collect())
            }
            MeanModel::Grouped { means } => {
                let grouping = self
                    .grouping
                    .as_ref()
                    .ok_or_else(|| Error::input("grouped mean without group assignment"))?;
                if grouping.n_effects() != p {
                    return Err(Error::input("group labels do not match effect count"));
                }
                Ok(grouping.labels().iter().map(|&l| means[l]).collect())
            }
        }
    }

    /// Operator form of Sigma(Z) over p effects.
    pub fn sigma_op(&self, p: usize) -> Result<SigmaOp> {
        match &self.cov {
            CovModel::ScalarDiag { tau2 } => SigmaOp::diagonal(vec![*tau2; p]),
            CovModel::DiagLinearInW { coefs, covariates, floor } => {
                if covariates.n_rows() != p {
                    return Err(Error::input("covariance covariates do not match effect count"));
                }
                SigmaOp::diagonal(
                    (0..p).map(|j| covariates.dot_row(j, coefs).max(*floor)).collect(),
                )
            }
            CovModel::GroupedBlocks { variances, covariances } => {
                let grouping = self
                    .grouping
                    .as_ref()
                    .ok_or_else(|| Error::input("grouped covariance without group assignment"))?;
                if grouping.n_effects() != p {
                    return Err(Error::input("group labels do not match effect count"));
                }
                SigmaOp::grouped(grouping.labels().to_vec(), variances.clone(), covariances.clone())
            }
        }
    }
}

/// Structured covariance operator `Sigma = diag(d) + T C T'`, where T is the
/// p-by-G group indicator matrix and C is the positive semidefinite part of
/// the group-level covariance. All operations (entries, products, inverse
/// products, square-root sampling) are consistent with this one
/// representation.
#[derive(Debug, Clone)]
pub struct SigmaOp {
    diag: Vec<f64>,
    group: Option<SigmaGroupPart>,
}

#[derive(Debug, Clone)]
struct SigmaGroupPart {
    labels: Vec<usize>,
    /// PSD part of the group covariance (eigenvalues floored at zero).
    c: DMatrix<f64>,
    /// C = U U' with U = V sqrt(Lambda_+), G x r.
    u: DMatrix<f64>,
}

impl SigmaOp {
    pub fn diagonal(diag: Vec<f64>) -> Result<Self> {
        if diag.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::input("Sigma diagonal must be finite and nonnegative"));
        }
        Ok(SigmaOp { diag, group: None })
    }

    /// Build from group labels, per-group variances v_g, and the G-by-G
    /// group-pair covariance matrix c. The split is Sigma_jj = v_g and
    /// Sigma_jk = c[g(j)][g(k)] for j != k; eigenvalues of the group part
    /// are floored at zero so the operator stays PSD.
    pub fn grouped(labels: Vec<usize>, variances: Vec<f64>, c: DMatrix<f64>) -> Result<Self> {
        let g = variances.len();
        if c.nrows() != g || c.ncols() != g {
            return Err(Error::input("group covariance matrix has wrong shape"));
        }
        if labels.iter().any(|&l| l >= g) {
            return Err(Error::input("group label out of range"));
        }
        let mut csym = c.clone();
        for a in 0..g {
            for b in 0..g {
                csym[(a, b)] = 0.5 * (c[(a, b)] + c[(b, a)]);
            }
        }
        let eig = SymmetricEigen::new(csym);
        let mut cols = Vec::new();
        for (i, ev) in eig.eigenvalues.iter().enumerate() {
            if *ev > 0.0 {
                cols.push(eig.eigenvectors.column(i) * ev.sqrt());
            }
        }
        let r = cols.len();
        let mut u = DMatrix::zeros(g, r);
        for (k, col) in cols.iter().enumerate() {
            u.set_column(k, col);
        }
        // The PSD projection can push a group's implied covariance slightly
        // above its fitted variance; the diagonal remainder is floored at
        // zero so the operator stays PSD (Sigma_jj then equals the group
        // covariance instead of the raw variance moment).
        let c_psd = &u * u.transpose();
        let mut diag = Vec::with_capacity(labels.len());
        for &l in &labels {
            if !variances[l].is_finite() {
                return Err(Error::input(format!("group {l}: variance is not finite")));
            }
            diag.push((variances[l] - c_psd[(l, l)]).max(0.0));
        }
        Ok(SigmaOp { diag, group: Some(SigmaGroupPart { labels, c: c_psd, u }) })
    }

    pub fn n_effects(&self) -> usize {
        self.diag.len()
    }

    pub fn is_diagonal(&self) -> bool {
        self.group.is_none()
    }

    pub fn entry(&self, j: usize, k: usize) -> f64 {
        let mut v = if j == k { self.diag[j] } else { 0.0 };
        if let Some(gp) = &self.group {
            v += gp.c[(gp.labels[j], gp.labels[k])];
        }
        v
    }

    pub fn diag_entries(&self) -> Vec<f64> {
        (0..self.n_effects()).map(|j| self.entry(j, j)).collect()
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = self.diag.iter().zip(v).map(|(d, x)| d * x).collect();
        if let Some(gp) = &self.group {
            let g = gp.c.nrows();
            let mut tsum = vec![0.0; g];
            for (j, &l) in gp.labels.iter().enumerate() {
                tsum[l] += v[j];
            }
            let ct = &gp.c * DVector::from_vec(tsum);
            for (j, &l) in gp.labels.iter().enumerate() {
                out[j] += ct[l];
            }
        }
        out
    }

    pub fn quad(&self, v: &[f64]) -> f64 {
        v.iter().zip(self.matvec(v)).map(|(a, b)| a * b).sum()
    }

    /// Trace(Q Sigma) in closed form; no solves required.
    pub fn trace_q(&self, q: &QuadraticFormSpec) -> f64 {
        match q {
            QuadraticFormSpec::WeightedVariance { weights } => {
                let diag_term: f64 = weights.iter().map(|(j, w)| w * self.entry(*j, *j)).sum();
                let mut wvec = vec![0.0; self.n_effects()];
                for (j, w) in weights {
                    wvec[*j] = *w;
                }
                diag_term - self.quad(&wvec)
            }
            QuadraticFormSpec::WeightedCovariance { pairs } => {
                let cross: f64 = pairs.iter().map(|(a, b, w)| w * self.entry(*a, *b)).sum();
                let mut avec = vec![0.0; self.n_effects()];
                let mut bvec = vec![0.0; self.n_effects()];
                for (a, b, w) in pairs {
                    avec[*a] += w;
                    bvec[*b] += w;
                }
                let sb = self.matvec(&bvec);
                cross - avec.iter().zip(&sb).map(|(x, y)| x * y).sum::<f64>()
            }
            QuadraticFormSpec::CustomSparse { triplets } => {
                triplets.iter().map(|(j, k, v)| v * self.entry(*k, *j)).sum()
            }
        }
    }

    /// Copy with the diagonal floored at `floor` (positive-definite support
    /// for posterior computations).
    pub fn ensure_pd(&self, floor: f64) -> SigmaOp {
        let mut out = self.clone();
        for d in &mut out.diag {
            *d = d.max(floor);
        }
        out
    }

    /// Sigma^{-1} b via the Woodbury identity: requires a strictly positive
    /// diagonal part.
    pub fn inv_matvec(&self, b: &[f64]) -> Result<Vec<f64>> {
        if self.diag.iter().any(|d| *d <= 0.0) {
            return Err(Error::numerical(
                "Sigma inverse requires a strictly positive diagonal; apply ensure_pd first",
            ));
        }
        let dinvb: Vec<f64> = b.iter().zip(&self.diag).map(|(x, d)| x / d).collect();
        let Some(gp) = &self.group else {
            return Ok(dinvb);
        };
        let r = gp.u.ncols();
        if r == 0 {
            return Ok(dinvb);
        }
        let g = gp.c.nrows();
        let mut tb = DVector::zeros(g);
        for (j, &l) in gp.labels.iter().enumerate() {
            tb[l] += dinvb[j];
        }
        // K = I_r + U' (T' D^{-1} T) U; T'D^{-1}T is diagonal in group space.
        let mut dsum = vec![0.0; g];
        for (j, &l) in gp.labels.iter().enumerate() {
            dsum[l] += 1.0 / self.diag[j];
        }
        let mut k = DMatrix::identity(r, r);
        for a in 0..r {
            for b2 in 0..r {
                let mut acc = 0.0;
                for gi in 0..g {
                    acc += gp.u[(gi, a)] * dsum[gi] * gp.u[(gi, b2)];
                }
                k[(a, b2)] += acc;
            }
        }
        let rhs = gp.u.transpose() * tb;
        let chol = checked_cholesky(k)
            .ok_or_else(|| Error::numerical("Sigma inverse: Woodbury core is singular"))?;
        let y = chol.solve(&rhs);
        let correction = &gp.u * y;
        let mut out = dinvb;
        for (j, &l) in gp.labels.iter().enumerate() {
            out[j] -= correction[l] / self.diag[j];
        }
        Ok(out)
    }

    /// out += sign * Sigma^{1/2} eps with eps standard normal drawn from
    /// `rng`; the sign makes antithetic pairs consume identical streams.
    pub fn sample_add_signed(&self, rng: &mut rand_chacha::ChaCha8Rng, sign: f64, out: &mut [f64]) {
        for (o, d) in out.iter_mut().zip(&self.diag) {
            *o += sign * d.sqrt() * rng.sample::<f64, _>(StandardNormal);
        }
        if let Some(gp) = &self.group {
            let r = gp.u.ncols();
            if r > 0 {
                let eps: Vec<f64> =
                    (0..r).map(|_| sign * rng.sample::<f64, _>(StandardNormal)).collect();
                let shift = &gp.u * DVector::from_vec(eps);
                for (j, &l) in gp.labels.iter().enumerate() {
                    out[j] += shift[l];
                }
            }
        }
    }

    pub fn sample_add(&self, rng: &mut rand_chacha::ChaCha8Rng, out: &mut [f64]) {
        self.sample_add_signed(rng, 1.0, out);
    }

    /// Dense realization, for diagnostics and small-instance checks.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let p = self.n_effects();
        let mut m = DMatrix::zeros(p, p);
        for j in 0..p {
            for k in 0..p {
                m[(j, k)] = self.entry(j, k);
            }
        }
        m
    }

    /// Smallest eigenvalue across the block representation: the diagonal
    /// floor and the group-level covariance. The PSD contract is
    /// `min >= -1e-10`.
    pub fn min_block_eigenvalue(&self) -> f64 {
        let mut min = self.diag.iter().copied().fold(f64::INFINITY, f64::min);
        if let Some(gp) = &self.group {
            let eig = SymmetricEigen::new(gp.c.clone());
            min = min.min(eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min));
        }
        min
    }

    pub(crate) fn diag_part(&self) -> &[f64] {
        &self.diag
    }

    pub(crate) fn group_part(&self) -> Option<(&[usize], &DMatrix<f64>)> {
        self.group.as_ref().map(|gp| (gp.labels.as_slice(), &gp.c))
    }
}

/// Least-squares projection of eta_hat on the mean model's regressors.
pub fn fit_mean(
    bundle: &EstimateBundle,
    spec: MeanSpec<'_>,
    grouping: Option<&GroupAssignment>,
) -> Result<MeanModel> {
    let eta = bundle.eta_hat();
    let p = eta.len();
    match spec {
        MeanSpec::Constant => Ok(MeanModel::Constant { mu0: eta.iter().sum::<f64>() / p as f64 }),
        MeanSpec::LinearInW(w) => {
            if w.n_rows() != p {
                return Err(Error::input("mean covariates do not match effect count"));
            }
            let d = w.n_cols();
            let mut wtw = DMatrix::zeros(d, d);
            let mut wte = DVector::zeros(d);
            for j in 0..p {
                let row = w.row(j);
                for a in 0..d {
                    wte[a] += row[a] * eta[j];
                    for b in 0..d {
                        wtw[(a, b)] += row[a] * row[b];
                    }
                }
            }
            let chol = checked_cholesky(wtw)
                .ok_or_else(|| Error::numerical("mean fit: covariates are rank deficient"))?;
            let coefs = chol.solve(&wte);
            Ok(MeanModel::LinearInW { coefs: coefs.data.into(), covariates: w.clone() })
        }
        MeanSpec::Grouped => {
            let grouping =
                grouping.ok_or_else(|| Error::input("grouped mean requires a group assignment"))?;
            if grouping.n_effects() != p {
                return Err(Error::input("group labels do not match effect count"));
            }
            let g = grouping.n_groups();
            let mut sums = vec![0.0; g];
            let mut counts = vec![0usize; g];
            for (j, &l) in grouping.labels().iter().enumerate() {
                sums[l] += eta[j];
                counts[l] += 1;
            }
            let means = sums.iter().zip(&counts).map(|(s, c)| s / *c as f64).collect();
            Ok(MeanModel::Grouped { means })
        }
    }
}

/// Outcome of a covariance fit, with flags for the moment-estimator repairs.
#[derive(Debug, Clone)]
pub struct CovFit {
    pub model: CovModel,
    /// A negative variance moment was floored at 1e-12.
    pub floored: bool,
    /// An off-diagonal entry was clipped to keep 2x2 group blocks PSD.
    pub clipped: bool,
}

const VAR_FLOOR: f64 = 1e-12;

/// Minimum-distance fit of Sigma(Z) from `Var[eta_hat | Z] = Sigma + S`:
/// empirical second moments of the centered estimates minus the matching
/// S(Z) blocks. Negative variance estimates are floored, off-diagonal group
/// entries clipped so every 2x2 block stays PSD.
pub fn fit_cov(
    bundle: &EstimateBundle,
    noise: &NoiseSpec,
    mean: &MeanModel,
    spec: CovSpec<'_>,
    grouping: Option<&GroupAssignment>,
) -> Result<CovFit> {
    let eta = bundle.eta_hat();
    let p = eta.len();
    let rc_for_mu = RCSpec {
        mean: mean.clone(),
        cov: CovModel::ScalarDiag { tau2: 0.0 },
        grouping: grouping.cloned(),
    };
    let mu = rc_for_mu.mu_vector(p)?;
    let centered: Vec<f64> = eta.iter().zip(&mu).map(|(e, m)| e - m).collect();
    match spec {
        CovSpec::ScalarDiag => {
            let raw = centered.iter().map(|e| e * e).sum::<f64>() / p as f64;
            let q = QuadraticFormSpec::scaled_identity(p, 1.0 / p as f64);
            let trace = crate::solve::trace_qs(&q, bundle, noise, 1000, 0x5eedc0)?;
            let tau2 = raw - trace.value;
            let floored = tau2 < VAR_FLOOR;
            Ok(CovFit {
                model: CovModel::ScalarDiag { tau2: tau2.max(VAR_FLOOR) },
                floored,
                clipped: false,
            })
        }
        CovSpec::DiagLinearInW(w) => {
            if w.n_rows() != p {
                return Err(Error::input("covariance covariates do not match effect count"));
            }
            let sdiag = s_diagonal(bundle, noise, SDiagMethod::Auto)?;
            let moments: Vec<f64> = (0..p).map(|j| centered[j] * centered[j] - sdiag[j]).collect();
            let d = w.n_cols();
            let mut wtw = DMatrix::zeros(d, d);
            let mut wtm = DVector::zeros(d);
            for j in 0..p {
                let row = w.row(j);
                for a in 0..d {
                    wtm[a] += row[a] * moments[j];
                    for b in 0..d {
                        wtw[(a, b)] += row[a] * row[b];
                    }
                }
            }
            let chol = checked_cholesky(wtw)
                .ok_or_else(|| Error::numerical("covariance fit: covariates are rank deficient"))?;
            let coefs: Vec<f64> = chol.solve(&wtm).data.into();
            let floored = (0..p)
                .any(|j| w.row(j).iter().zip(&coefs).map(|(x, c)| x * c).sum::<f64>() < VAR_FLOOR);
            Ok(CovFit {
                model: CovModel::DiagLinearInW { coefs, covariates: w.clone(), floor: VAR_FLOOR },
                floored,
                clipped: false,
            })
        }
        CovSpec::GroupedBlocks => {
            let grouping = grouping
                .ok_or_else(|| Error::input("grouped covariance requires a group assignment"))?;
            if grouping.n_effects() != p {
                return Err(Error::input("group labels do not match effect count"));
            }
            let g = grouping.n_groups();
            let members = grouping.members();
            let sdiag = s_diagonal(bundle, noise, SDiagMethod::Auto)?;

            // Group indicator images S 1_h, one apply per group.
            let s_indicator: Vec<Vec<f64>> = members
                .par_iter()
                .map(|mem| {
                    let mut v = vec![0.0; p];
                    for &j in mem {
                        v[j] = 1.0;
                    }
                    apply_s(bundle, noise, &v)
                })
                .collect::<Result<Vec<_>>>()?;

            let gsum = |v: &[f64], mem: &[usize]| mem.iter().map(|&j| v[j]).sum::<f64>();

            let mut variances = vec![0.0; g];
            let mut floored = false;
            for gi in 0..g {
                let mem = &members[gi];
                let m = mem.len() as f64;
                let raw =
                    mem.iter().map(|&j| centered[j] * centered[j] - sdiag[j]).sum::<f64>() / m;
                if raw < VAR_FLOOR {
                    floored = true;
                }
                variances[gi] = raw.max(VAR_FLOOR);
            }

            let mut cov = DMatrix::zeros(g, g);
            let mut clipped = false;
            for gi in 0..g {
                for hi in gi..g {
                    let (mg, mh) = (&members[gi], &members[hi]);
                    let e_g = gsum(&centered, mg);
                    let e_h = gsum(&centered, mh);
                    let s_gh = gsum(&s_indicator[hi], mg);
                    let raw = if gi == hi {
                        let m = mg.len() as f64;
                        if mg.len() < 2 {
                            0.0
                        } else {
                            let sum_sq: f64 =
                                mg.iter().map(|&j| centered[j] * centered[j]).sum();
                            let tr: f64 = mg.iter().map(|&j| sdiag[j]).sum();
                            (e_g * e_g - sum_sq - (s_gh - tr)) / (m * m - m)
                        }
                    } else {
                        (e_g * e_h - s_gh) / (mg.len() as f64 * mh.len() as f64)
                    };
                    // Clip so the 2x2 block [[v_g, c],[c, v_h]] stays PSD.
                    let bound = (variances[gi] * variances[hi]).sqrt();
                    let c = raw.clamp(-bound, bound);
                    if c != raw {
                        clipped = true;
                    }
                    cov[(gi, hi)] = c;
                    cov[(hi, gi)] = c;
                }
            }
            Ok(CovFit {
                model: CovModel::GroupedBlocks { variances, covariances: cov },
                floored,
                clipped,
            })
        }
    }
}

/// Dense quasi-log-likelihood of (mu, Sigma, Omega) given the data:
/// -(n/2) log 2 pi - (1/2) log |Z Sigma Z' + Omega|
/// - (1/2) (Y - Z mu)' (Z Sigma Z' + Omega)^{-1} (Y - Z mu).
/// A diagnostic, not the fitting path; the dense factorization is gated at
/// `dense_cap` rows.
pub fn quasi_loglik(
    design: &DesignMatrix,
    y: &[f64],
    rc: &RCSpec,
    noise: &NoiseSpec,
    dense_cap: usize,
) -> Result<f64> {
    let n = design.n_obs();
    let p = design.n_effects();
    if y.len() != n {
        return Err(Error::input("outcome length does not match design rows"));
    }
    if n > dense_cap {
        return Err(Error::input(format!(
            "quasi log-likelihood is a dense diagnostic: n = {n} exceeds cap {dense_cap}"
        )));
    }
    let sigma = rc.sigma_op(p)?;
    let mu = rc.mu_vector(p)?;
    let omega = noise.omega_diag(n)?;

    // V = Z Sigma Z' + Omega: the diagonal part of Sigma via per-column
    // outer products, the group part via (Z T) C (Z T)'.
    let mut v = DMatrix::<f64>::zeros(n, n);
    let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); p];
    for i in 0..n {
        let (cs, vs) = design.row(i);
        for (c, x) in cs.iter().zip(vs) {
            cols[*c].push((i, *x));
        }
    }
    for (j, col) in cols.iter().enumerate() {
        let dj = sigma.diag_part()[j];
        if dj == 0.0 {
            continue;
        }
        for (i1, x1) in col {
            for (i2, x2) in col {
                v[(*i1, *i2)] += dj * x1 * x2;
            }
        }
    }
    if let Some((labels, c)) = sigma.group_part() {
        let g = c.nrows();
        let mut zt = DMatrix::zeros(n, g);
        for (j, col) in cols.iter().enumerate() {
            let l = labels[j];
            for (i, x) in col {
                zt[(*i, l)] += x;
            }
        }
        v += &zt * c * zt.transpose();
    }
    for i in 0..n {
        v[(i, i)] += omega[i];
    }

    let chol = checked_cholesky(v).ok_or_else(|| {
        Error::numerical("quasi log-likelihood: covariance is not positive definite")
    })?;
    let mut resid = DVector::from_column_slice(y);
    let mut zmu = vec![0.0; n];
    design.matvec(&mu, &mut zmu);
    for i in 0..n {
        resid[i] -= zmu[i];
    }
    let logdet: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let solved = chol.solve(&resid);
    let quad = resid.dot(&solved);
    Ok(-0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * logdet - 0.5 * quad)
}

/// Result of the Kronecker-annihilator property check.
#[derive(Debug, Clone, Copy)]
pub struct AnnihilatorCheck {
    pub ok: bool,
    /// max |Z B Z' - P (Z B Z') P| over sampled B, relative to the scale of
    /// Z B Z'.
    pub max_violation: f64,
}

/// Verify that the annihilator `I - P (x) P` kills `vec(Z B Z')` for random
/// symmetric B, equivalently `Z B Z' = P (Z B Z') P` with
/// P = Z (Z'Z)^{-1} Z', without materializing n^2-by-n^2 objects. Gated at
/// n <= 500.
pub fn check_annihilator(
    design: &Arc<DesignMatrix>,
    samples: usize,
    seed: u64,
    opts: &crate::solve::SolveOptions,
) -> Result<AnnihilatorCheck> {
    let n = design.n_obs();
    let p = design.n_effects();
    if n > 500 {
        return Err(Error::input(format!("annihilator check is a property test: n = {n} > 500")));
    }
    if samples == 0 {
        return Err(Error::input("annihilator check needs at least one sample"));
    }
    let gram = crate::solve::GramSolver::new(design.clone(), None, opts)?;
    let zd = design.to_dense();
    let project = |m: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        // P m, column by column: P x = Z (Z'Z)^{-1} Z' x.
        let mut out = DMatrix::zeros(n, m.ncols());
        for c in 0..m.ncols() {
            let x: Vec<f64> = m.column(c).iter().copied().collect();
            let mut ztx = vec![0.0; p];
            design.tmatvec(&x, &mut ztx);
            let t = gram.solve(&ztx)?;
            let mut px = vec![0.0; n];
            design.matvec(&t, &mut px);
            out.set_column(c, &DVector::from_vec(px));
        }
        Ok(out)
    };
    let mut max_violation = 0.0f64;
    for s in 0..samples {
        let mut rng = stream_rng(seed, StreamDomain::AnnihilatorSample, s as u64);
        let mut b = DMatrix::zeros(p, p);
        for j in 0..p {
            for k in j..p {
                let v: f64 = rng.sample(StandardNormal);
                b[(j, k)] = v;
                b[(k, j)] = v;
            }
        }
        let m1 = &zd * b * zd.transpose();
        let pm1 = project(&m1)?;
        let m2 = project(&pm1.transpose())?.transpose();
        let scale = m1.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
        let viol = (&m1 - m2).iter().fold(0.0f64, |a, v| a.max(v.abs())) / scale;
        max_violation = max_violation.max(viol);
    }
    Ok(AnnihilatorCheck { ok: max_violation < 1e-8, max_violation })
}
