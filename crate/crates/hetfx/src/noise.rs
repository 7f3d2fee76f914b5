//! Error-covariance families and their estimators.
//!
//! Omega(Z) is restricted to diagonal families: independent homoskedastic,
//! unrestricted-diagonal leave-out moments, and a log-linear parametric
//! heteroskedastic family. The leave-out moments are unbiased per observation
//! but individually noisy (and possibly negative); the parametric family
//! smooths them through `sigma^2(w_i) = exp(w_i' theta)`.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::solve::EstimateBundle;

/// Per-observation covariates for the parametric variance family, stored
/// row-major as n rows by d columns.
#[derive(Debug, Clone)]
pub struct VarianceCovariates {
    data: Vec<f64>,
    n_rows: usize,
    n_cols: usize,
}

impl VarianceCovariates {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::input("variance covariates are empty"));
        }
        let d = rows[0].len();
        if d == 0 {
            return Err(Error::input("variance covariates have no columns"));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(Error::input(format!("variance covariate row {i} has wrong length")));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::input(format!("variance covariate row {i} is not finite")));
            }
            data.extend_from_slice(r);
        }
        Ok(VarianceCovariates { data, n_rows: rows.len(), n_cols: d })
    }

    /// Intercept-plus-one-covariate design, the common case.
    pub fn intercept_and(x: &[f64]) -> Result<Self> {
        VarianceCovariates::new(x.iter().map(|&v| vec![1.0, v]).collect())
    }

    pub fn intercept_only(n: usize) -> Self {
        VarianceCovariates { data: vec![1.0; n], n_rows: n, n_cols: 1 }
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

    fn dot_row(&self, i: usize, theta: &[f64]) -> f64 {
        self.row(i).iter().zip(theta).map(|(x, t)| x * t).sum()
    }
}

/// A fitted Omega(Z) family.
#[derive(Debug, Clone)]
pub enum NoiseSpec {
    /// Omega = sigma2 * I.
    Homoskedastic { sigma2: f64 },
    /// Unrestricted diagonal, one unbiased moment per observation. Entries
    /// may be negative; unbiasedness, not positivity, is the contract.
    LeaveOutDiagonal { omega: Vec<f64> },
    /// sigma2(w_i) = exp(w_i' theta).
    ParametricDiag { theta: Vec<f64>, covariates: VarianceCovariates },
}

impl NoiseSpec {
    pub fn homoskedastic(sigma2: f64) -> Result<Self> {
        if !sigma2.is_finite() || sigma2 < 0.0 {
            return Err(Error::input("sigma2 must be finite and nonnegative"));
        }
        Ok(NoiseSpec::Homoskedastic { sigma2 })
    }

    pub fn leaveout(omega: Vec<f64>) -> Result<Self> {
        if omega.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("leave-out variances must be finite"));
        }
        Ok(NoiseSpec::LeaveOutDiagonal { omega })
    }

    pub fn parametric(theta: Vec<f64>, covariates: VarianceCovariates) -> Result<Self> {
        if theta.len() != covariates.n_cols() {
            return Err(Error::input("theta length does not match covariate columns"));
        }
        Ok(NoiseSpec::ParametricDiag { theta, covariates })
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            NoiseSpec::Homoskedastic { .. } => "homoskedastic",
            NoiseSpec::LeaveOutDiagonal { .. } => "leaveout_diagonal",
            NoiseSpec::ParametricDiag { .. } => "parametric_diag",
        }
    }

    /// Implied diagonal of Omega for an n-row design.
    pub fn omega_diag(&self, n: usize) -> Result<Vec<f64>> {
        match self {
            NoiseSpec::Homoskedastic { sigma2 } => Ok(vec![*sigma2; n]),
            NoiseSpec::LeaveOutDiagonal { omega } => {
                if omega.len() != n {
                    return Err(Error::input(format!(
                        "leave-out noise has {} entries but design has {n} rows",
                        omega.len()
                    )));
                }
                Ok(omega.clone())
            }
            NoiseSpec::ParametricDiag { theta, covariates } => {
                if covariates.n_rows() != n {
                    return Err(Error::input(format!(
                        "parametric noise covariates have {} rows but design has {n}",
                        covariates.n_rows()
                    )));
                }
                Ok((0..n).map(|i| covariates.dot_row(i, theta).exp()).collect())
            }
        }
    }
}

/// Homoskedastic variance with the residual degrees-of-freedom correction:
/// sigma2 = |Y - Z eta_hat|^2 / (n - p).
pub fn estimate_sigma2(bundle: &EstimateBundle, y: &[f64]) -> Result<NoiseSpec> {
    let n = bundle.design().n_obs();
    let p = bundle.design().n_effects();
    if y.len() != n {
        return Err(Error::input("outcome length does not match design rows"));
    }
    if n <= p {
        return Err(Error::input(format!("no residual degrees of freedom: n = {n}, p = {p}")));
    }
    let rss: f64 = bundle.residuals(y).iter().map(|r| r * r).sum();
    NoiseSpec::homoskedastic(rss / (n - p) as f64)
}

/// Leave-out variance moments omega_i = y_i (y_i - z_i' eta_{-i}), with the
/// leave-one-out prediction recovered from full-sample quantities:
/// z_i' eta_{-i} = (z_i' eta_hat - P_ii y_i) / (1 - P_ii).
pub fn estimate_omega_leaveout(
    bundle: &EstimateBundle,
    y: &[f64],
    leverages: &[f64],
) -> Result<NoiseSpec> {
    let n = bundle.design().n_obs();
    if y.len() != n || leverages.len() != n {
        return Err(Error::input("outcome/leverage length does not match design rows"));
    }
    let fitted = bundle.fitted();
    let mut omega = Vec::with_capacity(n);
    for i in 0..n {
        let pii = leverages[i];
        if pii >= 1.0 - 1e-10 {
            return Err(Error::numerical(format!(
                "observation {i} not leave-out identifiable (leverage {pii:.6})"
            )));
        }
        let pred_loo = (fitted[i] - pii * y[i]) / (1.0 - pii);
        omega.push(y[i] * (y[i] - pred_loo));
    }
    NoiseSpec::leaveout(omega)
}

/// Result of the parametric variance fit.
#[derive(Debug, Clone)]
pub struct ParametricFit {
    pub spec: NoiseSpec,
    pub iterations: usize,
}

/// Fit sigma2(w_i) = exp(w_i' theta) to the leave-out moments by
/// Gauss-Newton least squares. Starts from theta0 = (log mean moment
/// clipped below at 1e-8, 0, ..., 0); converges when the step norm drops
/// below 1e-8, errors after 200 iterations carrying the last iterate.
pub fn fit_parametric_diag(
    bundle: &EstimateBundle,
    y: &[f64],
    covariates: &VarianceCovariates,
    leverages: &[f64],
) -> Result<ParametricFit> {
    let n = bundle.design().n_obs();
    if covariates.n_rows() != n {
        return Err(Error::input("variance covariates do not match design rows"));
    }
    let moments = match estimate_omega_leaveout(bundle, y, leverages)? {
        NoiseSpec::LeaveOutDiagonal { omega } => omega,
        _ => unreachable!(),
    };
    let d = covariates.n_cols();
    let mean_moment = moments.iter().sum::<f64>() / n as f64;
    let mut theta = vec![0.0; d];
    theta[0] = mean_moment.max(1e-8).ln();

    const MAX_ITER: usize = 200;
    const STEP_TOL: f64 = 1e-8;
    const EXPO_CAP: f64 = 50.0;
    for iter in 0..MAX_ITER {
        // Residuals r_i = omega_i - exp(w_i' theta); Jacobian rows are
        // -exp(w_i' theta) w_i, so the Gauss-Newton step solves
        // (J'J) step = -J'r.
        let mut jtj = DMatrix::<f64>::zeros(d, d);
        let mut jtr = DVector::<f64>::zeros(d);
        for i in 0..n {
            let lin = covariates.dot_row(i, &theta).clamp(-EXPO_CAP, EXPO_CAP);
            let fit = lin.exp();
            let r = moments[i] - fit;
            let w = covariates.row(i);
            for a in 0..d {
                jtr[a] += fit * w[a] * r;
                for b in 0..d {
                    jtj[(a, b)] += fit * fit * w[a] * w[b];
                }
            }
        }
        let chol = Cholesky::new(jtj).ok_or_else(|| {
            Error::numerical("parametric variance fit: covariate matrix is rank deficient")
        })?;
        let step = chol.solve(&jtr);
        for (t, s) in theta.iter_mut().zip(step.iter()) {
            *t += s;
        }
        let step_norm = step.norm();
        if step_norm < STEP_TOL {
            return Ok(ParametricFit {
                spec: NoiseSpec::parametric(theta, covariates.clone())?,
                iterations: iter + 1,
            });
        }
    }
    Err(Error::numerical(format!(
        "parametric variance fit did not converge in {MAX_ITER} iterations; last theta = {theta:?}"
    )))
}
