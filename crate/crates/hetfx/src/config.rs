//! TOML run configuration for the command-line driver.
//!
//! One structured file drives all three commands; command-line flags
//! (`--seed`, `--threads`, `--out`) override the corresponding keys. Unknown
//! keys are rejected so typos surface as input errors.

use std::path::PathBuf;

use serde::Deserialize;

use crate::design::NormalizationRule;
use crate::error::{Error, Result};
use crate::simulate::{
    AkmConfig, AkmEffectLaw, DgpConfig, ExposureConfig, FirmGroupLaw, Mobility, NoiseLaw,
    SimpleMeansConfig, StratumRule,
};
use crate::solve::SolveOptions;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub dgp: Option<DgpSection>,
    pub inputs: Option<InputsSection>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub estimate: EstimateSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub montecarlo: McSection,
}

impl RunConfig {
    pub fn from_path(path: &std::path::Path) -> Result<RunConfig> {
        let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&content)
            .map_err(|e| Error::input(format!("{}: {e}", path.display())))
    }
}

/// Data-generating process section, shared by `simulate` and `montecarlo`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpSection {
    pub archetype: String,
    // simple_means / exposure effect law
    pub p: Option<usize>,
    pub mu_eta: Option<f64>,
    pub sigma_eta: Option<f64>,
    pub sigma_v: Option<f64>,
    // akm sizes and effect law
    pub workers: Option<usize>,
    pub firms: Option<usize>,
    pub periods: Option<usize>,
    pub mu_alpha: Option<f64>,
    pub sigma_alpha: Option<f64>,
    pub mu_psi: Option<f64>,
    pub sigma_psi: Option<f64>,
    pub firm_groups: Option<usize>,
    pub firm_group_spread: Option<f64>,
    // akm noise
    pub noise: Option<String>,
    pub sigma2: Option<f64>,
    pub sigma2_low: Option<f64>,
    pub sigma2_high: Option<f64>,
    pub stratum_rule: Option<String>,
    // akm mobility
    pub mobility: Option<String>,
    pub move_prob: Option<f64>,
    pub rho: Option<f64>,
    pub lambda: Option<f64>,
    pub gamma_a: Option<f64>,
    pub gamma_b: Option<f64>,
    pub market_size: Option<usize>,
    // exposure
    pub children: Option<usize>,
    pub neighborhoods: Option<usize>,
    pub childhood_years: Option<f64>,
    pub sigma_u: Option<f64>,
}

fn require<T: Copy>(value: Option<T>, key: &str, context: &str) -> Result<T> {
    value.ok_or_else(|| Error::input(format!("[dgp] {key} is required for {context}")))
}

impl DgpSection {
    pub fn to_dgp(&self, seed: u64) -> Result<DgpConfig> {
        match self.archetype.as_str() {
            "simple_means" => Ok(DgpConfig::SimpleMeans(SimpleMeansConfig {
                p: require(self.p, "p", "simple_means")?,
                mu_eta: self.mu_eta.unwrap_or(0.0),
                sigma_eta: require(self.sigma_eta, "sigma_eta", "simple_means")?,
                sigma_v: require(self.sigma_v, "sigma_v", "simple_means")?,
                seed,
            })),
            "akm" => {
                let workers = require(self.workers, "workers", "akm")?;
                let firms = require(self.firms, "firms", "akm")?;
                let periods = require(self.periods, "periods", "akm")?;
                let noise = match self.noise.as_deref().unwrap_or("homoskedastic") {
                    "homoskedastic" => NoiseLaw::Homoskedastic {
                        sigma2: require(self.sigma2, "sigma2", "akm homoskedastic noise")?,
                    },
                    "two_stratum" => NoiseLaw::TwoStratum {
                        sigma2_low: require(self.sigma2_low, "sigma2_low", "two_stratum noise")?,
                        sigma2_high: require(self.sigma2_high, "sigma2_high", "two_stratum noise")?,
                        rule: match self.stratum_rule.as_deref().unwrap_or("by_mobility") {
                            "by_mobility" => StratumRule::ByMobility,
                            "by_worker_index" => StratumRule::ByWorkerIndex,
                            other => {
                                return Err(Error::input(format!(
                                    "[dgp] unknown stratum_rule '{other}'"
                                )))
                            }
                        },
                    },
                    other => {
                        return Err(Error::input(format!("[dgp] unknown noise law '{other}'")))
                    }
                };
                let mobility = match self.mobility.as_deref().unwrap_or("exogenous") {
                    "exogenous" => Mobility::Exogenous {
                        move_prob: require(self.move_prob, "move_prob", "exogenous mobility")?,
                    },
                    "logit" => Mobility::Logit { rho: require(self.rho, "rho", "logit mobility")? },
                    "dynamic" => Mobility::Dynamic {
                        lambda: require(self.lambda, "lambda", "dynamic mobility")?,
                        gamma_a: self.gamma_a.unwrap_or(0.0),
                        gamma_b: self.gamma_b.unwrap_or(1.0),
                    },
                    other => {
                        return Err(Error::input(format!("[dgp] unknown mobility '{other}'")))
                    }
                };
                Ok(DgpConfig::Akm(AkmConfig {
                    workers,
                    firms,
                    periods,
                    effects: AkmEffectLaw {
                        mu_alpha: self.mu_alpha.unwrap_or(0.0),
                        sigma_alpha: require(self.sigma_alpha, "sigma_alpha", "akm")?,
                        mu_psi: self.mu_psi.unwrap_or(0.0),
                        sigma_psi: require(self.sigma_psi, "sigma_psi", "akm")?,
                        firm_groups: match self.firm_groups {
                            None | Some(0) => None,
                            Some(g) => Some(FirmGroupLaw {
                                n_groups: g,
                                mean_spread: self.firm_group_spread.unwrap_or(0.0),
                            }),
                        },
                    },
                    noise,
                    mobility,
                    market_size: match self.market_size {
                        None | Some(0) => None,
                        Some(m) => Some(m),
                    },
                    seed,
                }))
            }
            "exposure" => Ok(DgpConfig::Exposure(ExposureConfig {
                children: require(self.children, "children", "exposure")?,
                neighborhoods: require(self.neighborhoods, "neighborhoods", "exposure")?,
                childhood_years: self.childhood_years.unwrap_or(18.0),
                move_prob: require(self.move_prob, "move_prob", "exposure")?,
                mu_eta: self.mu_eta.unwrap_or(0.0),
                sigma_eta: require(self.sigma_eta, "sigma_eta", "exposure")?,
                sigma_u: require(self.sigma_u, "sigma_u", "exposure")?,
                seed,
            })),
            other => Err(Error::input(format!("[dgp] unknown archetype '{other}'"))),
        }
    }
}

/// Input files for `estimate`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputsSection {
    /// `akm`, `exposure`, or `grouped`.
    pub format: String,
    pub spells: Option<PathBuf>,
    pub exposures: Option<PathBuf>,
    pub grouped: Option<PathBuf>,
    pub outcomes: Option<PathBuf>,
}

/// Model choices: normalization, noise family, RC specification.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// `drop_last_firm` or `sum_to_zero`.
    pub normalization: String,
    /// `homoskedastic`, `leaveout`, `parametric`, or `fixed` (a known
    /// error variance given by `sigma2`, for designs without residual
    /// degrees of freedom).
    pub noise: String,
    /// Known error variance for the `fixed` noise family.
    pub sigma2: Option<f64>,
    /// Covariate for the parametric family: `leverage` or `none`.
    pub noise_covariate: String,
    /// `constant` or `grouped`.
    pub mean: String,
    /// `scalar` or `grouped`.
    pub cov: String,
    /// Number of k-means groups for grouped specifications.
    pub groups: usize,
    /// Unit kind to cluster (`firm`, `worker`, `neighborhood`); other kinds
    /// share one extra group.
    pub group_kind: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            normalization: "drop_last_firm".into(),
            noise: "homoskedastic".into(),
            sigma2: None,
            noise_covariate: "leverage".into(),
            mean: "constant".into(),
            cov: "scalar".into(),
            groups: 5,
            group_kind: "firm".into(),
        }
    }
}

impl ModelSection {
    pub fn normalization_rule(&self) -> Result<NormalizationRule> {
        match self.normalization.as_str() {
            "drop_last_firm" => Ok(NormalizationRule::DropLastFirm),
            "sum_to_zero" => Ok(NormalizationRule::SumToZero),
            other => Err(Error::input(format!("[model] unknown normalization '{other}'"))),
        }
    }
}

/// Requested quantities and strategies for `estimate` and `montecarlo`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateSection {
    /// `kind:scope[:a]` with kind in {mean, variance, cdf, density}, scope
    /// in {all, firm, worker, neighborhood, slope}, and `a` the evaluation
    /// point for cdf/density.
    pub quantities: Vec<String>,
    /// Subset of {plugin, fe, model, posterior}.
    pub strategies: Vec<String>,
    /// Monte Carlo draws for nonlinear functionals.
    pub draws: usize,
}

impl Default for EstimateSection {
    fn default() -> Self {
        EstimateSection {
            quantities: vec!["mean:all".into(), "variance:all".into()],
            strategies: vec!["fe".into(), "model".into(), "posterior".into()],
            draws: 20_000,
        }
    }
}

/// Solver tolerances and probe/draw counts.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub rel_tol: f64,
    pub max_iter_factor: usize,
    pub dense_cap: usize,
    pub probes: usize,
    /// `exact` or `sketched`.
    pub leverage: String,
    pub leverage_probes: usize,
    pub leverage_cap: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            rel_tol: 1e-10,
            max_iter_factor: 10,
            dense_cap: 2000,
            probes: 1000,
            leverage: "exact".into(),
            leverage_probes: 500,
            leverage_cap: 50_000,
        }
    }
}

impl SolverSection {
    pub fn to_options(&self) -> SolveOptions {
        SolveOptions {
            rel_tol: self.rel_tol,
            max_iter_factor: self.max_iter_factor,
            dense_cap: self.dense_cap,
            leverage_exact_cap: self.leverage_cap,
            force: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McSection {
    pub replications: usize,
}

impl Default for McSection {
    fn default() -> Self {
        McSection { replications: 100 }
    }
}
