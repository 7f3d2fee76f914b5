//! Synthetic data generators with known ground truth, plus the Monte Carlo
//! replication harness.
//!
//! Three generators cover the supported archetypes:
//!
//! - [`gen_simple_means`]: the stylized normal-means model where each
//!   estimate is its own observation (Z = I);
//! - [`gen_akm`]: two-way worker/firm panels under exogenous reassignment, a
//!   static logit choice model, or a dynamic meeting model. The choice
//!   models make firm assignment depend on the effects, so the design matrix
//!   carries information about the effects; choice shocks are drawn
//!   independently of the recorded wage errors, which keeps the error terms
//!   strictly exogenous;
//! - [`gen_exposure`]: children moving across neighborhoods with exposure
//!   years summing to a fixed childhood length.
//!
//! Every generator is reproducible: the same seed yields a byte-identical
//! dataset. [`montecarlo`] runs an estimation recipe over R independent
//! replications (seeds derived per replication) and reports mean, bias,
//! Monte Carlo standard error, and MSE per quantity.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::design::{
    apply_differencing, build_akm_design, build_block_design, build_exposure_design,
    finalize_identification, identity_design, largest_connected_component, ChildMoves,
    DesignMatrix, EffectLabel, MobilityGraph, NodeId, NormalizationRule, Outcomes, Spell,
    UnitKind,
};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream_rng, StreamDomain};

/// Stylized normal-means configuration.
#[derive(Debug, Clone)]
pub struct SimpleMeansConfig {
    pub p: usize,
    pub mu_eta: f64,
    pub sigma_eta: f64,
    pub sigma_v: f64,
    pub seed: u64,
}

/// Worker/firm effect law for the two-way generator.
#[derive(Debug, Clone)]
pub struct AkmEffectLaw {
    pub mu_alpha: f64,
    pub sigma_alpha: f64,
    pub mu_psi: f64,
    pub sigma_psi: f64,
    /// Optional grouped firm means: G groups with evenly spread means around
    /// mu_psi; group labels are recorded in the truth.
    pub firm_groups: Option<FirmGroupLaw>,
}

#[derive(Debug, Clone)]
pub struct FirmGroupLaw {
    pub n_groups: usize,
    /// Total spread of group means: group g gets
    /// mu_psi + spread * (g/(G-1) - 1/2).
    pub mean_spread: f64,
}

/// Error-variance schedule for simulated noise.
#[derive(Debug, Clone)]
pub enum NoiseLaw {
    Homoskedastic { sigma2: f64 },
    /// Two variance strata assigned by worker.
    TwoStratum { sigma2_low: f64, sigma2_high: f64, rule: StratumRule },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StratumRule {
    /// Movers get the high-variance stratum. Mobility is what identifies
    /// firm effects, so this stratification moves the error variance where
    /// the design loads, separating homoskedastic and leave-out corrections.
    ByMobility,
    /// Even worker indices get the low stratum (independent of the design).
    ByWorkerIndex,
}

/// Worker mobility process.
#[derive(Debug, Clone)]
pub enum Mobility {
    /// Each period after the first, redraw the firm uniformly over the
    /// market with this probability.
    Exogenous { move_prob: f64 },
    /// Static choice each period: Pr(firm l | k) proportional to
    /// exp(rho W_{kl t}) over the market, W = alpha + psi + shock.
    Logit { rho: f64 },
    /// Meeting model: meet a random firm with probability lambda, move with
    /// probability gamma_new / (gamma_current + gamma_new) where
    /// gamma = exp(a alpha + b psi).
    Dynamic { lambda: f64, gamma_a: f64, gamma_b: f64 },
}

/// Two-way worker/firm panel configuration.
#[derive(Debug, Clone)]
pub struct AkmConfig {
    pub workers: usize,
    pub firms: usize,
    pub periods: usize,
    pub effects: AkmEffectLaw,
    pub noise: NoiseLaw,
    pub mobility: Mobility,
    /// Size of the random market each worker considers; all firms when
    /// absent.
    pub market_size: Option<usize>,
    pub seed: u64,
}

/// Neighborhood exposure configuration.
#[derive(Debug, Clone)]
pub struct ExposureConfig {
    pub children: usize,
    pub neighborhoods: usize,
    pub childhood_years: f64,
    /// Probability a child moves once to another neighborhood.
    pub move_prob: f64,
    pub mu_eta: f64,
    pub sigma_eta: f64,
    pub sigma_u: f64,
    pub seed: u64,
}

/// The synthetic data-generating processes.
#[derive(Debug, Clone)]
pub enum DgpConfig {
    SimpleMeans(SimpleMeansConfig),
    Akm(AkmConfig),
    Exposure(ExposureConfig),
}

impl DgpConfig {
    pub fn with_seed(&self, seed: u64) -> DgpConfig {
        let mut cfg = self.clone();
        match &mut cfg {
            DgpConfig::SimpleMeans(c) => c.seed = seed,
            DgpConfig::Akm(c) => c.seed = seed,
            DgpConfig::Exposure(c) => c.seed = seed,
        }
        cfg
    }

    pub fn seed(&self) -> u64 {
        match self {
            DgpConfig::SimpleMeans(c) => c.seed,
            DgpConfig::Akm(c) => c.seed,
            DgpConfig::Exposure(c) => c.seed,
        }
    }
}

/// Ground truth carried alongside a synthetic dataset.
#[derive(Debug, Clone)]
pub struct Truth {
    /// Effect labels aligned with `eta`, in the column order the design
    /// builders produce.
    pub labels: Vec<EffectLabel>,
    pub eta: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma_diag: Vec<f64>,
    pub omega_diag: Vec<f64>,
    /// Group labels per effect when the effect law is grouped. Firm effects
    /// carry their group; worker effects share one extra group index.
    pub group_labels: Option<Vec<usize>>,
    /// Named scalar parameters for truth.csv and Monte Carlo comparisons.
    pub params: Vec<(String, f64)>,
}

impl Truth {
    pub fn param(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Raw design inputs a dataset serializes to.
#[derive(Debug, Clone)]
pub enum DatasetInputs {
    SimpleMeans { p: usize },
    Akm { spells: Vec<Spell> },
    Exposure { children: Vec<ChildMoves>, od_cells: Vec<String> },
    Grouped { units: Vec<String>, slope: Option<Vec<f64>> },
}

/// A generated dataset with its ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub inputs: DatasetInputs,
    pub outcomes: Outcomes,
    pub truth: Truth,
    pub warnings: Vec<String>,
}

/// Design and outcomes ready for estimation (differenced and finalized).
pub struct Prepared {
    pub design: Arc<DesignMatrix>,
    pub y: Vec<f64>,
}

impl SyntheticDataset {
    /// Build, difference (where applicable), and finalize the design.
    pub fn prepare(&self, rule: NormalizationRule) -> Result<Prepared> {
        match &self.inputs {
            DatasetInputs::SimpleMeans { p } => Ok(Prepared {
                design: Arc::new(identity_design(*p)),
                y: self.outcomes.values().to_vec(),
            }),
            DatasetInputs::Akm { spells } => {
                let (z, _) = build_akm_design(spells)?;
                let z = finalize_identification(z, rule)?;
                Ok(Prepared { design: Arc::new(z), y: self.outcomes.values().to_vec() })
            }
            DatasetInputs::Exposure { children, od_cells } => {
                let (z, plan) = build_exposure_design(children, od_cells)?;
                let (zt, yt) = apply_differencing(&z, &self.outcomes, &plan)?;
                let zt = finalize_identification(zt, rule)?;
                Ok(Prepared { design: Arc::new(zt), y: yt.values().to_vec() })
            }
            DatasetInputs::Grouped { units, slope } => {
                let z = build_block_design(units, slope.as_deref())?;
                let z = finalize_identification(z, rule)?;
                Ok(Prepared { design: Arc::new(z), y: self.outcomes.values().to_vec() })
            }
        }
    }
}

/// Truth vector re-expressed in a finalized design's coordinates. With a
/// dropped-column normalization the dropped unit's effect is subtracted from
/// its family and added to worker effects (two-way designs), matching what
/// the finalized coefficients estimate.
pub fn normalized_truth(finalized: &DesignMatrix, truth: &Truth) -> Result<Vec<f64>> {
    let by_label: std::collections::HashMap<&EffectLabel, f64> =
        truth.labels.iter().zip(&truth.eta).map(|(l, v)| (l, *v)).collect();
    let shift = match finalized.normalization() {
        Some(norm) => *by_label
            .get(&norm.dropped)
            .ok_or_else(|| Error::input("dropped column missing from truth labels"))?,
        None => 0.0,
    };
    let dropped_kind = finalized.normalization().map(|n| n.dropped.kind);
    finalized
        .col_labels()
        .iter()
        .map(|lab| {
            let v = *by_label
                .get(lab)
                .ok_or_else(|| Error::input(format!("effect {lab} missing from truth")))?;
            Ok(match dropped_kind {
                Some(kind) if lab.kind == kind => v - shift,
                Some(_) => v + shift,
                None => v,
            })
        })
        .collect()
}

/// Normal-means generator: eta_j ~ N(mu, sigma_eta^2), estimates
/// eta_hat_j = eta_j + v_j with v_j ~ N(0, sigma_v^2), emitted as the
/// identity design.
pub fn gen_simple_means(cfg: &SimpleMeansConfig) -> Result<SyntheticDataset> {
    if cfg.p == 0 {
        return Err(Error::input("p must be at least 1"));
    }
    if cfg.sigma_eta < 0.0 || cfg.sigma_v < 0.0 {
        return Err(Error::input("standard deviations must be nonnegative"));
    }
    let mut rng_eta = stream_rng(cfg.seed, StreamDomain::SimEffects, 0);
    let mut rng_v = stream_rng(cfg.seed, StreamDomain::SimNoise, 0);
    let eta: Vec<f64> = (0..cfg.p)
        .map(|_| cfg.mu_eta + cfg.sigma_eta * rng_eta.sample::<f64, _>(StandardNormal))
        .collect();
    let y: Vec<f64> =
        eta.iter().map(|e| e + cfg.sigma_v * rng_v.sample::<f64, _>(StandardNormal)).collect();
    let labels = identity_design(cfg.p).col_labels().to_vec();
    let truth = Truth {
        labels,
        eta,
        mu: vec![cfg.mu_eta; cfg.p],
        sigma_diag: vec![cfg.sigma_eta * cfg.sigma_eta; cfg.p],
        omega_diag: vec![cfg.sigma_v * cfg.sigma_v; cfg.p],
        group_labels: None,
        params: vec![
            ("mu_eta".into(), cfg.mu_eta),
            ("sigma_eta2".into(), cfg.sigma_eta * cfg.sigma_eta),
            ("sigma_v2".into(), cfg.sigma_v * cfg.sigma_v),
        ],
    };
    Ok(SyntheticDataset {
        inputs: DatasetInputs::SimpleMeans { p: cfg.p },
        outcomes: Outcomes::new(y)?,
        truth,
        warnings: Vec::new(),
    })
}

fn worker_id(k: usize) -> String {
    format!("w{k:06}")
}

fn firm_id(l: usize) -> String {
    format!("f{l:05}")
}

/// Two-way worker/firm wage panel with configurable mobility. Output is
/// restricted to the largest connected component so the effects are
/// estimable; the truth vectors are aligned with the restricted design.
pub fn gen_akm(cfg: &AkmConfig) -> Result<SyntheticDataset> {
    let k = cfg.workers;
    let j = cfg.firms;
    let t_max = cfg.periods;
    if k == 0 || j == 0 || t_max == 0 {
        return Err(Error::input("workers, firms, and periods must all be at least 1"));
    }
    if let Some(m) = cfg.market_size {
        if m == 0 || m > j {
            return Err(Error::input("market size must be in 1..=firms"));
        }
    }
    match &cfg.mobility {
        Mobility::Exogenous { move_prob } => {
            if !(0.0..=1.0).contains(move_prob) {
                return Err(Error::input("move probability must be in [0, 1]"));
            }
        }
        Mobility::Dynamic { lambda, .. } => {
            if !(0.0..=1.0).contains(lambda) {
                return Err(Error::input("meeting probability must be in [0, 1]"));
            }
        }
        Mobility::Logit { .. } => {}
    }

    let mut rng_eff = stream_rng(cfg.seed, StreamDomain::SimEffects, 0);
    let law = &cfg.effects;
    let alpha: Vec<f64> = (0..k)
        .map(|_| law.mu_alpha + law.sigma_alpha * rng_eff.sample::<f64, _>(StandardNormal))
        .collect();
    let (firm_group, group_mean): (Vec<usize>, Vec<f64>) = match &law.firm_groups {
        Some(g) => {
            if g.n_groups == 0 {
                return Err(Error::input("firm group count must be at least 1"));
            }
            let means: Vec<f64> = (0..g.n_groups)
                .map(|gi| {
                    if g.n_groups == 1 {
                        law.mu_psi
                    } else {
                        law.mu_psi
                            + g.mean_spread * (gi as f64 / (g.n_groups - 1) as f64 - 0.5)
                    }
                })
                .collect();
            ((0..j).map(|l| l % g.n_groups).collect(), means)
        }
        None => (vec![0; j], vec![law.mu_psi]),
    };
    let psi: Vec<f64> = (0..j)
        .map(|l| {
            group_mean[firm_group[l]]
                + law.sigma_psi * rng_eff.sample::<f64, _>(StandardNormal)
        })
        .collect();

    // Markets.
    let mut rng_assign = stream_rng(cfg.seed, StreamDomain::SimAssignment, 0);
    let markets: Vec<Vec<usize>> = match cfg.market_size {
        None => vec![(0..j).collect(); k],
        Some(m) => (0..k)
            .map(|_| {
                // Partial Fisher-Yates over firm indices.
                let mut pool: Vec<usize> = (0..j).collect();
                for i in 0..m {
                    let pick = i + rng_assign.random_range(0..(j - i));
                    pool.swap(i, pick);
                }
                pool.truncate(m);
                pool.sort();
                pool
            })
            .collect(),
    };

    let logit_choice = |rng: &mut rand_chacha::ChaCha8Rng,
                        market: &[usize],
                        rho: f64,
                        alpha_k: f64,
                        noise_sd: f64| {
        let utils: Vec<f64> = market
            .iter()
            .map(|&l| {
                let shock: f64 = rng.sample(StandardNormal);
                rho * (alpha_k + psi[l] + noise_sd * shock)
            })
            .collect();
        let max = utils.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = utils.iter().map(|u| (u - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut target = rng.random::<f64>() * total;
        for (i, w) in weights.iter().enumerate() {
            target -= w;
            if target <= 0.0 {
                return market[i];
            }
        }
        market[market.len() - 1]
    };

    // Representative noise sd for choice shocks in the logit model.
    let choice_sd = match &cfg.noise {
        NoiseLaw::Homoskedastic { sigma2 } => sigma2.sqrt(),
        NoiseLaw::TwoStratum { sigma2_low, sigma2_high, .. } => {
            (0.5 * (sigma2_low + sigma2_high)).sqrt()
        }
    };

    // Firm paths.
    let mut paths: Vec<Vec<usize>> = Vec::with_capacity(k);
    for kk in 0..k {
        let market = &markets[kk];
        let mut path = Vec::with_capacity(t_max);
        let first = match &cfg.mobility {
            Mobility::Logit { rho } => {
                logit_choice(&mut rng_assign, market, *rho, alpha[kk], choice_sd)
            }
            _ => market[rng_assign.random_range(0..market.len())],
        };
        path.push(first);
        for _t in 1..t_max {
            let current = *path.last().unwrap();
            let next = match &cfg.mobility {
                Mobility::Exogenous { move_prob } => {
                    if rng_assign.random::<f64>() < *move_prob {
                        market[rng_assign.random_range(0..market.len())]
                    } else {
                        current
                    }
                }
                Mobility::Logit { rho } => {
                    logit_choice(&mut rng_assign, market, *rho, alpha[kk], choice_sd)
                }
                Mobility::Dynamic { lambda, gamma_a, gamma_b } => {
                    if market.len() > 1 && rng_assign.random::<f64>() < *lambda {
                        let mut met = market[rng_assign.random_range(0..market.len())];
                        while met == current {
                            met = market[rng_assign.random_range(0..market.len())];
                        }
                        let g_cur = (gamma_a * alpha[kk] + gamma_b * psi[current]).exp();
                        let g_met = (gamma_a * alpha[kk] + gamma_b * psi[met]).exp();
                        if rng_assign.random::<f64>() < g_met / (g_cur + g_met) {
                            met
                        } else {
                            current
                        }
                    } else {
                        current
                    }
                }
            };
            path.push(next);
        }
        paths.push(path);
    }

    // Wages. The stratum rule decides each worker's error variance.
    let mut rng_noise = stream_rng(cfg.seed, StreamDomain::SimNoise, 0);
    let worker_sigma2: Vec<f64> = (0..k)
        .map(|kk| match &cfg.noise {
            NoiseLaw::Homoskedastic { sigma2 } => *sigma2,
            NoiseLaw::TwoStratum { sigma2_low, sigma2_high, rule } => {
                let high = match rule {
                    StratumRule::ByMobility => paths[kk].windows(2).any(|w| w[0] != w[1]),
                    StratumRule::ByWorkerIndex => kk % 2 == 1,
                };
                if high {
                    *sigma2_high
                } else {
                    *sigma2_low
                }
            }
        })
        .collect();

    let mut spells = Vec::with_capacity(k * t_max);
    let mut wages = Vec::with_capacity(k * t_max);
    let mut omega_rows = Vec::with_capacity(k * t_max);
    for kk in 0..k {
        for (t, &l) in paths[kk].iter().enumerate() {
            let u: f64 = rng_noise.sample(StandardNormal);
            spells.push(Spell {
                worker: worker_id(kk),
                firm: firm_id(l),
                period: (t + 1) as u32,
            });
            wages.push(alpha[kk] + psi[l] + worker_sigma2[kk].sqrt() * u);
            omega_rows.push(worker_sigma2[kk]);
        }
    }

    // Restrict to the largest connected component.
    let graph = MobilityGraph {
        edges: spells.iter().map(|s| (s.worker.clone(), s.firm.clone(), s.period)).collect(),
    };
    let (kept_nodes, kept_edges) = largest_connected_component(&graph)?;
    let mut warnings = Vec::new();
    let kept_firms: Vec<usize> = kept_nodes
        .iter()
        .filter_map(|n| match n {
            NodeId::Firm(f) => f[1..].parse::<usize>().ok(),
            _ => None,
        })
        .collect();
    if kept_firms.len() * 2 < j {
        warnings.push(format!(
            "largest connected component keeps {} of {} firms",
            kept_firms.len(),
            j
        ));
    }
    let kept_workers: Vec<usize> = kept_nodes
        .iter()
        .filter_map(|n| match n {
            NodeId::Worker(w) => w[1..].parse::<usize>().ok(),
            _ => None,
        })
        .collect();
    let spells: Vec<Spell> = kept_edges.iter().map(|&i| spells[i].clone()).collect();
    let wages: Vec<f64> = kept_edges.iter().map(|&i| wages[i]).collect();
    let omega_rows: Vec<f64> = kept_edges.iter().map(|&i| omega_rows[i]).collect();

    // Truth aligned with the design builder's column order: sorted worker
    // ids then sorted firm ids; zero-padded ids sort numerically.
    let mut kw = kept_workers;
    kw.sort();
    let mut kf = kept_firms;
    kf.sort();
    let n_groups = group_mean.len();
    let mut labels = Vec::with_capacity(kw.len() + kf.len());
    let mut eta = Vec::with_capacity(kw.len() + kf.len());
    let mut mu = Vec::with_capacity(kw.len() + kf.len());
    let mut sigma_diag = Vec::with_capacity(kw.len() + kf.len());
    let mut group_labels = Vec::with_capacity(kw.len() + kf.len());
    for &kk in &kw {
        labels.push(EffectLabel::new(UnitKind::Worker, worker_id(kk)));
        eta.push(alpha[kk]);
        mu.push(law.mu_alpha);
        sigma_diag.push(law.sigma_alpha * law.sigma_alpha);
        group_labels.push(n_groups); // workers share one extra group
    }
    for &l in &kf {
        labels.push(EffectLabel::new(UnitKind::Firm, firm_id(l)));
        eta.push(psi[l]);
        mu.push(group_mean[firm_group[l]]);
        sigma_diag.push(law.sigma_psi * law.sigma_psi);
        group_labels.push(firm_group[l]);
    }
    let mean_omega = omega_rows.iter().sum::<f64>() / omega_rows.len().max(1) as f64;
    let truth = Truth {
        labels,
        eta,
        mu,
        sigma_diag,
        omega_diag: omega_rows,
        group_labels: law.firm_groups.as_ref().map(|_| group_labels),
        params: vec![
            ("mu_alpha".into(), law.mu_alpha),
            ("var_alpha".into(), law.sigma_alpha * law.sigma_alpha),
            ("mu_psi".into(), law.mu_psi),
            ("var_psi".into(), law.sigma_psi * law.sigma_psi),
            ("mean_omega".into(), mean_omega),
        ],
    };
    Ok(SyntheticDataset {
        inputs: DatasetInputs::Akm { spells },
        outcomes: Outcomes::new(wages)?,
        truth,
        warnings,
    })
}

fn neighborhood_id(n: usize) -> String {
    format!("n{n:04}")
}

/// Neighborhood-exposure generator: children either stay in their origin or
/// move once at a uniform age; exposures sum to the childhood length.
pub fn gen_exposure(cfg: &ExposureConfig) -> Result<SyntheticDataset> {
    if cfg.children == 0 || cfg.neighborhoods == 0 {
        return Err(Error::input("children and neighborhoods must be at least 1"));
    }
    if cfg.childhood_years <= 0.0 {
        return Err(Error::input("childhood length must be positive"));
    }
    if !(0.0..=1.0).contains(&cfg.move_prob) {
        return Err(Error::input("move probability must be in [0, 1]"));
    }
    let mut rng_eff = stream_rng(cfg.seed, StreamDomain::SimEffects, 0);
    let eta: Vec<f64> = (0..cfg.neighborhoods)
        .map(|_| cfg.mu_eta + cfg.sigma_eta * rng_eff.sample::<f64, _>(StandardNormal))
        .collect();

    let mut rng_assign = stream_rng(cfg.seed, StreamDomain::SimAssignment, 0);
    let mut rng_noise = stream_rng(cfg.seed, StreamDomain::SimNoise, 0);
    let mut children = Vec::with_capacity(cfg.children);
    let mut od_cells = Vec::with_capacity(cfg.children);
    let mut y = Vec::with_capacity(cfg.children);
    let mut any_mover = false;
    for c in 0..cfg.children {
        let origin = rng_assign.random_range(0..cfg.neighborhoods);
        let moves = cfg.neighborhoods > 1 && rng_assign.random::<f64>() < cfg.move_prob;
        let (exposures, cell) = if moves {
            any_mover = true;
            let mut dest = rng_assign.random_range(0..cfg.neighborhoods);
            while dest == origin {
                dest = rng_assign.random_range(0..cfg.neighborhoods);
            }
            let move_age = rng_assign.random::<f64>() * cfg.childhood_years;
            (
                vec![
                    (neighborhood_id(origin), move_age),
                    (neighborhood_id(dest), cfg.childhood_years - move_age),
                ],
                format!("{}->{}", neighborhood_id(origin), neighborhood_id(dest)),
            )
        } else {
            (
                vec![(neighborhood_id(origin), cfg.childhood_years)],
                format!("{}->{}", neighborhood_id(origin), neighborhood_id(origin)),
            )
        };
        let signal: f64 = exposures
            .iter()
            .map(|(nb, years)| {
                let idx: usize = nb[1..].parse().expect("generated id");
                years * eta[idx]
            })
            .sum();
        let u: f64 = rng_noise.sample(StandardNormal);
        y.push(signal + cfg.sigma_u * u);
        children.push(ChildMoves { child: format!("c{c:06}"), exposures });
        od_cells.push(cell);
    }
    let mut warnings = Vec::new();
    if !any_mover {
        warnings.push(
            "no movers: the differenced design is identically zero and effects are unidentified"
                .to_string(),
        );
    }
    let labels: Vec<EffectLabel> = (0..cfg.neighborhoods)
        .map(|njd| EffectLabel::new(UnitKind::Neighborhood, neighborhood_id(njd)))
        .collect();
    let truth = Truth {
        labels,
        eta,
        mu: vec![cfg.mu_eta; cfg.neighborhoods],
        sigma_diag: vec![cfg.sigma_eta * cfg.sigma_eta; cfg.neighborhoods],
        omega_diag: vec![cfg.sigma_u * cfg.sigma_u; cfg.children],
        group_labels: None,
        params: vec![
            ("mu_eta".into(), cfg.mu_eta),
            ("sigma_eta2".into(), cfg.sigma_eta * cfg.sigma_eta),
            ("sigma_u2".into(), cfg.sigma_u * cfg.sigma_u),
            ("childhood_years".into(), cfg.childhood_years),
        ],
    };
    Ok(SyntheticDataset {
        inputs: DatasetInputs::Exposure { children, od_cells },
        outcomes: Outcomes::new(y)?,
        truth,
        warnings,
    })
}

/// Generate a dataset from any configured DGP.
pub fn generate(config: &DgpConfig) -> Result<SyntheticDataset> {
    match config {
        DgpConfig::SimpleMeans(c) => gen_simple_means(c),
        DgpConfig::Akm(c) => gen_akm(c),
        DgpConfig::Exposure(c) => gen_exposure(c),
    }
}

/// One quantity computed in one replication, with its per-replication truth.
#[derive(Debug, Clone)]
pub struct QuantityResult {
    pub name: String,
    pub estimate: f64,
    pub truth: f64,
}

/// An estimation recipe maps a dataset (with truth) to named quantities.
pub type Recipe = Arc<dyn Fn(&SyntheticDataset) -> Result<Vec<QuantityResult>> + Send + Sync>;

/// Per-quantity Monte Carlo summary.
#[derive(Debug, Clone)]
pub struct McRow {
    pub quantity: String,
    pub mean_truth: f64,
    pub mean_estimate: f64,
    /// mean(estimate - truth) across replications.
    pub bias: f64,
    /// Standard error of the mean estimate: sd(estimates)/sqrt(reps).
    pub mc_se: f64,
    /// mean((estimate - truth)^2).
    pub mse: f64,
    pub reps: usize,
}

/// Monte Carlo report over R replications.
#[derive(Debug, Clone)]
pub struct McReport {
    pub rows: Vec<McRow>,
    pub failures: Vec<(usize, String)>,
    pub replications: usize,
}

impl McReport {
    pub fn row(&self, quantity: &str) -> Option<&McRow> {
        self.rows.iter().find(|r| r.quantity == quantity)
    }
}

/// Run `recipe` over `r` independent replications of the DGP, with
/// per-replication seeds derived from `seed`. Replication failures carry
/// their index; the run aborts when more than 5% fail. Deterministic given
/// the seed.
pub fn montecarlo(dgp: &DgpConfig, recipe: &Recipe, r: usize, seed: u64) -> Result<McReport> {
    if r < 2 {
        return Err(Error::input("Monte Carlo needs at least 2 replications"));
    }
    let results: Vec<(usize, std::result::Result<Vec<QuantityResult>, String>)> = (0..r)
        .into_par_iter()
        .map(|rep| {
            let rep_seed = derive_seed(seed, StreamDomain::McReplication, rep as u64);
            let out = generate(&dgp.with_seed(rep_seed))
                .and_then(|ds| recipe(&ds))
                .map_err(|e| e.to_string());
            (rep, out)
        })
        .collect();

    let mut failures = Vec::new();
    let mut per_rep: Vec<Vec<QuantityResult>> = Vec::new();
    for (rep, res) in results {
        match res {
            Ok(q) => per_rep.push(q),
            Err(e) => failures.push((rep, e)),
        }
    }
    if failures.len() * 20 > r {
        let (rep, first) = &failures[0];
        return Err(Error::numerical(format!(
            "{} of {r} replications failed (first at replication {rep}: {first})",
            failures.len()
        )));
    }
    if per_rep.is_empty() {
        return Err(Error::numerical("all replications failed"));
    }

    let names: Vec<String> = per_rep[0].iter().map(|q| q.name.clone()).collect();
    let mut rows = Vec::with_capacity(names.len());
    for name in &names {
        let mut estimates = Vec::with_capacity(per_rep.len());
        let mut truths = Vec::with_capacity(per_rep.len());
        for rep in &per_rep {
            let q = rep
                .iter()
                .find(|q| &q.name == name)
                .ok_or_else(|| Error::numerical(format!("quantity {name} missing in a replication")))?;
            estimates.push(q.estimate);
            truths.push(q.truth);
        }
        let m = estimates.len() as f64;
        let mean_estimate = estimates.iter().sum::<f64>() / m;
        let mean_truth = truths.iter().sum::<f64>() / m;
        let bias = estimates.iter().zip(&truths).map(|(e, t)| e - t).sum::<f64>() / m;
        let var = if estimates.len() > 1 {
            estimates.iter().map(|e| (e - mean_estimate).powi(2)).sum::<f64>() / (m - 1.0)
        } else {
            0.0
        };
        let mse = estimates.iter().zip(&truths).map(|(e, t)| (e - t).powi(2)).sum::<f64>() / m;
        rows.push(McRow {
            quantity: name.clone(),
            mean_truth,
            mean_estimate,
            bias,
            mc_se: (var / m).sqrt(),
            mse,
            reps: estimates.len(),
        });
    }
    Ok(McReport { rows, failures, replications: r })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solve::{ols_fit, SolveOptions};
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn base_akm() -> AkmConfig {
        AkmConfig {
            workers: 60,
            firms: 8,
            periods: 2,
            effects: AkmEffectLaw {
                mu_alpha: 0.0,
                sigma_alpha: 0.4,
                mu_psi: 0.0,
                sigma_psi: 0.3,
                firm_groups: None,
            },
            noise: NoiseLaw::Homoskedastic { sigma2: 0.0 },
            mobility: Mobility::Exogenous { move_prob: 0.5 },
            market_size: None,
            seed: 11,
        }
    }

    #[test]
    fn simple_means_zero_noise_reproduces_effects() {
        let ds = gen_simple_means(&SimpleMeansConfig {
            p: 50,
            mu_eta: 0.3,
            sigma_eta: 1.0,
            sigma_v: 0.0,
            seed: 5,
        })
        .unwrap();
        assert_eq!(ds.outcomes.values(), ds.truth.eta.as_slice());
    }

    #[test]
    fn simple_means_zero_signal_is_constant() {
        let ds = gen_simple_means(&SimpleMeansConfig {
            p: 20,
            mu_eta: 0.7,
            sigma_eta: 0.0,
            sigma_v: 0.0,
            seed: 5,
        })
        .unwrap();
        for e in &ds.truth.eta {
            assert_eq!(*e, 0.7);
        }
    }

    #[test]
    fn simple_means_sample_variance_near_truth() {
        let p = 100_000;
        let ds = gen_simple_means(&SimpleMeansConfig {
            p,
            mu_eta: 0.0,
            sigma_eta: 1.0,
            sigma_v: 0.0,
            seed: 9,
        })
        .unwrap();
        let mean = ds.truth.eta.iter().sum::<f64>() / p as f64;
        let var = ds.truth.eta.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / p as f64;
        // Var of the sample variance of N(0,1) is about 2/p.
        let se = (2.0 / p as f64).sqrt();
        assert!((var - 1.0).abs() < 3.0 * se, "sample variance {var}");
    }

    #[test]
    fn generators_are_byte_reproducible() {
        let cfg = base_akm();
        let a = gen_akm(&cfg).unwrap();
        let b = gen_akm(&cfg).unwrap();
        match (&a.inputs, &b.inputs) {
            (DatasetInputs::Akm { spells: sa }, DatasetInputs::Akm { spells: sb }) => {
                assert_eq!(sa, sb);
            }
            _ => unreachable!(),
        }
        let ya: Vec<u64> = a.outcomes.values().iter().map(|v| v.to_bits()).collect();
        let yb: Vec<u64> = b.outcomes.values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(ya, yb);
    }

    #[test]
    fn akm_zero_noise_ols_recovers_effects() {
        let ds = gen_akm(&base_akm()).unwrap();
        let prep = ds.prepare(NormalizationRule::DropLastFirm).unwrap();
        let fit = ols_fit(prep.design.clone(), &prep.y, &SolveOptions::default()).unwrap();
        let expect = normalized_truth(&prep.design, &ds.truth).unwrap();
        let max_err = fit
            .eta_hat()
            .iter()
            .zip(&expect)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-8, "max error {max_err}");
    }

    #[test]
    fn logit_zero_rho_is_uniform_choice() {
        // Two periods keep the network connected; each period's choice is an
        // independent logit draw, uniform when rho = 0.
        let cfg = AkmConfig {
            workers: 50_000,
            firms: 10,
            periods: 2,
            mobility: Mobility::Logit { rho: 0.0 },
            noise: NoiseLaw::Homoskedastic { sigma2: 0.05 },
            ..base_akm()
        };
        let ds = gen_akm(&cfg).unwrap();
        let DatasetInputs::Akm { spells } = &ds.inputs else { unreachable!() };
        let mut counts = [0usize; 10];
        for s in spells {
            if s.period != 1 {
                continue;
            }
            let l: usize = s.firm[1..].parse().unwrap();
            counts[l] += 1;
        }
        let total: usize = counts.iter().sum();
        let expect = total as f64 / 10.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        let pval = 1.0 - ChiSquared::new(9.0).unwrap().cdf(chi2);
        assert!(pval > 0.001, "chi-square {chi2}, p-value {pval}");
    }

    #[test]
    fn dynamic_constant_gamma_moves_at_half_lambda() {
        let cfg = AkmConfig {
            workers: 40_000,
            firms: 10,
            periods: 2,
            mobility: Mobility::Dynamic { lambda: 0.6, gamma_a: 0.0, gamma_b: 0.0 },
            noise: NoiseLaw::Homoskedastic { sigma2: 0.0 },
            ..base_akm()
        };
        let ds = gen_akm(&cfg).unwrap();
        let DatasetInputs::Akm { spells } = &ds.inputs else { unreachable!() };
        let mut by_worker: std::collections::HashMap<&str, Vec<(&str, u32)>> =
            std::collections::HashMap::new();
        for s in spells {
            by_worker.entry(&s.worker).or_default().push((&s.firm, s.period));
        }
        let mut moves = 0usize;
        let mut total = 0usize;
        for path in by_worker.values() {
            let mut path = path.clone();
            path.sort_by_key(|(_, t)| *t);
            if path.len() == 2 {
                total += 1;
                if path[0].0 != path[1].0 {
                    moves += 1;
                }
            }
        }
        let rate = moves as f64 / total as f64;
        // With constant gamma the move rate is lambda * 1/2 = 0.3.
        let se = (0.3f64 * 0.7 / total as f64).sqrt();
        assert!((rate - 0.3).abs() < 4.0 * se, "move rate {rate}");
    }

    #[test]
    fn logit_sorting_attracts_workers_to_high_psi_firms() {
        // With rho > 0, high-psi firms receive more inflows: the covariance
        // between a firm's effect and its high-alpha inflow count is
        // positive, so assignment carries information about the effects.
        let mut covs = Vec::new();
        for rep in 0..5u64 {
            let cfg = AkmConfig {
                workers: 2000,
                firms: 12,
                periods: 2,
                mobility: Mobility::Logit { rho: 2.0 },
                noise: NoiseLaw::Homoskedastic { sigma2: 0.05 },
                seed: 100 + rep,
                ..base_akm()
            };
            let ds = gen_akm(&cfg).unwrap();
            let DatasetInputs::Akm { spells } = &ds.inputs else { unreachable!() };
            // Truth: firm effects by id.
            let mut psi_by_firm = std::collections::HashMap::new();
            let mut alpha_by_worker = std::collections::HashMap::new();
            for (lab, eta) in ds.truth.labels.iter().zip(&ds.truth.eta) {
                match lab.kind {
                    UnitKind::Firm => {
                        psi_by_firm.insert(lab.unit.clone(), *eta);
                    }
                    UnitKind::Worker => {
                        alpha_by_worker.insert(lab.unit.clone(), *eta);
                    }
                    _ => {}
                }
            }
            let alphas: Vec<f64> = alpha_by_worker.values().copied().collect();
            let mut sorted = alphas.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = sorted[sorted.len() / 2];
            let mut inflow: std::collections::HashMap<&str, f64> =
                std::collections::HashMap::new();
            for s in spells {
                if s.period == 2 && alpha_by_worker[&s.worker] > median {
                    *inflow.entry(s.firm.as_str()).or_insert(0.0) += 1.0;
                }
            }
            let firms: Vec<&String> = psi_by_firm.keys().collect();
            let psi_mean: f64 =
                firms.iter().map(|f| psi_by_firm[*f]).sum::<f64>() / firms.len() as f64;
            let in_mean: f64 = firms
                .iter()
                .map(|f| inflow.get(f.as_str()).copied().unwrap_or(0.0))
                .sum::<f64>()
                / firms.len() as f64;
            let cov: f64 = firms
                .iter()
                .map(|f| {
                    (psi_by_firm[*f] - psi_mean)
                        * (inflow.get(f.as_str()).copied().unwrap_or(0.0) - in_mean)
                })
                .sum::<f64>()
                / firms.len() as f64;
            covs.push(cov);
        }
        assert!(covs.iter().all(|c| *c > 0.0), "inflow covariances {covs:?}");
    }

    #[test]
    fn stratified_noise_matches_configured_variances() {
        let cfg = AkmConfig {
            workers: 20_000,
            firms: 10,
            periods: 2,
            noise: NoiseLaw::TwoStratum {
                sigma2_low: 0.04,
                sigma2_high: 0.16,
                rule: StratumRule::ByWorkerIndex,
            },
            mobility: Mobility::Exogenous { move_prob: 0.4 },
            ..base_akm()
        };
        let ds = gen_akm(&cfg).unwrap();
        let DatasetInputs::Akm { spells } = &ds.inputs else { unreachable!() };
        // Residual u = y - alpha - psi from the recorded truth.
        let mut effect = std::collections::HashMap::new();
        for (lab, eta) in ds.truth.labels.iter().zip(&ds.truth.eta) {
            effect.insert((lab.kind, lab.unit.clone()), *eta);
        }
        let mut acc = [(0.0f64, 0usize); 2];
        for (s, y) in spells.iter().zip(ds.outcomes.values()) {
            let k: usize = s.worker[1..].parse().unwrap();
            let u = y
                - effect[&(UnitKind::Worker, s.worker.clone())]
                - effect[&(UnitKind::Firm, s.firm.clone())];
            let stratum = k % 2;
            acc[stratum].0 += u * u;
            acc[stratum].1 += 1;
        }
        let v_low = acc[0].0 / acc[0].1 as f64;
        let v_high = acc[1].0 / acc[1].1 as f64;
        // 3 MC standard errors of a chi-square mean.
        let se_low = 0.04 * (2.0 / acc[0].1 as f64).sqrt();
        let se_high = 0.16 * (2.0 / acc[1].1 as f64).sqrt();
        assert!((v_low - 0.04).abs() < 3.0 * se_low, "low stratum {v_low}");
        assert!((v_high - 0.16).abs() < 3.0 * se_high, "high stratum {v_high}");
    }

    #[test]
    fn exposure_years_sum_to_childhood_length() {
        let ds = gen_exposure(&ExposureConfig {
            children: 500,
            neighborhoods: 12,
            childhood_years: 18.0,
            move_prob: 0.5,
            mu_eta: 0.0,
            sigma_eta: 0.5,
            sigma_u: 0.2,
            seed: 3,
        })
        .unwrap();
        let DatasetInputs::Exposure { children, .. } = &ds.inputs else { unreachable!() };
        for c in children {
            let total: f64 = c.exposures.iter().map(|(_, y)| y).sum();
            assert!((total - 18.0).abs() < 1e-12);
        }
    }

    #[test]
    fn exposure_no_movers_is_flagged_and_differences_to_zero() {
        let ds = gen_exposure(&ExposureConfig {
            children: 40,
            neighborhoods: 6,
            childhood_years: 18.0,
            move_prob: 0.0,
            mu_eta: 0.0,
            sigma_eta: 0.5,
            sigma_u: 0.2,
            seed: 3,
        })
        .unwrap();
        assert!(!ds.warnings.is_empty());
        let DatasetInputs::Exposure { children, od_cells } = &ds.inputs else { unreachable!() };
        let (z, plan) = build_exposure_design(children, od_cells).unwrap();
        let (zt, _) = apply_differencing(&z, &ds.outcomes, &plan).unwrap();
        assert_eq!(zt.nnz(), 0);
    }

    #[test]
    fn exposure_zero_noise_ols_recovers_effects() {
        let ds = gen_exposure(&ExposureConfig {
            children: 400,
            neighborhoods: 8,
            childhood_years: 18.0,
            move_prob: 0.6,
            mu_eta: 0.1,
            sigma_eta: 0.5,
            sigma_u: 0.0,
            seed: 4,
        })
        .unwrap();
        let prep = ds.prepare(NormalizationRule::DropLastFirm).unwrap();
        let fit = ols_fit(prep.design.clone(), &prep.y, &SolveOptions::default()).unwrap();
        let expect = normalized_truth(&prep.design, &ds.truth).unwrap();
        let max_err = fit
            .eta_hat()
            .iter()
            .zip(&expect)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-8, "max error {max_err}");
    }

    #[test]
    fn montecarlo_zero_noise_has_zero_bias() {
        let dgp = DgpConfig::SimpleMeans(SimpleMeansConfig {
            p: 50,
            mu_eta: 0.0,
            sigma_eta: 1.0,
            sigma_v: 0.0,
            seed: 0,
        });
        let recipe: Recipe = Arc::new(|ds: &SyntheticDataset| {
            let prep = ds.prepare(NormalizationRule::DropLastFirm)?;
            let fit = ols_fit(prep.design.clone(), &prep.y, &SolveOptions::default())?;
            let q = crate::solve::QuadraticFormSpec::uniform_variance(0..ds.truth.eta.len())?;
            let truth = q.quad(&ds.truth.eta);
            Ok(vec![QuantityResult { name: "variance".into(), estimate: q.quad(fit.eta_hat()), truth }])
        });
        let report = montecarlo(&dgp, &recipe, 20, 7).unwrap();
        let row = report.row("variance").unwrap();
        assert!(row.bias.abs() < 1e-8, "bias {}", row.bias);
        assert!(report.failures.is_empty());
    }

    #[test]
    fn montecarlo_degenerate_dgp_has_zero_se() {
        let dgp = DgpConfig::SimpleMeans(SimpleMeansConfig {
            p: 10,
            mu_eta: 0.5,
            sigma_eta: 0.0,
            sigma_v: 0.0,
            seed: 0,
        });
        let recipe: Recipe = Arc::new(|ds: &SyntheticDataset| {
            Ok(vec![QuantityResult {
                name: "mean".into(),
                estimate: ds.outcomes.values().iter().sum::<f64>()
                    / ds.outcomes.len() as f64,
                truth: 0.5,
            }])
        });
        let report = montecarlo(&dgp, &recipe, 2, 7).unwrap();
        assert_eq!(report.row("mean").unwrap().mc_se, 0.0);
    }

    #[test]
    fn montecarlo_aborts_when_too_many_failures() {
        let dgp = DgpConfig::SimpleMeans(SimpleMeansConfig {
            p: 10,
            mu_eta: 0.0,
            sigma_eta: 1.0,
            sigma_v: 0.0,
            seed: 0,
        });
        let recipe: Recipe =
            Arc::new(|_: &SyntheticDataset| Err(Error::numerical("deliberate failure")));
        let err = montecarlo(&dgp, &recipe, 10, 7).unwrap_err();
        assert!(err.to_string().contains("replications failed"), "{err}");
    }

    #[test]
    fn montecarlo_is_reproducible() {
        let dgp = DgpConfig::SimpleMeans(SimpleMeansConfig {
            p: 100,
            mu_eta: 0.0,
            sigma_eta: 1.0,
            sigma_v: 0.5,
            seed: 0,
        });
        let recipe: Recipe = Arc::new(|ds: &SyntheticDataset| {
            let q = crate::solve::QuadraticFormSpec::uniform_variance(0..ds.truth.eta.len())?;
            Ok(vec![QuantityResult {
                name: "plug".into(),
                estimate: q.quad(ds.outcomes.values()),
                truth: q.quad(&ds.truth.eta),
            }])
        });
        let a = montecarlo(&dgp, &recipe, 50, 42).unwrap();
        let b = montecarlo(&dgp, &recipe, 50, 42).unwrap();
        assert_eq!(
            a.row("plug").unwrap().mean_estimate.to_bits(),
            b.row("plug").unwrap().mean_estimate.to_bits()
        );
    }
}
