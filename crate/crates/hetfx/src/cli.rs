//! Command-line driver: `hetfx simulate | estimate | montecarlo`.
//!
//! Each command reads one TOML configuration (see [`crate::config`]);
//! `--seed`, `--threads`, and `--out` flags override the file. Exit codes
//! are stable for scripting: 0 success, 2 input error, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::config::{EstimateSection, ModelSection, RunConfig, SolverSection};
use crate::design::{
    apply_differencing, build_akm_design, build_block_design, build_exposure_design,
    finalize_identification, DesignMatrix, NormalizationRule, Outcomes, UnitKind,
};
use crate::error::{Error, Result};
use crate::estimators::{
    fe_quadratic_bc, model_cdf, model_nonlinear, posterior_nonlinear, posterior_state,
    NonlinearFunctional, PosteriorOptions, PosteriorState,
};
use crate::io;
use crate::noise::{estimate_omega_leaveout, estimate_sigma2, fit_parametric_diag, NoiseSpec,
    VarianceCovariates};
use crate::rc::{fit_cov, fit_mean, kmeans_groups, CovSpec, GroupAssignment, MeanSpec, RCSpec};
use crate::simulate::{generate, montecarlo, DatasetInputs, QuantityResult, Recipe,
    SyntheticDataset};
use crate::solve::{
    leverage_diagonals, ols_fit_with_solver, EstimateBundle, GramSolver, LeverageMode,
    QuadraticFormSpec, SolveOptions,
};

#[derive(Parser)]
#[command(
    name = "hetfx",
    version,
    about = "Heterogeneous unit effects in high-dimensional linear models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with known ground truth.
    Simulate(CommonArgs),
    /// Run the estimation pipeline on dataset files.
    Estimate(CommonArgs),
    /// Replicate the pipeline over fresh datasets and report bias/SE/MSE.
    Montecarlo(CommonArgs),
}

#[derive(Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Seed override; wins over the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker thread cap; falls back to HETFX_THREADS, then all cores.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory override.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Create the output directory when missing.
    #[arg(long)]
    pub mkdir: bool,
}

/// Parse arguments, run, and map errors onto the exit-code contract.
pub fn main_entry() -> std::process::ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::from(e.exit_code() as u8)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Estimate(args) => cmd_estimate(&args),
        Command::Montecarlo(args) => cmd_montecarlo(&args),
    }
}

fn setup_threads(args: &CommonArgs, cfg: &RunConfig) {
    let n = args
        .threads
        .or(cfg.threads)
        .or_else(|| std::env::var("HETFX_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(n) = n {
        // Ignore failure: the global pool can only be set once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn resolve_out(args: &CommonArgs, cfg: &RunConfig) -> Result<PathBuf> {
    let out = args.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("."));
    if !out.is_dir() {
        if args.mkdir {
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        } else {
            return Err(Error::input(format!(
                "output directory {} does not exist (pass --mkdir to create it)",
                out.display()
            )));
        }
    }
    Ok(out)
}

fn resolve_seed(args: &CommonArgs, cfg: &RunConfig) -> Result<u64> {
    args.seed.or(cfg.seed).ok_or_else(|| Error::input("seed required (config key or --seed)"))
}

fn cmd_simulate(args: &CommonArgs) -> Result<()> {
    let cfg = RunConfig::from_path(&args.config)?;
    setup_threads(args, &cfg);
    let seed = resolve_seed(args, &cfg)?;
    let out = resolve_out(args, &cfg)?;
    let dgp_section =
        cfg.dgp.as_ref().ok_or_else(|| Error::input("[dgp] section required for simulate"))?;
    let dgp = dgp_section.to_dgp(seed)?;
    let ds = generate(&dgp)?;
    for w in &ds.warnings {
        eprintln!("warning: {w}");
    }
    let mut files = Vec::new();
    match &ds.inputs {
        DatasetInputs::SimpleMeans { p } => {
            let units: Vec<String> = (0..*p).map(|j| format!("u{j:06}")).collect();
            let path = out.join("grouped.csv");
            io::write_grouped(&path, &units, None, ds.outcomes.values())?;
            files.push(path);
        }
        DatasetInputs::Akm { spells } => {
            let spath = out.join("spells.csv");
            io::write_spells(&spath, spells)?;
            files.push(spath);
            let opath = out.join("outcomes.csv");
            io::write_outcomes(&opath, ds.outcomes.values())?;
            files.push(opath);
        }
        DatasetInputs::Exposure { children, od_cells } => {
            let epath = out.join("exposures.csv");
            io::write_exposures(&epath, children, od_cells)?;
            files.push(epath);
            let opath = out.join("outcomes.csv");
            io::write_outcomes(&opath, ds.outcomes.values())?;
            files.push(opath);
        }
        DatasetInputs::Grouped { units, slope, .. } => {
            let path = out.join("grouped.csv");
            io::write_grouped(&path, units, slope.as_deref(), ds.outcomes.values())?;
            files.push(path);
        }
    }
    let tpath = out.join("truth.csv");
    io::write_truth(&tpath, &ds.truth)?;
    files.push(tpath);

    let n = ds.outcomes.len();
    let p = ds.truth.eta.len();
    let workers = ds
        .truth
        .labels
        .iter()
        .filter(|l| l.kind == UnitKind::Worker)
        .count();
    let firms = ds.truth.labels.iter().filter(|l| l.kind == UnitKind::Firm).count();
    println!("dataset: n = {n}, p = {p} (workers = {workers}, units/firms = {firms})");
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

/// A parsed `kind:scope[:a]` quantity request.
#[derive(Debug, Clone)]
struct QuantityRequest {
    raw: String,
    kind: QuantityKind,
    scope: String,
}

#[derive(Debug, Clone, Copy)]
enum QuantityKind {
    Mean,
    Variance,
    Cdf(f64),
    Density(f64),
}

fn parse_quantity(raw: &str) -> Result<QuantityRequest> {
    let parts: Vec<&str> = raw.split(':').collect();
    let (kind, scope) = match parts.as_slice() {
        [k @ ("mean" | "variance"), scope] => {
            let kind =
                if *k == "mean" { QuantityKind::Mean } else { QuantityKind::Variance };
            (kind, scope.to_string())
        }
        [k @ ("cdf" | "density"), scope, a] => {
            let a: f64 = a
                .parse()
                .map_err(|_| Error::input(format!("quantity '{raw}': bad evaluation point")))?;
            let kind =
                if *k == "cdf" { QuantityKind::Cdf(a) } else { QuantityKind::Density(a) };
            (kind, scope.to_string())
        }
        _ => {
            return Err(Error::input(format!(
                "quantity '{raw}' is not of the form kind:scope[:a]"
            )))
        }
    };
    match scope.as_str() {
        "all" | "firm" | "worker" | "neighborhood" | "slope" => {}
        other => return Err(Error::input(format!("quantity '{raw}': unknown scope '{other}'"))),
    }
    Ok(QuantityRequest { raw: raw.to_string(), kind, scope })
}

fn scope_kind(scope: &str) -> Option<UnitKind> {
    match scope {
        "firm" => Some(UnitKind::Firm),
        "worker" => Some(UnitKind::Worker),
        "neighborhood" => Some(UnitKind::Neighborhood),
        "slope" => Some(UnitKind::Slope),
        _ => None,
    }
}

/// Columns of the finalized design within a scope, plus the family size
/// counting the column dropped by the normalization (its effect is pinned
/// at zero in the identified coordinates).
fn scope_columns(design: &DesignMatrix, scope: &str) -> Result<(Vec<usize>, usize)> {
    let kind = scope_kind(scope);
    let indices: Vec<usize> = design
        .col_labels()
        .iter()
        .enumerate()
        .filter(|(_, lab)| kind.map_or(true, |k| lab.kind == k))
        .map(|(j, _)| j)
        .collect();
    if indices.is_empty() {
        return Err(Error::input(format!("no design columns in scope '{scope}'")));
    }
    let dropped_in_scope = design
        .normalization()
        .map(|nrm| kind.map_or(true, |k| nrm.dropped.kind == k))
        .unwrap_or(false);
    let total = indices.len() + usize::from(dropped_in_scope);
    Ok((indices, total))
}

/// Everything the estimation pipeline produces for one dataset.
struct PipelineOutput {
    bundle: EstimateBundle,
    noise: NoiseSpec,
    rc: RCSpec,
    posterior: PosteriorState,
    warnings: Vec<String>,
}

struct Pipeline {
    rule: NormalizationRule,
    model: ModelSection,
    estimate: EstimateSection,
    solver: SolverSection,
    opts: SolveOptions,
    seed: u64,
}

impl Pipeline {
    fn from_config(cfg: &RunConfig, seed: u64) -> Result<Pipeline> {
        Ok(Pipeline {
            rule: cfg.model.normalization_rule()?,
            model: cfg.model.clone(),
            estimate: cfg.estimate.clone(),
            solver: cfg.solver.clone(),
            opts: cfg.solver.to_options(),
            seed,
        })
    }

    fn leverage_mode(&self) -> Result<LeverageMode> {
        match self.solver.leverage.as_str() {
            "exact" => Ok(LeverageMode::Exact),
            "sketched" => {
                Ok(LeverageMode::Sketched { probes: self.solver.leverage_probes, seed: self.seed })
            }
            other => Err(Error::input(format!("[solver] unknown leverage mode '{other}'"))),
        }
    }

    fn fit(&self, design: Arc<DesignMatrix>, y: &[f64]) -> Result<PipelineOutput> {
        let mut warnings = Vec::new();
        let gram = Arc::new(GramSolver::new(design.clone(), None, &self.opts)?);
        let bundle = ols_fit_with_solver(gram, y)?;

        let needs_leverage = matches!(self.model.noise.as_str(), "leaveout" | "parametric");
        let leverages = if needs_leverage {
            Some(leverage_diagonals(bundle.gram(), self.leverage_mode()?)?)
        } else {
            None
        };
        let noise = match self.model.noise.as_str() {
            "homoskedastic" => estimate_sigma2(&bundle, y)?,
            "fixed" => NoiseSpec::homoskedastic(self.model.sigma2.ok_or_else(|| {
                Error::input("[model] sigma2 required for the fixed noise family")
            })?)?,
            "leaveout" => {
                estimate_omega_leaveout(&bundle, y, leverages.as_ref().expect("computed"))?
            }
            "parametric" => {
                let lev = leverages.as_ref().expect("computed");
                let w = match self.model.noise_covariate.as_str() {
                    "none" => VarianceCovariates::intercept_only(y.len()),
                    "leverage" => VarianceCovariates::intercept_and(lev)?,
                    other => {
                        return Err(Error::input(format!(
                            "[model] unknown noise covariate '{other}'"
                        )))
                    }
                };
                fit_parametric_diag(&bundle, y, &w, lev)?.spec
            }
            other => return Err(Error::input(format!("[model] unknown noise family '{other}'"))),
        };

        let grouped = self.model.mean == "grouped" || self.model.cov == "grouped";
        let grouping = if grouped {
            Some(self.build_grouping(&design, y)?)
        } else {
            None
        };

        let mean = match self.model.mean.as_str() {
            "constant" => fit_mean(&bundle, MeanSpec::Constant, None)?,
            "grouped" => fit_mean(&bundle, MeanSpec::Grouped, grouping.as_ref())?,
            other => return Err(Error::input(format!("[model] unknown mean model '{other}'"))),
        };
        let cov_fit = match self.model.cov.as_str() {
            "scalar" => fit_cov(&bundle, &noise, &mean, CovSpec::ScalarDiag, None)?,
            "grouped" => {
                fit_cov(&bundle, &noise, &mean, CovSpec::GroupedBlocks, grouping.as_ref())?
            }
            other => {
                return Err(Error::input(format!("[model] unknown covariance model '{other}'")))
            }
        };
        if cov_fit.floored {
            warnings.push("negative variance moment floored at 1e-12".to_string());
        }
        if cov_fit.clipped {
            warnings.push("group covariance clipped to keep 2x2 blocks PSD".to_string());
        }
        let rc = RCSpec::new(mean, cov_fit.model, grouping)?;

        let posterior = posterior_state(&bundle, &noise, &rc, &PosteriorOptions::default())?;
        if posterior.noise_floored {
            warnings
                .push("nonpositive noise moments floored for the posterior computation".into());
        }
        Ok(PipelineOutput { bundle, noise, rc, posterior, warnings })
    }

    /// k-means grouping over per-unit outcome decile vectors for the
    /// configured unit kind; effects of other kinds share one extra group.
    fn build_grouping(&self, design: &DesignMatrix, y: &[f64]) -> Result<GroupAssignment> {
        let kind = scope_kind(&self.model.group_kind)
            .ok_or_else(|| Error::input("[model] group_kind must name a unit kind"))?;
        let p = design.n_effects();
        let mut per_unit: Vec<Vec<f64>> = vec![Vec::new(); p];
        for i in 0..design.n_obs() {
            let (cols, _) = design.row(i);
            for c in cols {
                per_unit[*c].push(y[i]);
            }
        }
        let cluster_cols: Vec<usize> = design
            .col_labels()
            .iter()
            .enumerate()
            .filter(|(_, lab)| lab.kind == kind)
            .map(|(j, _)| j)
            .collect();
        if cluster_cols.is_empty() {
            return Err(Error::input(format!(
                "no '{}' columns to cluster",
                self.model.group_kind
            )));
        }
        let summaries: Vec<Vec<f64>> = cluster_cols
            .iter()
            .map(|&j| {
                let mut v = per_unit[j].clone();
                if v.is_empty() {
                    return vec![0.0; 10];
                }
                v.sort_by(|a, b| a.partial_cmp(b).unwrap());
                (0..10).map(|k| v[(v.len() - 1) * k / 9]).collect()
            })
            .collect();
        let g = self.model.groups.clamp(1, cluster_cols.len());
        let assignment = kmeans_groups(&summaries, g, self.seed)?;
        let n_groups = assignment.n_groups();
        let has_other = cluster_cols.len() < p;
        let mut labels = vec![n_groups; p];
        for (pos, &j) in cluster_cols.iter().enumerate() {
            labels[j] = assignment.labels()[pos];
        }
        let mut centers = assignment.centers().to_vec();
        if has_other {
            centers.push(vec![0.0; 10]);
        }
        GroupAssignment::new(labels, centers)
    }

    /// Evaluate one quantity under one strategy.
    fn evaluate(
        &self,
        req: &QuantityRequest,
        strategy: &str,
        out: &PipelineOutput,
    ) -> Result<io::QuantityRow> {
        let design = out.bundle.design();
        let p = design.n_effects();
        let (indices, total) = scope_columns(design, &req.scope)?;
        let eta = out.bundle.eta_hat();
        let mut mc_draws = None;
        let draws = self.estimate.draws;
        let value = match (req.kind, strategy) {
            (QuantityKind::Mean, "plugin" | "fe") => {
                indices.iter().map(|&j| eta[j]).sum::<f64>() / total as f64
            }
            (QuantityKind::Mean, "model") => {
                let mu = out.rc.mu_vector(p)?;
                indices.iter().map(|&j| mu[j]).sum::<f64>() / total as f64
            }
            (QuantityKind::Mean, "posterior") => {
                let m = out.posterior.post_mean();
                indices.iter().map(|&j| m[j]).sum::<f64>() / total as f64
            }
            (QuantityKind::Variance, "plugin") => {
                let q =
                    QuadraticFormSpec::uniform_variance_with_total(indices.clone(), total)?;
                q.quad(eta)
            }
            (QuantityKind::Variance, "fe") => {
                let q =
                    QuadraticFormSpec::uniform_variance_with_total(indices.clone(), total)?;
                fe_quadratic_bc(&q, &out.bundle, &out.noise, self.solver.probes, self.seed)?
                    .corrected
            }
            (QuantityKind::Variance, "model") => {
                let q =
                    QuadraticFormSpec::uniform_variance_with_total(indices.clone(), total)?;
                crate::estimators::model_quadratic(&q, &out.rc, p)?
            }
            (QuantityKind::Variance, "posterior") => {
                let q =
                    QuadraticFormSpec::uniform_variance_with_total(indices.clone(), total)?;
                mc_draws = Some(draws);
                let f = NonlinearFunctional::custom(move |eta: &[f64]| q.quad(eta));
                posterior_nonlinear(&f, &out.posterior, draws, self.seed)?
            }
            (QuantityKind::Cdf(a), strat) => {
                let w = 1.0 / indices.len() as f64;
                let weights: Vec<(usize, f64)> = indices.iter().map(|&j| (j, w)).collect();
                match strat {
                    "plugin" => weights
                        .iter()
                        .map(|(j, w)| if eta[*j] <= a { *w } else { 0.0 })
                        .sum(),
                    "model" => {
                        let f = NonlinearFunctional::cdf_at(a, weights)?;
                        model_cdf(&f, &out.rc, p)?
                    }
                    "posterior" => {
                        mc_draws = Some(draws);
                        let f = NonlinearFunctional::cdf_at(a, weights)?;
                        posterior_nonlinear(&f, &out.posterior, draws, self.seed)?
                    }
                    other => {
                        return Err(Error::input(format!(
                            "strategy '{other}' does not apply to cdf quantities"
                        )))
                    }
                }
            }
            (QuantityKind::Density(a), strat) => {
                let w = 1.0 / indices.len() as f64;
                let weights: Vec<(usize, f64)> = indices.iter().map(|&j| (j, w)).collect();
                let f = NonlinearFunctional::density_at(a, weights, None)?;
                mc_draws = Some(draws);
                match strat {
                    "model" => model_nonlinear(&f, &out.rc, p, draws, self.seed)?,
                    "posterior" => posterior_nonlinear(&f, &out.posterior, draws, self.seed)?,
                    other => {
                        return Err(Error::input(format!(
                            "strategy '{other}' does not apply to density quantities"
                        )))
                    }
                }
            }
            (_, other) => {
                return Err(Error::input(format!("unknown strategy '{other}'")));
            }
        };
        Ok(io::QuantityRow {
            quantity: req.raw.clone(),
            strategy: strategy.to_string(),
            value,
            mc_draws,
            seed: mc_draws.map(|_| self.seed),
        })
    }
}

fn load_inputs(cfg: &RunConfig, rule: NormalizationRule) -> Result<(Arc<DesignMatrix>, Vec<f64>)> {
    let inputs = cfg
        .inputs
        .as_ref()
        .ok_or_else(|| Error::input("[inputs] section required for estimate"))?;
    fn need<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        path.as_deref().ok_or_else(|| Error::input(format!("[inputs] {key} path required")))
    }
    match inputs.format.as_str() {
        "akm" => {
            let spells = io::read_spells(need(&inputs.spells, "spells")?)?;
            let y = io::read_outcomes(need(&inputs.outcomes, "outcomes")?)?;
            if y.len() != spells.len() {
                return Err(Error::input(format!(
                    "outcomes has {} rows but spells has {}",
                    y.len(),
                    spells.len()
                )));
            }
            let (z, _) = build_akm_design(&spells)?;
            let z = finalize_identification(z, rule)?;
            Ok((Arc::new(z), y))
        }
        "exposure" => {
            let (children, cells) = io::read_exposures(need(&inputs.exposures, "exposures")?)?;
            let y = io::read_outcomes(need(&inputs.outcomes, "outcomes")?)?;
            if y.len() != children.len() {
                return Err(Error::input(format!(
                    "outcomes has {} rows but exposures describe {} children",
                    y.len(),
                    children.len()
                )));
            }
            let (z, plan) = build_exposure_design(&children, &cells)?;
            let (zt, yt) = apply_differencing(&z, &Outcomes::new(y)?, &plan)?;
            let zt = finalize_identification(zt, rule)?;
            Ok((Arc::new(zt), yt.values().to_vec()))
        }
        "grouped" => {
            let (units, slope, y) = io::read_grouped(need(&inputs.grouped, "grouped")?)?;
            let z = build_block_design(&units, slope.as_deref())?;
            let z = finalize_identification(z, rule)?;
            Ok((Arc::new(z), y))
        }
        other => Err(Error::input(format!("[inputs] unknown format '{other}'"))),
    }
}

fn cmd_estimate(args: &CommonArgs) -> Result<()> {
    let cfg = RunConfig::from_path(&args.config)?;
    setup_threads(args, &cfg);
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let out = resolve_out(args, &cfg)?;
    let pipeline = Pipeline::from_config(&cfg, seed)?;
    let (design, y) = load_inputs(&cfg, pipeline.rule)?;
    let result = pipeline.fit(design.clone(), &y)?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }

    let rows: Vec<io::EstimateRow> = (0..design.n_effects())
        .map(|j| io::EstimateRow {
            eta_hat: result.bundle.eta_hat()[j],
            post_mean: Some(result.posterior.post_mean()[j]),
            post_sd: Some(result.posterior.g_diag()[j].max(0.0).sqrt()),
        })
        .collect();
    let epath = out.join("estimates.csv");
    io::write_estimates(&epath, &design, &rows)?;

    let mut qrows = Vec::new();
    for raw in &pipeline.estimate.quantities {
        let req = parse_quantity(raw)?;
        for strategy in &pipeline.estimate.strategies {
            // Skip combinations that have no sensible reading instead of
            // failing the whole run, but surface unknown strategy names.
            match (req.kind, strategy.as_str()) {
                (QuantityKind::Cdf(_), "fe") | (QuantityKind::Density(_), "fe" | "plugin") => {
                    continue
                }
                (_, "plugin" | "fe" | "model" | "posterior") => {}
                (_, other) => {
                    return Err(Error::input(format!("unknown strategy '{other}'")));
                }
            }
            qrows.push(pipeline.evaluate(&req, strategy, &result)?);
        }
    }
    let qpath = out.join("quantities.csv");
    io::write_quantities(&qpath, &qrows)?;

    io::write_noise_spec(&out.join("noise_spec.txt"), &result.noise)?;
    io::write_rc_spec(&out.join("rc_spec.txt"), &result.rc)?;

    println!(
        "estimated {} effects on {} observations ({} noise, {} mean, {} covariance)",
        design.n_effects(),
        design.n_obs(),
        result.noise.family_name(),
        pipeline.model.mean,
        pipeline.model.cov
    );
    println!("wrote {}", epath.display());
    println!("wrote {}", qpath.display());
    for r in &qrows {
        println!("{} [{}] = {}", r.quantity, r.strategy, r.value);
    }
    Ok(())
}

/// Per-replication truth for a quantity, in the identified (normalized)
/// coordinates the estimators target: the dropped unit enters pinned at
/// zero.
fn truth_quantity(
    kind: QuantityKind,
    scope: &str,
    design: &DesignMatrix,
    normalized_eta: &[f64],
) -> Result<f64> {
    let (indices, total) = scope_columns(design, scope)?;
    let mut values: Vec<f64> = indices.iter().map(|&j| normalized_eta[j]).collect();
    if total > values.len() {
        values.push(0.0);
    }
    let m = values.len() as f64;
    Ok(match kind {
        QuantityKind::Mean => values.iter().sum::<f64>() / m,
        QuantityKind::Variance => {
            let mean = values.iter().sum::<f64>() / m;
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m
        }
        QuantityKind::Cdf(a) => values.iter().filter(|v| **v <= a).count() as f64 / m,
        QuantityKind::Density(_) => {
            return Err(Error::input(
                "density quantities have no finite-sample truth; use cdf in montecarlo",
            ))
        }
    })
}

fn cmd_montecarlo(args: &CommonArgs) -> Result<()> {
    let cfg = RunConfig::from_path(&args.config)?;
    setup_threads(args, &cfg);
    let seed = resolve_seed(args, &cfg)?;
    let out = resolve_out(args, &cfg)?;
    let dgp_section =
        cfg.dgp.as_ref().ok_or_else(|| Error::input("[dgp] section required for montecarlo"))?;
    let dgp = dgp_section.to_dgp(seed)?;
    let pipeline = Arc::new(Pipeline::from_config(&cfg, seed)?);
    let replications = cfg.montecarlo.replications;

    let requests: Vec<QuantityRequest> = cfg
        .estimate
        .quantities
        .iter()
        .map(|raw| parse_quantity(raw))
        .collect::<Result<Vec<_>>>()?;
    let strategies = cfg.estimate.strategies.clone();
    for req in &requests {
        if matches!(req.kind, QuantityKind::Density(_)) {
            return Err(Error::input(
                "density quantities have no finite-sample truth; use cdf in montecarlo",
            ));
        }
    }

    let pl = pipeline.clone();
    let recipe: Recipe = Arc::new(move |ds: &SyntheticDataset| {
        let prep = ds.prepare(pl.rule)?;
        let result = pl.fit(prep.design.clone(), &prep.y)?;
        let normalized = crate::simulate::normalized_truth(&prep.design, &ds.truth)?;
        let mut rows = Vec::new();
        for req in &requests {
            let truth = truth_quantity(req.kind, &req.scope, &prep.design, &normalized)?;
            for strategy in &strategies {
                match (req.kind, strategy.as_str()) {
                    (QuantityKind::Cdf(_), "fe") => continue,
                    _ => {}
                }
                let row = pl.evaluate(req, strategy, &result)?;
                rows.push(QuantityResult {
                    name: format!("{}[{}]", req.raw, strategy),
                    estimate: row.value,
                    truth,
                });
            }
        }
        Ok(rows)
    });

    let report = montecarlo(&dgp, &recipe, replications, seed)?;
    let rpath = out.join("mc_report.csv");
    io::write_mc_report(&rpath, &report)?;

    println!(
        "monte carlo: {} replications ({} failed)",
        report.replications,
        report.failures.len()
    );
    println!(
        "{:<34} {:>12} {:>12} {:>12} {:>12} {:>12}",
        "quantity", "truth", "mean", "bias", "mc_se", "mse"
    );
    for r in &report.rows {
        println!(
            "{:<34} {:>12.6} {:>12.6} {:>12.6} {:>12.6} {:>12.6}",
            r.quantity, r.mean_truth, r.mean_estimate, r.bias, r.mc_se, r.mse
        );
    }
    println!("wrote {}", rpath.display());
    Ok(())
}
