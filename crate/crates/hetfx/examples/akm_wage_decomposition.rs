//! Two-way worker/firm wage decomposition on a simulated panel.
//!
//! Builds the sparse worker/firm design from employment spells, restricts to
//! the largest connected component, and decomposes wage variance into worker
//! and firm components with plug-in, bias-corrected, model-based, and
//! posterior estimators.
//!
//! ```bash
//! cargo run --release -p hetfx --example akm_wage_decomposition
//! ```

use hetfx::design::{NormalizationRule, UnitKind};
use hetfx::estimators::{
    fe_quadratic_bc, model_quadratic, posterior_nonlinear, posterior_state, NonlinearFunctional,
    PosteriorOptions,
};
use hetfx::noise::estimate_sigma2;
use hetfx::rc::{fit_cov, fit_mean, CovSpec, GroupAssignment, MeanSpec, RCSpec};
use hetfx::simulate::{gen_akm, AkmConfig, AkmEffectLaw, Mobility, NoiseLaw};
use hetfx::solve::{ols_fit, QuadraticFormSpec, SolveOptions};

fn main() -> hetfx::Result<()> {
    let cfg = AkmConfig {
        workers: 2000,
        firms: 150,
        periods: 3,
        effects: AkmEffectLaw {
            mu_alpha: 0.0,
            sigma_alpha: 0.45,
            mu_psi: 0.0,
            sigma_psi: 0.25,
            firm_groups: None,
        },
        noise: NoiseLaw::Homoskedastic { sigma2: 0.09 },
        mobility: Mobility::Exogenous { move_prob: 0.5 },
        market_size: None,
        seed: 7,
    };
    let ds = gen_akm(&cfg)?;
    let prep = ds.prepare(NormalizationRule::DropLastFirm)?;
    println!(
        "design: {} spells, {} effects (largest connected component)",
        prep.design.n_obs(),
        prep.design.n_effects()
    );

    let fit = ols_fit(prep.design.clone(), &prep.y, &SolveOptions::default())?;
    let noise = estimate_sigma2(&fit, &prep.y)?;

    // Variance forms per unit family; the dropped firm is pinned at zero.
    let family = |kind: UnitKind| -> (Vec<usize>, usize) {
        let cols: Vec<usize> = prep
            .design
            .col_labels()
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind == kind)
            .map(|(j, _)| j)
            .collect();
        let dropped = prep
            .design
            .normalization()
            .map(|n| n.dropped.kind == kind)
            .unwrap_or(false);
        let total = cols.len() + usize::from(dropped);
        (cols, total)
    };
    let (worker_cols, worker_total) = family(UnitKind::Worker);
    let (firm_cols, firm_total) = family(UnitKind::Firm);
    let q_worker = QuadraticFormSpec::uniform_variance_with_total(worker_cols, worker_total)?;
    let q_firm = QuadraticFormSpec::uniform_variance_with_total(firm_cols.clone(), firm_total)?;

    // Fit the random-coefficient model for the model-based and posterior
    // strategies, with separate worker and firm groups so each family gets
    // its own mean and variance.
    let kind_labels: Vec<usize> = prep
        .design
        .col_labels()
        .iter()
        .map(|l| usize::from(l.kind == UnitKind::Firm))
        .collect();
    let grouping = GroupAssignment::new(kind_labels, vec![vec![0.0], vec![1.0]])?;
    let mean = fit_mean(&fit, MeanSpec::Grouped, Some(&grouping))?;
    let cov = fit_cov(&fit, &noise, &mean, CovSpec::GroupedBlocks, Some(&grouping))?;
    let rc = RCSpec::new(mean, cov.model, Some(grouping))?;
    let post = posterior_state(&fit, &noise, &rc, &PosteriorOptions::default())?;
    let p = prep.design.n_effects();

    let true_var = |kind: UnitKind| -> f64 {
        let vals: Vec<f64> = ds
            .truth
            .labels
            .iter()
            .zip(&ds.truth.eta)
            .filter(|(l, _)| l.kind == kind)
            .map(|(_, e)| *e)
            .collect();
        let m = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / m;
        vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m
    };

    println!("\n{:<22} {:>10} {:>10}", "estimator", "worker", "firm");
    println!(
        "{:<22} {:>10.4} {:>10.4}",
        "truth (this draw)",
        true_var(UnitKind::Worker),
        true_var(UnitKind::Firm)
    );
    let fe_w = fe_quadratic_bc(&q_worker, &fit, &noise, 1000, 1)?;
    let fe_f = fe_quadratic_bc(&q_firm, &fit, &noise, 1000, 1)?;
    println!("{:<22} {:>10.4} {:>10.4}", "plug-in", fe_w.plug_in, fe_f.plug_in);
    println!("{:<22} {:>10.4} {:>10.4}", "bias-corrected", fe_w.corrected, fe_f.corrected);
    println!(
        "{:<22} {:>10.4} {:>10.4}",
        "model-based",
        model_quadratic(&q_worker, &rc, p)?,
        model_quadratic(&q_firm, &rc, p)?
    );
    let qw = q_worker.clone();
    let qf = q_firm.clone();
    let post_w = posterior_nonlinear(
        &NonlinearFunctional::custom(move |eta: &[f64]| qw.quad(eta)),
        &post,
        20_000,
        2,
    )?;
    let post_f = posterior_nonlinear(
        &NonlinearFunctional::custom(move |eta: &[f64]| qf.quad(eta)),
        &post,
        20_000,
        2,
    )?;
    println!("{:<22} {:>10.4} {:>10.4}", "posterior", post_w, post_f);
    Ok(())
}
