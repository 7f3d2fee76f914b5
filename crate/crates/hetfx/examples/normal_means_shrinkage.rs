//! The stylized normal-means model: why plug-in variances are too big and
//! shrinkage predictors beat the raw estimates.
//!
//! Draws p effects eta_j ~ N(0, 1) observed with noise N(0, 0.25), then
//! compares the plug-in variance against its bias-corrected version and the
//! raw estimates' squared error against the posterior means'.
//!
//! ```bash
//! cargo run --release -p hetfx --example normal_means_shrinkage
//! ```

use hetfx::design::NormalizationRule;
use hetfx::estimators::{fe_quadratic_bc, posterior_state, simple_shrinkage, PosteriorOptions};
use hetfx::noise::NoiseSpec;
use hetfx::rc::{CovModel, MeanModel, RCSpec};
use hetfx::simulate::{gen_simple_means, SimpleMeansConfig};
use hetfx::solve::{ols_fit, QuadraticFormSpec, SolveOptions};

fn main() -> hetfx::Result<()> {
    let p = 2000;
    let (sigma_eta2, sigma_v2) = (1.0f64, 0.25f64);
    let ds = gen_simple_means(&SimpleMeansConfig {
        p,
        mu_eta: 0.0,
        sigma_eta: sigma_eta2.sqrt(),
        sigma_v: sigma_v2.sqrt(),
        seed: 42,
    })?;
    let prep = ds.prepare(NormalizationRule::DropLastFirm)?;
    let fit = ols_fit(prep.design.clone(), &prep.y, &SolveOptions::default())?;

    // Variance of the effects: plug-in vs bias-corrected.
    let noise = NoiseSpec::homoskedastic(sigma_v2)?;
    let q = QuadraticFormSpec::uniform_variance(0..p)?;
    let fe = fe_quadratic_bc(&q, &fit, &noise, 1000, 1)?;
    let true_var = q.quad(&ds.truth.eta);
    println!("variance of the effects (truth this draw: {true_var:.4})");
    println!("  plug-in:        {:.4}   <- inflated by sampling noise", fe.plug_in);
    println!("  bias-corrected: {:.4}", fe.corrected);

    // Prediction: raw estimates vs posterior means.
    let rc = RCSpec::new(
        MeanModel::Constant { mu0: 0.0 },
        CovModel::ScalarDiag { tau2: sigma_eta2 },
        None,
    )?;
    let post = posterior_state(&fit, &noise, &rc, &PosteriorOptions::default())?;
    let sse = |est: &[f64]| -> f64 {
        est.iter().zip(&ds.truth.eta).map(|(m, e)| (m - e) * (m - e)).sum()
    };
    let sse_raw = sse(fit.eta_hat());
    let sse_post = sse(post.post_mean());
    println!("\nsum of squared prediction errors over {p} effects");
    println!("  raw estimates:   {sse_raw:.1}   (expected {:.0})", p as f64 * sigma_v2);
    println!(
        "  posterior means: {sse_post:.1}   (expected {:.0})",
        p as f64 * sigma_v2 * sigma_eta2 / (sigma_eta2 + sigma_v2)
    );

    // The posterior mean is the scalar shrinkage formula here.
    let shrunk = simple_shrinkage(fit.eta_hat(), 0.0, sigma_eta2, sigma_v2)?;
    let max_gap = post
        .post_mean()
        .iter()
        .zip(&shrunk)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("\nposterior mean vs closed-form shrinkage: max gap {max_gap:.2e}");
    Ok(())
}
