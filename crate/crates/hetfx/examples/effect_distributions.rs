//! Distributions of effects beyond means and variances: CDF and density
//! estimates under noise.
//!
//! The empirical distribution of the raw estimates is over-dispersed; the
//! model-based and posterior estimators de-noise it. The posterior CDF is
//! compared against the distribution of the true effects drawn by the
//! generator.
//!
//! ```bash
//! cargo run --release -p hetfx --example effect_distributions
//! ```

use hetfx::design::NormalizationRule;
use hetfx::estimators::{
    model_cdf, model_nonlinear, posterior_nonlinear, posterior_state, NonlinearFunctional,
    PosteriorOptions,
};
use hetfx::noise::NoiseSpec;
use hetfx::rc::{fit_cov, fit_mean, CovSpec, MeanSpec, RCSpec};
use hetfx::simulate::{gen_simple_means, SimpleMeansConfig};
use hetfx::solve::{ols_fit, SolveOptions};

fn main() -> hetfx::Result<()> {
    let p = 1000;
    let ds = gen_simple_means(&SimpleMeansConfig {
        p,
        mu_eta: 0.0,
        sigma_eta: 1.0,
        sigma_v: 0.6,
        seed: 33,
    })?;
    let prep = ds.prepare(NormalizationRule::DropLastFirm)?;
    let fit = ols_fit(prep.design.clone(), &prep.y, &SolveOptions::default())?;
    let noise = NoiseSpec::homoskedastic(0.36)?;

    // Fit the normal random-coefficient model from the moment conditions.
    let mean = fit_mean(&fit, MeanSpec::Constant, None)?;
    let cov = fit_cov(&fit, &noise, &mean, CovSpec::ScalarDiag, None)?;
    let rc = RCSpec::new(mean, cov.model, None)?;
    let post = posterior_state(&fit, &noise, &rc, &PosteriorOptions::default())?;

    println!("{:>6} {:>10} {:>10} {:>10} {:>10}", "a", "true", "plug-in", "model", "posterior");
    for a in [-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0] {
        let truth = ds.truth.eta.iter().filter(|e| **e <= a).count() as f64 / p as f64;
        let plug = fit.eta_hat().iter().filter(|e| **e <= a).count() as f64 / p as f64;
        let f = NonlinearFunctional::uniform_cdf_at(a, p)?;
        let model = model_cdf(&f, &rc, p)?;
        let posterior = posterior_nonlinear(&f, &post, 20_000, 1)?;
        println!("{a:>6.1} {truth:>10.4} {plug:>10.4} {model:>10.4} {posterior:>10.4}");
    }

    // Density at the center: the plug-in spreads mass into the tails, so its
    // center density is too low.
    let w: Vec<(usize, f64)> = (0..p).map(|j| (j, 1.0 / p as f64)).collect();
    let f = NonlinearFunctional::density_at(0.0, w, None)?;
    let model_density = model_nonlinear(&f, &rc, p, 20_000, 2)?;
    let post_density = posterior_nonlinear(&f, &post, 20_000, 3)?;
    println!("\ndensity at 0: model {model_density:.4}, posterior {post_density:.4} (N(0,1) has 0.3989)");
    Ok(())
}
