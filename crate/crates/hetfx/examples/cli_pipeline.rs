//! The file-based pipeline the `hetfx` binary drives: simulate a dataset to
//! CSV, read it back, estimate, and write the output tables. Everything the
//! CLI does goes through these library calls.
//!
//! ```bash
//! cargo run --release -p hetfx --example cli_pipeline
//! ```

use std::sync::Arc;

use hetfx::design::{build_akm_design, finalize_identification, NormalizationRule};
use hetfx::estimators::{posterior_state, PosteriorOptions};
use hetfx::io;
use hetfx::noise::estimate_sigma2;
use hetfx::rc::{fit_cov, fit_mean, CovSpec, MeanSpec, RCSpec};
use hetfx::simulate::{gen_akm, AkmConfig, AkmEffectLaw, DatasetInputs, Mobility, NoiseLaw};
use hetfx::solve::{ols_fit, SolveOptions};

fn main() -> hetfx::Result<()> {
    let dir = std::env::temp_dir().join("hetfx_cli_pipeline");
    std::fs::create_dir_all(&dir).map_err(|e| hetfx::Error::io(&dir, e))?;

    // Simulate and write the dataset files the CLI would produce.
    let ds = gen_akm(&AkmConfig {
        workers: 300,
        firms: 25,
        periods: 2,
        effects: AkmEffectLaw {
            mu_alpha: 0.0,
            sigma_alpha: 0.4,
            mu_psi: 0.0,
            sigma_psi: 0.2,
            firm_groups: None,
        },
        noise: NoiseLaw::Homoskedastic { sigma2: 0.05 },
        mobility: Mobility::Exogenous { move_prob: 0.7 },
        market_size: None,
        seed: 8,
    })?;
    let DatasetInputs::Akm { spells } = &ds.inputs else { unreachable!() };
    io::write_spells(&dir.join("spells.csv"), spells)?;
    io::write_outcomes(&dir.join("outcomes.csv"), ds.outcomes.values())?;
    io::write_truth(&dir.join("truth.csv"), &ds.truth)?;

    // Read back and estimate, as `hetfx estimate` does.
    let spells = io::read_spells(&dir.join("spells.csv"))?;
    let y = io::read_outcomes(&dir.join("outcomes.csv"))?;
    let (z, _) = build_akm_design(&spells)?;
    let z = Arc::new(finalize_identification(z, NormalizationRule::DropLastFirm)?);
    let fit = ols_fit(z.clone(), &y, &SolveOptions::default())?;
    let noise = estimate_sigma2(&fit, &y)?;
    let mean = fit_mean(&fit, MeanSpec::Constant, None)?;
    let cov = fit_cov(&fit, &noise, &mean, CovSpec::ScalarDiag, None)?;
    let rc = RCSpec::new(mean, cov.model, None)?;
    let post = posterior_state(&fit, &noise, &rc, &PosteriorOptions::default())?;

    let rows: Vec<io::EstimateRow> = (0..z.n_effects())
        .map(|j| io::EstimateRow {
            eta_hat: fit.eta_hat()[j],
            post_mean: Some(post.post_mean()[j]),
            post_sd: Some(post.g_diag()[j].max(0.0).sqrt()),
        })
        .collect();
    io::write_estimates(&dir.join("estimates.csv"), &z, &rows)?;
    io::write_noise_spec(&dir.join("noise_spec.txt"), &noise)?;
    io::write_rc_spec(&dir.join("rc_spec.txt"), &rc)?;

    println!("wrote the full pipeline output under {}", dir.display());
    for file in ["spells.csv", "outcomes.csv", "truth.csv", "estimates.csv", "noise_spec.txt", "rc_spec.txt"]
    {
        println!("  {file}");
    }
    println!("\nequivalent CLI run:");
    println!("  hetfx simulate --config sim.toml --out data --mkdir");
    println!("  hetfx estimate --config est.toml --out results --mkdir");
    Ok(())
}
