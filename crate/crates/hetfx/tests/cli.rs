//! End-to-end checks of the `hetfx` binary: exit codes, reproducibility,
//! and file contracts.

use std::path::Path;
use std::process::Command;

fn hetfx() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hetfx"))
}

fn write(path: &Path, content: &str) {
    std::fs::write(path, content).unwrap();
}

const SIMPLE_SIM: &str = r#"
seed = 11
[dgp]
archetype = "simple_means"
p = 10
sigma_eta = 1.0
sigma_v = 0.5
"#;

#[test]
fn simulate_simple_means_writes_two_files_and_truth_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.toml");
    write(&cfg, SIMPLE_SIM);
    let out = dir.path().join("data");
    let status = hetfx()
        .args(["simulate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .arg("--mkdir")
        .status()
        .unwrap();
    assert!(status.success());
    let entries: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(entries.len(), 2, "files: {entries:?}");
    // truth.csv: 10 effect rows + 3 parameter rows + header.
    let truth = std::fs::read_to_string(out.join("truth.csv")).unwrap();
    assert_eq!(truth.lines().count(), 1 + 10 + 3);
}

#[test]
fn simulate_same_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.toml");
    write(
        &cfg,
        r#"
seed = 4
[dgp]
archetype = "akm"
workers = 40
firms = 6
periods = 2
sigma_alpha = 0.4
sigma_psi = 0.2
sigma2 = 0.04
mobility = "exogenous"
move_prob = 0.7
"#,
    );
    for out in ["a", "b"] {
        let status = hetfx()
            .args(["simulate", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(dir.path().join(out))
            .arg("--mkdir")
            .status()
            .unwrap();
        assert!(status.success());
    }
    for file in ["spells.csv", "outcomes.csv", "truth.csv"] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}

#[test]
fn simulate_without_seed_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.toml");
    write(
        &cfg,
        r#"
[dgp]
archetype = "simple_means"
p = 5
sigma_eta = 1.0
sigma_v = 0.1
"#,
    );
    let output = hetfx()
        .args(["simulate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("seed required"), "{stderr}");
}

#[test]
fn missing_output_dir_without_mkdir_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.toml");
    write(&cfg, SIMPLE_SIM);
    let missing = dir.path().join("does_not_exist");
    let output = hetfx()
        .args(["simulate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&missing)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("does_not_exist"), "{stderr}");
}

fn akm_fixture(dir: &Path) -> std::path::PathBuf {
    let sim = dir.join("sim.toml");
    write(
        &sim,
        r#"
seed = 5
[dgp]
archetype = "akm"
workers = 120
firms = 10
periods = 3
sigma_alpha = 0.45
sigma_psi = 0.25
sigma2 = 0.04
mobility = "exogenous"
move_prob = 0.7
"#,
    );
    let data = dir.join("data");
    let status = hetfx()
        .args(["simulate", "--config"])
        .arg(&sim)
        .arg("--out")
        .arg(&data)
        .arg("--mkdir")
        .status()
        .unwrap();
    assert!(status.success());
    data
}

#[test]
fn estimate_emits_three_strategy_rows_per_variance_quantity() {
    let dir = tempfile::tempdir().unwrap();
    let data = akm_fixture(dir.path());
    let cfg = dir.path().join("est.toml");
    write(
        &cfg,
        &format!(
            r#"
seed = 7
[inputs]
format = "akm"
spells = "{}"
outcomes = "{}"
[estimate]
quantities = ["variance:firm"]
strategies = ["fe", "model", "posterior"]
draws = 2000
"#,
            data.join("spells.csv").display(),
            data.join("outcomes.csv").display()
        ),
    );
    let out = dir.path().join("results");
    let status = hetfx()
        .args(["estimate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .arg("--mkdir")
        .status()
        .unwrap();
    assert!(status.success());
    let quantities = std::fs::read_to_string(out.join("quantities.csv")).unwrap();
    let rows: Vec<&str> = quantities.lines().skip(1).collect();
    assert_eq!(rows.len(), 3, "{quantities}");
    for strategy in ["fe", "model", "posterior"] {
        assert!(
            rows.iter().any(|r| r.contains(&format!("variance:firm,{strategy},"))),
            "missing {strategy} row in {quantities}"
        );
    }
    // estimates.csv carries eta_hat, posterior mean, posterior sd per effect.
    let estimates = std::fs::read_to_string(out.join("estimates.csv")).unwrap();
    let header = estimates.lines().next().unwrap();
    assert_eq!(header, "effect,kind,unit,interaction,eta_hat,post_mean,post_sd");
    // 120 workers + 10 firms - 1 dropped = 129 effect rows.
    assert_eq!(estimates.lines().count(), 1 + 129);
}

#[test]
fn estimate_malformed_header_exits_2_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let spells = dir.path().join("spells.csv");
    write(&spells, "worker,company,period\nw1,f1,1\n");
    let outcomes = dir.path().join("outcomes.csv");
    write(&outcomes, "obs,outcome\n0,1.0\n");
    let cfg = dir.path().join("est.toml");
    write(
        &cfg,
        &format!(
            r#"
[inputs]
format = "akm"
spells = "{}"
outcomes = "{}"
"#,
            spells.display(),
            outcomes.display()
        ),
    );
    let output = hetfx()
        .args(["estimate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("expected header"), "{stderr}");
}

#[test]
fn estimate_leaveout_unidentifiable_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let spells = dir.path().join("spells.csv");
    // f3 has a single observation (w3's period-2 spell), so that row has
    // leverage one and the leave-out fit must fail numerically.
    write(
        &spells,
        "worker,firm,period\nw1,f1,1\nw1,f2,2\nw2,f1,1\nw2,f2,2\nw3,f1,1\nw3,f3,2\n",
    );
    let outcomes = dir.path().join("outcomes.csv");
    write(&outcomes, "obs,outcome\n0,1.0\n1,0.5\n2,0.25\n3,1.5\n4,0.75\n5,2.0\n");
    let cfg = dir.path().join("est.toml");
    write(
        &cfg,
        &format!(
            r#"
[inputs]
format = "akm"
spells = "{}"
outcomes = "{}"
[model]
noise = "leaveout"
"#,
            spells.display(),
            outcomes.display()
        ),
    );
    let output = hetfx()
        .args(["estimate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    // w3's spell at f3 is the only observation at that firm: leverage one,
    // not leave-out identifiable -> numerical failure.
    assert_eq!(output.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("not leave-out identifiable"), "{stderr}");
}

#[test]
fn montecarlo_zero_noise_reports_zero_bias_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("mc.toml");
    write(
        &cfg,
        r#"
seed = 3
[dgp]
archetype = "simple_means"
p = 40
sigma_eta = 1.0
sigma_v = 0.0
[model]
noise = "fixed"
sigma2 = 0.0
[estimate]
quantities = ["variance:all"]
strategies = ["plugin"]
[montecarlo]
replications = 3
"#,
    );
    let out = dir.path().join("mc");
    let status = hetfx()
        .args(["montecarlo", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .arg("--mkdir")
        .status()
        .unwrap();
    assert!(status.success());
    let report = std::fs::read_to_string(out.join("mc_report.csv")).unwrap();
    let row = report.lines().nth(1).unwrap();
    let bias: f64 = row.split(',').nth(3).unwrap().parse().unwrap();
    assert!(bias.abs() < 1e-8, "bias {bias} in {report}");
}

#[test]
fn montecarlo_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("mc.toml");
    write(
        &cfg,
        r#"
seed = 12
[dgp]
archetype = "simple_means"
p = 60
sigma_eta = 1.0
sigma_v = 0.5
[model]
noise = "fixed"
sigma2 = 0.25
[estimate]
quantities = ["variance:all", "mean:all"]
strategies = ["plugin", "fe", "posterior"]
draws = 500
[montecarlo]
replications = 8
"#,
    );
    for out in ["r1", "r2"] {
        let status = hetfx()
            .args(["montecarlo", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(dir.path().join(out))
            .arg("--mkdir")
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = std::fs::read(dir.path().join("r1").join("mc_report.csv")).unwrap();
    let b = std::fs::read(dir.path().join("r2").join("mc_report.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.toml");
    write(&cfg, SIMPLE_SIM);
    for (out, seed) in [("s1", "11"), ("s2", "99")] {
        let status = hetfx()
            .args(["simulate", "--config"])
            .arg(&cfg)
            .args(["--seed", seed])
            .arg("--out")
            .arg(dir.path().join(out))
            .arg("--mkdir")
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = std::fs::read(dir.path().join("s1").join("truth.csv")).unwrap();
    let b = std::fs::read(dir.path().join("s2").join("truth.csv")).unwrap();
    assert_ne!(a, b, "different seeds must give different datasets");
}
