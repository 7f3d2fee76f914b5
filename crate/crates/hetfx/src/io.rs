//! Delimited-text schemas and structured spec files.
//!
//! All tabular files are comma-separated with a header row, UTF-8, LF line
//! endings, and fixed column orders:
//!
//! - spells: `worker,firm,period`
//! - exposures: `child,neighborhood,exposure,od_cell`
//! - grouped data: `obs,unit,slope,outcome` (empty slope column means an
//!   intercept-only design)
//! - outcomes (companion to spells/exposures): `obs,outcome`
//! - truth: `param,value`
//! - estimates: `effect,kind,unit,interaction,eta_hat,post_mean,post_sd`
//! - quantities: `quantity,strategy,value,mc_draws,seed`
//! - Monte Carlo report: `quantity,truth,mean,bias,mc_se,mse,reps`
//!
//! Schema violations surface row and column context so the CLI can exit
//! with a diagnostic. Fitted noise and random-coefficient specifications
//! serialize to small key-value text files for reuse across invocations;
//! covariate matrices are rebuilt from the data, so only parameters are
//! stored.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::design::{ChildMoves, DesignMatrix, Spell};
use crate::error::{Error, Result};
use crate::noise::NoiseSpec;
use crate::rc::{CovModel, MeanModel, RCSpec};
use crate::simulate::{McReport, Truth};

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn open_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn check_header(path: &Path, reader: &mut csv::Reader<fs::File>, expected: &[&str]) -> Result<()> {
    let headers = reader
        .headers()
        .map_err(|e| Error::input(format!("{}: cannot read header: {e}", path.display())))?;
    let got: Vec<&str> = headers.iter().map(|h| h.trim()).collect();
    if got != expected {
        return Err(Error::input(format!(
            "{}: expected header '{}', found '{}'",
            path.display(),
            expected.join(","),
            got.join(",")
        )));
    }
    Ok(())
}

fn parse_field<T: std::str::FromStr>(
    path: &Path,
    row: usize,
    column: &str,
    raw: &str,
) -> Result<T> {
    raw.trim().parse::<T>().map_err(|_| {
        Error::input(format!(
            "{}: row {row}, column '{column}': cannot parse '{raw}'",
            path.display()
        ))
    })
}

/// Read employment spells (`worker,firm,period`).
pub fn read_spells(path: &Path) -> Result<Vec<Spell>> {
    let mut reader = open_reader(path)?;
    check_header(path, &mut reader, &["worker", "firm", "period"])?;
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record =
            record.map_err(|e| Error::input(format!("{}: row {row}: {e}", path.display())))?;
        if record.len() != 3 {
            return Err(Error::input(format!(
                "{}: row {row}: expected 3 fields, found {}",
                path.display(),
                record.len()
            )));
        }
        out.push(Spell {
            worker: record[0].trim().to_string(),
            firm: record[1].trim().to_string(),
            period: parse_field(path, row, "period", &record[2])?,
        });
    }
    if out.is_empty() {
        return Err(Error::input(format!("{}: no spells", path.display())));
    }
    Ok(out)
}

/// Read exposures (`child,neighborhood,exposure,od_cell`), grouping rows by
/// child in first-appearance order. Every row of one child must carry the
/// same od_cell.
pub fn read_exposures(path: &Path) -> Result<(Vec<ChildMoves>, Vec<String>)> {
    let mut reader = open_reader(path)?;
    check_header(path, &mut reader, &["child", "neighborhood", "exposure", "od_cell"])?;
    let mut order: Vec<String> = Vec::new();
    let mut by_child: std::collections::HashMap<String, (Vec<(String, f64)>, String)> =
        std::collections::HashMap::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record =
            record.map_err(|e| Error::input(format!("{}: row {row}: {e}", path.display())))?;
        if record.len() != 4 {
            return Err(Error::input(format!(
                "{}: row {row}: expected 4 fields, found {}",
                path.display(),
                record.len()
            )));
        }
        let child = record[0].trim().to_string();
        let nb = record[1].trim().to_string();
        let exposure: f64 = parse_field(path, row, "exposure", &record[2])?;
        let cell = record[3].trim().to_string();
        match by_child.get_mut(&child) {
            Some((exposures, existing_cell)) => {
                if *existing_cell != cell {
                    return Err(Error::input(format!(
                        "{}: row {row}: child {child} has conflicting od_cell values",
                        path.display()
                    )));
                }
                exposures.push((nb, exposure));
            }
            None => {
                order.push(child.clone());
                by_child.insert(child, (vec![(nb, exposure)], cell));
            }
        }
    }
    if order.is_empty() {
        return Err(Error::input(format!("{}: no exposures", path.display())));
    }
    let mut children = Vec::with_capacity(order.len());
    let mut cells = Vec::with_capacity(order.len());
    for child in order {
        let (exposures, cell) = by_child.remove(&child).expect("collected above");
        children.push(ChildMoves { child, exposures });
        cells.push(cell);
    }
    Ok((children, cells))
}

/// Read grouped data (`obs,unit,slope,outcome`). The slope column must be
/// either entirely empty (intercept-only design) or entirely filled.
pub fn read_grouped(path: &Path) -> Result<(Vec<String>, Option<Vec<f64>>, Vec<f64>)> {
    let mut reader = open_reader(path)?;
    check_header(path, &mut reader, &["obs", "unit", "slope", "outcome"])?;
    let mut units = Vec::new();
    let mut slopes: Vec<Option<f64>> = Vec::new();
    let mut outcomes = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record =
            record.map_err(|e| Error::input(format!("{}: row {row}: {e}", path.display())))?;
        if record.len() != 4 {
            return Err(Error::input(format!(
                "{}: row {row}: expected 4 fields, found {}",
                path.display(),
                record.len()
            )));
        }
        units.push(record[1].trim().to_string());
        let raw_slope = record[2].trim();
        slopes.push(if raw_slope.is_empty() {
            None
        } else {
            Some(parse_field(path, row, "slope", raw_slope)?)
        });
        outcomes.push(parse_field(path, row, "outcome", &record[3])?);
    }
    if units.is_empty() {
        return Err(Error::input(format!("{}: no observations", path.display())));
    }
    let n_filled = slopes.iter().filter(|s| s.is_some()).count();
    let slope = if n_filled == 0 {
        None
    } else if n_filled == slopes.len() {
        Some(slopes.into_iter().map(|s| s.expect("all filled")).collect())
    } else {
        return Err(Error::input(format!(
            "{}: slope column must be entirely empty or entirely filled",
            path.display()
        )));
    };
    Ok((units, slope, outcomes))
}

/// Read a companion outcome file (`obs,outcome`), in file order.
pub fn read_outcomes(path: &Path) -> Result<Vec<f64>> {
    let mut reader = open_reader(path)?;
    check_header(path, &mut reader, &["obs", "outcome"])?;
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record =
            record.map_err(|e| Error::input(format!("{}: row {row}: {e}", path.display())))?;
        if record.len() != 2 {
            return Err(Error::input(format!(
                "{}: row {row}: expected 2 fields, found {}",
                path.display(),
                record.len()
            )));
        }
        out.push(parse_field(path, row, "outcome", &record[1])?);
    }
    if out.is_empty() {
        return Err(Error::input(format!("{}: no outcomes", path.display())));
    }
    Ok(out)
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(content.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn write_spells(path: &Path, spells: &[Spell]) -> Result<()> {
    let mut s = String::from("worker,firm,period\n");
    for sp in spells {
        s.push_str(&format!("{},{},{}\n", sp.worker, sp.firm, sp.period));
    }
    write_file(path, &s)
}

pub fn write_exposures(path: &Path, children: &[ChildMoves], od_cells: &[String]) -> Result<()> {
    let mut s = String::from("child,neighborhood,exposure,od_cell\n");
    for (c, cell) in children.iter().zip(od_cells) {
        for (nb, years) in &c.exposures {
            s.push_str(&format!("{},{},{},{}\n", c.child, nb, years, cell));
        }
    }
    write_file(path, &s)
}

pub fn write_grouped(
    path: &Path,
    units: &[String],
    slope: Option<&[f64]>,
    outcomes: &[f64],
) -> Result<()> {
    let mut s = String::from("obs,unit,slope,outcome\n");
    for (i, (u, y)) in units.iter().zip(outcomes).enumerate() {
        let sl = slope.map(|sl| sl[i].to_string()).unwrap_or_default();
        s.push_str(&format!("{i},{u},{sl},{y}\n"));
    }
    write_file(path, &s)
}

pub fn write_outcomes(path: &Path, outcomes: &[f64]) -> Result<()> {
    let mut s = String::from("obs,outcome\n");
    for (i, y) in outcomes.iter().enumerate() {
        s.push_str(&format!("{i},{y}\n"));
    }
    write_file(path, &s)
}

/// Truth file (`param,value`): one row per effect (`eta_<label>`) followed
/// by the named scalar parameters.
pub fn write_truth(path: &Path, truth: &Truth) -> Result<()> {
    let mut s = String::from("param,value\n");
    for (lab, v) in truth.labels.iter().zip(&truth.eta) {
        s.push_str(&format!("eta_{lab},{v}\n"));
    }
    for (name, v) in &truth.params {
        s.push_str(&format!("{name},{v}\n"));
    }
    write_file(path, &s)
}

/// Serialize a fitted noise specification (family tag plus parameters).
/// Parametric covariates are rebuilt from the data at load time, so only
/// theta is stored.
pub fn write_noise_spec(path: &Path, spec: &NoiseSpec) -> Result<()> {
    let mut s = String::new();
    match spec {
        NoiseSpec::Homoskedastic { sigma2 } => {
            s.push_str("family homoskedastic\n");
            s.push_str(&format!("sigma2 {sigma2}\n"));
        }
        NoiseSpec::LeaveOutDiagonal { omega } => {
            s.push_str("family leaveout_diagonal\n");
            for w in omega {
                s.push_str(&format!("omega {w}\n"));
            }
        }
        NoiseSpec::ParametricDiag { theta, .. } => {
            s.push_str("family parametric_diag\n");
            for t in theta {
                s.push_str(&format!("theta {t}\n"));
            }
        }
    }
    write_file(path, &s)
}

/// Parameters read back from a noise spec file.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSpecFile {
    Homoskedastic { sigma2: f64 },
    LeaveOutDiagonal { omega: Vec<f64> },
    /// Covariates must be re-supplied by the pipeline.
    ParametricDiag { theta: Vec<f64> },
}

pub fn read_noise_spec(path: &Path) -> Result<NoiseSpecFile> {
    let content = read_to_string(path)?;
    let mut lines = content.lines().enumerate();
    let family = match lines.next() {
        Some((_, line)) => line
            .strip_prefix("family ")
            .ok_or_else(|| {
                Error::input(format!("{}: first line must be 'family <tag>'", path.display()))
            })?
            .trim()
            .to_string(),
        None => return Err(Error::input(format!("{}: empty noise spec", path.display()))),
    };
    let mut values = Vec::new();
    let mut key_expected = match family.as_str() {
        "homoskedastic" => "sigma2",
        "leaveout_diagonal" => "omega",
        "parametric_diag" => "theta",
        other => {
            return Err(Error::input(format!(
                "{}: unknown noise family '{other}'",
                path.display()
            )))
        }
    };
    if family == "homoskedastic" {
        key_expected = "sigma2";
    }
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (key, raw) = line.split_once(' ').ok_or_else(|| {
            Error::input(format!("{}: line {}: expected 'key value'", path.display(), i + 1))
        })?;
        if key != key_expected {
            return Err(Error::input(format!(
                "{}: line {}: expected key '{key_expected}', found '{key}'",
                path.display(),
                i + 1
            )));
        }
        values.push(parse_field(path, i + 1, key, raw)?);
    }
    match family.as_str() {
        "homoskedastic" => {
            if values.len() != 1 {
                return Err(Error::input(format!(
                    "{}: homoskedastic spec needs exactly one sigma2",
                    path.display()
                )));
            }
            Ok(NoiseSpecFile::Homoskedastic { sigma2: values[0] })
        }
        "leaveout_diagonal" => Ok(NoiseSpecFile::LeaveOutDiagonal { omega: values }),
        _ => Ok(NoiseSpecFile::ParametricDiag { theta: values }),
    }
}

/// Serialize a fitted random-coefficient specification: model tags,
/// parameters, and group labels.
pub fn write_rc_spec(path: &Path, rc: &RCSpec) -> Result<()> {
    let mut s = String::new();
    match &rc.mean {
        MeanModel::Constant { mu0 } => s.push_str(&format!("mean constant {mu0}\n")),
        MeanModel::LinearInW { coefs, .. } => {
            s.push_str("mean linear_in_w");
            for c in coefs {
                s.push_str(&format!(" {c}"));
            }
            s.push('\n');
        }
        MeanModel::Grouped { means } => {
            s.push_str("mean grouped");
            for m in means {
                s.push_str(&format!(" {m}"));
            }
            s.push('\n');
        }
    }
    match &rc.cov {
        CovModel::ScalarDiag { tau2 } => s.push_str(&format!("cov scalar_diag {tau2}\n")),
        CovModel::DiagLinearInW { coefs, .. } => {
            s.push_str("cov diag_linear_in_w");
            for c in coefs {
                s.push_str(&format!(" {c}"));
            }
            s.push('\n');
        }
        CovModel::GroupedBlocks { variances, covariances } => {
            s.push_str("cov grouped_blocks\n");
            s.push_str("variances");
            for v in variances {
                s.push_str(&format!(" {v}"));
            }
            s.push('\n');
            for g in 0..covariances.nrows() {
                s.push_str(&format!("cov_row {g}"));
                for h in 0..covariances.ncols() {
                    s.push_str(&format!(" {}", covariances[(g, h)]));
                }
                s.push('\n');
            }
        }
    }
    if let Some(grouping) = &rc.grouping {
        s.push_str("labels");
        for l in grouping.labels() {
            s.push_str(&format!(" {}", l + 1));
        }
        s.push('\n');
    }
    write_file(path, &s)
}

/// One row of the per-effect estimates table.
pub struct EstimateRow {
    pub eta_hat: f64,
    pub post_mean: Option<f64>,
    pub post_sd: Option<f64>,
}

/// Estimates file: `effect,kind,unit,interaction,eta_hat,post_mean,post_sd`.
pub fn write_estimates(path: &Path, design: &DesignMatrix, rows: &[EstimateRow]) -> Result<()> {
    if rows.len() != design.n_effects() {
        return Err(Error::input("estimate rows do not match design columns"));
    }
    let mut s = String::from("effect,kind,unit,interaction,eta_hat,post_mean,post_sd\n");
    for (j, (lab, row)) in design.col_labels().iter().zip(rows).enumerate() {
        let inter = lab.interaction.as_deref().unwrap_or("");
        let pm = row.post_mean.map(|v| v.to_string()).unwrap_or_default();
        let ps = row.post_sd.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!(
            "{j},{},{},{inter},{},{pm},{ps}\n",
            lab.kind.as_str(),
            lab.unit,
            row.eta_hat
        ));
    }
    write_file(path, &s)
}

/// One row of the quantities table.
pub struct QuantityRow {
    pub quantity: String,
    pub strategy: String,
    pub value: f64,
    pub mc_draws: Option<usize>,
    pub seed: Option<u64>,
}

/// Quantities file: `quantity,strategy,value,mc_draws,seed`.
pub fn write_quantities(path: &Path, rows: &[QuantityRow]) -> Result<()> {
    let mut s = String::from("quantity,strategy,value,mc_draws,seed\n");
    for r in rows {
        let draws = r.mc_draws.map(|d| d.to_string()).unwrap_or_default();
        let seed = r.seed.map(|x| x.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{draws},{seed}\n", r.quantity, r.strategy, r.value));
    }
    write_file(path, &s)
}

/// Monte Carlo report: `quantity,truth,mean,bias,mc_se,mse,reps`.
pub fn write_mc_report(path: &Path, report: &McReport) -> Result<()> {
    let mut s = String::from("quantity,truth,mean,bias,mc_se,mse,reps\n");
    for r in &report.rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.quantity, r.mean_truth, r.mean_estimate, r.bias, r.mc_se, r.mse, r.reps
        ));
    }
    write_file(path, &s)
}
