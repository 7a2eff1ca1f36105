//! Experiment runners and report writers.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pathbismut::bismut::{
    deterministic_tangent_oracle, estimate_on, fd_on, fd_richardson, verify_chain_rule, verify_ibp,
    ChainRuleCheck, IbpCheck, ScalarMap,
};
use pathbismut::mkv_solver::{moment_sup, picard_law_fixedpoint, sample_initials, PicardOptions};
use pathbismut::pathspace::{io::write_binary, LawSlice};
use pathbismut::tangents::{log_moment_slope, solve_damped_tangent, ControlPath};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::registry::Experiment;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config_sha256: String,
    config: &'a ExperimentConfig,
}

fn write_manifest(out: &Path, command: &str, config: &ExperimentConfig) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    write_json(
        &out.join("manifest.json"),
        &Manifest {
            tool: "pathbismut",
            version: VERSION,
            command,
            config_sha256: config.content_hash(),
            config,
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub name: String,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub flavor: String,
    pub n_particles: usize,
    pub value: f64,
    pub stderr: f64,
    pub total_stderr: f64,
    pub lambda: Option<f64>,
    pub remainder: Option<f64>,
    pub remainder_stderr: Option<f64>,
    pub truncation_error: Option<f64>,
    pub sweep_group: Option<String>,
    pub diagnostics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub epsilon: f64,
    pub value: f64,
    pub stderr: f64,
    /// `|D(eps / 2) - D(eps)|` for the Richardson pair.
    pub bias_term: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub bismut: f64,
    pub bismut_stderr: f64,
    pub fd: Option<FdReport>,
    pub richardson: Option<FdReport>,
    pub deterministic: Option<f64>,
    /// Which oracle `gap` refers to.
    pub reference: String,
    pub reference_value: f64,
    pub gap: f64,
    /// `3 (combined stderr + bias term)`.
    pub tolerance: f64,
    pub pass: bool,
    pub gaps: BTreeMap<String, f64>,
}

/// Runs the estimator and the enabled oracles, writing `manifest.json`,
/// `estimate.json`, `weights.csv` and, with oracles, `oracle.json` to `out`.
pub fn run_experiment(
    exp: &Experiment,
    out: &Path,
) -> Result<(EstimateReport, Option<OracleReport>), CliError> {
    write_manifest(out, "estimate", &exp.config)?;
    let model = exp.model.as_ref();
    let base = exp.run.simulate(model)?;
    let est = estimate_on(
        model,
        &base,
        &exp.functional,
        &exp.direction,
        exp.flavor,
        &exp.options,
    )?;

    let report = EstimateReport {
        name: exp.config.name.clone(),
        version: VERSION.into(),
        config_sha256: exp.config.content_hash(),
        seed: exp.config.seed,
        flavor: exp.flavor.name().into(),
        n_particles: est.n_particles,
        value: est.value,
        stderr: est.stderr,
        total_stderr: est.total_stderr,
        lambda: exp.flavor.is_asymptotic().then_some(exp.options.lambda),
        remainder: est.remainder,
        remainder_stderr: est.remainder_stderr,
        truncation_error: est.truncation_error,
        sweep_group: exp.config.sweep_group.clone(),
        diagnostics: est.diagnostics.iter().cloned().collect(),
    };
    write_json(&out.join("estimate.json"), &report)?;

    let mut w =
        csv::Writer::from_writer(BufWriter::new(fs::File::create(out.join("weights.csv"))?));
    w.write_record(["particle", "weight", "ito_weight"])?;
    for (i, (wt, ito)) in est.weights.iter().zip(&est.ito_weights).enumerate() {
        w.write_record([i.to_string(), wt.to_string(), ito.to_string()])?;
    }
    w.flush()?;

    let oc = &exp.config.oracles;
    let det_params = exp.deterministic_oracle_params();
    if !(oc.fd || oc.deterministic) {
        return Ok((report, None));
    }
    let (mut fd, mut richardson, mut deterministic) = (None, None, None);
    if oc.fd {
        if oc.richardson {
            let r = fd_richardson(model, &base, &exp.functional, &exp.direction, oc.fd_epsilon)?;
            richardson = Some(FdReport {
                epsilon: r.epsilon,
                value: r.value,
                stderr: r.stderr,
                bias_term: Some(r.bias_term),
            });
        }
        let f = fd_on(model, &base, &exp.functional, &exp.direction, oc.fd_epsilon)?;
        fd = Some(FdReport {
            epsilon: f.epsilon,
            value: f.value,
            stderr: f.stderr,
            bias_term: None,
        });
    }
    if oc.deterministic {
        let (params, phi0) = det_params.ok_or_else(|| {
            CliError::invalid(
                "oracles.deterministic",
                "needs the linear_delay model, a constant_shift direction and the coordinate functional",
            )
        })?;
        deterministic = Some(deterministic_tangent_oracle(
            &params,
            phi0,
            exp.run.grid.horizon,
            &exp.run.grid,
        ));
    }

    let se_b = report.total_stderr;
    let (reference, reference_value, tolerance) = if let Some(d) = deterministic {
        ("deterministic", d, 3.0 * se_b)
    } else if let Some(r) = &richardson {
        (
            "richardson",
            r.value,
            3.0 * ((se_b * se_b + r.stderr * r.stderr).sqrt() + r.bias_term.unwrap_or(0.0)),
        )
    } else {
        let f = fd.as_ref().expect("some oracle is enabled");
        (
            "fd",
            f.value,
            3.0 * (se_b * se_b + f.stderr * f.stderr).sqrt(),
        )
    };
    let mut gaps = BTreeMap::new();
    let mut named: Vec<(&str, f64)> = vec![("bismut", report.value)];
    if let Some(f) = &fd {
        named.push(("fd", f.value));
    }
    if let Some(r) = &richardson {
        named.push(("richardson", r.value));
    }
    if let Some(d) = deterministic {
        named.push(("deterministic", d));
    }
    for (i, (a, va)) in named.iter().enumerate() {
        for (b, vb) in &named[i + 1..] {
            gaps.insert(format!("{a}-{b}"), (va - vb).abs());
        }
    }
    let gap = (report.value - reference_value).abs();
    let oracle = OracleReport {
        bismut: report.value,
        bismut_stderr: se_b,
        fd,
        richardson,
        deterministic,
        reference: reference.into(),
        reference_value,
        gap,
        tolerance,
        pass: gap <= tolerance,
        gaps,
    };
    write_json(&out.join("oracle.json"), &oracle)?;
    Ok((report, Some(oracle)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FailureReport {
    name: String,
    kind: String,
    error: String,
}

/// One row of `summary.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub name: String,
    pub status: String,
    pub flavor: String,
    pub lambda: Option<f64>,
    pub value: Option<f64>,
    pub stderr: Option<f64>,
    pub oracle: Option<f64>,
    pub gap: Option<f64>,
    pub tolerance: Option<f64>,
    pub pass: Option<bool>,
    pub monotone_gap: Option<bool>,
    pub error: String,
}

/// Configs (`*.toml`) in `dir`, sorted by file name.
pub fn suite_configs(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Usage(format!("no configs in {}", dir.display())));
    }
    Ok(paths)
}

/// Runs every config of `dir` into `out/<stem>/`, recording failures, then
/// writes `out/summary.csv` from the stored reports.
pub fn run_suite(
    dir: &Path,
    out: &Path,
    seed_override: Option<u64>,
    mut progress: impl FnMut(&str, &Result<(), CliError>),
) -> Result<Vec<SummaryRow>, CliError> {
    let configs = suite_configs(dir)?;
    fs::create_dir_all(out)?;
    for path in &configs {
        let stem = path
            .file_stem()
            .expect("toml files have a stem")
            .to_string_lossy()
            .to_string();
        let sub = out.join(&stem);
        fs::create_dir_all(&sub)?;
        for stale in ["estimate.json", "oracle.json", "error.json", "weights.csv"] {
            let _ = fs::remove_file(sub.join(stale));
        }
        let result = ExperimentConfig::load(path)
            .and_then(|mut c| {
                if let Some(seed) = seed_override {
                    c.seed = seed;
                }
                Experiment::from_config(c)
            })
            .and_then(|exp| run_experiment(&exp, &sub).map(|_| ()));
        if let Err(e) = &result {
            let kind = match e {
                CliError::ConfigInvalid { .. } => "config_invalid",
                CliError::Numeric(_) => "numeric",
                CliError::Io(_) => "io",
                CliError::Usage(_) => "usage",
            };
            write_json(
                &sub.join("error.json"),
                &FailureReport {
                    name: stem.clone(),
                    kind: kind.into(),
                    error: e.to_string(),
                },
            )?;
        }
        progress(&stem, &result);
    }
    let rows = summarize(out)?;
    write_summary(&out.join("summary.csv"), &rows)?;
    Ok(rows)
}

/// Summary rows rebuilt from the reports stored under `out`, one per
/// subdirectory in name order.
pub fn summarize(out: &Path) -> Result<Vec<SummaryRow>, CliError> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(out)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut rows = Vec::new();
    let mut groups: BTreeMap<String, Vec<(usize, f64, Option<f64>)>> = BTreeMap::new();
    for dir in dirs {
        let name = dir
            .file_name()
            .expect("directory name")
            .to_string_lossy()
            .to_string();
        let (est, err) = (dir.join("estimate.json"), dir.join("error.json"));
        if err.exists() {
            let f: FailureReport = read_json(&err)?;
            rows.push(SummaryRow {
                name,
                status: "failed".into(),
                flavor: String::new(),
                lambda: None,
                value: None,
                stderr: None,
                oracle: None,
                gap: None,
                tolerance: None,
                pass: Some(false),
                monotone_gap: None,
                error: f.error,
            });
            continue;
        }
        if !est.exists() {
            continue;
        }
        let e: EstimateReport = read_json(&est)?;
        let o: Option<OracleReport> = {
            let p = dir.join("oracle.json");
            if p.exists() {
                Some(read_json(&p)?)
            } else {
                None
            }
        };
        if let Some(g) = &e.sweep_group {
            let compared = e.truncation_error.or(o.as_ref().map(|o| o.gap));
            groups.entry(g.clone()).or_default().push((
                rows.len(),
                e.lambda.unwrap_or(0.0),
                compared,
            ));
        }
        rows.push(SummaryRow {
            name,
            status: "ok".into(),
            flavor: e.flavor,
            lambda: e.lambda,
            value: Some(e.value),
            stderr: Some(e.total_stderr),
            oracle: o.as_ref().map(|o| o.reference_value),
            gap: o.as_ref().map(|o| o.gap),
            tolerance: o.as_ref().map(|o| o.tolerance),
            pass: o.as_ref().map(|o| o.pass),
            monotone_gap: None,
            error: String::new(),
        });
    }
    // Within a sweep group the truncation error (or, without one, the oracle
    // gap) must not grow with lambda.
    for members in groups.values_mut() {
        members.sort_by(|a, b| a.1.total_cmp(&b.1));
        let monotone = members.iter().all(|m| m.2.is_some())
            && members
                .windows(2)
                .all(|w| w[1].2.unwrap() <= w[0].2.unwrap());
        for m in members.iter() {
            rows[m.0].monotone_gap = Some(monotone);
        }
    }
    Ok(rows)
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct IbpReport {
    pub control: f64,
    pub lhs: f64,
    pub lhs_stderr: f64,
    pub rhs: f64,
    pub rhs_stderr: f64,
    pub stderr: f64,
    pub pass: bool,
}

pub fn verify_ibp_cmd(exp: &Experiment, out: &Path) -> Result<IbpReport, CliError> {
    write_manifest(out, "verify ibp", &exp.config)?;
    let c = exp.config.verify.ibp_control;
    let m = exp.model.noise_dim();
    let check: IbpCheck = verify_ibp(
        exp.model.as_ref(),
        &exp.run.init,
        &exp.run.grid,
        exp.run.n,
        exp.run.seed,
        &exp.functional,
        |g, n| ControlPath::deterministic(*g, n, m, |_, h| h.fill(c)),
    )?;
    let report = IbpReport {
        control: c,
        lhs: check.lhs,
        lhs_stderr: check.lhs_stderr,
        rhs: check.rhs,
        rhs_stderr: check.rhs_stderr,
        stderr: check.stderr,
        pass: (check.lhs - check.rhs).abs() <= 3.0 * check.stderr,
    };
    write_json(&out.join("verify_ibp.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct ChainRuleReport {
    pub outer: String,
    pub epsilon: f64,
    pub numeric: f64,
    pub analytic: f64,
    pub gap: f64,
    pub stderr: f64,
    pub pass: bool,
}

pub fn verify_chain_rule_cmd(exp: &Experiment, out: &Path) -> Result<ChainRuleReport, CliError> {
    write_manifest(out, "verify chain-rule", &exp.config)?;
    let v = &exp.config.verify;
    let outer = match v.chain_outer.as_str() {
        "identity" => ScalarMap::identity(),
        "square" => ScalarMap::square(),
        other => {
            return Err(CliError::invalid(
                "verify.chain_outer",
                format!("unknown outer map {other:?}"),
            ))
        }
    };
    let dim = exp.model.dim();
    let grid = &exp.run.grid;
    let data = sample_initials(&exp.run.init, dim, grid, exp.run.n, exp.run.seed);
    let law = LawSlice::from_segments(&data, exp.run.n, dim, grid.k);
    let check: ChainRuleCheck = verify_chain_rule(
        &law,
        &exp.functional,
        &outer,
        &exp.direction,
        v.chain_epsilon,
    )?;
    let report = ChainRuleReport {
        outer: outer.name.clone(),
        epsilon: v.chain_epsilon,
        numeric: check.numeric,
        analytic: check.analytic,
        gap: check.gap,
        stderr: check.stderr,
        pass: check.gap <= 3.0 * check.stderr,
    };
    write_json(&out.join("verify_chain_rule.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct DecayReport {
    pub window: [f64; 2],
    pub lambdas: Vec<f64>,
    pub slopes: Vec<f64>,
    pub all_negative: bool,
    pub decreasing_in_lambda: bool,
}

pub fn verify_decay_cmd(exp: &Experiment, out: &Path) -> Result<DecayReport, CliError> {
    write_manifest(out, "verify decay", &exp.config)?;
    let v = &exp.config.verify;
    let model = exp.model.as_ref();
    let base = exp.run.simulate(model)?;
    let law = base.law_flow();
    let xi = exp.direction.apply_all(&base.initial_segments());
    let mut lambdas = v.decay_lambdas.clone();
    lambdas.sort_by(f64::total_cmp);
    let mut slopes = Vec::new();
    for &lambda in &lambdas {
        let z = solve_damped_tangent(model, &base, &law, &xi, lambda)?;
        slopes.push(log_moment_slope(&z, v.decay_window[0], v.decay_window[1])?);
    }
    let report = DecayReport {
        window: v.decay_window,
        all_negative: slopes.iter().all(|s| *s < 0.0),
        decreasing_in_lambda: slopes.windows(2).all(|w| w[1] < w[0]),
        lambdas,
        slopes,
    };
    write_json(&out.join("verify_decay.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct PicardReport {
    pub lambda: f64,
    pub tol: f64,
    pub distances: Vec<f64>,
    pub ratios: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

pub fn verify_picard_cmd(exp: &Experiment, out: &Path) -> Result<PicardReport, CliError> {
    write_manifest(out, "verify picard", &exp.config)?;
    let v = &exp.config.verify;
    let opts = PicardOptions {
        lambda: v.picard_lambda,
        tol: v.picard_tol,
        max_iter: v.picard_max_iter,
        p: 1.0,
    };
    let (_, diag) = picard_law_fixedpoint(
        exp.model.as_ref(),
        &exp.run.init,
        &exp.run.grid,
        exp.run.n,
        exp.run.seed,
        &opts,
    )?;
    let report = PicardReport {
        lambda: opts.lambda,
        tol: opts.tol,
        distances: diag.distances,
        ratios: diag.ratios,
        iterations: diag.iterations,
        converged: diag.converged,
    };
    write_json(&out.join("verify_picard.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct SimulateReport {
    pub n: usize,
    pub dim: usize,
    pub steps: usize,
    pub terminal_mean: Vec<f64>,
    pub moment_sup_2: f64,
}

/// Simulates the ensemble and writes `paths.bin` and `simulate.json`.
pub fn simulate_cmd(exp: &Experiment, out: &Path) -> Result<SimulateReport, CliError> {
    write_manifest(out, "simulate", &exp.config)?;
    let ens = exp.run.simulate(exp.model.as_ref())?;
    let file = BufWriter::new(fs::File::create(out.join("paths.bin"))?);
    write_binary(file, &ens.grid, ens.dim, ens.n, ens.values())?;
    let report = SimulateReport {
        n: ens.n,
        dim: ens.dim,
        steps: ens.grid.steps(),
        terminal_mean: ens.slice(ens.grid.steps()).mean_current(),
        moment_sup_2: moment_sup(&ens, 2.0),
    };
    write_json(&out.join("simulate.json"), &report)?;
    Ok(report)
}
