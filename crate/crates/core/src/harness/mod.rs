//! Experiment orchestration: convergence-rate studies, fluctuation studies
//! and their reports.

mod config;
mod report;

pub use config::{parse_config, parse_config_value, parse_model_config, ExperimentConfig, ModelConfig, StudyConfig};
pub use report::{emit_report, CovarianceRow, ErrorRow, SlopeRow, StudyReport, Verdict, SCHEMA_VERSION};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::sync::Arc;

use crate::backward::{
    solve_bsde_n, solve_lambda_cloud, y_error, z_error, BsdeProvenance, CoupledBsde, LambdaCloud,
};
use crate::error::Result;
use crate::fluctuation::{
    clt_compare, empirical_fields, solve_limit_system, theoretical_covariance, CltConfig, FieldBlock, FieldLattice,
    FieldSource, LimitConfig, LimitProvenance,
};
use crate::forward::{
    sample_approximating_law, simulate_limit_paths, solve_limit_forward, solve_sde_n, sup_squared_distance,
    ApproximationRun, Estimate, LawFlow, PathEnsemble,
};
use crate::model::ModelSpec;
use crate::noise::{Role, StreamKey, TimeGrid};
use crate::stats::{covariance_with_se, fit_loglog_slope};

/// Slope interval accepted for the forward error.
pub const FORWARD_SLOPE: (f64, f64) = (-1.25, -0.75);
/// Slope interval accepted for the backward errors.
pub const BACKWARD_SLOPE: (f64, f64) = (-1.3, -0.7);
/// Combined standard errors allowed between empirical and theoretical
/// field covariance entries.
pub const COVARIANCE_SIGMAS: f64 = 4.0;

/// Picard and backward diagnostics of one approximation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunProvenance {
    pub n: usize,
    pub picard_levels: usize,
    pub picard_converged: bool,
    pub picard_distances: Vec<f64>,
    pub w_key: StreamKey,
    pub env_key: StreamKey,
    pub backward: Option<BsdeProvenance>,
    /// Largest `|Z^N|` over nodes and replications.
    pub max_abs_z: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the canonical configuration.
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    /// `closed-form` or `self-reference`.
    pub reference: String,
    pub runs: Vec<RunProvenance>,
    /// Jitter used to factor the field covariance.
    pub jitter: Option<f64>,
    pub limit: Option<LimitProvenance>,
}

/// Hex SHA-256 of the canonical JSON form of `config`.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let text = serde_json::to_string(config).expect("config serializes");
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Stream layout of a study: stage `0` the limit law, `1` the limit
/// `(X, Y)` cloud, `2` per-`N` runs, `3` to `6` the fluctuation stage.
fn stage(seed: u64, k: u64) -> StreamKey {
    StreamKey::root(seed).derive(Role::Stage, k)
}

/// Limit law: the closed form if available, otherwise a cloud of at least
/// eight times the largest `N`.
fn limit_law(model: &ModelSpec, grid: &TimeGrid, cfg: &ExperimentConfig) -> Result<(LawFlow, String)> {
    let max_n = cfg.study.n.iter().copied().max().unwrap_or(1);
    let size = cfg.study.cloud_size.max(8 * max_n);
    let law = solve_limit_forward(model, grid, size, &stage(cfg.study.seed, 0), cfg.study.antithetic)?;
    let kind = match law {
        LawFlow::ClosedForm(_) => "closed-form",
        LawFlow::Cloud(_) => "self-reference",
    };
    Ok((law, kind.into()))
}

fn limit_lambda(model: &ModelSpec, law: &LawFlow, cfg: &ExperimentConfig) -> Result<Option<LambdaCloud>> {
    if !(cfg.study.backward && model.interaction().driver) {
        return Ok(None);
    }
    solve_lambda_cloud(model, law, cfg.study.env_cloud, &stage(cfg.study.seed, 1), &cfg.regression()).map(Some)
}

struct Coupled {
    run: ApproximationRun,
    limit_paths: PathEnsemble,
    backward: Option<CoupledBsde>,
}

fn coupled_run(
    model: &ModelSpec,
    grid: &TimeGrid,
    law: &LawFlow,
    lambda: Option<&LambdaCloud>,
    cfg: &ExperimentConfig,
    n: usize,
) -> Result<Coupled> {
    let sub = stage(cfg.study.seed, 2).derive(Role::Member, n as u64);
    let run = solve_sde_n(
        model,
        n,
        grid,
        law,
        &cfg.picard(),
        &sub.derive(Role::Stage, 0),
        &sub.derive(Role::Stage, 1),
        cfg.study.reps,
    )?;
    if cfg.study.backward {
        let pair = solve_bsde_n(model, &run, law, lambda, &cfg.regression())?;
        Ok(Coupled {
            limit_paths: pair.limit_paths.clone(),
            run,
            backward: Some(pair),
        })
    } else {
        let limit_paths = simulate_limit_paths(model, grid, law, run.paths.keys())?;
        Ok(Coupled {
            run,
            limit_paths,
            backward: None,
        })
    }
}

fn run_provenance(c: &Coupled) -> RunProvenance {
    let p = &c.run.provenance;
    RunProvenance {
        n: p.n,
        picard_levels: p.picard_levels,
        picard_converged: p.converged,
        picard_distances: p.distances.clone(),
        w_key: p.w_key.clone(),
        env_key: p.env_key.clone(),
        backward: c.backward.as_ref().map(|b| b.approx.provenance.clone()),
        max_abs_z: c.backward.as_ref().map(|b| b.approx.max_abs_z()),
    }
}

fn error_row(n: usize, metric: &str, e: Estimate) -> ErrorRow {
    ErrorRow {
        n,
        metric: metric.into(),
        value: e.value,
        stderr: e.stderr,
        exact: e.value == 0.0 && e.stderr == 0.0,
    }
}

/// Fits the log-log slope of one metric and grades it against `target`.
pub fn grade_slope(metric: &str, rows: &[ErrorRow], target: (f64, f64)) -> SlopeRow {
    let rows: Vec<&ErrorRow> = rows.iter().filter(|r| r.metric == metric).collect();
    let mut out = SlopeRow {
        metric: metric.into(),
        slope: None,
        slope_se: None,
        ci_low: None,
        ci_high: None,
        points: 0,
        target_low: target.0,
        target_high: target.1,
        verdict: "no-data".into(),
    };
    if rows.is_empty() {
        return out;
    }
    if rows.iter().all(|r| r.exact) {
        out.verdict = "exact".into();
        return out;
    }
    let usable: Vec<&&ErrorRow> = rows
        .iter()
        .filter(|r| r.value.is_finite() && r.value > 0.0 && r.stderr.is_finite())
        .collect();
    out.points = usable.len();
    let ns: Vec<f64> = usable.iter().map(|r| r.n as f64).collect();
    let vals: Vec<f64> = usable.iter().map(|r| r.value).collect();
    let ses: Vec<f64> = usable.iter().map(|r| r.stderr).collect();
    match (usable.len() >= 3).then(|| fit_loglog_slope(&ns, &vals, &ses)).flatten() {
        None => out.verdict = "degraded".into(),
        Some(fit) => {
            out.slope = Some(fit.slope);
            out.slope_se = Some(fit.slope_se);
            out.ci_low = Some(fit.ci_low);
            out.ci_high = Some(fit.ci_high);
            out.verdict = if (target.0..=target.1).contains(&fit.slope) { "pass" } else { "fail" }.into();
        }
    }
    out
}

/// Estimates the forward (and with `study.backward` the `Y` and `Z`)
/// errors on coupled paths for every `N` and fits their log-log slopes.
pub fn run_convergence_study(config: &ExperimentConfig) -> Result<StudyReport> {
    let model = config.model.build()?;
    let grid = config.grid()?;
    let (law, reference) = limit_law(&model, &grid, config)?;
    let lambda = limit_lambda(&model, &law, config)?;
    let mut report = StudyReport::new("convergence", config, reference);
    let mut max_z: Option<f64> = None;
    for &n in &config.study.n {
        let c = match coupled_run(&model, &grid, &law, lambda.as_ref(), config, n) {
            Ok(c) => c,
            Err(e) => {
                report.failed_stages.push(format!("N={n}: {e}"));
                continue;
            }
        };
        let d = model.dim;
        let errs: Vec<f64> = (0..c.run.paths.reps())
            .map(|r| sup_squared_distance(c.run.paths.path(r), c.limit_paths.path(r), d))
            .collect();
        report.errors.push(error_row(n, "x", Estimate::from_samples(&errs)));
        if let Some(pair) = &c.backward {
            report.errors.push(error_row(n, "y", y_error(pair)));
            report.errors.push(error_row(n, "z", z_error(pair)));
            let z = pair.approx.max_abs_z();
            max_z = Some(max_z.map_or(z, |m: f64| m.max(z)));
        }
        report.runs_mut().push(run_provenance(&c));
    }
    report.slopes.push(grade_slope("x", &report.errors, FORWARD_SLOPE));
    if config.study.backward {
        report.slopes.push(grade_slope("y", &report.errors, BACKWARD_SLOPE));
        report.slopes.push(grade_slope("z", &report.errors, BACKWARD_SLOPE));
    }
    for (metric, id) in [("x", "forward-rate"), ("y", "backward-rate-y"), ("z", "backward-rate-z")] {
        if let Some(s) = report.slopes.iter().find(|s| s.metric == metric) {
            let detail = match s.slope {
                Some(v) => format!("slope {v:.4} target [{}, {}]", s.target_low, s.target_high),
                None => format!("{} usable points", s.points),
            };
            report.verdicts.push(Verdict::new(id, &s.verdict, detail));
        }
    }
    if let Some(z) = max_z {
        let pass = z < config.study.z_cap;
        report.verdicts.push(Verdict::new(
            "z-bound",
            if pass { "pass" } else { "fail" },
            format!("max |Z^N| {z:.4} against {}", config.study.z_cap),
        ));
    }
    report.finish_verdict();
    Ok(report)
}

/// Lattice of the covariance table: probe times and points of the config,
/// drift, diffusion and terminal blocks.
pub fn study_lattice(config: &ExperimentConfig, grid: &TimeGrid) -> Result<FieldLattice> {
    let mut nodes: Vec<usize> = config.study.probe_times.iter().map(|&t| grid.nearest_node(t)).collect();
    nodes.sort_unstable();
    nodes.dedup();
    Ok(
        FieldLattice::new(config.model.x0.len(), grid, nodes, config.probe_x(), Vec::new())?.restricted(&[
            FieldBlock::Drift,
            FieldBlock::Diffusion,
            FieldBlock::Terminal,
        ]),
    )
}

/// Covariance table of the field: theoretical entries from `source`
/// against the sample covariance of the empirical fields of `run`.
pub fn covariance_table(
    model: &ModelSpec,
    run: &ApproximationRun,
    source: &FieldSource,
    centering: &FieldSource,
    lattice: &FieldLattice,
) -> Result<(Vec<CovarianceRow>, Option<f64>)> {
    let mut cov = theoretical_covariance(model, source, lattice)?;
    let jitter = cov.factor().ok().and(cov.jitter);
    let fields = empirical_fields(model, run, None, centering, lattice)?;
    let cols: Vec<Vec<f64>> = (0..lattice.len()).map(|e| fields.column(e)).collect();
    let mut rows = Vec::new();
    for (i, ei) in lattice.entries.iter().enumerate() {
        for (j, ej) in lattice.entries.iter().enumerate() {
            let (emp, emp_se) = covariance_with_se(&cols[i], &cols[j]);
            let combined = (cov.stderr(i, j).powi(2) + emp_se.powi(2)).sqrt();
            let diff = (emp - cov.get(i, j)).abs();
            rows.push(CovarianceRow {
                i,
                j,
                block: format!("{}{}", ei.block.number(), ej.block.number()),
                node_i: ei.node,
                node_j: ej.node,
                value: cov.get(i, j),
                stderr: cov.stderr(i, j),
                empirical: emp,
                empirical_stderr: emp_se,
                within: diff <= COVARIANCE_SIGMAS * combined,
            });
        }
    }
    Ok((rows, jitter))
}

/// Runs one approximation at the largest `N`, the limit-system ensemble,
/// the field covariance table and the distributional comparison. Stages
/// that fail are listed in the report; later stages that need them are
/// skipped.
pub fn run_clt_study(config: &ExperimentConfig) -> Result<StudyReport> {
    let model = config.model.build()?;
    let grid = config.grid()?;
    let seed = config.study.seed;
    let (law, reference) = limit_law(&model, &grid, config)?;
    let mut report = StudyReport::new("clt", config, reference);
    let Some(&n) = config.study.n.last() else {
        report.finish_verdict();
        return Ok(report);
    };
    let reg = config.regression();
    let lambda = match limit_lambda(&model, &law, config) {
        Ok(l) => l,
        Err(e) => {
            report.failed_stages.push(format!("limit lambda: {e}"));
            report.finish_verdict();
            return Ok(report);
        }
    };
    let coupled = match coupled_run(&model, &grid, &law, lambda.as_ref(), config, n) {
        Ok(c) => c,
        Err(e) => {
            report.failed_stages.push(format!("approximation: {e}"));
            report.finish_verdict();
            return Ok(report);
        }
    };
    report.runs_mut().push(run_provenance(&coupled));

    let source = if config.study.backward {
        solve_lambda_cloud(&model, &law, config.study.field_cloud, &stage(seed, 5), &reg).map(|l| FieldSource::from_lambda(&l))
    } else {
        match &law {
            // antithetic partners are dropped so covariance standard errors stay honest
            LawFlow::Cloud(c) if config.study.antithetic => {
                let rows: Vec<usize> = (0..c.reps()).step_by(2).collect();
                Ok(FieldSource::from_paths(Arc::new(c.select(&rows))))
            }
            LawFlow::Cloud(c) => Ok(FieldSource::from_paths(c.clone())),
            LawFlow::ClosedForm(_) => law
                .sample_paths(&stage(seed, 5), config.study.field_cloud, false)
                .map(|p| FieldSource::from_paths(Arc::new(p))),
        }
    };
    let source = match source {
        Ok(s) => s,
        Err(e) => {
            report.failed_stages.push(format!("field cloud: {e}"));
            report.finish_verdict();
            return Ok(report);
        }
    };

    let table = study_lattice(config, &grid).and_then(|lattice| {
        let center = sample_approximating_law(
            &model,
            &grid,
            &coupled.run.cloud,
            n,
            &stage(seed, 6),
            config.study.center_cloud,
            config.study.antithetic,
        )?;
        covariance_table(&model, &coupled.run, &source, &FieldSource::from_paths(Arc::new(center)), &lattice)
    });
    match table {
        Ok((rows, jitter)) => {
            let all_zero = rows.iter().all(|r| r.value == 0.0 && r.empirical == 0.0);
            let pass = rows.iter().all(|r| r.within);
            let outside = rows.iter().filter(|r| !r.within).count();
            report.verdicts.push(Verdict::new(
                "field-covariance",
                if all_zero {
                    "degenerate-pass"
                } else if pass {
                    "pass"
                } else {
                    "fail"
                },
                format!("{outside} of {} entries outside {COVARIANCE_SIGMAS} combined standard errors", rows.len()),
            ));
            report.covariance = rows;
            if let Some(p) = report.provenance.as_mut() { p.jitter = jitter; }
        }
        Err(e) => report.failed_stages.push(format!("covariance: {e}")),
    }

    let limit_cfg = LimitConfig {
        members: config.study.members,
        backward: config.study.backward,
        regression: reg.clone(),
        ..LimitConfig::default()
    };
    let limit = match solve_limit_system(&model, &law, &source, &stage(seed, 3), &stage(seed, 4), &limit_cfg) {
        Ok(l) => l,
        Err(e) => {
            report.failed_stages.push(format!("limit system: {e}"));
            report.finish_verdict();
            return Ok(report);
        }
    };
    if let Some(p) = report.provenance.as_mut() { p.limit = Some(limit.provenance.clone()); }
    let clt_cfg = CltConfig {
        probe_times: config.study.clt_times.clone(),
        ks_alpha: config.study.ks_alpha,
        variance_tolerance: config.study.variance_tolerance,
        ..CltConfig::default()
    };
    match clt_compare(n, &coupled.run.paths, &coupled.limit_paths, coupled.backward.as_ref(), &limit, &clt_cfg) {
        Ok(clt) => {
            if clt.exact_agreement {
                report.verdicts.push(Verdict::new("clt", "degenerate-pass", "all fluctuation statistics are 0".into()));
            } else {
                for e in &clt.entries {
                    let at = e.time.map_or(String::new(), |t| format!("@{t}"));
                    report.verdicts.push(Verdict::new(
                        &format!("clt-ks:{}{at}", e.quantity),
                        if e.ks_pass { "pass" } else { "fail" },
                        format!("p-value {:.4} against {}", e.ks.p_value, clt_cfg.ks_alpha),
                    ));
                    report.verdicts.push(Verdict::new(
                        &format!("clt-variance:{}{at}", e.quantity),
                        if e.variance_pass { "pass" } else { "fail" },
                        format!(
                            "ratio {:.4} ({:.5} / {:.5}) tolerance {}",
                            e.variance_ratio, e.approx.variance, e.limit.variance, clt_cfg.variance_tolerance
                        ),
                    ));
                }
            }
            report.clt = Some(clt);
        }
        Err(e) => report.failed_stages.push(format!("clt comparison: {e}")),
    }
    report.fluctuations = fluctuation_rows(n, &coupled, &clt_cfg, &grid);
    report.finish_verdict();
    Ok(report)
}

/// `sqrt(N) (X^N - X)` per replication at the comparison times.
fn fluctuation_rows(n: usize, c: &Coupled, cfg: &CltConfig, grid: &TimeGrid) -> Vec<(usize, f64, usize, f64)> {
    let scale = (n as f64).sqrt();
    let d = c.run.paths.dim();
    let mut rows = Vec::new();
    for r in 0..c.run.paths.reps() {
        for &t in &cfg.probe_times {
            let i = grid.nearest_node(t);
            for k in 0..d {
                rows.push((r, grid.time(i), k + 1, scale * (c.run.paths.value(r, i)[k] - c.limit_paths.value(r, i)[k])));
            }
        }
    }
    rows
}
