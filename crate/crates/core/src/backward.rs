//! Regression Monte Carlo solvers for the mean-field BSDE, its
//! approximation with `N` environment copies, and plain BSDEs.
//!
//! Every solver runs the same backward sweep. At node `i`:
//!
//! * `Yhat = Reg[Y_{i+1} | features_i]`,
//! * `Z_i = Reg[(Y_{i+1} - Yhat) dW_i | features_i] / h`,
//! * `Y_i = Yhat + h f(X_i, Y_i, Z_i)`, resolved by fixed-point sweeps
//!   started at `Yhat`.
//!
//! The approximating BSDE depends on the frozen environment of its
//! replication, so its conditional expectations are estimated on a
//! companion ensemble: the replication's own path plus extra paths with
//! fresh Brownian motions and the same environment. The limit BSDE is
//! solved on the limit paths driven by the same Brownian motions, so the
//! regression noise of the two largely cancels in their difference.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::forward::{
    simulate_limit_paths, simulate_with_environment, ApproximationRun, Estimate, EnvironmentDraw,
    LawFlow, PathEnsemble,
};
use crate::model::{Coefficients, Lambda, MeanAccumulator, ModelSpec, Partner};
use crate::noise::{Role, StreamKey, TimeGrid};
use crate::regression::{fit_poly_extra, monomial_exponents};
use crate::stats::GaussHermite;

/// Relative change below which the implicit `Y` sweeps count as converged.
pub const CONTRACTION_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionConfig {
    /// Total polynomial degree of the regression basis.
    pub degree: usize,
    /// Fixed-point sweeps for the implicit `Y` step.
    pub sweeps: usize,
    /// Diagnostic bound on `|Z|`; exceeding it raises a flag.
    pub z_cap: f64,
    /// Size of the per-replication companion ensemble, designated path included.
    pub companions: usize,
    /// Picard levels for the environment's `Y` law.
    pub picard_levels: usize,
    pub picard_tol: f64,
    /// Number of partner states used for mean-field driver averages.
    pub partner_sample: usize,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        RegressionConfig {
            degree: 2,
            sweeps: 2,
            z_cap: 5.0,
            companions: 64,
            picard_levels: 3,
            picard_tol: 1e-3,
            partner_sample: 256,
        }
    }
}

/// `Y` regression at one node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRegression {
    pub node: usize,
    pub requested_degree: usize,
    pub degree: usize,
    pub coefficients: Vec<f64>,
    pub residual_rms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BsdeProvenance {
    pub variant: String,
    pub sweeps: usize,
    /// Nodes whose implicit step had not contracted after the last sweep.
    pub non_contracting_nodes: Vec<usize>,
    /// Nodes where the regression degree was lowered.
    pub fallback_nodes: Vec<usize>,
    pub picard_levels: usize,
    pub picard_converged: bool,
    pub z_cap: f64,
    pub max_abs_z: f64,
    pub z_cap_exceeded: bool,
    /// Largest regression residual RMS over all nodes.
    pub max_residual_rms: f64,
}

/// Pathwise `(Y, Z)` on the grid. `Y` is stored `[rep][node]`, `Z`
/// `[rep][node][coordinate]`; `Z` at the terminal node repeats the last step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BsdeSolution {
    pub grid: TimeGrid,
    pub dim: usize,
    pub reps: usize,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub regressions: Vec<NodeRegression>,
    pub provenance: BsdeProvenance,
}

impl BsdeSolution {
    pub fn y(&self, r: usize, i: usize) -> f64 {
        self.y[r * self.grid.nodes_len() + i]
    }

    pub fn y_path(&self, r: usize) -> &[f64] {
        let n = self.grid.nodes_len();
        &self.y[r * n..(r + 1) * n]
    }

    pub fn z(&self, r: usize, i: usize) -> &[f64] {
        let at = (r * self.grid.nodes_len() + i) * self.dim;
        &self.z[at..at + self.dim]
    }

    /// `Y_{t_i}` across replications.
    pub fn y_at(&self, i: usize) -> Vec<f64> {
        (0..self.reps).map(|r| self.y(r, i)).collect()
    }

    pub fn max_abs_z(&self) -> f64 {
        self.z.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn from_rows(grid: TimeGrid, dim: usize, rows: Vec<(Vec<f64>, Vec<f64>)>, provenance: BsdeProvenance) -> Self {
        let reps = rows.len();
        let mut y = Vec::with_capacity(reps * grid.nodes_len());
        let mut z = Vec::with_capacity(reps * grid.nodes_len() * dim);
        for (yr, zr) in rows {
            y.extend(yr);
            z.extend(zr);
        }
        BsdeSolution {
            grid,
            dim,
            reps,
            y,
            z,
            regressions: Vec::new(),
            provenance,
        }
    }
}

/// Inputs of one backward sweep over `rows` paths.
pub(crate) struct Sweep<'a> {
    pub grid: TimeGrid,
    pub dim: usize,
    pub rows: usize,
    /// Regressors at a node, row-major with `vars + extra` columns; the last
    /// `extra` enter the basis linearly only.
    pub features: &'a (dyn Fn(usize) -> Vec<f64> + Sync),
    pub vars: usize,
    pub extra: usize,
    pub increment: &'a (dyn Fn(usize, usize) -> &'a [f64] + Sync),
    pub terminal: Vec<f64>,
    /// Driver values for every row at node `i` given current `Y` and `Z`
    /// (row-major), written to `out`.
    pub driver: &'a (dyn Fn(usize, &[f64], &[f64], &mut [f64]) + Sync),
}

pub(crate) struct SweepOutput {
    /// `[node][row]`
    pub y: Vec<f64>,
    /// `[node][row][coordinate]`
    pub z: Vec<f64>,
    pub regressions: Vec<NodeRegression>,
    pub non_contracting: Vec<usize>,
    pub fallbacks: Vec<usize>,
    pub max_residual: f64,
}

pub(crate) fn backward_sweep(s: &Sweep<'_>, reg: &RegressionConfig, keep_artifacts: bool) -> SweepOutput {
    let n = s.grid.steps();
    let nodes = n + 1;
    let rows = s.rows;
    let d = s.dim;
    let h = s.grid.step_size();
    let mut y = vec![0.0; nodes * rows];
    let mut z = vec![0.0; nodes * rows * d];
    y[n * rows..].copy_from_slice(&s.terminal);
    let mut regressions = Vec::new();
    let mut non_contracting = Vec::new();
    let mut fallbacks = Vec::new();
    let mut max_residual = 0.0f64;
    let mut fvals = vec![0.0; rows];

    for i in (0..n).rev() {
        let feats = (s.features)(i);
        let next: Vec<f64> = y[(i + 1) * rows..(i + 2) * rows].to_vec();
        let fit_y = fit_poly_extra(&feats, rows, s.vars, s.extra, reg.degree, &next, 1);
        let yhat = fit_y.fitted.clone();
        let mut prod = vec![0.0; rows * d];
        for r in 0..rows {
            let dw = (s.increment)(r, i);
            let centered = next[r] - yhat[r];
            for c in 0..d {
                prod[r * d + c] = centered * dw[c] / h;
            }
        }
        let fit_z = fit_poly_extra(&feats, rows, s.vars, s.extra, reg.degree, &prod, d);
        z[i * rows * d..(i + 1) * rows * d].copy_from_slice(&fit_z.fitted);
        if fit_y.fell_back() || fit_z.fell_back() {
            fallbacks.push(i);
        }
        max_residual = max_residual.max(fit_y.residual_rms[0]);

        let zi = &z[i * rows * d..(i + 1) * rows * d];
        let mut cur = yhat.clone();
        let mut last_change = 0.0f64;
        for _ in 0..reg.sweeps.max(1) {
            (s.driver)(i, &cur, zi, &mut fvals);
            last_change = 0.0;
            for r in 0..rows {
                let v = yhat[r] + h * fvals[r];
                last_change = last_change.max((v - cur[r]).abs() / cur[r].abs().max(1.0));
                cur[r] = v;
            }
        }
        if last_change > CONTRACTION_TOL {
            non_contracting.push(i);
        }
        y[i * rows..(i + 1) * rows].copy_from_slice(&cur);
        if keep_artifacts {
            regressions.push(NodeRegression {
                node: i,
                requested_degree: fit_y.requested_degree,
                degree: fit_y.degree,
                coefficients: fit_y.coefficients,
                residual_rms: fit_y.residual_rms[0],
            });
        }
    }
    // Z at the terminal node repeats the last step
    let (head, tail) = z.split_at_mut(n * rows * d);
    tail.copy_from_slice(&head[(n - 1) * rows * d..]);
    regressions.reverse();
    non_contracting.reverse();
    fallbacks.reverse();
    SweepOutput {
        y,
        z,
        regressions,
        non_contracting,
        fallbacks,
        max_residual,
    }
}

impl SweepOutput {
    /// Row `r` as `(y path, z path)`.
    fn row(&self, r: usize, rows: usize, nodes: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
        let y = (0..nodes).map(|i| self.y[i * rows + r]).collect();
        let mut z = Vec::with_capacity(nodes * d);
        for i in 0..nodes {
            let at = (i * rows + r) * d;
            z.extend_from_slice(&self.z[at..at + d]);
        }
        (y, z)
    }

    pub(crate) fn into_solution(self, grid: TimeGrid, d: usize, rows: usize, mut prov: BsdeProvenance) -> BsdeSolution {
        let nodes = grid.nodes_len();
        let list: Vec<(Vec<f64>, Vec<f64>)> = (0..rows).map(|r| self.row(r, rows, nodes, d)).collect();
        prov.non_contracting_nodes = self.non_contracting.clone();
        prov.fallback_nodes = self.fallbacks.clone();
        prov.max_residual_rms = self.max_residual;
        let mut sol = BsdeSolution::from_rows(grid, d, list, prov);
        sol.regressions = self.regressions;
        finish_z_diagnostics(&mut sol);
        sol
    }
}

pub(crate) fn finish_z_diagnostics(sol: &mut BsdeSolution) {
    let m = sol.max_abs_z();
    sol.provenance.max_abs_z = m;
    sol.provenance.z_cap_exceeded = m > sol.provenance.z_cap;
}

pub(crate) fn check_rows(rows: usize, dim: usize, reg: &RegressionConfig) -> Result<()> {
    let basis = monomial_exponents(dim, reg.degree).len();
    if rows < 10 * basis {
        return Err(Error::TooSmall {
            what: format!("regression ensemble for {basis} basis functions"),
            needed: 10 * basis,
            got: rows,
        });
    }
    Ok(())
}

/// Solved `(X, Y)` cloud standing in for the law of `(X, Y)` in driver averages.
#[derive(Clone, Debug)]
pub struct LambdaCloud {
    pub x: Arc<PathEnsemble>,
    /// `[member][node]`
    pub y: Arc<Vec<f64>>,
}

impl LambdaCloud {
    pub fn from_solution(x: Arc<PathEnsemble>, sol: &BsdeSolution) -> Self {
        LambdaCloud {
            x,
            y: Arc::new(sol.y.clone()),
        }
    }

    pub fn members(&self) -> usize {
        self.x.reps()
    }

    pub fn y(&self, m: usize, i: usize) -> f64 {
        self.y[m * self.x.grid().nodes_len() + i]
    }
}

/// Partner states used for the mean-field driver of the limit equation.
#[derive(Clone, Copy, Debug)]
pub enum DriverPartners<'a> {
    /// The ensemble's own current `(X, Y)` values.
    Own,
    Cloud(&'a LambdaCloud),
}

/// `E[Phi(x, X_T)]` under the law.
pub(crate) fn terminal_mean(model: &ModelSpec, law: &LawFlow, rule: Option<&(Vec<f64>, Vec<f64>)>, x: &[f64]) -> f64 {
    let c = model.coefficients.as_ref();
    if !model.interaction().terminal {
        return c.terminal(x, x);
    }
    match law {
        LawFlow::Cloud(cloud) => {
            let last = cloud.grid().steps();
            let mut acc = MeanAccumulator::new(1);
            for m in 0..cloud.reps() {
                acc.push_scalar(c.terminal(x, cloud.value(m, last)));
            }
            acc.scalar()
        }
        LawFlow::ClosedForm(g) => {
            let (pts, w) = rule.expect("quadrature rule");
            let d = model.dim;
            let last = g.grid.steps();
            let mean = &g.mean[last * d..(last + 1) * d];
            let sd = g.sd[last];
            let mut p = vec![0.0; d];
            let mut acc = MeanAccumulator::new(1);
            for (q, wk) in pts.chunks(d).zip(w) {
                for k in 0..d {
                    p[k] = mean[k] + sd * q[k];
                }
                acc.push_weighted(&[c.terminal(x, &p)], *wk);
            }
            acc.scalar()
        }
    }
}

pub(crate) fn law_rule(law: &LawFlow) -> Option<(Vec<f64>, Vec<f64>)> {
    match law {
        LawFlow::ClosedForm(g) => {
            let d = g.closed_form.dim();
            let mut q = 20usize;
            while q > 2 && q.pow(d as u32) > 4096 {
                q -= 1;
            }
            Some(GaussHermite::new(q).tensor(d))
        }
        LawFlow::Cloud(_) => None,
    }
}

fn driver_average<'p>(
    c: &dyn Coefficients,
    interacts: bool,
    lam: Lambda<'_>,
    partners: impl Iterator<Item = (&'p [f64], f64)>,
) -> f64 {
    if !interacts {
        return c.driver(lam, Partner { x: lam.x, y: lam.y });
    }
    let mut acc = MeanAccumulator::new(1);
    for (x, y) in partners {
        acc.push_scalar(c.driver(lam, Partner { x, y }));
    }
    acc.scalar()
}

/// Solves the mean-field BSDE with terminal `E[Phi(x, X_T)]` at `x = X_T`
/// and driver `E[f(lambda, (X_t, Y_t))]` at `lambda = (X_t, Y_t, Z_t)`,
/// regressing on `X_{t_i}` over the ensemble `x_paths`.
pub fn solve_mfbsde(
    model: &ModelSpec,
    law: &LawFlow,
    x_paths: &PathEnsemble,
    reg: &RegressionConfig,
    partners: DriverPartners<'_>,
) -> Result<BsdeSolution> {
    let d = model.dim;
    let rows = x_paths.reps();
    check_rows(rows, d, reg)?;
    let grid = *x_paths.grid();
    let rule = law_rule(law);
    let last = grid.steps();
    let terminal: Vec<f64> = (0..rows)
        .into_par_iter()
        .map(|r| terminal_mean(model, law, rule.as_ref(), x_paths.value(r, last)))
        .collect();
    let features = |i: usize| -> Vec<f64> {
        let mut f = Vec::with_capacity(rows * d);
        for r in 0..rows {
            f.extend_from_slice(x_paths.value(r, i));
        }
        f
    };
    let increment = |r: usize, i: usize| x_paths.increment(r, i);
    let c = model.coefficients.as_ref();
    let interacts = model.interaction().driver;
    let sample = reg.partner_sample.max(1);
    let driver = |i: usize, ys: &[f64], zs: &[f64], out: &mut [f64]| {
        out.par_iter_mut().enumerate().for_each(|(r, o)| {
            let lam = Lambda {
                x: x_paths.value(r, i),
                y: ys[r],
                z: &zs[r * d..(r + 1) * d],
            };
            *o = match partners {
                DriverPartners::Own => {
                    let p = sample.min(rows);
                    driver_average(c, interacts, lam, (0..p).map(|k| (x_paths.value(k, i), ys[k])))
                }
                DriverPartners::Cloud(cloud) => {
                    let p = sample.min(cloud.members());
                    driver_average(c, interacts, lam, (0..p).map(|k| (cloud.x.value(k, i), cloud.y(k, i))))
                }
            };
        });
    };
    let sweep = Sweep {
        grid,
        dim: d,
        rows,
        features: &features,
        vars: d,
        extra: 0,
        increment: &increment,
        terminal,
        driver: &driver,
    };
    let out = backward_sweep(&sweep, reg, true);
    let prov = BsdeProvenance {
        variant: "mean-field".into(),
        sweeps: reg.sweeps,
        z_cap: reg.z_cap,
        picard_converged: true,
        ..Default::default()
    };
    Ok(out.into_solution(grid, d, rows, prov))
}

/// Limit `(X, Y)` cloud for driver averages: solves the mean-field BSDE on
/// `count` paths of the law.
pub fn solve_lambda_cloud(
    model: &ModelSpec,
    law: &LawFlow,
    count: usize,
    key: &StreamKey,
    reg: &RegressionConfig,
) -> Result<LambdaCloud> {
    let x = Arc::new(match law {
        LawFlow::Cloud(c) if c.reps() <= count => (**c).clone(),
        _ => law.sample_paths(key, count, false)?,
    });
    let sol = solve_mfbsde(model, law, &x, reg, DriverPartners::Own)?;
    Ok(LambdaCloud::from_solution(x, &sol))
}

/// Environment `Y` values on the approximating cloud.
#[derive(Clone, Debug)]
pub struct EnvironmentLaw {
    pub lambda: LambdaCloud,
    pub levels: usize,
    pub converged: bool,
    pub distances: Vec<f64>,
}

fn y_curve_distance(a: &LambdaCloud, b: &LambdaCloud) -> f64 {
    let nodes = a.x.grid().nodes_len();
    let m = a.members() as f64;
    (0..nodes)
        .map(|i| {
            let ya: Vec<f64> = (0..a.members()).map(|k| a.y(k, i)).collect();
            let yb: Vec<f64> = (0..b.members()).map(|k| b.y(k, i)).collect();
            let (ma, mb) = (ya.iter().sum::<f64>() / m, yb.iter().sum::<f64>() / m);
            let va = ya.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / m;
            let vb = yb.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / m;
            (ma - mb).abs() + (va - vb).abs()
        })
        .fold(0.0, f64::max)
}

/// Picard iteration on the law of `(X^N, Y^N)` over the approximating
/// cloud. Level 0 takes driver partners from the limit cloud (or the
/// cloud's own values when none is given); level `j + 1` from level `j`.
/// The regression pools all cloud members.
pub fn solve_environment_law(
    model: &ModelSpec,
    run: &ApproximationRun,
    limit_lambda: Option<&LambdaCloud>,
    reg: &RegressionConfig,
) -> Result<EnvironmentLaw> {
    let law = LawFlow::Cloud(run.cloud.clone());
    let first = match limit_lambda {
        Some(l) => DriverPartners::Cloud(l),
        None => DriverPartners::Own,
    };
    let sol = solve_mfbsde(model, &law, &run.cloud, reg, first)?;
    let mut current = LambdaCloud::from_solution(run.cloud.clone(), &sol);
    let mut distances = Vec::new();
    let mut converged = false;
    let mut levels = 1;
    for _ in 1..reg.picard_levels.max(1) {
        let sol = solve_mfbsde(model, &law, &run.cloud, reg, DriverPartners::Cloud(&current))?;
        let next = LambdaCloud::from_solution(run.cloud.clone(), &sol);
        let dist = y_curve_distance(&current, &next);
        distances.push(dist);
        current = next;
        levels += 1;
        if dist < reg.picard_tol {
            converged = true;
            break;
        }
    }
    Ok(EnvironmentLaw {
        lambda: current,
        levels,
        converged,
        distances,
    })
}

/// Approximating and limit backward solutions on shared Brownian motions.
#[derive(Clone, Debug)]
pub struct CoupledBsde {
    /// `(Y^N, Z^N)` along the designated paths of the run.
    pub approx: BsdeSolution,
    /// `(Y, Z)` along the coupled limit paths.
    pub limit: BsdeSolution,
    /// Limit forward paths driven by the run's keys.
    pub limit_paths: PathEnsemble,
}

/// Companion keys of replication `r`: the designated key first.
pub fn companion_keys(designated: &StreamKey, count: usize) -> Vec<StreamKey> {
    let mut keys = Vec::with_capacity(count);
    keys.push(designated.clone());
    for j in 1..count {
        keys.push(designated.derive(Role::Companion, j as u64));
    }
    keys
}

struct ApproxDriver<'a> {
    env: &'a EnvironmentDraw,
    env_y: Option<&'a LambdaCloud>,
}

fn companion_solve(
    model: &ModelSpec,
    paths: &PathEnsemble,
    terminal: Vec<f64>,
    reg: &RegressionConfig,
    partners: &(dyn Fn(usize, usize, Lambda<'_>) -> f64 + Sync),
) -> SweepOutput {
    let d = model.dim;
    let rows = paths.reps();
    let features = |i: usize| -> Vec<f64> {
        let mut f = Vec::with_capacity(rows * d);
        for r in 0..rows {
            f.extend_from_slice(paths.value(r, i));
        }
        f
    };
    let increment = |r: usize, i: usize| paths.increment(r, i);
    let driver = |i: usize, ys: &[f64], zs: &[f64], out: &mut [f64]| {
        for (r, o) in out.iter_mut().enumerate() {
            let lam = Lambda {
                x: paths.value(r, i),
                y: ys[r],
                z: &zs[r * d..(r + 1) * d],
            };
            *o = partners(r, i, lam);
        }
    };
    let sweep = Sweep {
        grid: *paths.grid(),
        dim: d,
        rows,
        features: &features,
        vars: d,
        extra: 0,
        increment: &increment,
        terminal,
        driver: &driver,
    };
    backward_sweep(&sweep, reg, false)
}

/// Solves the approximating BSDE with terminal `(1/N) sum_k Phi(X^N_T, Z^k_T)`
/// and driver `(1/N) sum_k f(lambda, (Z^k_t, Y^k_t))` for every replication of
/// `run`, together with the limit BSDE on the coupled limit paths.
///
/// The environment's `Y` values come from [`solve_environment_law`] and are
/// only computed when the driver depends on its partner.
pub fn solve_bsde_n(
    model: &ModelSpec,
    run: &ApproximationRun,
    limit_law: &LawFlow,
    limit_lambda: Option<&LambdaCloud>,
    reg: &RegressionConfig,
) -> Result<CoupledBsde> {
    let d = model.dim;
    let grid = *run.paths.grid();
    let k = reg.companions;
    check_rows(k, d, reg)?;
    let inter = model.interaction();
    if inter.driver && limit_lambda.is_none() {
        return Err(Error::Missing("limit (X, Y) cloud for an interacting driver".into()));
    }
    let env_law = if inter.driver {
        Some(solve_environment_law(model, run, limit_lambda, reg)?)
    } else {
        None
    };
    let rule = law_rule(limit_law);
    let c = model.coefficients.as_ref();
    let last = grid.steps();
    let nodes = grid.nodes_len();
    let sample = reg.partner_sample.max(1);

    struct RepOut {
        approx: (Vec<f64>, Vec<f64>),
        limit: (Vec<f64>, Vec<f64>),
        limit_path: (Vec<f64>, Vec<f64>, StreamKey),
        non_contracting: bool,
        fallback: bool,
        residual: f64,
    }

    let outs = (0..run.paths.reps())
        .into_par_iter()
        .map(|r| -> Result<RepOut> {
            let keys = companion_keys(run.paths.key(r), k);
            let env = &run.environments[r];
            let xn = simulate_with_environment(model, &grid, env, &keys)?;
            let xl = simulate_limit_paths(model, &grid, limit_law, &keys)?;

            let term_n: Vec<f64> = (0..k)
                .map(|j| {
                    let x = xn.value(j, last);
                    if !inter.terminal {
                        return c.terminal(x, x);
                    }
                    let mut acc = MeanAccumulator::new(1);
                    for e in 0..env.len() {
                        acc.push_scalar(c.terminal(x, env.state(e, last)));
                    }
                    acc.scalar()
                })
                .collect();
            let ad = ApproxDriver {
                env,
                env_y: env_law.as_ref().map(|l| &l.lambda),
            };
            let approx_partners = |_r: usize, i: usize, lam: Lambda<'_>| -> f64 {
                match ad.env_y {
                    Some(ly) => driver_average(
                        c,
                        true,
                        lam,
                        (0..ad.env.len()).map(|e| {
                            let m = ad.env.indices[e] as usize;
                            (ly.x.value(m, i), ly.y(m, i))
                        }),
                    ),
                    None => driver_average(c, false, lam, std::iter::empty()),
                }
            };
            let out_n = companion_solve(model, &xn, term_n, reg, &approx_partners);

            let term_l: Vec<f64> = (0..k)
                .map(|j| terminal_mean(model, limit_law, rule.as_ref(), xl.value(j, last)))
                .collect();
            let limit_partners = |_r: usize, i: usize, lam: Lambda<'_>| -> f64 {
                match (inter.driver, limit_lambda) {
                    (true, Some(cloud)) => {
                        let p = sample.min(cloud.members());
                        driver_average(c, true, lam, (0..p).map(|m| (cloud.x.value(m, i), cloud.y(m, i))))
                    }
                    _ => driver_average(c, false, lam, std::iter::empty()),
                }
            };
            let out_l = companion_solve(model, &xl, term_l, reg, &limit_partners);

            Ok(RepOut {
                approx: out_n.row(0, k, nodes, d),
                limit: out_l.row(0, k, nodes, d),
                limit_path: (xl.path(0).to_vec(), xl.increments(0).to_vec(), keys[0].clone()),
                non_contracting: !out_n.non_contracting.is_empty() || !out_l.non_contracting.is_empty(),
                fallback: out_n.fallbacks.iter().chain(&out_l.fallbacks).any(|&i| i > 0),
                residual: out_n.max_residual.max(out_l.max_residual),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut prov = BsdeProvenance {
        variant: format!("approximation N={}", run.provenance.n),
        sweeps: reg.sweeps,
        z_cap: reg.z_cap,
        picard_levels: env_law.as_ref().map_or(0, |l| l.levels),
        picard_converged: env_law.as_ref().is_none_or(|l| l.converged),
        ..Default::default()
    };
    prov.max_residual_rms = outs.iter().map(|o| o.residual).fold(0.0, f64::max);
    if outs.iter().any(|o| o.non_contracting) {
        prov.non_contracting_nodes.push(usize::MAX);
    }
    if outs.iter().any(|o| o.fallback) {
        prov.fallback_nodes.push(usize::MAX);
    }
    let mut limit_prov = prov.clone();
    limit_prov.variant = "coupled limit".into();
    limit_prov.picard_levels = 0;
    limit_prov.picard_converged = true;

    let mut approx_rows = Vec::with_capacity(outs.len());
    let mut limit_rows = Vec::with_capacity(outs.len());
    let mut limit_paths = Vec::with_capacity(outs.len());
    for o in outs {
        approx_rows.push(o.approx);
        limit_rows.push(o.limit);
        limit_paths.push(o.limit_path);
    }
    let mut approx = BsdeSolution::from_rows(grid, d, approx_rows, prov);
    let mut limit = BsdeSolution::from_rows(grid, d, limit_rows, limit_prov);
    finish_z_diagnostics(&mut approx);
    finish_z_diagnostics(&mut limit);
    let mut values = Vec::new();
    let mut incs = Vec::new();
    let mut keys = Vec::new();
    for (v, i, key) in limit_paths {
        values.extend(v);
        incs.extend(i);
        keys.push(key);
    }
    let limit_paths = PathEnsemble::new(grid, d, values, incs, keys)?;
    Ok(CoupledBsde {
        approx,
        limit,
        limit_paths,
    })
}

/// `E[sup_i |Y^N_{t_i} - Y_{t_i}|^2]` over replications.
pub fn y_error(pair: &CoupledBsde) -> Estimate {
    let samples: Vec<f64> = (0..pair.approx.reps)
        .map(|r| {
            pair.approx
                .y_path(r)
                .iter()
                .zip(pair.limit.y_path(r))
                .map(|(a, b)| (a - b).powi(2))
                .fold(0.0, f64::max)
        })
        .collect();
    Estimate::from_samples(&samples)
}

/// `E[sum_{i<n} h |Z^N_{t_i} - Z_{t_i}|^2]` over replications.
pub fn z_error(pair: &CoupledBsde) -> Estimate {
    let grid = pair.approx.grid;
    let h = grid.step_size();
    let samples: Vec<f64> = (0..pair.approx.reps)
        .map(|r| {
            (0..grid.steps())
                .map(|i| {
                    let a = pair.approx.z(r, i);
                    let b = pair.limit.z(r, i);
                    h * a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>()
                })
                .sum()
        })
        .collect();
    Estimate::from_samples(&samples)
}

/// Terminal function and driver of a BSDE without mean-field terms.
pub struct PlainBsde<'a> {
    pub terminal: &'a (dyn Fn(&[f64]) -> f64 + Sync),
    /// `g(t, x, y, z)`
    pub driver: &'a (dyn Fn(f64, &[f64], f64, &[f64]) -> f64 + Sync),
}

/// Solves a plain BSDE on the given paths, regressing on `X_{t_i}`.
pub fn solve_plain_bsde(paths: &PathEnsemble, bsde: &PlainBsde<'_>, reg: &RegressionConfig) -> Result<BsdeSolution> {
    let d = paths.dim();
    let rows = paths.reps();
    check_rows(rows, d, reg)?;
    let grid = *paths.grid();
    let last = grid.steps();
    let terminal: Vec<f64> = (0..rows).map(|r| (bsde.terminal)(paths.value(r, last))).collect();
    let features = |i: usize| -> Vec<f64> {
        let mut f = Vec::with_capacity(rows * d);
        for r in 0..rows {
            f.extend_from_slice(paths.value(r, i));
        }
        f
    };
    let increment = |r: usize, i: usize| paths.increment(r, i);
    let driver = |i: usize, ys: &[f64], zs: &[f64], out: &mut [f64]| {
        let t = grid.time(i);
        for (r, o) in out.iter_mut().enumerate() {
            *o = (bsde.driver)(t, paths.value(r, i), ys[r], &zs[r * d..(r + 1) * d]);
        }
    };
    let sweep = Sweep {
        grid,
        dim: d,
        rows,
        features: &features,
        vars: d,
        extra: 0,
        increment: &increment,
        terminal,
        driver: &driver,
    };
    let prov = BsdeProvenance {
        variant: "plain".into(),
        sweeps: reg.sweeps,
        z_cap: reg.z_cap,
        picard_converged: true,
        ..Default::default()
    };
    Ok(backward_sweep(&sweep, reg, true).into_solution(grid, d, rows, prov))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub pass: bool,
    /// `min (Y^1 - Y^2)` over nodes and replications.
    pub min_margin: f64,
    pub eps_reg: f64,
    /// `Y^1_0 - Y^2_0` averaged over replications.
    pub initial_gap: f64,
}

/// Solves two plain BSDEs on shared paths and checks `Y^1 >= Y^2 - eps`
/// everywhere, with `eps = 1e-6 + 2 * (largest regression residual RMS)`.
///
/// The inputs must be ordered on the sampled support: `xi_1 >= xi_2` at
/// every terminal state and `g_1 >= g_2` at every `(t_i, X_i)` with `(y, z)`
/// taken from both solutions.
pub fn check_comparison(
    paths: &PathEnsemble,
    first: &PlainBsde<'_>,
    second: &PlainBsde<'_>,
    reg: &RegressionConfig,
) -> Result<ComparisonReport> {
    let grid = *paths.grid();
    let last = grid.steps();
    for r in 0..paths.reps() {
        let x = paths.value(r, last);
        if (first.terminal)(x) < (second.terminal)(x) {
            return Err(Error::OrderingViolated(format!("terminal values at replication {r}")));
        }
    }
    let s1 = solve_plain_bsde(paths, first, reg)?;
    let s2 = solve_plain_bsde(paths, second, reg)?;
    for sol in [&s1, &s2] {
        for r in 0..paths.reps() {
            for i in 0..last {
                let (t, x, y, z) = (grid.time(i), paths.value(r, i), sol.y(r, i), sol.z(r, i));
                if (first.driver)(t, x, y, z) < (second.driver)(t, x, y, z) {
                    return Err(Error::OrderingViolated(format!(
                        "drivers at node {i}, replication {r}"
                    )));
                }
            }
        }
    }
    let min_margin = s1
        .y
        .iter()
        .zip(&s2.y)
        .map(|(a, b)| a - b)
        .fold(f64::INFINITY, f64::min);
    let eps_reg = 1e-6 + 2.0 * s1.provenance.max_residual_rms.max(s2.provenance.max_residual_rms);
    let initial_gap = (0..paths.reps()).map(|r| s1.y(r, 0) - s2.y(r, 0)).sum::<f64>() / paths.reps() as f64;
    Ok(ComparisonReport {
        pass: min_margin >= -eps_reg,
        min_margin,
        eps_reg,
        initial_gap,
    })
}

/// Limit paths for `keys` plus their backward solution, for callers that
/// need the coupled limit without an approximation run.
pub fn solve_limit_on_keys(
    model: &ModelSpec,
    law: &LawFlow,
    keys: &[StreamKey],
    reg: &RegressionConfig,
    partners: DriverPartners<'_>,
) -> Result<(PathEnsemble, BsdeSolution)> {
    let paths = simulate_limit_paths(model, law.grid(), law, keys)?;
    let sol = solve_mfbsde(model, law, &paths, reg, partners)?;
    Ok((paths, sol))
}
