//! Forward solvers: the McKean-Vlasov limit, the approximation in which the
//! law is replaced by `N` independent environment copies, and the classical
//! interacting particle system.
//!
//! All three share one Euler-Maruyama step. Mean-field coefficients are
//! averaged with [`MeanAccumulator`], and a coefficient whose
//! [`Interaction`] flag is off is evaluated once at `(x, x)`, so models
//! without partner dependence produce the same bits on every route.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{ClosedForm, Coefficients, Interaction, MeanAccumulator, ModelSpec};
use crate::noise::{brownian_increments, uniform_indices, Role, StreamKey, TimeGrid};
use crate::stats::GaussHermite;

/// States beyond this magnitude abort the run.
pub const DIVERGENCE_BOUND: f64 = 1e8;

/// Sample paths on a grid, stored `[replication][node][coordinate]`, with the
/// Brownian increments that drove them and the key of each driving stream.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PathEnsemble {
    grid: TimeGrid,
    dim: usize,
    reps: usize,
    values: Vec<f64>,
    increments: Vec<f64>,
    keys: Vec<StreamKey>,
}

impl PathEnsemble {
    pub fn new(
        grid: TimeGrid,
        dim: usize,
        values: Vec<f64>,
        increments: Vec<f64>,
        keys: Vec<StreamKey>,
    ) -> Result<Self> {
        let reps = keys.len();
        let nodes = grid.nodes_len();
        if values.len() != reps * nodes * dim || increments.len() != reps * grid.steps() * dim {
            return Err(Error::Shape(format!(
                "path ensemble of {reps} paths with {nodes} nodes in dimension {dim}"
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "path value".into(),
                probe: bad,
            });
        }
        Ok(PathEnsemble {
            grid,
            dim,
            reps,
            values,
            increments,
            keys,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn reps(&self) -> usize {
        self.reps
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn path(&self, r: usize) -> &[f64] {
        let len = self.grid.nodes_len() * self.dim;
        &self.values[r * len..(r + 1) * len]
    }

    #[inline]
    pub fn value(&self, r: usize, i: usize) -> &[f64] {
        let at = (r * self.grid.nodes_len() + i) * self.dim;
        &self.values[at..at + self.dim]
    }

    pub fn increments(&self, r: usize) -> &[f64] {
        let len = self.grid.steps() * self.dim;
        &self.increments[r * len..(r + 1) * len]
    }

    #[inline]
    pub fn increment(&self, r: usize, i: usize) -> &[f64] {
        let at = (r * self.grid.steps() + i) * self.dim;
        &self.increments[at..at + self.dim]
    }

    pub fn key(&self, r: usize) -> &StreamKey {
        &self.keys[r]
    }

    pub fn keys(&self) -> &[StreamKey] {
        &self.keys
    }

    /// Values of coordinate `c` at node `i` across replications.
    pub fn coordinate(&self, i: usize, c: usize) -> Vec<f64> {
        (0..self.reps).map(|r| self.value(r, i)[c]).collect()
    }

    /// Per-coordinate sample mean and (population) variance at node `i`.
    pub fn marginal_moments(&self, i: usize) -> (Vec<f64>, Vec<f64>) {
        let n = self.reps as f64;
        let mut mean = vec![0.0; self.dim];
        for r in 0..self.reps {
            for (m, v) in mean.iter_mut().zip(self.value(r, i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; self.dim];
        for r in 0..self.reps {
            for ((s, v), m) in var.iter_mut().zip(self.value(r, i)).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        var.iter_mut().for_each(|s| *s /= n);
        (mean, var)
    }

    /// Keeps the listed replications, in order.
    pub fn select(&self, rows: &[usize]) -> PathEnsemble {
        let mut values = Vec::new();
        let mut increments = Vec::new();
        let mut keys = Vec::new();
        for &r in rows {
            values.extend_from_slice(self.path(r));
            increments.extend_from_slice(self.increments(r));
            keys.push(self.keys[r].clone());
        }
        PathEnsemble {
            grid: self.grid,
            dim: self.dim,
            reps: rows.len(),
            values,
            increments,
            keys,
        }
    }
}

/// Gaussian marginal law `N(mean_i, sd_i^2 I)` on the grid, from a closed form.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GaussianLaw {
    pub grid: TimeGrid,
    pub closed_form: ClosedForm,
    /// Node-major means.
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl GaussianLaw {
    /// Law of the Euler-discretized limit: grid mean recursion, variance `s^2 t`.
    pub fn from_closed_form(cf: &ClosedForm, grid: &TimeGrid) -> Self {
        GaussianLaw {
            grid: *grid,
            closed_form: cf.clone(),
            mean: cf.grid_mean(grid),
            sd: grid.times().iter().map(|&t| cf.std_dev(t)).collect(),
        }
    }

    fn node_mean(&self, i: usize) -> &[f64] {
        let d = self.closed_form.dim();
        &self.mean[i * d..(i + 1) * d]
    }
}

/// Representation of the path law of the limit process.
#[derive(Clone, Debug)]
pub enum LawFlow {
    /// Independent sample paths.
    Cloud(Arc<PathEnsemble>),
    ClosedForm(Arc<GaussianLaw>),
}

impl LawFlow {
    pub fn grid(&self) -> &TimeGrid {
        match self {
            LawFlow::Cloud(c) => c.grid(),
            LawFlow::ClosedForm(g) => &g.grid,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            LawFlow::Cloud(c) => c.dim(),
            LawFlow::ClosedForm(g) => g.closed_form.dim(),
        }
    }

    pub fn cloud(&self) -> Option<&Arc<PathEnsemble>> {
        match self {
            LawFlow::Cloud(c) => Some(c),
            LawFlow::ClosedForm(_) => None,
        }
    }

    /// Per-coordinate mean and variance of `X_{t_i}`.
    pub fn marginal_moments(&self, i: usize) -> (Vec<f64>, Vec<f64>) {
        match self {
            LawFlow::Cloud(c) => c.marginal_moments(i),
            LawFlow::ClosedForm(g) => {
                let d = g.closed_form.dim();
                (g.node_mean(i).to_vec(), vec![g.sd[i] * g.sd[i]; d])
            }
        }
    }

    /// Materializes `count` paths of the law. A cloud is resampled by
    /// uniform indices; a closed form is sampled exactly on the grid. With
    /// `antithetic`, consecutive pairs use `(W, -W)` and `(i, i ^ 1)`.
    pub fn sample_paths(&self, key: &StreamKey, count: usize, antithetic: bool) -> Result<PathEnsemble> {
        match self {
            LawFlow::Cloud(c) => {
                let idx = uniform_indices(key, count, c.reps());
                let rows: Vec<usize> = idx
                    .iter()
                    .enumerate()
                    .map(|(k, &i)| {
                        if antithetic && k % 2 == 1 {
                            (idx[k - 1] ^ 1).min(c.reps() as u32 - 1) as usize
                        } else {
                            i as usize
                        }
                    })
                    .collect();
                Ok(c.select(&rows))
            }
            LawFlow::ClosedForm(g) => {
                let cf = &g.closed_form;
                let d = cf.dim();
                let grid = g.grid;
                let rows: Vec<(Vec<f64>, Vec<f64>, StreamKey)> = (0..count)
                    .into_par_iter()
                    .map(|k| {
                        let pair = if antithetic { k / 2 } else { k };
                        let member = key.derive(Role::Cloud, pair as u64);
                        let mut inc = brownian_increments(&member, &grid, d);
                        if antithetic && k % 2 == 1 {
                            inc.iter_mut().for_each(|v| *v = -*v);
                        }
                        let w = crate::noise::brownian_path(&inc, d);
                        let path: Vec<f64> = g
                            .mean
                            .iter()
                            .zip(&w)
                            .map(|(m, w)| m + cf.s * w)
                            .collect();
                        (path, inc, member)
                    })
                    .collect();
                assemble(grid, d, rows)
            }
        }
    }
}

fn assemble(grid: TimeGrid, dim: usize, rows: Vec<(Vec<f64>, Vec<f64>, StreamKey)>) -> Result<PathEnsemble> {
    let mut values = Vec::with_capacity(rows.len() * grid.nodes_len() * dim);
    let mut increments = Vec::with_capacity(rows.len() * grid.steps() * dim);
    let mut keys = Vec::with_capacity(rows.len());
    for (v, inc, k) in rows {
        values.extend(v);
        increments.extend(inc);
        keys.push(k);
    }
    PathEnsemble::new(grid, dim, values, increments, keys)
}

/// Quadrature order per dimension for Gaussian-law expectations.
fn quadrature_order(dim: usize) -> usize {
    let mut q = 20usize;
    while q > 2 && q.pow(dim as u32) > 4096 {
        q -= 1;
    }
    q
}

/// One Euler-Maruyama step with mean-field coefficient averaging.
pub(crate) struct Stepper<'a> {
    coeffs: &'a dyn Coefficients,
    inter: Interaction,
    dim: usize,
    h: f64,
    drift: Vec<f64>,
    diff: Vec<f64>,
    buf_b: Vec<f64>,
    buf_s: Vec<f64>,
    acc_b: MeanAccumulator,
    acc_s: MeanAccumulator,
}

impl<'a> Stepper<'a> {
    pub(crate) fn new(model: &'a ModelSpec, grid: &TimeGrid) -> Self {
        let d = model.dim;
        Stepper {
            coeffs: model.coefficients.as_ref(),
            inter: model.interaction(),
            dim: d,
            h: grid.step_size(),
            drift: vec![0.0; d],
            diff: vec![0.0; d * d],
            buf_b: vec![0.0; d],
            buf_s: vec![0.0; d * d],
            acc_b: MeanAccumulator::new(d),
            acc_s: MeanAccumulator::new(d * d),
        }
    }

    /// Coefficients at `(x, x)`.
    pub(crate) fn self_interaction(&mut self, x: &[f64]) {
        self.coeffs.drift(x, x, &mut self.drift);
        self.coeffs.diffusion(x, x, &mut self.diff);
    }

    /// Averages over the partner states, in iteration order.
    pub(crate) fn average<'p>(&mut self, x: &[f64], partners: impl Iterator<Item = &'p [f64]> + Clone) {
        if self.inter.drift {
            self.acc_b.reset();
            for p in partners.clone() {
                self.coeffs.drift(x, p, &mut self.buf_b);
                self.acc_b.push(&self.buf_b);
            }
            self.acc_b.finish(&mut self.drift);
        } else {
            self.coeffs.drift(x, x, &mut self.drift);
        }
        if self.inter.diffusion {
            self.acc_s.reset();
            for p in partners {
                self.coeffs.diffusion(x, p, &mut self.buf_s);
                self.acc_s.push(&self.buf_s);
            }
            self.acc_s.finish(&mut self.diff);
        } else {
            self.coeffs.diffusion(x, x, &mut self.diff);
        }
    }

    /// Weighted average over quadrature points (point-major).
    pub(crate) fn weighted(&mut self, x: &[f64], points: &[f64], weights: &[f64]) {
        let d = self.dim;
        if self.inter.drift {
            self.acc_b.reset();
            for (p, w) in points.chunks(d).zip(weights) {
                self.coeffs.drift(x, p, &mut self.buf_b);
                self.acc_b.push_weighted(&self.buf_b, *w);
            }
            self.acc_b.finish(&mut self.drift);
        } else {
            self.coeffs.drift(x, x, &mut self.drift);
        }
        if self.inter.diffusion {
            self.acc_s.reset();
            for (p, w) in points.chunks(d).zip(weights) {
                self.coeffs.diffusion(x, p, &mut self.buf_s);
                self.acc_s.push_weighted(&self.buf_s, *w);
            }
            self.acc_s.finish(&mut self.diff);
        } else {
            self.coeffs.diffusion(x, x, &mut self.diff);
        }
    }

    /// `out = x + drift h + sigma dw` with the coefficients set by the last
    /// averaging call.
    pub(crate) fn advance(&self, x: &[f64], dw: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for c in 0..d {
            let mut v = x[c] + self.drift[c] * self.h;
            for j in 0..d {
                v += self.diff[c * d + j] * dw[j];
            }
            out[c] = v;
        }
    }
}

fn check_state(x: &[f64], step: usize, rep: usize) -> Result<()> {
    let mag = x.iter().fold(0.0f64, |m, v| if v.is_finite() { m.max(v.abs()) } else { f64::INFINITY });
    if mag > DIVERGENCE_BOUND {
        return Err(Error::Divergence {
            step,
            rep,
            magnitude: mag,
        });
    }
    Ok(())
}

/// Mean-field source for single-path Euler runs.
enum Source<'s> {
    SelfOnly,
    Partners { cloud: &'s PathEnsemble, indices: &'s [u32] },
    Law(&'s LawFlow, Option<&'s (Vec<f64>, Vec<f64>)>),
}

fn set_coefficients(st: &mut Stepper<'_>, source: &Source<'_>, x: &[f64], i: usize, quad: &mut Vec<f64>) {
    let d = st.dim;
    match source {
        Source::SelfOnly => st.self_interaction(x),
        Source::Partners { cloud, indices } => st.average(x, indices.iter().map(|&k| cloud.value(k as usize, i))),
        Source::Law(LawFlow::Cloud(c), _) => st.average(x, (0..c.reps()).map(|k| c.value(k, i))),
        Source::Law(LawFlow::ClosedForm(g), rule) => {
            let (pts, w) = rule.expect("quadrature rule");
            quad.clear();
            let m = g.node_mean(i);
            for p in pts.chunks(d) {
                for c in 0..d {
                    quad.push(m[c] + g.sd[i] * p[c]);
                }
            }
            st.weighted(x, quad, w)
        }
    }
}

fn simulate_path(
    model: &ModelSpec,
    grid: &TimeGrid,
    increments: &[f64],
    source: &Source<'_>,
    rep: usize,
) -> Result<Vec<f64>> {
    let d = model.dim;
    let mut st = Stepper::new(model, grid);
    let mut path = vec![0.0; grid.nodes_len() * d];
    path[..d].copy_from_slice(&model.x0);
    let mut quad = Vec::new();
    for i in 0..grid.steps() {
        let (head, tail) = path.split_at_mut((i + 1) * d);
        let x = &head[i * d..];
        set_coefficients(&mut st, source, x, i, &mut quad);
        st.advance(x, &increments[i * d..(i + 1) * d], &mut tail[..d]);
        check_state(&tail[..d], i + 1, rep)?;
    }
    Ok(path)
}

/// Rebuilds the Brownian increments of paths of the limit equation by
/// inverting each Euler step with the mean-field terms of `law`. `values`
/// is laid out `[replication][node][coordinate]`. The returned keys are
/// labels only; they did not generate the paths.
pub fn recover_increments(model: &ModelSpec, law: &LawFlow, values: Vec<f64>) -> Result<PathEnsemble> {
    let grid = *law.grid();
    let d = model.dim;
    let len = grid.nodes_len() * d;
    if len == 0 || values.len() % len != 0 {
        return Err(Error::Shape(format!("{} values do not form paths of {len}", values.len())));
    }
    let reps = values.len() / len;
    let rule = quadrature_rule(law);
    let source = Source::Law(law, rule.as_ref());
    let h = grid.step_size();
    let incs = (0..reps)
        .into_par_iter()
        .map(|r| {
            let path = &values[r * len..(r + 1) * len];
            let mut st = Stepper::new(model, &grid);
            let mut quad = Vec::new();
            let mut inc = Vec::with_capacity(grid.steps() * d);
            for i in 0..grid.steps() {
                let x = &path[i * d..(i + 1) * d];
                set_coefficients(&mut st, &source, x, i, &mut quad);
                let rhs = nalgebra::DVector::from_fn(d, |c, _| path[(i + 1) * d + c] - x[c] - st.drift[c] * h);
                let sigma = nalgebra::DMatrix::from_row_slice(d, d, &st.diff);
                let dw = sigma.lu().solve(&rhs).ok_or_else(|| {
                    Error::InvalidParameter(format!("singular diffusion at path {r}, step {i}"))
                })?;
                inc.extend(dw.iter());
            }
            Ok(inc)
        })
        .collect::<Result<Vec<_>>>()?;
    let root = StreamKey::root(0);
    let keys = (0..reps).map(|r| root.derive(Role::Replication, r as u64)).collect();
    PathEnsemble::new(grid, d, values, incs.concat(), keys)
}

/// Plain Euler solution with coefficients evaluated at `(x, x)`.
pub fn euler_plain(model: &ModelSpec, grid: &TimeGrid, increments: &[f64]) -> Result<Vec<f64>> {
    simulate_path(model, grid, increments, &Source::SelfOnly, 0)
}

/// Points and weights representing the law at node `i`: the Gauss-Hermite
/// rule for a closed form, the first `sample` cloud members otherwise.
/// Points are point-major.
pub fn law_rule_points(law: &LawFlow, i: usize, sample: usize) -> (Vec<f64>, Vec<f64>) {
    match law {
        LawFlow::ClosedForm(g) => {
            let d = g.closed_form.dim();
            let (q, w) = quadrature_rule(law).expect("closed form has a rule");
            let mean = &g.mean[i * d..(i + 1) * d];
            let pts = q.chunks(d).flat_map(|p| (0..d).map(move |c| mean[c] + g.sd[i] * p[c])).collect();
            (pts, w)
        }
        LawFlow::Cloud(cloud) => {
            let k = sample.clamp(1, cloud.reps());
            let pts = (0..k).flat_map(|m| cloud.value(m, i).iter().copied()).collect();
            (pts, vec![1.0; k])
        }
    }
}

fn quadrature_rule(law: &LawFlow) -> Option<(Vec<f64>, Vec<f64>)> {
    match law {
        LawFlow::ClosedForm(g) => Some(GaussHermite::new(quadrature_order(g.closed_form.dim())).tensor(g.closed_form.dim())),
        LawFlow::Cloud(_) => None,
    }
}

/// Euler paths of the limit equation whose mean-field terms are taken from
/// `law`, one per key. These are the limit paths coupled to approximation
/// paths driven by the same keys.
pub fn simulate_limit_paths(
    model: &ModelSpec,
    grid: &TimeGrid,
    law: &LawFlow,
    keys: &[StreamKey],
) -> Result<PathEnsemble> {
    let d = model.dim;
    let rule = quadrature_rule(law);
    let source = Source::Law(law, rule.as_ref());
    let rows = keys
        .par_iter()
        .enumerate()
        .map(|(r, key)| {
            let inc = brownian_increments(key, grid, d);
            let path = simulate_path(model, grid, &inc, &source, r)?;
            Ok((path, inc, key.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    assemble(*grid, d, rows)
}

/// Interacting system of `keys.len()` particles, each averaging over all
/// current states. With `antithetic`, odd particles reuse the previous
/// particle's key with negated increments.
fn interacting_system(
    model: &ModelSpec,
    grid: &TimeGrid,
    keys: &[StreamKey],
    antithetic: bool,
) -> Result<PathEnsemble> {
    let d = model.dim;
    let n = keys.len();
    let nodes = grid.nodes_len();
    let incs: Vec<Vec<f64>> = keys
        .par_iter()
        .enumerate()
        .map(|(p, key)| {
            let mut inc = brownian_increments(key, grid, d);
            if antithetic && p % 2 == 1 {
                inc.iter_mut().for_each(|v| *v = -*v);
            }
            inc
        })
        .collect();
    // node-major state during the sweep
    let mut states = vec![0.0; nodes * n * d];
    for p in 0..n {
        states[p * d..(p + 1) * d].copy_from_slice(&model.x0);
    }
    for i in 0..grid.steps() {
        let (done, rest) = states.split_at_mut((i + 1) * n * d);
        let cur = &done[i * n * d..];
        let next = &mut rest[..n * d];
        next.par_chunks_mut(d)
            .enumerate()
            .map(|(p, out)| {
                let mut st = Stepper::new(model, grid);
                let x = &cur[p * d..(p + 1) * d];
                st.average(x, cur.chunks(d));
                st.advance(x, &incs[p][i * d..(i + 1) * d], out);
                check_state(out, i + 1, p)
            })
            .collect::<Result<Vec<()>>>()?;
    }
    let mut values = vec![0.0; n * nodes * d];
    for i in 0..nodes {
        for p in 0..n {
            let src = (i * n + p) * d;
            let dst = (p * nodes + i) * d;
            values[dst..dst + d].copy_from_slice(&states[src..src + d]);
        }
    }
    let stored_keys = keys.to_vec();
    PathEnsemble::new(*grid, d, values, incs.concat(), stored_keys)
}

/// Law of the limit process: the closed form when the model has one,
/// otherwise an interacting cloud of `cloud_size` particles whose
/// coefficients average over the whole cloud.
pub fn solve_limit_forward(
    model: &ModelSpec,
    grid: &TimeGrid,
    cloud_size: usize,
    key: &StreamKey,
    antithetic: bool,
) -> Result<LawFlow> {
    if let Some(cf) = &model.closed_form {
        return Ok(LawFlow::ClosedForm(Arc::new(GaussianLaw::from_closed_form(cf, grid))));
    }
    if cloud_size < 2 {
        return Err(Error::TooSmall {
            what: "law cloud".into(),
            needed: 2,
            got: cloud_size,
        });
    }
    let keys: Vec<StreamKey> = (0..cloud_size)
        .map(|m| {
            let pair = if antithetic { m / 2 } else { m };
            key.derive(Role::Cloud, pair as u64)
        })
        .collect();
    let cloud = interacting_system(model, grid, &keys, antithetic)?;
    Ok(LawFlow::Cloud(Arc::new(cloud)))
}

/// Interacting particle system with `n` particles; particle `i` is driven by
/// `key / Particle:i`.
pub fn solve_classical_system(model: &ModelSpec, n: usize, grid: &TimeGrid, key: &StreamKey) -> Result<PathEnsemble> {
    if n == 0 {
        return Err(Error::InvalidParameter("particle count must be positive".into()));
    }
    let keys: Vec<StreamKey> = (0..n).map(|i| key.derive(Role::Particle, i as u64)).collect();
    interacting_system(model, grid, &keys, false)
}

/// Picard-on-law settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PicardConfig {
    pub max_iters: usize,
    pub tol: f64,
    /// Size of the environment cloud representing each law iterate.
    pub cloud_size: usize,
    /// Pair cloud members as `(W, -W)` with mirrored environment draws.
    pub antithetic: bool,
}

impl Default for PicardConfig {
    fn default() -> Self {
        PicardConfig {
            max_iters: 5,
            tol: 1e-3,
            cloud_size: 4096,
            antithetic: true,
        }
    }
}

/// `N` environment copies of one replication: indices into a cloud of the
/// approximating law.
#[derive(Clone, Debug)]
pub struct EnvironmentDraw {
    pub cloud: Arc<PathEnsemble>,
    pub indices: Vec<u32>,
    pub key: StreamKey,
}

impl EnvironmentDraw {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn state(&self, k: usize, i: usize) -> &[f64] {
        self.cloud.value(self.indices[k] as usize, i)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ForwardProvenance {
    pub n: usize,
    pub picard_levels: usize,
    pub converged: bool,
    /// Law distance after each level.
    pub distances: Vec<f64>,
    pub cloud_size: usize,
    pub w_key: StreamKey,
    pub env_key: StreamKey,
}

/// Output of [`solve_sde_n`].
#[derive(Clone, Debug)]
pub struct ApproximationRun {
    pub paths: PathEnsemble,
    pub environments: Vec<EnvironmentDraw>,
    /// Final cloud of the approximating law.
    pub cloud: Arc<PathEnsemble>,
    pub provenance: ForwardProvenance,
}

/// Max over nodes of `sum_c |mean difference| + |variance difference|`.
pub fn law_distance(a: &PathEnsemble, b: &PathEnsemble) -> f64 {
    (0..a.grid().nodes_len())
        .map(|i| {
            let (ma, va) = a.marginal_moments(i);
            let (mb, vb) = b.marginal_moments(i);
            ma.iter()
                .zip(&mb)
                .zip(va.iter().zip(&vb))
                .map(|((x, y), (u, v))| (x - y).abs() + (u - v).abs())
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

fn check_disjoint(w_key: &StreamKey, env_key: &StreamKey) -> Result<()> {
    if w_key.is_prefix_of(env_key) || env_key.is_prefix_of(w_key) {
        return Err(Error::InvalidParameter(format!(
            "environment key {env_key} overlaps driving key {w_key}"
        )));
    }
    Ok(())
}

/// Paths of the approximating equation for one environment draw, one per
/// driving key.
pub fn simulate_with_environment(
    model: &ModelSpec,
    grid: &TimeGrid,
    env: &EnvironmentDraw,
    w_keys: &[StreamKey],
) -> Result<PathEnsemble> {
    let d = model.dim;
    let source = Source::Partners {
        cloud: &env.cloud,
        indices: &env.indices,
    };
    let rows = w_keys
        .iter()
        .enumerate()
        .map(|(r, key)| {
            let inc = brownian_increments(key, grid, d);
            let path = simulate_path(model, grid, &inc, &source, r)?;
            Ok((path, inc, key.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    assemble(*grid, d, rows)
}

/// Solves the approximating equation
/// `dX = (1/N) sum_k b(X, Z^k) dt + (1/N) sum_k sigma(X, Z^k) dW`
/// where `Z^1..Z^N` are independent copies of `X` itself, independent of `W`.
///
/// The law of `X` is found by Picard iteration on clouds of
/// `picard.cloud_size` paths, starting from `init_law`. Cloud member `k`
/// keeps the driving key `env_key / Cloud:k` and environment indices
/// `env_key / Cloud:k / Environment:0` across levels. Output replication
/// `r` is driven by `w_key / Replication:r` and draws its environment with
/// `env_key / Replication:r` from the final cloud.
#[allow(clippy::too_many_arguments)]
pub fn solve_sde_n(
    model: &ModelSpec,
    n: usize,
    grid: &TimeGrid,
    init_law: &LawFlow,
    picard: &PicardConfig,
    w_key: &StreamKey,
    env_key: &StreamKey,
    reps: usize,
) -> Result<ApproximationRun> {
    if n == 0 {
        return Err(Error::InvalidParameter("N must be at least 1".into()));
    }
    if picard.max_iters == 0 {
        return Err(Error::InvalidParameter("Picard needs at least one level".into()));
    }
    if picard.cloud_size < 2 {
        return Err(Error::TooSmall {
            what: "environment cloud".into(),
            needed: 2,
            got: picard.cloud_size,
        });
    }
    check_disjoint(w_key, env_key)?;
    let d = model.dim;
    let m = picard.cloud_size;
    let anti = picard.antithetic && m % 2 == 0;

    let mut cloud = Arc::new(init_law.sample_paths(&env_key.derive(Role::Picard, 0), m, anti)?);
    let mut distances = Vec::new();
    let mut converged = !model.interaction().forward();
    let mut levels = 0;

    if !converged {
        let member_keys = member_keys(env_key, m, anti);
        let member_draws = member_draws(&member_keys, n, m, anti);
        for level in 1..=picard.max_iters {
            let prev = cloud.clone();
            let next = Arc::new(simulate_members(model, grid, &prev, &member_keys, &member_draws, anti)?);
            let dist = law_distance(&prev, &next);
            distances.push(dist);
            cloud = next;
            levels = level;
            if dist < picard.tol {
                converged = true;
                break;
            }
        }
    }

    let environments: Vec<EnvironmentDraw> = (0..reps)
        .map(|r| {
            let key = env_key.derive(Role::Replication, r as u64);
            EnvironmentDraw {
                cloud: cloud.clone(),
                indices: uniform_indices(&key, n, m),
                key,
            }
        })
        .collect();
    let rows = (0..reps)
        .into_par_iter()
        .map(|r| {
            let key = w_key.derive(Role::Replication, r as u64);
            let inc = brownian_increments(&key, grid, d);
            let source = Source::Partners {
                cloud: &cloud,
                indices: &environments[r].indices,
            };
            let path = simulate_path(model, grid, &inc, &source, r)?;
            Ok((path, inc, key))
        })
        .collect::<Result<Vec<_>>>()?;
    let paths = assemble(*grid, d, rows)?;

    Ok(ApproximationRun {
        paths,
        environments,
        cloud,
        provenance: ForwardProvenance {
            n,
            picard_levels: levels,
            converged,
            distances,
            cloud_size: m,
            w_key: w_key.clone(),
            env_key: env_key.clone(),
        },
    })
}

fn member_keys(key: &StreamKey, count: usize, anti: bool) -> Vec<StreamKey> {
    (0..count)
        .map(|k| key.derive(Role::Cloud, (if anti { k / 2 } else { k }) as u64))
        .collect()
}

/// Environment indices of each member; odd members of an antithetic pair
/// use the partners of their even sibling's partners.
fn member_draws(keys: &[StreamKey], n: usize, cloud_size: usize, anti: bool) -> Vec<Vec<u32>> {
    keys.par_iter()
        .enumerate()
        .map(|(k, key)| {
            let base = uniform_indices(&key.derive(Role::Environment, 0), n, cloud_size);
            if anti && k % 2 == 1 {
                base.iter().map(|i| i ^ 1).collect()
            } else {
                base
            }
        })
        .collect()
}

fn simulate_members(
    model: &ModelSpec,
    grid: &TimeGrid,
    cloud: &Arc<PathEnsemble>,
    keys: &[StreamKey],
    draws: &[Vec<u32>],
    anti: bool,
) -> Result<PathEnsemble> {
    let d = model.dim;
    let rows = (0..keys.len())
        .into_par_iter()
        .map(|k| {
            let mut inc = brownian_increments(&keys[k], grid, d);
            if anti && k % 2 == 1 {
                inc.iter_mut().for_each(|v| *v = -*v);
            }
            let source = Source::Partners {
                cloud,
                indices: &draws[k],
            };
            let path = simulate_path(model, grid, &inc, &source, k)?;
            Ok((path, inc, keys[k].clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    assemble(*grid, d, rows)
}

/// Fresh paths of the approximating law: each member draws its own `N`
/// environment copies from `cloud`. Members `key / Cloud:k`; antithetic
/// pairs when `antithetic` and `count` is even.
pub fn sample_approximating_law(
    model: &ModelSpec,
    grid: &TimeGrid,
    cloud: &Arc<PathEnsemble>,
    n: usize,
    key: &StreamKey,
    count: usize,
    antithetic: bool,
) -> Result<PathEnsemble> {
    if n == 0 || count == 0 {
        return Err(Error::InvalidParameter("N and the member count must be positive".into()));
    }
    let anti = antithetic && count % 2 == 0 && cloud.reps() % 2 == 0;
    let keys = member_keys(key, count, anti);
    let draws = member_draws(&keys, n, cloud.reps(), anti);
    simulate_members(model, grid, cloud, &keys, &draws, anti)
}

/// Checks that no environment key of a run lies in the subtree of a driving
/// key or vice versa. Returns the offending pairs.
pub fn audit_keys(run: &ApproximationRun) -> Vec<(StreamKey, StreamKey)> {
    let mut bad = Vec::new();
    let mut env_keys: Vec<&StreamKey> = run.environments.iter().map(|e| &e.key).collect();
    env_keys.extend(run.cloud.keys());
    for w in run.paths.keys() {
        for e in &env_keys {
            if w.is_prefix_of(e) || e.is_prefix_of(w) {
                bad.push((w.clone(), (*e).clone()));
            }
        }
    }
    bad
}

/// Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let m = crate::stats::moments(xs);
        Estimate {
            value: m.mean,
            stderr: if xs.len() > 1 { m.mean_se } else { f64::NAN },
        }
    }
}

/// Squared sup-norm distance over grid nodes between two paths.
pub fn sup_squared_distance(a: &[f64], b: &[f64], dim: usize) -> f64 {
    a.chunks(dim)
        .zip(b.chunks(dim))
        .map(|(u, v)| u.iter().zip(v).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Coupled forward error of one approximation run.
#[derive(Clone, Debug)]
pub struct ForwardError {
    pub estimate: Estimate,
    pub run: ApproximationRun,
    pub limit: PathEnsemble,
}

/// Estimates `E[sup_i |X^N_{t_i} - X_{t_i}|^2]` with the limit path driven
/// by the same Brownian stream as each approximation path. The limit is the
/// Euler scheme of the limit equation with mean-field terms from the closed
/// form.
#[allow(clippy::too_many_arguments)]
pub fn forward_error(
    model: &ModelSpec,
    n: usize,
    grid: &TimeGrid,
    reps: usize,
    picard: &PicardConfig,
    w_key: &StreamKey,
    env_key: &StreamKey,
) -> Result<ForwardError> {
    let cf = model
        .closed_form
        .as_ref()
        .ok_or_else(|| Error::MissingClosedForm(model.name.clone()))?;
    if reps < 2 {
        return Err(Error::TooSmall {
            what: "replications".into(),
            needed: 2,
            got: reps,
        });
    }
    let law = LawFlow::ClosedForm(Arc::new(GaussianLaw::from_closed_form(cf, grid)));
    let run = solve_sde_n(model, n, grid, &law, picard, w_key, env_key, reps)?;
    let limit = simulate_limit_paths(model, grid, &law, run.paths.keys())?;
    let errs: Vec<f64> = (0..reps)
        .map(|r| sup_squared_distance(run.paths.path(r), limit.path(r), model.dim))
        .collect();
    Ok(ForwardError {
        estimate: Estimate::from_samples(&errs),
        run,
        limit,
    })
}
