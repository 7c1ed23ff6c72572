//! Fluctuation fields of the approximation, the Gaussian limit field, the
//! linear limit system and the statistics comparing scaled errors with it.
//!
//! The field has four blocks: drift `xi1_t(x)` in `R^d`, diffusion
//! `xi2_t(x)` in `R^{d x d}`, terminal `xi3(x)` and driver `xi4_t(lambda)`.
//! Its covariance is the covariance of the centered coefficients
//! `coeff(probe, X)` under the limit law, estimated on a cloud of `M` joint
//! path samples. Given that cloud, the field
//! `xi(p) = sum_m eta_m (g_m(p) - mean g(p)) / sqrt(M - 1)` with
//! `eta ~ N(0, I_M)` has exactly the cloud covariance at every point, which
//! is how fields are sampled along a path.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Arc;

use crate::backward::{
    backward_sweep, check_rows, solve_mfbsde, BsdeProvenance, BsdeSolution, CoupledBsde, DriverPartners,
    LambdaCloud, RegressionConfig, Sweep,
};
use crate::error::{Error, Result};
use crate::forward::{law_rule_points, ApproximationRun, Estimate, LawFlow, PathEnsemble};
use crate::model::{Coefficients, Interaction, Lambda, MeanAccumulator, ModelSpec, Partner};
use crate::noise::{standard_normals, Role, StreamKey, TimeGrid};
use crate::stats::{ks_two_sample, moments, KsResult};

/// Jitter multipliers of the maximal diagonal tried in order.
pub const JITTER_LADDER: [f64; 5] = [0.0, 1e-12, 1e-10, 1e-8, 1e-6];
/// Smallest cloud accepted for covariance estimates.
pub const MIN_CLOUD: usize = 100;
/// Smallest sample accepted by [`clt_compare`].
pub const MIN_CLT_SAMPLE: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FieldBlock {
    Drift,
    Diffusion,
    Terminal,
    Driver,
}

impl FieldBlock {
    pub fn number(self) -> u8 {
        match self {
            FieldBlock::Drift => 1,
            FieldBlock::Diffusion => 2,
            FieldBlock::Terminal => 3,
            FieldBlock::Driver => 4,
        }
    }

    fn interacts(self, inter: Interaction) -> bool {
        match self {
            FieldBlock::Drift => inter.drift,
            FieldBlock::Diffusion => inter.diffusion,
            FieldBlock::Terminal => inter.terminal,
            FieldBlock::Driver => inter.driver,
        }
    }
}

/// Own state `(x, y, z)` at which the driver block is probed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaProbe {
    pub x: Vec<f64>,
    pub y: f64,
    pub z: Vec<f64>,
}

/// One flattened lattice coordinate. `probe` indexes the space probes for
/// blocks 1 to 3 and the `lambda` probes for block 4.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FieldEntry {
    pub block: FieldBlock,
    pub component: usize,
    pub node: usize,
    pub probe: usize,
}

/// Space-time evaluation points of the field, flattened block by block:
/// drift `(node, probe, component)`, diffusion `(node, probe, component)`,
/// terminal `(probe)` at the last node, driver `(node, lambda probe)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FieldLattice {
    pub dim: usize,
    pub nodes: Vec<usize>,
    pub x_probes: Vec<Vec<f64>>,
    pub lambda_probes: Vec<LambdaProbe>,
    pub entries: Vec<FieldEntry>,
    #[serde(skip)]
    index: HashMap<FieldEntry, usize>,
}

impl FieldLattice {
    pub fn new(
        dim: usize,
        grid: &TimeGrid,
        nodes: Vec<usize>,
        x_probes: Vec<Vec<f64>>,
        lambda_probes: Vec<LambdaProbe>,
    ) -> Result<Self> {
        if let Some(&bad) = nodes.iter().find(|&&i| i > grid.steps()) {
            return Err(Error::InvalidParameter(format!("lattice node {bad} beyond the grid")));
        }
        let mut sorted = nodes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != nodes.len() {
            return Err(Error::InvalidParameter("lattice nodes repeat".into()));
        }
        for p in &x_probes {
            if p.len() != dim || p.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!("bad space probe {p:?}")));
            }
        }
        for p in &lambda_probes {
            if p.x.len() != dim || p.z.len() != dim || !p.y.is_finite() || p.x.iter().chain(&p.z).any(|v| !v.is_finite())
            {
                return Err(Error::InvalidParameter(format!("bad driver probe {p:?}")));
            }
        }
        for (a, p) in x_probes.iter().enumerate() {
            if x_probes[..a].contains(p) {
                return Err(Error::InvalidParameter(format!("space probe {p:?} repeats")));
            }
        }
        for (a, p) in lambda_probes.iter().enumerate() {
            if lambda_probes[..a].contains(p) {
                return Err(Error::InvalidParameter(format!("driver probe {p:?} repeats")));
            }
        }
        let mut entries = Vec::new();
        for (block, width) in [(FieldBlock::Drift, dim), (FieldBlock::Diffusion, dim * dim)] {
            for &node in &nodes {
                for probe in 0..x_probes.len() {
                    for component in 0..width {
                        entries.push(FieldEntry {
                            block,
                            component,
                            node,
                            probe,
                        });
                    }
                }
            }
        }
        for probe in 0..x_probes.len() {
            entries.push(FieldEntry {
                block: FieldBlock::Terminal,
                component: 0,
                node: grid.steps(),
                probe,
            });
        }
        for &node in &nodes {
            for probe in 0..lambda_probes.len() {
                entries.push(FieldEntry {
                    block: FieldBlock::Driver,
                    component: 0,
                    node,
                    probe,
                });
            }
        }
        let index = entries.iter().enumerate().map(|(i, e)| (*e, i)).collect();
        Ok(FieldLattice {
            dim,
            nodes,
            x_probes,
            lambda_probes,
            entries,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, entry: &FieldEntry) -> Option<usize> {
        self.index.get(entry).copied()
    }

    /// Keeps only the entries of the given blocks.
    pub fn restricted(&self, blocks: &[FieldBlock]) -> FieldLattice {
        let entries: Vec<FieldEntry> = self.entries.iter().filter(|e| blocks.contains(&e.block)).copied().collect();
        let index = entries.iter().enumerate().map(|(i, e)| (*e, i)).collect();
        FieldLattice {
            dim: self.dim,
            nodes: self.nodes.clone(),
            x_probes: self.x_probes.clone(),
            lambda_probes: self.lambda_probes.clone(),
            entries,
            index,
        }
    }
}

/// Joint path samples defining the field law: `X` paths and, for the driver
/// block, the `Y` values on them (`[member][node]`).
#[derive(Clone, Debug)]
pub struct FieldSource {
    pub x: Arc<PathEnsemble>,
    pub y: Option<Arc<Vec<f64>>>,
}

impl FieldSource {
    pub fn from_paths(x: Arc<PathEnsemble>) -> Self {
        FieldSource { x, y: None }
    }

    pub fn from_lambda(cloud: &LambdaCloud) -> Self {
        FieldSource {
            x: cloud.x.clone(),
            y: Some(cloud.y.clone()),
        }
    }

    pub fn members(&self) -> usize {
        self.x.reps()
    }

    fn y(&self, m: usize, i: usize) -> f64 {
        let y = self.y.as_ref().expect("driver block needs Y values");
        y[m * self.x.grid().nodes_len() + i]
    }

    fn lambda_cloud(&self) -> Option<LambdaCloud> {
        self.y.as_ref().map(|y| LambdaCloud {
            x: self.x.clone(),
            y: y.clone(),
        })
    }
}

/// Evaluation point of one field coordinate.
#[derive(Clone, Copy)]
enum Point<'a> {
    X(&'a [f64]),
    Lambda(Lambda<'a>),
}

fn lattice_point<'a>(lattice: &'a FieldLattice, e: &FieldEntry) -> Point<'a> {
    match e.block {
        FieldBlock::Driver => {
            let p = &lattice.lambda_probes[e.probe];
            Point::Lambda(Lambda {
                x: &p.x,
                y: p.y,
                z: &p.z,
            })
        }
        _ => Point::X(&lattice.x_probes[e.probe]),
    }
}

/// `coeff(point, partner)` for one block component. `buf` holds `d * d`.
fn evaluate(
    c: &dyn Coefficients,
    block: FieldBlock,
    component: usize,
    point: Point<'_>,
    px: &[f64],
    py: f64,
    buf: &mut [f64],
) -> f64 {
    let d = px.len();
    match (block, point) {
        (FieldBlock::Drift, Point::X(x)) => {
            c.drift(x, px, &mut buf[..d]);
            buf[component]
        }
        (FieldBlock::Diffusion, Point::X(x)) => {
            c.diffusion(x, px, &mut buf[..d * d]);
            buf[component]
        }
        (FieldBlock::Terminal, Point::X(x)) => c.terminal(x, px),
        (FieldBlock::Driver, Point::Lambda(lam)) => c.driver(lam, Partner { x: px, y: py }),
        _ => unreachable!("block and point kind disagree"),
    }
}

fn check_source(model: &ModelSpec, source: &FieldSource, needs_y: bool) -> Result<()> {
    if source.members() < MIN_CLOUD {
        return Err(Error::TooSmall {
            what: "field cloud".into(),
            needed: MIN_CLOUD,
            got: source.members(),
        });
    }
    if source.x.dim() != model.dim {
        return Err(Error::Shape(format!(
            "field cloud has dimension {}, model {}",
            source.x.dim(),
            model.dim
        )));
    }
    if needs_y && model.interaction().driver && source.y.is_none() {
        return Err(Error::Missing("Y values on the field cloud for the driver block".into()));
    }
    Ok(())
}

/// Centered evaluations `g_m(p) - mean g(p)`, one row per lattice entry.
/// Rows of blocks that ignore the partner are exactly zero.
fn centered_rows(model: &ModelSpec, source: &FieldSource, lattice: &FieldLattice) -> Vec<Vec<f64>> {
    let c = model.coefficients.as_ref();
    let inter = model.interaction();
    let m = source.members();
    let d = model.dim;
    lattice
        .entries
        .par_iter()
        .map(|e| {
            if !e.block.interacts(inter) {
                return vec![0.0; m];
            }
            let point = lattice_point(lattice, e);
            let mut buf = vec![0.0; d * d];
            let mut g: Vec<f64> = (0..m)
                .map(|k| {
                    let py = if e.block == FieldBlock::Driver { source.y(k, e.node) } else { 0.0 };
                    evaluate(c, e.block, e.component, point, source.x.value(k, e.node), py, &mut buf)
                })
                .collect();
            let mean = g.iter().sum::<f64>() / m as f64;
            g.iter_mut().for_each(|v| *v -= mean);
            g
        })
        .collect()
}

/// Covariance over flattened lattice coordinates with per-entry standard
/// errors and block tags.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CovarianceMatrix {
    pub dim: usize,
    /// Row-major.
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
    pub blocks: Vec<FieldBlock>,
    pub symmetrized: bool,
    /// Jitter multiplier used by the last factorization.
    pub jitter: Option<f64>,
}

impl CovarianceMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.dim + j]
    }

    pub fn stderr(&self, i: usize, j: usize) -> f64 {
        self.stderr[i * self.dim + j]
    }

    /// Block pair `(a, b)` of an entry, numbered 1 to 4.
    pub fn block_tag(&self, i: usize, j: usize) -> (u8, u8) {
        (self.blocks[i].number(), self.blocks[j].number())
    }

    pub fn max_diagonal(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).fold(0.0, f64::max)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        if self.dim == 0 {
            return 0.0;
        }
        let m = DMatrix::from_row_slice(self.dim, self.dim, &self.values);
        SymmetricEigen::new(m).eigenvalues.min()
    }

    /// Cholesky factor of `C + jitter * maxdiag * I` with the smallest jitter
    /// of [`JITTER_LADDER`] that succeeds. A zero matrix factors as zero.
    pub fn factor(&mut self) -> Result<DMatrix<f64>> {
        let n = self.dim;
        let scale = self.max_diagonal();
        if scale == 0.0 {
            self.jitter = Some(0.0);
            return Ok(DMatrix::zeros(n, n));
        }
        let base = DMatrix::from_row_slice(n, n, &self.values);
        for j in JITTER_LADDER {
            let m = &base + DMatrix::identity(n, n) * (j * scale);
            if let Some(ch) = m.cholesky() {
                self.jitter = Some(j);
                return Ok(ch.l());
            }
        }
        Err(Error::NotFactorizable {
            jitter: JITTER_LADDER[JITTER_LADDER.len() - 1],
        })
    }

    fn from_rows(rows: &[Vec<f64>], blocks: Vec<FieldBlock>) -> Self {
        let n = rows.len();
        let m = rows.first().map_or(0, |r| r.len());
        let g = DMatrix::from_fn(n, m, |i, k| rows[i][k]);
        let g2 = g.map(|v| v * v);
        let cov = &g * g.transpose() / (m as f64 - 1.0);
        let fourth = &g2 * g2.transpose() / m as f64;
        let mut values = vec![0.0; n * n];
        let mut stderr = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let c = 0.5 * (cov[(i, j)] + cov[(j, i)]);
                values[i * n + j] = c;
                let mean_prod = c * (m as f64 - 1.0) / m as f64;
                let var = (fourth[(i, j)] - mean_prod * mean_prod).max(0.0);
                stderr[i * n + j] = (var / m as f64).sqrt();
            }
        }
        CovarianceMatrix {
            dim: n,
            values,
            stderr,
            blocks,
            symmetrized: true,
            jitter: None,
        }
    }
}

/// Monte Carlo covariance of the centered coefficients over the cloud,
/// joint across time nodes along each cloud path.
pub fn theoretical_covariance(model: &ModelSpec, source: &FieldSource, lattice: &FieldLattice) -> Result<CovarianceMatrix> {
    check_source(model, source, lattice.entries.iter().any(|e| e.block == FieldBlock::Driver))?;
    let rows = centered_rows(model, source, lattice);
    let cov = CovarianceMatrix::from_rows(&rows, lattice.entries.iter().map(|e| e.block).collect());
    let floor = -1e-8 * cov.max_diagonal().max(f64::MIN_POSITIVE);
    let min_eig = cov.min_eigenvalue();
    if min_eig < floor {
        return Err(Error::InvalidParameter(format!(
            "covariance has eigenvalue {min_eig:e} below {floor:e}"
        )));
    }
    Ok(cov)
}

/// Field values at lattice points.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FieldSample {
    pub values: Vec<f64>,
    pub key: StreamKey,
    pub jitter: f64,
}

/// Factored covariance for repeated lattice sampling.
#[derive(Clone, Debug)]
pub struct LatticeSampler {
    factor: DMatrix<f64>,
    jitter: f64,
}

impl LatticeSampler {
    pub fn new(cov: &mut CovarianceMatrix) -> Result<Self> {
        let factor = cov.factor()?;
        Ok(LatticeSampler {
            factor,
            jitter: cov.jitter.unwrap_or(0.0),
        })
    }

    pub fn sample(&self, key: &StreamKey) -> FieldSample {
        let n = self.factor.nrows();
        let z = DVector::from_vec(standard_normals(key, n));
        let v = &self.factor * z;
        FieldSample {
            values: v.iter().copied().collect(),
            key: key.clone(),
            jitter: self.jitter,
        }
    }
}

/// Zero-mean Gaussian lattice vector with covariance `cov` (plus jitter).
pub fn sample_field_on_lattice(cov: &mut CovarianceMatrix, key: &StreamKey) -> Result<FieldSample> {
    Ok(LatticeSampler::new(cov)?.sample(key))
}

/// Field along one path: `xi1_{t_i}(X_{t_i})` (`[node][c]`),
/// `xi2_{t_i}(X_{t_i})` (`[node][d * d]`), `xi3(X_T)` and
/// `xi4_{t_i}(Lambda_{t_i})` (`[node]`).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PathField {
    pub xi1: Vec<f64>,
    pub xi2: Vec<f64>,
    pub xi3: f64,
    pub xi4: Vec<f64>,
    pub key: StreamKey,
}

/// Samples the field along paths given the cloud; see the module docs.
pub struct PathFieldSampler<'a> {
    model: &'a ModelSpec,
    source: &'a FieldSource,
}

impl<'a> PathFieldSampler<'a> {
    pub fn new(model: &'a ModelSpec, source: &'a FieldSource) -> Result<Self> {
        check_source(model, source, false)?;
        Ok(PathFieldSampler { model, source })
    }

    /// Standard normal weights of the cloud members for `key`.
    pub fn eta(&self, key: &StreamKey) -> Vec<f64> {
        standard_normals(key, self.source.members())
    }

    /// `lambda` holds `Y` per node and `Z` per node (`[node][c]`) of the path.
    pub fn sample(&self, x_path: &[f64], lambda: Option<(&[f64], &[f64])>, key: &StreamKey) -> Result<PathField> {
        let eta = self.eta(key);
        self.sample_with(x_path, lambda, &eta, key)
    }

    pub fn sample_with(
        &self,
        x_path: &[f64],
        lambda: Option<(&[f64], &[f64])>,
        eta: &[f64],
        key: &StreamKey,
    ) -> Result<PathField> {
        let model = self.model;
        let d = model.dim;
        let grid = *self.source.x.grid();
        let nodes = grid.nodes_len();
        if x_path.len() != nodes * d {
            return Err(Error::Shape(format!("path of length {} for {nodes} nodes", x_path.len())));
        }
        let inter = model.interaction();
        if inter.driver && lambda.is_none() {
            return Err(Error::Missing("(Y, Z) along the path for the driver block".into()));
        }
        if inter.driver && self.source.y.is_none() {
            return Err(Error::Missing("Y values on the field cloud for the driver block".into()));
        }
        let c = model.coefficients.as_ref();
        let m = self.source.members();
        let norm = 1.0 / (m as f64 - 1.0).sqrt();
        let eta_sum: f64 = eta.iter().sum();
        // sum_m eta_m (g_m - mean g) = sum_m eta_m g_m - mean g * sum_m eta_m
        let weighted = |len: usize, eval: &mut dyn FnMut(usize, &mut [f64]), out: &mut [f64]| {
            let mut buf = vec![0.0; len];
            let mut s = vec![0.0; len];
            let mut t = vec![0.0; len];
            for (k, &e) in eta.iter().enumerate() {
                eval(k, &mut buf);
                for q in 0..len {
                    s[q] += e * buf[q];
                    t[q] += buf[q];
                }
            }
            for q in 0..len {
                out[q] = (s[q] - t[q] / m as f64 * eta_sum) * norm;
            }
        };
        let x_at = |i: usize| &x_path[i * d..(i + 1) * d];
        let mut xi1 = vec![0.0; nodes * d];
        let mut xi2 = vec![0.0; nodes * d * d];
        let mut xi4 = vec![0.0; nodes];
        for i in 0..nodes {
            let x = x_at(i);
            if inter.drift {
                weighted(d, &mut |k, b| c.drift(x, self.source.x.value(k, i), b), &mut xi1[i * d..(i + 1) * d]);
            }
            if inter.diffusion {
                weighted(
                    d * d,
                    &mut |k, b| c.diffusion(x, self.source.x.value(k, i), b),
                    &mut xi2[i * d * d..(i + 1) * d * d],
                );
            }
            if inter.driver {
                let (ys, zs) = lambda.expect("checked above");
                let lam = Lambda {
                    x,
                    y: ys[i],
                    z: &zs[i * d..(i + 1) * d],
                };
                let mut out = [0.0];
                weighted(
                    1,
                    &mut |k, b| {
                        b[0] = c.driver(
                            lam,
                            Partner {
                                x: self.source.x.value(k, i),
                                y: self.source.y(k, i),
                            },
                        )
                    },
                    &mut out,
                );
                xi4[i] = out[0];
            }
        }
        let mut xi3 = 0.0;
        if inter.terminal {
            let last = grid.steps();
            let x = x_at(last);
            let mut out = [0.0];
            weighted(1, &mut |k, b| b[0] = c.terminal(x, self.source.x.value(k, last)), &mut out);
            xi3 = out[0];
        }
        Ok(PathField {
            xi1,
            xi2,
            xi3,
            xi4,
            key: key.clone(),
        })
    }

    /// Leading directions `u_k` in member space of the field restricted to
    /// `lattice`: `u_k . eta` are its principal coordinates. Directions with
    /// variance below `1e-12` of the largest are dropped.
    pub fn principal_directions(&self, lattice: &FieldLattice, rank: usize) -> Vec<Vec<f64>> {
        let rows = centered_rows(self.model, self.source, lattice);
        let n = rows.len();
        let m = self.source.members();
        if n == 0 || rank == 0 {
            return Vec::new();
        }
        let g = DMatrix::from_fn(n, m, |i, k| rows[i][k]);
        let eig = SymmetricEigen::new(&g * g.transpose());
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let top = eig.eigenvalues[order[0]];
        if top <= 0.0 {
            return Vec::new();
        }
        order
            .into_iter()
            .take(rank)
            .filter(|&k| eig.eigenvalues[k] > 1e-12 * top)
            .map(|k| {
                let v = eig.eigenvectors.column(k);
                let u = g.transpose() * v / eig.eigenvalues[k].sqrt();
                u.iter().copied().collect()
            })
            .collect()
    }
}

/// One sample of the field along `x_path`; see [`PathFieldSampler`].
pub fn sample_field_along_path(
    model: &ModelSpec,
    source: &FieldSource,
    x_path: &[f64],
    lambda: Option<(&[f64], &[f64])>,
    key: &StreamKey,
) -> Result<PathField> {
    PathFieldSampler::new(model, source)?.sample(x_path, lambda, key)
}

/// Scaled centered environment sums per replication, `[rep][entry]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmpiricalFields {
    pub n: usize,
    pub reps: usize,
    pub entries: usize,
    pub values: Vec<f64>,
    /// Centering terms per entry.
    pub centering: Vec<f64>,
}

impl EmpiricalFields {
    pub fn column(&self, e: usize) -> Vec<f64> {
        (0..self.reps).map(|r| self.values[r * self.entries + e]).collect()
    }
}

/// `(1/sqrt N) sum_k (coeff(probe, env_k) - centering)` for every
/// replication of `run` and lattice entry. Centering terms are averages over
/// `centering`, a cloud of the approximating law disjoint from the run. The
/// driver block reads environment `Y` values from `env_y`, whose paths must
/// be the run's cloud.
pub fn empirical_fields(
    model: &ModelSpec,
    run: &ApproximationRun,
    env_y: Option<&LambdaCloud>,
    centering: &FieldSource,
    lattice: &FieldLattice,
) -> Result<EmpiricalFields> {
    let has_driver = lattice.entries.iter().any(|e| e.block == FieldBlock::Driver);
    let inter = model.interaction();
    check_source(model, centering, has_driver)?;
    if has_driver && inter.driver {
        match env_y {
            None => return Err(Error::Missing("environment Y values for the driver block".into())),
            Some(l) if !Arc::ptr_eq(&l.x, &run.cloud) => {
                return Err(Error::InvalidParameter("environment Y values belong to another cloud".into()))
            }
            _ => {}
        }
    }
    let c = model.coefficients.as_ref();
    let d = model.dim;
    let n = run.provenance.n;
    let centers: Vec<f64> = lattice
        .entries
        .par_iter()
        .map(|e| {
            if !e.block.interacts(inter) {
                return 0.0;
            }
            let point = lattice_point(lattice, e);
            let mut buf = vec![0.0; d * d];
            let mut acc = MeanAccumulator::new(1);
            for k in 0..centering.members() {
                let py = if e.block == FieldBlock::Driver { centering.y(k, e.node) } else { 0.0 };
                acc.push_scalar(evaluate(c, e.block, e.component, point, centering.x.value(k, e.node), py, &mut buf));
            }
            acc.scalar()
        })
        .collect();
    let scale = 1.0 / (n as f64).sqrt();
    let values: Vec<f64> = run
        .environments
        .par_iter()
        .flat_map_iter(|env| {
            let mut buf = vec![0.0; d * d];
            let mut row = Vec::with_capacity(lattice.len());
            for (e, center) in lattice.entries.iter().zip(&centers) {
                if !e.block.interacts(inter) {
                    row.push(0.0);
                    continue;
                }
                let point = lattice_point(lattice, e);
                let mut sum = 0.0;
                for (k, &idx) in env.indices.iter().enumerate() {
                    let py = match (e.block, env_y) {
                        (FieldBlock::Driver, Some(l)) => l.y(idx as usize, e.node),
                        _ => 0.0,
                    };
                    sum += evaluate(c, e.block, e.component, point, env.state(k, e.node), py, &mut buf) - center;
                }
                row.push(sum * scale);
            }
            row
        })
        .collect();
    Ok(EmpiricalFields {
        n,
        reps: run.environments.len(),
        entries: lattice.len(),
        values,
        centering: centers,
    })
}

/// Variance over replications of `coeff(probe, X^N) - coeff(probe, X)` on
/// coupled paths, per entry of the drift, diffusion and terminal blocks.
/// This is the one-summand variance of the residual part of the fluctuation
/// field that separates the approximating law from the limit law.
pub fn residual_block_variance(
    model: &ModelSpec,
    approx: &PathEnsemble,
    limit: &PathEnsemble,
    lattice: &FieldLattice,
) -> Result<Vec<Estimate>> {
    if approx.reps() != limit.reps() || approx.dim() != limit.dim() {
        return Err(Error::Shape("coupled ensembles differ in shape".into()));
    }
    let c = model.coefficients.as_ref();
    let d = model.dim;
    let inter = model.interaction();
    Ok(lattice
        .entries
        .par_iter()
        .filter(|e| e.block != FieldBlock::Driver)
        .map(|e| {
            if !e.block.interacts(inter) {
                return Estimate { value: 0.0, stderr: 0.0 };
            }
            let point = lattice_point(lattice, e);
            let mut buf = vec![0.0; d * d];
            let diffs: Vec<f64> = (0..approx.reps())
                .map(|r| {
                    evaluate(c, e.block, e.component, point, approx.value(r, e.node), 0.0, &mut buf)
                        - evaluate(c, e.block, e.component, point, limit.value(r, e.node), 0.0, &mut buf)
                })
                .collect();
            let mo = moments(&diffs);
            Estimate {
                value: mo.variance,
                stderr: mo.variance_se,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimitConfig {
    pub members: usize,
    /// Members used for the cross-member averages.
    pub cross_sample: usize,
    /// Law points used for averages over a cloud law.
    pub law_sample: usize,
    /// Principal field coordinates added to the backward regression.
    pub kl_rank: usize,
    /// Also solve the backward component.
    pub backward: bool,
    pub regression: RegressionConfig,
}

impl Default for LimitConfig {
    fn default() -> Self {
        LimitConfig {
            members: 4000,
            cross_sample: 1024,
            law_sample: 1024,
            kl_rank: 16,
            backward: true,
            regression: RegressionConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimitProvenance {
    pub members: usize,
    pub field_cloud: usize,
    pub cross_sample: usize,
    pub kl_rank_used: usize,
    pub w_key: StreamKey,
    pub field_key: StreamKey,
}

/// Ensemble of the linear limit system, one independent `(W, xi)` per member.
#[derive(Clone, Debug)]
pub struct LimitEnsemble {
    pub grid: TimeGrid,
    pub dim: usize,
    /// Limit forward paths of the members.
    pub x: PathEnsemble,
    /// `(Y, Z)` of the mean-field BSDE on the members.
    pub lambda: Option<BsdeSolution>,
    /// `[member][node][c]`
    pub xbar: Vec<f64>,
    /// `(Ybar, Zbar)`
    pub backward: Option<BsdeSolution>,
    pub fields: Vec<PathField>,
    /// Principal field coordinates `[member][k]`.
    pub theta: Vec<f64>,
    pub provenance: LimitProvenance,
}

impl LimitEnsemble {
    pub fn members(&self) -> usize {
        self.x.reps()
    }

    pub fn xbar(&self, m: usize, i: usize) -> &[f64] {
        let at = (m * self.grid.nodes_len() + i) * self.dim;
        &self.xbar[at..at + self.dim]
    }

    /// `Xbar_{t_i}` coordinate `c` across members.
    pub fn xbar_at(&self, i: usize, c: usize) -> Vec<f64> {
        (0..self.members()).map(|m| self.xbar(m, i)[c]).collect()
    }
}

/// Law points per node with weights: Gauss-Hermite for a closed form, the
/// first `sample` members for a cloud.
fn law_points(law: &LawFlow, sample: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    let grid = *law.grid();
    (0..grid.nodes_len()).map(|i| law_rule_points(law, i, sample)).collect()
}

fn weighted_average(
    len: usize,
    points: &(Vec<f64>, Vec<f64>),
    d: usize,
    mut eval: impl FnMut(&[f64], &mut [f64]),
    out: &mut [f64],
) {
    let mut acc = MeanAccumulator::new(len);
    let mut buf = vec![0.0; len];
    for (p, w) in points.0.chunks(d).zip(&points.1) {
        eval(p, &mut buf);
        acc.push_weighted(&buf, *w);
    }
    acc.finish(out);
}

/// Lattice used for the principal field coordinates: every fourth node,
/// space probes at the law mean plus multiples of the spread, driver probes
/// at member states.
fn kl_lattice(model: &ModelSpec, law: &LawFlow, lambda: Option<&BsdeSolution>, x: &PathEnsemble) -> Result<FieldLattice> {
    let grid = *law.grid();
    let d = model.dim;
    let nodes: Vec<usize> = (0..grid.nodes_len()).step_by(4).collect();
    let (mean, var) = law.marginal_moments(grid.steps());
    let mut x_probes = Vec::new();
    for k in [-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0] {
        x_probes.push((0..d).map(|c| mean[c] + k * var[c].sqrt()).collect::<Vec<f64>>());
    }
    x_probes.dedup();
    let mut lambda_probes = Vec::new();
    if let Some(sol) = lambda {
        let mid = grid.steps() / 2;
        for m in 0..sol.reps.min(8) {
            let p = LambdaProbe {
                x: x.value(m, mid).to_vec(),
                y: sol.y(m, mid),
                z: sol.z(m, mid).to_vec(),
            };
            if !lambda_probes.contains(&p) {
                lambda_probes.push(p);
            }
        }
    }
    FieldLattice::new(d, &grid, nodes, x_probes, lambda_probes)
}

/// Simulates the linear limit system. Member `m` uses the Brownian motion
/// `w_key / Replication:m` and the field weights `field_key / Replication:m`.
///
/// Forward, per Euler step, with `Xbar_0 = 0`:
/// `dXbar = (xi1(X) + E[grad_x b(x, X)] Xbar + E[grad_x' b(x, X) Xbar]) dt`
/// `      + (xi2(X) + E[grad_x sigma(x, X)] Xbar + E[grad_x' sigma(x, X) Xbar]) dW`
/// where `E[grad_x' ... Xbar]` averages over the member ensemble at the
/// current node. The backward component is
/// [`solve_linear_limit_bsde`].
#[allow(clippy::too_many_arguments)]
pub fn solve_limit_system(
    model: &ModelSpec,
    law: &LawFlow,
    source: &FieldSource,
    w_key: &StreamKey,
    field_key: &StreamKey,
    cfg: &LimitConfig,
) -> Result<LimitEnsemble> {
    if cfg.members < MIN_CLOUD {
        return Err(Error::TooSmall {
            what: "limit ensemble".into(),
            needed: MIN_CLOUD,
            got: cfg.members,
        });
    }
    if w_key.is_prefix_of(field_key) || field_key.is_prefix_of(w_key) {
        return Err(Error::InvalidParameter(format!("field key {field_key} overlaps {w_key}")));
    }
    let grid = *law.grid();
    let d = model.dim;
    let inter = model.interaction();
    let sampler = PathFieldSampler::new(model, source)?;
    if cfg.backward && inter.driver && source.y.is_none() {
        return Err(Error::Missing("Y values on the field cloud for the driver block".into()));
    }

    let w_keys: Vec<StreamKey> = (0..cfg.members).map(|m| w_key.derive(Role::Replication, m as u64)).collect();
    let f_keys: Vec<StreamKey> = (0..cfg.members).map(|m| field_key.derive(Role::Replication, m as u64)).collect();
    let x = crate::forward::simulate_limit_paths(model, &grid, law, &w_keys)?;

    let lambda = if cfg.backward {
        let cloud = source.lambda_cloud();
        let partners = match (&cloud, inter.driver) {
            (Some(c), true) => DriverPartners::Cloud(c),
            _ => DriverPartners::Own,
        };
        Some(solve_mfbsde(model, law, &x, &cfg.regression, partners)?)
    } else {
        None
    };

    let etas: Vec<Vec<f64>> = f_keys.par_iter().map(|k| sampler.eta(k)).collect();
    let fields = (0..cfg.members)
        .into_par_iter()
        .map(|m| {
            let lam = lambda.as_ref().map(|s| {
                let nodes = grid.nodes_len();
                (s.y_path(m), &s.z[m * nodes * d..(m + 1) * nodes * d])
            });
            let lam = if inter.driver { lam } else { None };
            sampler.sample_with(x.path(m), lam, &etas[m], &f_keys[m])
        })
        .collect::<Result<Vec<_>>>()?;

    let xbar = forward_linear(model, law, &x, &fields, cfg)?;

    let mut theta = Vec::new();
    let mut rank = 0;
    if cfg.backward {
        let lattice = kl_lattice(model, law, lambda.as_ref(), &x)?;
        let dirs = sampler.principal_directions(&lattice, cfg.kl_rank);
        rank = dirs.len();
        theta = etas
            .iter()
            .flat_map(|eta| dirs.iter().map(|u| u.iter().zip(eta).map(|(a, b)| a * b).sum::<f64>()).collect::<Vec<_>>())
            .collect();
    }

    let backward = match &lambda {
        Some(lam) => Some(solve_linear_limit_bsde(
            model,
            law,
            &LinearLimitInput {
                x: &x,
                lambda: lam,
                xbar: &xbar,
                fields: &fields,
                theta: &theta,
                rank,
                source,
                cross_sample: cfg.cross_sample,
                law_sample: cfg.law_sample,
            },
            &cfg.regression,
        )?),
        None => None,
    };

    Ok(LimitEnsemble {
        grid,
        dim: d,
        x,
        lambda,
        xbar,
        backward,
        fields,
        theta,
        provenance: LimitProvenance {
            members: cfg.members,
            field_cloud: source.members(),
            cross_sample: cfg.cross_sample.min(cfg.members),
            kl_rank_used: rank,
            w_key: w_key.clone(),
            field_key: field_key.clone(),
        },
    })
}

fn forward_linear(
    model: &ModelSpec,
    law: &LawFlow,
    x: &PathEnsemble,
    fields: &[PathField],
    cfg: &LimitConfig,
) -> Result<Vec<f64>> {
    let grid = *x.grid();
    let d = model.dim;
    let dd = d * d;
    let nodes = grid.nodes_len();
    let h = grid.step_size();
    let members = x.reps();
    let cross = cfg.cross_sample.min(members).max(1);
    let c = model.coefficients.as_ref();
    let inter = model.interaction();
    let points = law_points(law, cfg.law_sample);
    // node-major while stepping
    let mut cur = vec![0.0; members * d];
    let mut out = vec![0.0; members * nodes * d];
    for i in 0..grid.steps() {
        let next: Vec<Vec<f64>> = (0..members)
            .into_par_iter()
            .map(|m| {
                let xm = x.value(m, i);
                let xb = &cur[m * d..(m + 1) * d];
                let field = &fields[m];
                let mut grad_b = vec![0.0; dd];
                let mut grad_s = vec![0.0; dd * d];
                if inter.drift {
                    weighted_average(dd, &points[i], d, |p, o| c.drift_grad_x(xm, p, o), &mut grad_b);
                } else {
                    c.drift_grad_x(xm, xm, &mut grad_b);
                }
                if inter.diffusion {
                    weighted_average(dd * d, &points[i], d, |p, o| c.diffusion_grad_x(xm, p, o), &mut grad_s);
                } else {
                    c.diffusion_grad_x(xm, xm, &mut grad_s);
                }
                let mut drift: Vec<f64> = (0..d)
                    .map(|a| field.xi1[i * d + a] + (0..d).map(|k| grad_b[a * d + k] * xb[k]).sum::<f64>())
                    .collect();
                let mut diff: Vec<f64> = (0..dd)
                    .map(|ab| field.xi2[i * dd + ab] + (0..d).map(|k| grad_s[ab * d + k] * xb[k]).sum::<f64>())
                    .collect();
                if inter.drift {
                    let mut buf = vec![0.0; dd];
                    let mut acc = vec![0.0; d];
                    for q in 0..cross {
                        c.drift_grad_xp(xm, x.value(q, i), &mut buf);
                        let xq = &cur[q * d..(q + 1) * d];
                        for a in 0..d {
                            acc[a] += (0..d).map(|k| buf[a * d + k] * xq[k]).sum::<f64>();
                        }
                    }
                    for a in 0..d {
                        drift[a] += acc[a] / cross as f64;
                    }
                }
                if inter.diffusion {
                    let mut buf = vec![0.0; dd * d];
                    let mut acc = vec![0.0; dd];
                    for q in 0..cross {
                        c.diffusion_grad_xp(xm, x.value(q, i), &mut buf);
                        let xq = &cur[q * d..(q + 1) * d];
                        for ab in 0..dd {
                            acc[ab] += (0..d).map(|k| buf[ab * d + k] * xq[k]).sum::<f64>();
                        }
                    }
                    for ab in 0..dd {
                        diff[ab] += acc[ab] / cross as f64;
                    }
                }
                let dw = x.increment(m, i);
                (0..d)
                    .map(|a| xb[a] + drift[a] * h + (0..d).map(|k| diff[a * d + k] * dw[k]).sum::<f64>())
                    .collect()
            })
            .collect();
        for (m, v) in next.into_iter().enumerate() {
            if v.iter().any(|x| !x.is_finite() || x.abs() > crate::forward::DIVERGENCE_BOUND) {
                return Err(Error::Divergence {
                    step: i + 1,
                    rep: m,
                    magnitude: v.iter().fold(0.0f64, |a, b| a.max(b.abs())),
                });
            }
            cur[m * d..(m + 1) * d].copy_from_slice(&v);
            let at = (m * nodes + i + 1) * d;
            out[at..at + d].copy_from_slice(&v);
        }
    }
    Ok(out)
}

/// Inputs of the linear limit BSDE, all on the same member ensemble.
pub struct LinearLimitInput<'a> {
    pub x: &'a PathEnsemble,
    /// `(Y, Z)` of the mean-field BSDE on the members.
    pub lambda: &'a BsdeSolution,
    /// `[member][node][c]`
    pub xbar: &'a [f64],
    pub fields: &'a [PathField],
    /// `[member][k]`, `rank` per member.
    pub theta: &'a [f64],
    pub rank: usize,
    /// Law of `(X, Y)` for the driver averages.
    pub source: &'a FieldSource,
    pub cross_sample: usize,
    pub law_sample: usize,
}

/// Solves
/// `Ybar_T = xi3(X_T) + E[grad_x Phi(x, X_T)] Xbar_T + E[grad_x' Phi(x, X_T) Xbar_T]`,
/// driver `xi4(Lambda) + E[grad_lambda f(lambda, Lambda)] Lambdabar
/// + E[grad_lambda' f(lambda, Lambda) Lambdabar]` at `lambda = Lambda`, where
/// `Lambdabar = (Xbar, Ybar, Zbar)` and the partner gradient sees only
/// `(Xbar, Ybar)`. Conditional expectations regress on `(X, Xbar)` with
/// polynomials plus the principal field coordinates linearly.
pub fn solve_linear_limit_bsde(
    model: &ModelSpec,
    law: &LawFlow,
    input: &LinearLimitInput<'_>,
    reg: &RegressionConfig,
) -> Result<BsdeSolution> {
    let x = input.x;
    let grid = *x.grid();
    let d = model.dim;
    let nodes = grid.nodes_len();
    let members = x.reps();
    check_rows(members, 2 * d, reg)?;
    if input.xbar.len() != members * nodes * d || input.fields.len() != members {
        return Err(Error::Shape("limit ensemble inputs differ in size".into()));
    }
    let c = model.coefficients.as_ref();
    let inter = model.interaction();
    let cross = input.cross_sample.min(members).max(1);
    let last = grid.steps();
    let xbar = |m: usize, i: usize| &input.xbar[(m * nodes + i) * d..(m * nodes + i + 1) * d];
    let points = law_points(law, input.law_sample);
    if inter.driver && input.source.y.is_none() {
        return Err(Error::Missing("Y values on the field cloud for the driver block".into()));
    }

    let terminal: Vec<f64> = (0..members)
        .into_par_iter()
        .map(|m| {
            let xm = x.value(m, last);
            let xb = xbar(m, last);
            let mut g = vec![0.0; d];
            if inter.terminal {
                weighted_average(d, &points[last], d, |p, o| c.terminal_grad_x(xm, p, o), &mut g);
            } else {
                c.terminal_grad_x(xm, xm, &mut g);
            }
            let mut v = input.fields[m].xi3 + g.iter().zip(xb).map(|(a, b)| a * b).sum::<f64>();
            if inter.terminal {
                let mut buf = vec![0.0; d];
                let mut acc = 0.0;
                for q in 0..cross {
                    c.terminal_grad_xp(xm, x.value(q, last), &mut buf);
                    acc += buf.iter().zip(xbar(q, last)).map(|(a, b)| a * b).sum::<f64>();
                }
                v += acc / cross as f64;
            }
            v
        })
        .collect();

    let r = input.rank;
    let features = |i: usize| -> Vec<f64> {
        let mut f = Vec::with_capacity(members * (2 * d + r));
        for m in 0..members {
            f.extend_from_slice(x.value(m, i));
            f.extend_from_slice(xbar(m, i));
            f.extend_from_slice(&input.theta[m * r..(m + 1) * r]);
        }
        f
    };
    let increment = |m: usize, i: usize| x.increment(m, i);
    let src = input.source;
    let src_sample = input.law_sample.min(src.members()).max(1);
    let driver = |i: usize, ybar: &[f64], zbar: &[f64], out: &mut [f64]| {
        out.par_iter_mut().enumerate().for_each(|(m, o)| {
            let lam = Lambda {
                x: x.value(m, i),
                y: input.lambda.y(m, i),
                z: input.lambda.z(m, i),
            };
            let mut g = vec![0.0; 2 * d + 1];
            if inter.driver {
                let mut acc = MeanAccumulator::new(2 * d + 1);
                let mut buf = vec![0.0; 2 * d + 1];
                for k in 0..src_sample {
                    c.driver_grad_lambda(
                        lam,
                        Partner {
                            x: src.x.value(k, i),
                            y: src.y(k, i),
                        },
                        &mut buf,
                    );
                    acc.push(&buf);
                }
                acc.finish(&mut g);
            } else {
                c.driver_grad_lambda(lam, Partner { x: lam.x, y: lam.y }, &mut g);
            }
            let xb = xbar(m, i);
            let zb = &zbar[m * d..(m + 1) * d];
            let mut v = input.fields[m].xi4[i]
                + (0..d).map(|k| g[k] * xb[k] + g[d + 1 + k] * zb[k]).sum::<f64>()
                + g[d] * ybar[m];
            if inter.driver {
                let mut buf = vec![0.0; d + 1];
                let mut acc = 0.0;
                for q in 0..cross {
                    c.driver_grad_partner(
                        lam,
                        Partner {
                            x: x.value(q, i),
                            y: input.lambda.y(q, i),
                        },
                        &mut buf,
                    );
                    acc += (0..d).map(|k| buf[k] * xbar(q, i)[k]).sum::<f64>() + buf[d] * ybar[q];
                }
                v += acc / cross as f64;
            }
            *o = v;
        });
    };
    let sweep = Sweep {
        grid,
        dim: d,
        rows: members,
        features: &features,
        vars: 2 * d,
        extra: r,
        increment: &increment,
        terminal,
        driver: &driver,
    };
    let prov = BsdeProvenance {
        variant: "linear limit".into(),
        sweeps: reg.sweeps,
        z_cap: reg.z_cap,
        picard_converged: true,
        ..Default::default()
    };
    Ok(backward_sweep(&sweep, reg, true).into_solution(grid, d, members, prov))
}

/// Test functions for the time-integrated `Z` statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ZFunctional {
    One,
    Time,
}

impl ZFunctional {
    fn weight(self, t: f64) -> f64 {
        match self {
            ZFunctional::One => 1.0,
            ZFunctional::Time => t,
        }
    }

    fn label(self) -> &'static str {
        match self {
            ZFunctional::One => "1",
            ZFunctional::Time => "t",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CltConfig {
    pub probe_times: Vec<f64>,
    pub functionals: Vec<ZFunctional>,
    pub ks_alpha: f64,
    pub variance_tolerance: f64,
}

impl Default for CltConfig {
    fn default() -> Self {
        CltConfig {
            probe_times: vec![0.5, 1.0],
            functionals: vec![ZFunctional::One, ZFunctional::Time],
            ks_alpha: 0.01,
            variance_tolerance: 0.15,
        }
    }
}

/// Mean and variance with standard errors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub n: usize,
    pub mean: f64,
    pub mean_se: f64,
    pub variance: f64,
    pub variance_se: f64,
}

impl SampleSummary {
    pub fn of(xs: &[f64]) -> Self {
        let m = moments(xs);
        SampleSummary {
            n: xs.len(),
            mean: m.mean,
            mean_se: m.mean_se,
            variance: m.variance,
            variance_se: m.variance_se,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CltEntry {
    /// `X<c>`, `Y`, or `Z<c>[phi]`.
    pub quantity: String,
    /// Probe time; `None` for time-integrated statistics.
    pub time: Option<f64>,
    pub approx: SampleSummary,
    pub limit: SampleSummary,
    pub ks: KsResult,
    /// `Var(approx) / Var(limit)`; `1` when both vanish.
    pub variance_ratio: f64,
    pub ks_pass: bool,
    pub variance_pass: bool,
    /// Both samples are identically zero.
    pub exact: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CltReport {
    pub n: usize,
    pub reps: usize,
    pub members: usize,
    pub entries: Vec<CltEntry>,
    pub exact_agreement: bool,
}

impl CltReport {
    pub fn entry(&self, quantity: &str, time: Option<f64>) -> Option<&CltEntry> {
        self.entries
            .iter()
            .find(|e| e.quantity == quantity && e.time.zip(time).is_none_or(|(a, b)| (a - b).abs() < 1e-12) && e.time.is_some() == time.is_some())
    }
}

fn compare(quantity: String, time: Option<f64>, a: &[f64], b: &[f64], cfg: &CltConfig) -> Result<CltEntry> {
    let ks = ks_two_sample(a, b)?;
    let sa = SampleSummary::of(a);
    let sb = SampleSummary::of(b);
    let exact = a.iter().chain(b).all(|&v| v == 0.0);
    let variance_ratio = if sa.variance == 0.0 && sb.variance == 0.0 {
        1.0
    } else {
        sa.variance / sb.variance
    };
    Ok(CltEntry {
        quantity,
        time,
        approx: sa,
        limit: sb,
        ks_pass: ks.p_value > cfg.ks_alpha,
        variance_pass: (variance_ratio - 1.0).abs() <= cfg.variance_tolerance,
        variance_ratio,
        ks,
        exact,
    })
}

/// Compares `sqrt(N) (X^N - X)` at the probe times, and when a backward
/// pair is supplied also `sqrt(N) (Y^N - Y)` and
/// `int phi(t) sqrt(N) (Z^N - Z) dt`, with the limit ensemble's
/// `Xbar`, `Ybar` and `int phi(t) Zbar dt`.
pub fn clt_compare(
    n: usize,
    approx_x: &PathEnsemble,
    limit_x: &PathEnsemble,
    backward: Option<&CoupledBsde>,
    limit: &LimitEnsemble,
    cfg: &CltConfig,
) -> Result<CltReport> {
    let reps = approx_x.reps();
    let members = limit.members();
    for (what, got) in [("scaled error sample", reps), ("limit ensemble", members)] {
        if got < MIN_CLT_SAMPLE {
            return Err(Error::TooSmall {
                what: what.into(),
                needed: MIN_CLT_SAMPLE,
                got,
            });
        }
    }
    if limit_x.reps() != reps {
        return Err(Error::Shape("coupled ensembles differ in size".into()));
    }
    let grid = *approx_x.grid();
    let d = approx_x.dim();
    let scale = (n as f64).sqrt();
    let mut entries = Vec::new();
    for &t in &cfg.probe_times {
        let i = grid.nearest_node(t);
        let time = grid.time(i);
        for c in 0..d {
            let a: Vec<f64> = (0..reps)
                .map(|r| scale * (approx_x.value(r, i)[c] - limit_x.value(r, i)[c]))
                .collect();
            entries.push(compare(format!("X{}", c + 1), Some(time), &a, &limit.xbar_at(i, c), cfg)?);
        }
        if let (Some(pair), Some(lb)) = (backward, &limit.backward) {
            let a: Vec<f64> = (0..pair.approx.reps).map(|r| scale * (pair.approx.y(r, i) - pair.limit.y(r, i))).collect();
            entries.push(compare("Y".into(), Some(time), &a, &lb.y_at(i), cfg)?);
        }
    }
    if let (Some(pair), Some(lb)) = (backward, &limit.backward) {
        let h = grid.step_size();
        for &phi in &cfg.functionals {
            for c in 0..d {
                let integral = |z: &dyn Fn(usize) -> f64| -> f64 {
                    (0..grid.steps()).map(|i| h * phi.weight(grid.time(i)) * z(i)).sum()
                };
                let a: Vec<f64> = (0..pair.approx.reps)
                    .map(|r| scale * integral(&|i| pair.approx.z(r, i)[c] - pair.limit.z(r, i)[c]))
                    .collect();
                let b: Vec<f64> = (0..lb.reps).map(|m| integral(&|i| lb.z(m, i)[c])).collect();
                entries.push(compare(format!("Z{}[{}]", c + 1, phi.label()), None, &a, &b, cfg)?);
            }
        }
    }
    let exact_agreement = entries.iter().all(|e| e.exact);
    Ok(CltReport {
        n,
        reps,
        members,
        entries,
        exact_agreement,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::solve_limit_forward;
    use crate::model::catalog_model;

    fn ou_cloud(beta: f64, s: f64, members: usize, seed: u64) -> (ModelSpec, TimeGrid, FieldSource) {
        let model = catalog_model("ou_mean_field", &[beta, s], &[1.0], 1.0).unwrap();
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let law = solve_limit_forward(&model, &grid, 0, &StreamKey::root(0), false).unwrap();
        let cloud = law.sample_paths(&StreamKey::root(seed), members, true).unwrap();
        (model, grid, FieldSource::from_paths(Arc::new(cloud)))
    }

    fn drift_lattice(grid: &TimeGrid, nodes: Vec<usize>) -> FieldLattice {
        FieldLattice::new(1, grid, nodes, vec![vec![0.0], vec![1.0]], vec![]).unwrap()
    }

    #[test]
    fn lattice_layout_and_validation() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let probe = LambdaProbe {
            x: vec![0.0, 0.0],
            y: 0.0,
            z: vec![0.0, 0.0],
        };
        let l = FieldLattice::new(2, &grid, vec![0, 4, 8], vec![vec![0.0, 1.0], vec![1.0, 0.0]], vec![probe.clone()])
            .unwrap();
        assert_eq!(l.len(), 3 * 2 * 2 + 3 * 2 * 4 + 2 + 3);
        for (i, e) in l.entries.iter().enumerate() {
            assert_eq!(l.position(e), Some(i));
        }
        assert_eq!(l.restricted(&[FieldBlock::Terminal]).len(), 2);
        assert!(FieldLattice::new(2, &grid, vec![4, 4], vec![vec![0.0, 0.0]], vec![]).is_err());
        assert!(FieldLattice::new(2, &grid, vec![9], vec![vec![0.0, 0.0]], vec![]).is_err());
        assert!(FieldLattice::new(2, &grid, vec![0], vec![vec![0.0]], vec![]).is_err());
        assert!(FieldLattice::new(2, &grid, vec![0], vec![vec![0.0, f64::NAN]], vec![]).is_err());
        assert!(FieldLattice::new(2, &grid, vec![0], vec![vec![0.0, 0.0]; 2], vec![]).is_err());
        assert!(FieldLattice::new(2, &grid, vec![0], vec![], vec![probe.clone(), probe]).is_err());
    }

    #[test]
    fn decoupled_field_vanishes() {
        let model = catalog_model("constant", &[0.2, 1.0], &[0.0], 1.0).unwrap();
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let law = solve_limit_forward(&model, &grid, 0, &StreamKey::root(0), false).unwrap();
        let cloud = law.sample_paths(&StreamKey::root(1), 256, false).unwrap();
        let source = FieldSource::from_paths(Arc::new(cloud));
        let lattice = drift_lattice(&grid, vec![0, 4, 8]);
        let mut cov = theoretical_covariance(&model, &source, &lattice).unwrap();
        assert!(cov.values.iter().all(|&v| v == 0.0));
        let s = sample_field_on_lattice(&mut cov, &StreamKey::root(2)).unwrap();
        assert!(s.values.iter().all(|&v| v == 0.0));
        assert_eq!(s.jitter, 0.0);
        let x = source.x.path(0).to_vec();
        let f = sample_field_along_path(&model, &source, &x, None, &StreamKey::root(3)).unwrap();
        assert!(f.xi1.iter().chain(&f.xi2).all(|&v| v == 0.0) && f.xi3 == 0.0);
    }

    #[test]
    fn ou_drift_field_covariance_is_brownian() {
        // xi1_t(x) = beta (X_t - E X_t), X_t - E X_t = s W_t
        let (beta, s) = (1.0, 0.5);
        let (model, grid, source) = ou_cloud(beta, s, 20_000, 5);
        let nodes = vec![4, 8, 16];
        let lattice = drift_lattice(&grid, nodes.clone());
        let cov = theoretical_covariance(&model, &source, &lattice).unwrap();
        for (a, ea) in lattice.entries.iter().enumerate() {
            for (b, eb) in lattice.entries.iter().enumerate() {
                let expect = match (ea.block, eb.block) {
                    (FieldBlock::Drift, FieldBlock::Drift) => {
                        beta * beta * s * s * grid.time(ea.node).min(grid.time(eb.node))
                    }
                    _ => 0.0,
                };
                let got = cov.get(a, b);
                assert!(
                    (got - expect).abs() <= 4.0 * cov.stderr(a, b) + 1e-12,
                    "({a},{b}) {got} vs {expect} se {}",
                    cov.stderr(a, b)
                );
            }
        }
        // drift field does not depend on the probe
        assert_eq!(cov.get(0, 0), cov.get(1, 1));
        assert_eq!(cov.block_tag(0, 1), (1, 1));
    }

    #[test]
    fn too_small_cloud_is_rejected() {
        let (model, grid, source) = ou_cloud(1.0, 0.5, 64, 6);
        let lattice = drift_lattice(&grid, vec![8]);
        assert!(matches!(
            theoretical_covariance(&model, &source, &lattice),
            Err(Error::TooSmall { .. })
        ));
    }

    #[test]
    fn lattice_samples_reproduce_covariance() {
        let (model, grid, source) = ou_cloud(1.0, 1.0, 4096, 7);
        let lattice = drift_lattice(&grid, vec![4, 16]).restricted(&[FieldBlock::Drift]);
        let mut cov = theoretical_covariance(&model, &source, &lattice).unwrap();
        let sampler = LatticeSampler::new(&mut cov).unwrap();
        let reps = 10_000;
        let root = StreamKey::root(8);
        let draws: Vec<Vec<f64>> = (0..reps).map(|r| sampler.sample(&root.derive(Role::Field, r)).values).collect();
        let n = lattice.len();
        for a in 0..n {
            for b in 0..n {
                let xs: Vec<f64> = draws.iter().map(|v| v[a]).collect();
                let ys: Vec<f64> = draws.iter().map(|v| v[b]).collect();
                let (c, se) = crate::stats::covariance_with_se(&xs, &ys);
                let target = cov.get(a, b);
                assert!((c - target).abs() <= 4.0 * se, "({a},{b}) {c} vs {target} se {se}");
            }
        }
        // same key, same sample
        assert_eq!(sampler.sample(&root.derive(Role::Field, 3)).values, draws[3]);
    }

    #[test]
    fn factor_uses_jitter_for_singular_and_rejects_indefinite() {
        let mut singular = CovarianceMatrix {
            dim: 2,
            values: vec![1.0, 1.0, 1.0, 1.0],
            stderr: vec![0.0; 4],
            blocks: vec![FieldBlock::Drift; 2],
            symmetrized: true,
            jitter: None,
        };
        let l = singular.factor().unwrap();
        assert!(singular.jitter.unwrap() <= 1e-6);
        let back = &l * l.transpose();
        assert!((back[(0, 1)] - 1.0).abs() < 1e-5);
        let mut bad = singular.clone();
        bad.values = vec![1.0, 2.0, 2.0, 1.0];
        assert!(matches!(bad.factor(), Err(Error::NotFactorizable { .. })));
    }

    #[test]
    fn path_field_has_cloud_covariance() {
        let (model, _grid, source) = ou_cloud(1.0, 1.0, 512, 9);
        let sampler = PathFieldSampler::new(&model, &source).unwrap();
        let x = source.x.path(0).to_vec();
        let root = StreamKey::root(10);
        let reps = 8000;
        let fields: Vec<PathField> =
            (0..reps).map(|r| sampler.sample(&x, None, &root.derive(Role::Field, r)).unwrap()).collect();
        let lattice = FieldLattice::new(1, source.x.grid(), vec![8, 16], vec![vec![0.0]], vec![])
            .unwrap()
            .restricted(&[FieldBlock::Drift]);
        let cov = theoretical_covariance(&model, &source, &lattice).unwrap();
        let a: Vec<f64> = fields.iter().map(|f| f.xi1[8]).collect();
        let b: Vec<f64> = fields.iter().map(|f| f.xi1[16]).collect();
        for (u, v, target) in [(&a, &a, cov.get(0, 0)), (&a, &b, cov.get(0, 1)), (&b, &b, cov.get(1, 1))] {
            let (c, se) = crate::stats::covariance_with_se(u, v);
            assert!((c - target).abs() <= 4.0 * se, "{c} vs {target}");
        }
        assert_eq!(fields[0].xi1[0], 0.0);
    }

    #[test]
    fn principal_directions_are_orthonormal() {
        let (model, grid, source) = ou_cloud(1.0, 1.0, 256, 11);
        let sampler = PathFieldSampler::new(&model, &source).unwrap();
        let lattice = drift_lattice(&grid, (0..=16).step_by(2).collect());
        let dirs = sampler.principal_directions(&lattice, 4);
        assert!(!dirs.is_empty() && dirs.len() <= 4);
        for (i, u) in dirs.iter().enumerate() {
            for (j, v) in dirs.iter().enumerate() {
                let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-8, "({i},{j}) {dot}");
            }
        }
    }
}
