//! Coefficients of the mean-field system and the benchmark catalog.
//!
//! A model supplies the drift `b(x, x')`, diffusion `sigma(x, x')`, terminal
//! function `Phi(x, x')` and driver `f(lambda, lambda')` together with their
//! first derivatives. The driver only ever sees the partner's `(x', y')`:
//! [`Partner`] has no `z` field, so no caller can feed the partner's `Z`
//! into it.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::noise::TimeGrid;

/// Own state `(x, y, z)` passed to the driver.
#[derive(Clone, Copy, Debug)]
pub struct Lambda<'a> {
    pub x: &'a [f64],
    pub y: f64,
    pub z: &'a [f64],
}

/// Partner state `(x', y')` passed to the driver.
#[derive(Clone, Copy, Debug)]
pub struct Partner<'a> {
    pub x: &'a [f64],
    pub y: f64,
}

/// Which coefficients depend on the partner argument at all.
///
/// Solvers skip the environment average for a coefficient flagged `false`
/// and evaluate it once, so decoupled models give bit-identical results
/// across the limit and the approximating systems.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub drift: bool,
    pub diffusion: bool,
    pub terminal: bool,
    pub driver: bool,
}

impl Interaction {
    pub const ALL: Interaction = Interaction {
        drift: true,
        diffusion: true,
        terminal: true,
        driver: true,
    };
    pub const NONE: Interaction = Interaction {
        drift: false,
        diffusion: false,
        terminal: false,
        driver: false,
    };

    pub fn any(&self) -> bool {
        self.drift || self.diffusion || self.terminal || self.driver
    }

    pub fn forward(&self) -> bool {
        self.drift || self.diffusion
    }
}

/// Coefficient functions and their gradients.
///
/// Layouts: `sigma` is `d x d` row-major; `grad_x` of the drift stores
/// `d b_i / d x_k` at `i * d + k`; diffusion gradients store
/// `d sigma_ij / d x_k` at `(i * d + j) * d + k`. The driver gradient in
/// `lambda` is ordered `(x_1..x_d, y, z_1..z_d)` and the partner gradient
/// `(x'_1..x'_d, y')`.
pub trait Coefficients: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    fn drift(&self, x: &[f64], xp: &[f64], out: &mut [f64]);
    fn diffusion(&self, x: &[f64], xp: &[f64], out: &mut [f64]);
    fn terminal(&self, x: &[f64], xp: &[f64]) -> f64;
    fn driver(&self, lam: Lambda<'_>, partner: Partner<'_>) -> f64;

    fn drift_grad_x(&self, x: &[f64], xp: &[f64], out: &mut [f64]);
    fn drift_grad_xp(&self, x: &[f64], xp: &[f64], out: &mut [f64]);
    fn diffusion_grad_x(&self, x: &[f64], xp: &[f64], out: &mut [f64]);
    fn diffusion_grad_xp(&self, x: &[f64], xp: &[f64], out: &mut [f64]);
    fn terminal_grad_x(&self, x: &[f64], xp: &[f64], out: &mut [f64]);
    fn terminal_grad_xp(&self, x: &[f64], xp: &[f64], out: &mut [f64]);
    fn driver_grad_lambda(&self, lam: Lambda<'_>, partner: Partner<'_>, out: &mut [f64]);
    fn driver_grad_partner(&self, lam: Lambda<'_>, partner: Partner<'_>, out: &mut [f64]);

    fn interaction(&self) -> Interaction {
        Interaction::ALL
    }
}

/// Closed-form solution of the linear Gaussian family
/// `b(x, x') = b0 + beta * x'`, `sigma = s * I`, optionally with
/// `Phi(x, x') = sum_c (x_c + x'_c)` and zero driver.
///
/// The limit law is Gaussian with mean `m(t)` solving `m' = b0 + beta * m`
/// and covariance `s^2 t I`; `X_t = m(t) + s W_t`. With the linear terminal,
/// `Y_t = sum_c (2 m_c(T) + s W_{t,c})` and `Z_t = s * (1, ..., 1)`.
///
/// Each quantity also has a grid version: the exact solution of the
/// Euler-discretized limit equation, where the mean follows
/// `m_{i+1} = m_i + (b0 + beta * m_i) h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedForm {
    pub x0: Vec<f64>,
    pub b0: f64,
    pub beta: f64,
    pub s: f64,
    pub horizon: f64,
    pub linear_terminal: bool,
}

impl ClosedForm {
    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    pub fn mean(&self, t: f64) -> Vec<f64> {
        let growth = (self.beta * t).exp();
        let integral = if self.beta == 0.0 {
            t
        } else {
            (growth - 1.0) / self.beta
        };
        self.x0
            .iter()
            .map(|&x| x * growth + self.b0 * integral)
            .collect()
    }

    /// Mean of the discretized limit equation at every node (node-major).
    pub fn grid_mean(&self, grid: &TimeGrid) -> Vec<f64> {
        let d = self.dim();
        let h = grid.step_size();
        let mut m = Vec::with_capacity(grid.nodes_len() * d);
        m.extend_from_slice(&self.x0);
        for i in 0..grid.steps() {
            for c in 0..d {
                let cur = m[i * d + c];
                m.push(cur + (self.b0 + self.beta * cur) * h);
            }
        }
        m
    }

    pub fn std_dev(&self, t: f64) -> f64 {
        self.s * t.sqrt()
    }

    /// Exact path `m(t_i) + s W_{t_i}` for the Brownian path `w` (node-major).
    pub fn exact_path(&self, grid: &TimeGrid, w: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut out = Vec::with_capacity(w.len());
        for i in 0..grid.nodes_len() {
            let m = self.mean(grid.time(i));
            for c in 0..d {
                out.push(m[c] + self.s * w[i * d + c]);
            }
        }
        out
    }

    /// Exact solution of the Euler-discretized limit equation, `m_i + s W_{t_i}`.
    pub fn grid_path(&self, grid: &TimeGrid, w: &[f64]) -> Vec<f64> {
        let m = self.grid_mean(grid);
        m.iter()
            .zip(w)
            .map(|(mi, wi)| mi + self.s * wi)
            .collect()
    }

    fn require_terminal(&self) -> Result<()> {
        if self.linear_terminal {
            Ok(())
        } else {
            Err(Error::MissingClosedForm("backward component".into()))
        }
    }

    /// `Y_t` given `W_t` (one node, `d` entries).
    pub fn exact_y(&self, w_t: &[f64]) -> Result<f64> {
        self.require_terminal()?;
        let m_t = self.mean(self.horizon);
        Ok(m_t
            .iter()
            .zip(w_t)
            .map(|(m, w)| 2.0 * m + self.s * w)
            .sum())
    }

    /// Grid version of `Y_t` given `W_{t_i}`.
    pub fn grid_y(&self, grid: &TimeGrid, w_t: &[f64]) -> Result<f64> {
        self.require_terminal()?;
        let d = self.dim();
        let m = self.grid_mean(grid);
        let m_t = &m[grid.steps() * d..];
        Ok(m_t
            .iter()
            .zip(w_t)
            .map(|(m, w)| 2.0 * m + self.s * w)
            .sum())
    }

    pub fn exact_z(&self) -> Result<Vec<f64>> {
        self.require_terminal()?;
        Ok(vec![self.s; self.dim()])
    }
}

/// A fully specified model: coefficients plus problem data.
#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    pub params: Vec<f64>,
    pub dim: usize,
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub coefficients: Arc<dyn Coefficients>,
    pub lipschitz_bound: f64,
    /// Coefficients are Lipschitz but not bounded (linear families).
    pub unbounded: bool,
    pub closed_form: Option<ClosedForm>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("params", &self.params)
            .field("dim", &self.dim)
            .field("x0", &self.x0)
            .field("horizon", &self.horizon)
            .field("lipschitz_bound", &self.lipschitz_bound)
            .field("unbounded", &self.unbounded)
            .field("closed_form", &self.closed_form.is_some())
            .finish()
    }
}

impl ModelSpec {
    /// Wraps user-supplied coefficients (no closed form).
    pub fn custom(
        name: impl Into<String>,
        coefficients: Arc<dyn Coefficients>,
        x0: Vec<f64>,
        horizon: f64,
        lipschitz_bound: f64,
    ) -> Result<Self> {
        let dim = coefficients.dim();
        validate_problem(dim, &x0, horizon)?;
        Ok(ModelSpec {
            name: name.into(),
            params: Vec::new(),
            dim,
            x0,
            horizon,
            coefficients,
            lipschitz_bound,
            unbounded: false,
            closed_form: None,
        })
    }

    pub fn interaction(&self) -> Interaction {
        self.coefficients.interaction()
    }

    pub fn grid(&self, steps: usize) -> Result<TimeGrid> {
        TimeGrid::new(self.horizon, steps)
    }
}

fn validate_problem(dim: usize, x0: &[f64], horizon: f64) -> Result<()> {
    if dim == 0 {
        return Err(Error::InvalidParameter("dimension must be positive".into()));
    }
    if x0.len() != dim {
        return Err(Error::Shape(format!(
            "x0 has {} entries, model dimension is {dim}",
            x0.len()
        )));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("x0 must be finite".into()));
    }
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "horizon must be positive, got {horizon}"
        )));
    }
    Ok(())
}

/// Names accepted by [`catalog_model`].
pub const CATALOG: &[&str] = &["constant", "ou_mean_field", "tanh_bounded", "mf_bsde_linear"];

/// Parameter names of each catalog family, in positional order.
pub fn catalog_params(name: &str) -> Option<&'static [&'static str]> {
    match name {
        "constant" => Some(&["b0", "s"]),
        "ou_mean_field" => Some(&["beta", "s"]),
        "tanh_bounded" => Some(&["a", "s"]),
        "mf_bsde_linear" => Some(&["beta", "s"]),
        _ => None,
    }
}

/// Builds a catalog model.
///
/// * `constant(b0, s)`: `b = b0`, `sigma = s I`, no backward data.
/// * `ou_mean_field(beta, s)`: `b(x, x') = beta x'`, `sigma = s I`.
/// * `mf_bsde_linear(beta, s)`: as above with `Phi(x, x') = sum(x + x')`, `f = 0`.
/// * `tanh_bounded(a, s)`: bounded smooth coefficients, see [`TanhBounded`].
pub fn catalog_model(name: &str, params: &[f64], x0: &[f64], horizon: f64) -> Result<ModelSpec> {
    let names = catalog_params(name).ok_or_else(|| Error::UnknownModel(name.to_string()))?;
    if params.len() != names.len() {
        return Err(Error::InvalidParameter(format!(
            "`{name}` takes {} parameters ({}), got {}",
            names.len(),
            names.join(", "),
            params.len()
        )));
    }
    if let Some(bad) = params.iter().position(|p| !p.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "parameter `{}` of `{name}` is not finite",
            names[bad]
        )));
    }
    let dim = x0.len();
    validate_problem(dim, x0, horizon)?;
    let (p0, p1) = (params[0], params[1]);

    let (coefficients, lipschitz, unbounded, closed): (Arc<dyn Coefficients>, f64, bool, _) =
        match name {
            "constant" => (
                Arc::new(LinearGaussian::new(dim, p0, 0.0, p1, false)),
                0.0,
                false,
                Some((p0, 0.0, p1, false)),
            ),
            "ou_mean_field" => (
                Arc::new(LinearGaussian::new(dim, 0.0, p0, p1, false)),
                p0.abs(),
                true,
                Some((0.0, p0, p1, false)),
            ),
            "mf_bsde_linear" => (
                Arc::new(LinearGaussian::new(dim, 0.0, p0, p1, true)),
                p0.abs().max((2.0 * dim as f64).sqrt()),
                true,
                Some((0.0, p0, p1, true)),
            ),
            "tanh_bounded" => {
                let m = TanhBounded { dim, a: p0, s: p1 };
                let l = m.lipschitz();
                (Arc::new(m), l, false, None)
            }
            _ => unreachable!(),
        };

    Ok(ModelSpec {
        name: name.to_string(),
        params: params.to_vec(),
        dim,
        x0: x0.to_vec(),
        horizon,
        coefficients,
        lipschitz_bound: lipschitz,
        unbounded,
        closed_form: closed.map(|(b0, beta, s, linear_terminal)| ClosedForm {
            x0: x0.to_vec(),
            b0,
            beta,
            s,
            horizon,
            linear_terminal,
        }),
    })
}

/// `b = b0 + beta x'`, `sigma = s I`, optional `Phi = sum(x + x')`, `f = 0`.
#[derive(Clone, Debug)]
pub struct LinearGaussian {
    dim: usize,
    b0: f64,
    beta: f64,
    s: f64,
    linear_terminal: bool,
}

impl LinearGaussian {
    pub fn new(dim: usize, b0: f64, beta: f64, s: f64, linear_terminal: bool) -> Self {
        LinearGaussian {
            dim,
            b0,
            beta,
            s,
            linear_terminal,
        }
    }
}

impl Coefficients for LinearGaussian {
    fn dim(&self) -> usize {
        self.dim
    }

    fn drift(&self, _x: &[f64], xp: &[f64], out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(xp) {
            *o = self.b0 + self.beta * v;
        }
    }

    fn diffusion(&self, _x: &[f64], _xp: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for i in 0..self.dim {
            out[i * self.dim + i] = self.s;
        }
    }

    fn terminal(&self, x: &[f64], xp: &[f64]) -> f64 {
        if self.linear_terminal {
            x.iter().sum::<f64>() + xp.iter().sum::<f64>()
        } else {
            0.0
        }
    }

    fn driver(&self, _lam: Lambda<'_>, _partner: Partner<'_>) -> f64 {
        0.0
    }

    fn drift_grad_x(&self, _x: &[f64], _xp: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn drift_grad_xp(&self, _x: &[f64], _xp: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for i in 0..self.dim {
            out[i * self.dim + i] = self.beta;
        }
    }

    fn diffusion_grad_x(&self, _x: &[f64], _xp: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn diffusion_grad_xp(&self, _x: &[f64], _xp: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn terminal_grad_x(&self, _x: &[f64], _xp: &[f64], out: &mut [f64]) {
        out.fill(if self.linear_terminal { 1.0 } else { 0.0 });
    }

    fn terminal_grad_xp(&self, _x: &[f64], _xp: &[f64], out: &mut [f64]) {
        out.fill(if self.linear_terminal { 1.0 } else { 0.0 });
    }

    fn driver_grad_lambda(&self, _lam: Lambda<'_>, _partner: Partner<'_>, out: &mut [f64]) {
        out.fill(0.0);
    }

    fn driver_grad_partner(&self, _lam: Lambda<'_>, _partner: Partner<'_>, out: &mut [f64]) {
        out.fill(0.0);
    }

    fn interaction(&self) -> Interaction {
        Interaction {
            drift: self.beta != 0.0,
            diffusion: false,
            terminal: self.linear_terminal,
            driver: false,
        }
    }
}

/// Bounded, smooth, fully interacting model:
///
/// * `b_i(x, x') = a tanh(x'_i)`
/// * `sigma(x, x') = s diag(1 + tanh(x'_i) / 4)`
/// * `Phi(x, x') = sum_i tanh(x_i + x'_i)`
/// * `f(lambda, lambda') = -tanh(y)/2 + sum_i tanh(z_i)/10 + sum_i sin(x'_i)/4 + tanh(y')/10`
#[derive(Clone, Debug)]
pub struct TanhBounded {
    pub dim: usize,
    pub a: f64,
    pub s: f64,
}

fn sech2(v: f64) -> f64 {
    let t = v.tanh();
    1.0 - t * t
}

impl TanhBounded {
    fn lipschitz(&self) -> f64 {
        let d = self.dim as f64;
        let driver = (0.25 + 0.01 * d + 0.0625 * d + 0.01).sqrt();
        self.a
            .abs()
            .max(0.25 * self.s.abs())
            .max((2.0 * d).sqrt())
            .max(driver)
    }
}

impl Coefficients for TanhBounded {
    fn dim(&self) -> usize {
        self.dim
    }

    fn drift(&self, _x: &[f64], xp: &[f64], out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(xp) {
            *o = self.a * v.tanh();
        }
    }

    fn diffusion(&self, _x: &[f64], xp: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for i in 0..self.dim {
            out[i * self.dim + i] = self.s * (1.0 + 0.25 * xp[i].tanh());
        }
    }

    fn terminal(&self, x: &[f64], xp: &[f64]) -> f64 {
        x.iter().zip(xp).map(|(a, b)| (a + b).tanh()).sum()
    }

    fn driver(&self, lam: Lambda<'_>, partner: Partner<'_>) -> f64 {
        -0.5 * lam.y.tanh()
            + 0.1 * lam.z.iter().map(|z| z.tanh()).sum::<f64>()
            + 0.25 * partner.x.iter().map(|x| x.sin()).sum::<f64>()
            + 0.1 * partner.y.tanh()
    }

    fn drift_grad_x(&self, _x: &[f64], _xp: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn drift_grad_xp(&self, _x: &[f64], xp: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for i in 0..self.dim {
            out[i * self.dim + i] = self.a * sech2(xp[i]);
        }
    }

    fn diffusion_grad_x(&self, _x: &[f64], _xp: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn diffusion_grad_xp(&self, _x: &[f64], xp: &[f64], out: &mut [f64]) {
        let d = self.dim;
        out.fill(0.0);
        for i in 0..d {
            out[(i * d + i) * d + i] = 0.25 * self.s * sech2(xp[i]);
        }
    }

    fn terminal_grad_x(&self, x: &[f64], xp: &[f64], out: &mut [f64]) {
        for i in 0..self.dim {
            out[i] = sech2(x[i] + xp[i]);
        }
    }

    fn terminal_grad_xp(&self, x: &[f64], xp: &[f64], out: &mut [f64]) {
        self.terminal_grad_x(x, xp, out);
    }

    fn driver_grad_lambda(&self, lam: Lambda<'_>, _partner: Partner<'_>, out: &mut [f64]) {
        let d = self.dim;
        out.fill(0.0);
        out[d] = -0.5 * sech2(lam.y);
        for i in 0..d {
            out[d + 1 + i] = 0.1 * sech2(lam.z[i]);
        }
    }

    fn driver_grad_partner(&self, _lam: Lambda<'_>, partner: Partner<'_>, out: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            out[i] = 0.25 * partner.x[i].cos();
        }
        out[d] = 0.1 * sech2(partner.y);
    }
}

/// Coefficient selector for [`evaluate_mean_field`] and gradient reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Coefficient {
    Drift,
    Diffusion,
    Terminal,
    Driver,
}

impl Coefficient {
    pub fn output_len(self, dim: usize) -> usize {
        match self {
            Coefficient::Drift => dim,
            Coefficient::Diffusion => dim * dim,
            Coefficient::Terminal | Coefficient::Driver => 1,
        }
    }
}

/// One environment sample `(x', y')`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSample {
    pub x: Vec<f64>,
    pub y: f64,
}

/// Average of a coefficient at `point` over the environment samples,
/// `(1/|env|) sum_k coeff(point, env_k)`, accumulated in index order.
///
/// For the drift, diffusion and terminal only `point.x` is read.
pub fn evaluate_mean_field(
    model: &ModelSpec,
    which: Coefficient,
    point: Lambda<'_>,
    env: &[EnvSample],
) -> Result<Vec<f64>> {
    if env.is_empty() {
        return Err(Error::EmptyEnvironment);
    }
    let d = model.dim;
    if point.x.len() != d || env.iter().any(|e| e.x.len() != d) {
        return Err(Error::Shape("evaluation point and environment must be d-vectors".into()));
    }
    if which == Coefficient::Driver && point.z.len() != d {
        return Err(Error::Shape("driver needs a d-dimensional z".into()));
    }
    let c = &model.coefficients;
    let len = which.output_len(d);
    let mut acc = MeanAccumulator::new(len);
    let mut buf = vec![0.0; len];
    for e in env {
        match which {
            Coefficient::Drift => c.drift(point.x, &e.x, &mut buf),
            Coefficient::Diffusion => c.diffusion(point.x, &e.x, &mut buf),
            Coefficient::Terminal => buf[0] = c.terminal(point.x, &e.x),
            Coefficient::Driver => buf[0] = c.driver(point, Partner { x: &e.x, y: e.y }),
        }
        acc.push(&buf);
    }
    let mut out = vec![0.0; len];
    acc.finish(&mut out);
    Ok(out)
}

/// Running (optionally weighted) mean accumulated as deviations from the
/// first sample, so that identical samples average to that sample bit for bit.
#[derive(Clone, Debug)]
pub struct MeanAccumulator {
    first: Vec<f64>,
    dev: Vec<f64>,
    count: usize,
    weight: f64,
}

impl MeanAccumulator {
    pub fn new(len: usize) -> Self {
        MeanAccumulator {
            first: vec![0.0; len],
            dev: vec![0.0; len],
            count: 0,
            weight: 0.0,
        }
    }

    pub fn reset(&mut self) {
        self.dev.fill(0.0);
        self.count = 0;
        self.weight = 0.0;
    }

    pub fn push(&mut self, v: &[f64]) {
        self.push_weighted(v, 1.0);
    }

    pub fn push_weighted(&mut self, v: &[f64], w: f64) {
        if self.count == 0 {
            self.first.copy_from_slice(v);
        } else {
            for ((d, x), f) in self.dev.iter_mut().zip(v).zip(&self.first) {
                *d += w * (x - f);
            }
        }
        self.count += 1;
        self.weight += w;
    }

    pub fn push_scalar(&mut self, v: f64) {
        self.push(std::slice::from_ref(&v));
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(&self, out: &mut [f64]) {
        for ((o, f), d) in out.iter_mut().zip(&self.first).zip(&self.dev) {
            *o = f + d / self.weight;
        }
    }

    pub fn scalar(&self) -> f64 {
        self.first[0] + self.dev[0] / self.weight
    }
}

/// Evaluation point for gradient and Lipschitz checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub x: Vec<f64>,
    pub y: f64,
    pub z: Vec<f64>,
    pub xp: Vec<f64>,
    pub yp: f64,
}

impl Probe {
    fn is_finite(&self) -> bool {
        self.x.iter().chain(&self.z).chain(&self.xp).all(|v| v.is_finite())
            && self.y.is_finite()
            && self.yp.is_finite()
    }
}

/// Maximum relative error of one declared gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientError {
    pub gradient: String,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub entries: Vec<GradientError>,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradientReport {
    pub fn max_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// Finite-difference step relative to unit-scale inputs.
pub const GRADIENT_STEP: f64 = 1e-5;
/// Acceptance threshold for the relative gradient error.
pub const GRADIENT_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Copy)]
enum Slot {
    X,
    Y,
    Z,
    Xp,
    Yp,
}

fn perturbed(p: &Probe, slot: Slot, k: usize, delta: f64) -> Probe {
    let mut q = p.clone();
    match slot {
        Slot::X => q.x[k] += delta,
        Slot::Y => q.y += delta,
        Slot::Z => q.z[k] += delta,
        Slot::Xp => q.xp[k] += delta,
        Slot::Yp => q.yp += delta,
    }
    q
}

fn slot_value(p: &Probe, slot: Slot, k: usize) -> f64 {
    match slot {
        Slot::X => p.x[k],
        Slot::Y => p.y,
        Slot::Z => p.z[k],
        Slot::Xp => p.xp[k],
        Slot::Yp => p.yp,
    }
}

/// Evaluates every coefficient at a probe as one flat vector:
/// drift (d), diffusion (d*d), terminal (1), driver (1).
fn flat_values(c: &dyn Coefficients, p: &Probe) -> Vec<f64> {
    let d = c.dim();
    let mut out = vec![0.0; d + d * d + 2];
    c.drift(&p.x, &p.xp, &mut out[..d]);
    c.diffusion(&p.x, &p.xp, &mut out[d..d + d * d]);
    out[d + d * d] = c.terminal(&p.x, &p.xp);
    out[d + d * d + 1] = c.driver(
        Lambda {
            x: &p.x,
            y: p.y,
            z: &p.z,
        },
        Partner { x: &p.xp, y: p.yp },
    );
    out
}

/// Compares each declared gradient with a central finite difference at every
/// probe. The error is `|analytic - fd| / max(1, |analytic|)`.
pub fn check_gradients(model: &ModelSpec, probes: &[Probe]) -> Result<GradientReport> {
    let c = model.coefficients.as_ref();
    let d = model.dim;
    let mut maxima = [0.0f64; 10];
    let names = [
        "drift_grad_x",
        "drift_grad_xp",
        "diffusion_grad_x",
        "diffusion_grad_xp",
        "terminal_grad_x",
        "terminal_grad_xp",
        "driver_grad_lambda_x",
        "driver_grad_lambda_yz",
        "driver_grad_partner_x",
        "driver_grad_partner_y",
    ];
    let mut g_bx = vec![0.0; d * d];
    let mut g_bxp = vec![0.0; d * d];
    let mut g_sx = vec![0.0; d * d * d];
    let mut g_sxp = vec![0.0; d * d * d];
    let mut g_px = vec![0.0; d];
    let mut g_pxp = vec![0.0; d];
    let mut g_fl = vec![0.0; 2 * d + 1];
    let mut g_fp = vec![0.0; d + 1];

    for (pi, p) in probes.iter().enumerate() {
        if p.x.len() != d || p.z.len() != d || p.xp.len() != d {
            return Err(Error::Shape(format!("probe {pi} has wrong dimensions")));
        }
        if !p.is_finite() {
            return Err(Error::NonFinite {
                what: "probe".into(),
                probe: pi,
            });
        }
        let base = flat_values(c, p);
        if base.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "coefficient".into(),
                probe: pi,
            });
        }
        let lam = Lambda {
            x: &p.x,
            y: p.y,
            z: &p.z,
        };
        let partner = Partner { x: &p.xp, y: p.yp };
        c.drift_grad_x(&p.x, &p.xp, &mut g_bx);
        c.drift_grad_xp(&p.x, &p.xp, &mut g_bxp);
        c.diffusion_grad_x(&p.x, &p.xp, &mut g_sx);
        c.diffusion_grad_xp(&p.x, &p.xp, &mut g_sxp);
        c.terminal_grad_x(&p.x, &p.xp, &mut g_px);
        c.terminal_grad_xp(&p.x, &p.xp, &mut g_pxp);
        c.driver_grad_lambda(lam, partner, &mut g_fl);
        c.driver_grad_partner(lam, partner, &mut g_fp);

        let fd = |slot: Slot, k: usize| -> Result<Vec<f64>> {
            let step = GRADIENT_STEP * slot_value(p, slot, k).abs().max(1.0);
            let up = flat_values(c, &perturbed(p, slot, k, step));
            let dn = flat_values(c, &perturbed(p, slot, k, -step));
            if up.iter().chain(&dn).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "coefficient (finite difference)".into(),
                    probe: pi,
                });
            }
            Ok(up.iter().zip(&dn).map(|(a, b)| (a - b) / (2.0 * step)).collect())
        };
        let rel = |analytic: f64, numeric: f64| (analytic - numeric).abs() / analytic.abs().max(1.0);
        let off_s = d;
        let off_p = d + d * d;
        let off_f = off_p + 1;

        for k in 0..d {
            let dx = fd(Slot::X, k)?;
            let dxp = fd(Slot::Xp, k)?;
            for i in 0..d {
                maxima[0] = maxima[0].max(rel(g_bx[i * d + k], dx[i]));
                maxima[1] = maxima[1].max(rel(g_bxp[i * d + k], dxp[i]));
                for j in 0..d {
                    let idx = (i * d + j) * d + k;
                    maxima[2] = maxima[2].max(rel(g_sx[idx], dx[off_s + i * d + j]));
                    maxima[3] = maxima[3].max(rel(g_sxp[idx], dxp[off_s + i * d + j]));
                }
            }
            maxima[4] = maxima[4].max(rel(g_px[k], dx[off_p]));
            maxima[5] = maxima[5].max(rel(g_pxp[k], dxp[off_p]));
            maxima[6] = maxima[6].max(rel(g_fl[k], dx[off_f]));
            maxima[8] = maxima[8].max(rel(g_fp[k], dxp[off_f]));
            let dz = fd(Slot::Z, k)?;
            maxima[7] = maxima[7].max(rel(g_fl[d + 1 + k], dz[off_f]));
        }
        let dy = fd(Slot::Y, 0)?;
        maxima[7] = maxima[7].max(rel(g_fl[d], dy[off_f]));
        let dyp = fd(Slot::Yp, 0)?;
        maxima[9] = maxima[9].max(rel(g_fp[d], dyp[off_f]));
    }

    let entries: Vec<GradientError> = names
        .iter()
        .zip(maxima)
        .map(|(n, e)| GradientError {
            gradient: n.to_string(),
            max_rel_error: e,
        })
        .collect();
    let pass = entries.iter().all(|e| e.max_rel_error <= GRADIENT_TOLERANCE);
    Ok(GradientReport {
        entries,
        tolerance: GRADIENT_TOLERANCE,
        pass,
    })
}

/// Largest observed ratio `|g(u) - g(v)| / |u - v|` over probe pairs, per
/// coefficient, with `u = (lambda, lambda')` the joint argument.
pub fn observed_lipschitz(model: &ModelSpec, pairs: &[(Probe, Probe)]) -> f64 {
    let c = model.coefficients.as_ref();
    let d = model.dim;
    let mut worst = 0.0f64;
    for (p, q) in pairs {
        let a = flat_values(c, p);
        let b = flat_values(c, q);
        let dist_forward = p
            .x
            .iter()
            .chain(&p.xp)
            .zip(q.x.iter().chain(&q.xp))
            .map(|(u, v)| (u - v).powi(2))
            .sum::<f64>()
            .sqrt();
        let dist_full = (dist_forward.powi(2)
            + (p.y - q.y).powi(2)
            + (p.yp - q.yp).powi(2)
            + p.z.iter().zip(&q.z).map(|(u, v)| (u - v).powi(2)).sum::<f64>())
        .sqrt();
        if dist_full == 0.0 {
            continue;
        }
        let norm = |r: std::ops::Range<usize>| {
            r.map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
        };
        let ratios = [
            norm(0..d) / dist_forward,
            norm(d..d + d * d) / dist_forward,
            norm(d + d * d..d + d * d + 1) / dist_forward,
            norm(d + d * d + 1..d + d * d + 2) / dist_full,
        ];
        for r in ratios {
            if r.is_finite() {
                worst = worst.max(r);
            }
        }
    }
    worst
}
