//! Least-squares projection onto polynomial bases, the conditional
//! expectation estimator of the backward solvers.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Relative threshold on the diagonal of the QR factor below which the
/// design is treated as rank deficient.
const RANK_TOL: f64 = 1e-10;

/// Monomials of total degree at most `degree` in `vars` variables.
pub fn monomial_exponents(vars: usize, degree: usize) -> Vec<Vec<u8>> {
    let mut out = vec![vec![0u8; vars]];
    let mut frontier = vec![vec![0u8; vars]];
    for _ in 0..degree {
        let mut next = Vec::new();
        for e in &frontier {
            // extend only at or after the last non-zero slot to avoid duplicates
            let start = e.iter().rposition(|&p| p > 0).unwrap_or(0);
            for v in start..vars {
                let mut f = e.clone();
                f[v] += 1;
                next.push(f);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Standardization of raw regressors; columns with zero spread are dropped
/// from the basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub active: Vec<usize>,
}

impl Standardizer {
    pub fn fit(features: &[f64], rows: usize, vars: usize) -> Self {
        let mut means = vec![0.0; vars];
        let mut scales = vec![0.0; vars];
        for v in 0..vars {
            let m = (0..rows).map(|r| features[r * vars + v]).sum::<f64>() / rows as f64;
            let var = (0..rows)
                .map(|r| (features[r * vars + v] - m).powi(2))
                .sum::<f64>()
                / rows as f64;
            means[v] = m;
            scales[v] = var.sqrt();
        }
        let max_abs = (0..vars)
            .map(|v| means[v].abs().max(scales[v]))
            .fold(0.0f64, f64::max)
            .max(1.0);
        let active = (0..vars)
            .filter(|&v| scales[v] > 1e-12 * max_abs)
            .collect();
        Standardizer {
            means,
            scales,
            active,
        }
    }
}

/// Fitted polynomial regression for one or more targets sharing a design.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyFit {
    pub requested_degree: usize,
    pub degree: usize,
    pub standardizer: Standardizer,
    pub exponents: Vec<Vec<u8>>,
    /// Coefficients, basis-major: entry `k * targets + t`.
    pub coefficients: Vec<f64>,
    pub targets: usize,
    /// Root mean square residual per target.
    pub residual_rms: Vec<f64>,
    /// In-sample fitted values, row-major `rows x targets`.
    #[serde(skip)]
    pub fitted: Vec<f64>,
}

impl PolyFit {
    pub fn fell_back(&self) -> bool {
        self.degree < self.requested_degree
    }

    fn basis_row(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let z: Vec<f64> = self
            .standardizer
            .active
            .iter()
            .map(|&v| (x[v] - self.standardizer.means[v]) / self.standardizer.scales[v])
            .collect();
        for e in &self.exponents {
            let mut term = 1.0;
            for (zi, &p) in z.iter().zip(e) {
                for _ in 0..p {
                    term *= zi;
                }
            }
            out.push(term);
        }
    }

    /// Predictions of every target at one regressor vector (linear-only
    /// columns included).
    pub fn predict(&self, x: &[f64], out: &mut [f64]) {
        let mut row = Vec::with_capacity(self.exponents.len());
        self.basis_row(x, &mut row);
        out.fill(0.0);
        for (k, b) in row.iter().enumerate() {
            for (t, o) in out.iter_mut().enumerate() {
                *o += b * self.coefficients[k * self.targets + t];
            }
        }
    }
}

fn design(
    features: &[f64],
    rows: usize,
    vars: usize,
    st: &Standardizer,
    exps: &[Vec<u8>],
) -> DMatrix<f64> {
    let mut m = DMatrix::<f64>::zeros(rows, exps.len());
    let mut z = vec![0.0; st.active.len()];
    for r in 0..rows {
        for (slot, &v) in st.active.iter().enumerate() {
            z[slot] = (features[r * vars + v] - st.means[v]) / st.scales[v];
        }
        for (k, e) in exps.iter().enumerate() {
            let mut term = 1.0;
            for (zi, &p) in z.iter().zip(e) {
                for _ in 0..p {
                    term *= zi;
                }
            }
            m[(r, k)] = term;
        }
    }
    m
}

/// Least-squares solve by Householder QR. `None` when the design is rank
/// deficient or under-determined.
pub fn least_squares(design: &DMatrix<f64>, targets: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let (rows, cols) = design.shape();
    if rows < cols {
        return None;
    }
    let qr = design.clone().qr();
    let r = qr.r();
    let max_diag = (0..cols).map(|k| r[(k, k)].abs()).fold(0.0f64, f64::max);
    if max_diag == 0.0 || (0..cols).any(|k| r[(k, k)].abs() <= RANK_TOL * max_diag) {
        return None;
    }
    let qt_b = qr.q().transpose() * targets;
    r.solve_upper_triangular(&qt_b)
}

/// Regresses each target column on polynomials of total degree at most
/// `degree` in the standardized regressors, lowering the degree until the
/// design has full rank. Degree zero (the plain mean) always succeeds.
///
/// `features` is row-major `rows x vars`; `targets` is row-major
/// `rows x n_targets`.
pub fn fit_poly(
    features: &[f64],
    rows: usize,
    vars: usize,
    degree: usize,
    targets: &[f64],
    n_targets: usize,
) -> PolyFit {
    fit_poly_extra(features, rows, vars, 0, degree, targets, n_targets)
}

/// As [`fit_poly`], with the last `n_extra` of the `vars + n_extra`
/// feature columns entering the basis linearly only. When the design stays
/// rank deficient at degree zero the linear columns are dropped too.
pub fn fit_poly_extra(
    features: &[f64],
    rows: usize,
    vars: usize,
    n_extra: usize,
    degree: usize,
    targets: &[f64],
    n_targets: usize,
) -> PolyFit {
    let width = vars + n_extra;
    assert_eq!(features.len(), rows * width);
    assert_eq!(targets.len(), rows * n_targets);
    let st = Standardizer::fit(features, rows, width);
    let poly_active = st.active.iter().filter(|&&v| v < vars).count();
    let extra_active = st.active.len() - poly_active;
    let y = DMatrix::from_row_slice(rows, n_targets, targets);
    let mut deg = if poly_active == 0 { 0 } else { degree };
    let mut with_extra = extra_active > 0;
    loop {
        let mut exps: Vec<Vec<u8>> = monomial_exponents(poly_active, deg)
            .into_iter()
            .map(|mut e| {
                e.resize(st.active.len(), 0);
                e
            })
            .collect();
        if with_extra {
            for k in 0..extra_active {
                let mut e = vec![0u8; st.active.len()];
                e[poly_active + k] = 1;
                exps.push(e);
            }
        }
        let x = design(features, rows, width, &st, &exps);
        let solved = if exps.len() == 1 {
            let means = (0..n_targets)
                .map(|t| y.column(t).sum() / rows as f64)
                .collect::<Vec<_>>();
            Some(DMatrix::from_row_slice(1, n_targets, &means))
        } else {
            least_squares(&x, &y)
        };
        if let Some(beta) = solved {
            let fit = &x * &beta;
            let resid = &y - &fit;
            let mut fitted = Vec::with_capacity(rows * n_targets);
            for r in 0..rows {
                for t in 0..n_targets {
                    fitted.push(fit[(r, t)]);
                }
            }
            let residual_rms = (0..n_targets)
                .map(|t| (resid.column(t).norm_squared() / rows as f64).sqrt())
                .collect();
            let mut coefficients = Vec::with_capacity(exps.len() * n_targets);
            for k in 0..exps.len() {
                for t in 0..n_targets {
                    coefficients.push(beta[(k, t)]);
                }
            }
            return PolyFit {
                requested_degree: degree,
                degree: deg,
                standardizer: st,
                exponents: exps,
                coefficients,
                targets: n_targets,
                residual_rms,
                fitted,
            };
        }
        if deg > 0 {
            deg -= 1;
        } else {
            with_extra = false;
        }
    }
}
