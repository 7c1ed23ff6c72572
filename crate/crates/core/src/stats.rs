//! Sample statistics, the two-sample Kolmogorov-Smirnov test, the weighted
//! log-log slope fit and Gauss-Hermite quadrature.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Mean, variance and shape of a sample, each with a standard error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub n: usize,
    pub mean: f64,
    pub mean_se: f64,
    pub variance: f64,
    pub variance_se: f64,
    pub skewness: f64,
    pub skewness_se: f64,
    pub excess_kurtosis: f64,
    pub kurtosis_se: f64,
}

/// Sample moments. The variance standard error is the distribution-free
/// `sqrt((m4 - v^2) / n)`; the shape errors are the normal-theory
/// `sqrt(6/n)` and `sqrt(24/n)`.
pub fn moments(xs: &[f64]) -> Moments {
    let n = xs.len();
    if n == 0 {
        return Moments {
            n,
            mean: f64::NAN,
            mean_se: f64::NAN,
            variance: f64::NAN,
            variance_se: f64::NAN,
            skewness: f64::NAN,
            skewness_se: f64::NAN,
            excess_kurtosis: f64::NAN,
            kurtosis_se: f64::NAN,
        };
    }
    let nf = n as f64;
    let mean = xs.iter().sum::<f64>() / nf;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for x in xs {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= nf;
    m3 /= nf;
    m4 /= nf;
    let variance = if n > 1 { m2 * nf / (nf - 1.0) } else { 0.0 };
    let (skewness, excess_kurtosis) = if m2 > 0.0 {
        (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
    } else {
        (0.0, 0.0)
    };
    Moments {
        n,
        mean,
        mean_se: (variance / nf).sqrt(),
        variance,
        variance_se: ((m4 - m2 * m2).max(0.0) / nf).sqrt(),
        skewness,
        skewness_se: (6.0 / nf).sqrt(),
        excess_kurtosis,
        kurtosis_se: (24.0 / nf).sqrt(),
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample covariance of two equally long samples.
pub fn covariance(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = mean(xs);
    let my = mean(ys);
    xs.iter()
        .zip(ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / (n - 1.0)
}

/// Sample covariance together with its standard error, estimated as the
/// standard deviation of the centered products over `sqrt(n)`.
pub fn covariance_with_se(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = mean(xs);
    let my = mean(ys);
    let prods: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).collect();
    let m = moments(&prods);
    (m.mean * n / (n - 1.0), m.mean_se)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n1: usize,
    pub n2: usize,
}

/// Two-sample Kolmogorov-Smirnov test with the asymptotic Kolmogorov
/// distribution and Stephens' small-sample correction.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::TooSmall {
            what: "KS test sample".into(),
            needed: 1,
            got: 0,
        });
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n1, n2) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < n1 && j < n2 {
        let v = a[i].min(b[j]);
        while i < n1 && a[i] <= v {
            i += 1;
        }
        while j < n2 && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n1 as f64 - j as f64 / n2 as f64).abs());
    }
    let ne = (n1 * n2) as f64 / (n1 + n2) as f64;
    let sq = ne.sqrt();
    let lambda = (sq + 0.12 + 0.11 / sq) * d;
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_survival(lambda),
        n1,
        n2,
    })
}

/// `P(K > lambda)` for the Kolmogorov distribution.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    // The alternating series converges slowly near zero, where the tail is 1.
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-16 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Weighted least-squares line through `(ln N, ln error)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub points: usize,
}

/// Fits `ln e = a + b ln N` with weights `1 / var(ln e)`, where the delta
/// method gives `var(ln e) = (se / e)^2`. The slope standard error is the
/// weighted-fit covariance scaled by the reduced chi-square, and the 95%
/// interval uses Student's t with `points - 2` degrees of freedom.
///
/// Points with non-finite or non-positive errors are skipped; fewer than
/// three usable points give `None`.
pub fn fit_loglog_slope(ns: &[f64], errors: &[f64], stderrs: &[f64]) -> Option<SlopeFit> {
    let pts: Vec<(f64, f64, f64)> = ns
        .iter()
        .zip(errors)
        .zip(stderrs)
        .filter(|((n, e), _)| **n > 0.0 && e.is_finite() && **e > 0.0)
        .map(|((n, e), se)| {
            let rel = if se.is_finite() && *se > 0.0 { se / e } else { 0.0 };
            (n.ln(), e.ln(), rel)
        })
        .collect();
    if pts.len() < 3 {
        return None;
    }
    // Unknown or zero standard errors fall back to equal weights.
    let uniform = pts.iter().any(|p| p.2 <= 0.0);
    let w: Vec<f64> = pts
        .iter()
        .map(|p| if uniform { 1.0 } else { 1.0 / (p.2 * p.2) })
        .collect();
    let sw: f64 = w.iter().sum();
    let xm = pts.iter().zip(&w).map(|(p, w)| w * p.0).sum::<f64>() / sw;
    let ym = pts.iter().zip(&w).map(|(p, w)| w * p.1).sum::<f64>() / sw;
    let sxx: f64 = pts.iter().zip(&w).map(|(p, w)| w * (p.0 - xm).powi(2)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = pts
        .iter()
        .zip(&w)
        .map(|(p, w)| w * (p.0 - xm) * (p.1 - ym))
        .sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let dof = pts.len() - 2;
    let chi2: f64 = pts
        .iter()
        .zip(&w)
        .map(|(p, w)| w * (p.1 - intercept - slope * p.0).powi(2))
        .sum();
    let scale = if dof > 0 { chi2 / dof as f64 } else { 1.0 };
    let slope_se = (scale / sxx).sqrt();
    let t = if dof > 0 {
        StudentsT::new(0.0, 1.0, dof as f64)
            .map(|d| d.inverse_cdf(0.975))
            .unwrap_or(1.96)
    } else {
        f64::INFINITY
    };
    Some(SlopeFit {
        slope,
        intercept,
        slope_se,
        ci_low: slope - t * slope_se,
        ci_high: slope + t * slope_se,
        points: pts.len(),
    })
}

/// Gauss-Hermite rule for expectations under the standard normal law:
/// `E[g(Z)] ~ sum_k w_k g(x_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Golub-Welsch: nodes are the eigenvalues of the Jacobi matrix of the
    /// probabilists' Hermite polynomials, weights the squared first
    /// eigenvector components.
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "quadrature order must be positive");
        let mut jacobi = DMatrix::<f64>::zeros(order, order);
        for k in 1..order {
            let off = (k as f64).sqrt();
            jacobi[(k - 1, k)] = off;
            jacobi[(k, k - 1)] = off;
        }
        let eig = SymmetricEigen::new(jacobi);
        let mut pairs: Vec<(f64, f64)> = (0..order)
            .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        GaussHermite {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1 / total).collect(),
        }
    }

    /// Tensor-product rule in `dim` dimensions: `(points, weights)` with
    /// points stored point-major.
    pub fn tensor(&self, dim: usize) -> (Vec<f64>, Vec<f64>) {
        let q = self.nodes.len();
        let count = q.pow(dim as u32);
        let mut points = Vec::with_capacity(count * dim);
        let mut weights = Vec::with_capacity(count);
        for flat in 0..count {
            let mut rest = flat;
            let mut w = 1.0;
            for _ in 0..dim {
                let k = rest % q;
                rest /= q;
                points.push(self.nodes[k]);
                w *= self.weights[k];
            }
            weights.push(w);
        }
        (points, weights)
    }
}
