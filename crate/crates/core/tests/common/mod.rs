//! Test-only models.
#![allow(dead_code)]

use std::sync::Arc;

use mfbsde::model::{Coefficients, Lambda, ModelSpec, Partner};

/// Coefficients that read only the particle's own state, with every
/// interaction flag left at its default. Any difference between the limit
/// and approximating solvers on this model is numerical leakage.
#[derive(Debug)]
pub struct OwnState {
    pub dim: usize,
}

impl Coefficients for OwnState {
    fn dim(&self) -> usize {
        self.dim
    }
    fn drift(&self, x: &[f64], _: &[f64], out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(x) {
            *o = -0.5 * v + v.cos();
        }
    }
    fn diffusion(&self, x: &[f64], _: &[f64], out: &mut [f64]) {
        let d = self.dim;
        out.fill(0.0);
        for i in 0..d {
            out[i * d + i] = 1.0 + 0.25 * x[i].tanh();
        }
    }
    fn terminal(&self, x: &[f64], _: &[f64]) -> f64 {
        x.iter().map(|v| v.tanh() + 0.1 * v * v).sum()
    }
    fn driver(&self, lam: Lambda<'_>, _: Partner<'_>) -> f64 {
        -0.5 * lam.y.tanh() + lam.z.iter().map(|z| 0.1 * z.tanh()).sum::<f64>() + lam.x.iter().map(|x| x.sin()).sum::<f64>()
    }
    fn drift_grad_x(&self, x: &[f64], _: &[f64], out: &mut [f64]) {
        let d = self.dim;
        out.fill(0.0);
        for i in 0..d {
            out[i * d + i] = -0.5 - x[i].sin();
        }
    }
    fn drift_grad_xp(&self, _: &[f64], _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn diffusion_grad_x(&self, x: &[f64], _: &[f64], out: &mut [f64]) {
        let d = self.dim;
        out.fill(0.0);
        for i in 0..d {
            let t = x[i].tanh();
            out[(i * d + i) * d + i] = 0.25 * (1.0 - t * t);
        }
    }
    fn diffusion_grad_xp(&self, _: &[f64], _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn terminal_grad_x(&self, x: &[f64], _: &[f64], out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(x) {
            let t = v.tanh();
            *o = 1.0 - t * t + 0.2 * v;
        }
    }
    fn terminal_grad_xp(&self, _: &[f64], _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn driver_grad_lambda(&self, lam: Lambda<'_>, _: Partner<'_>, out: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            out[i] = lam.x[i].cos();
            let t = lam.z[i].tanh();
            out[d + 1 + i] = 0.1 * (1.0 - t * t);
        }
        let t = lam.y.tanh();
        out[d] = -0.5 * (1.0 - t * t);
    }
    fn driver_grad_partner(&self, _: Lambda<'_>, _: Partner<'_>, out: &mut [f64]) {
        out.fill(0.0);
    }
}

pub fn own_state_model(dim: usize) -> ModelSpec {
    ModelSpec::custom("own_state", Arc::new(OwnState { dim }), vec![0.3; dim], 1.0, 1.5).unwrap()
}

/// Brownian forward dynamics, terminal value 1, no driver.
#[derive(Debug)]
pub struct UnitTerminal;

impl Coefficients for UnitTerminal {
    fn dim(&self) -> usize {
        1
    }
    fn drift(&self, _: &[f64], _: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn diffusion(&self, _: &[f64], _: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
    }
    fn terminal(&self, _: &[f64], _: &[f64]) -> f64 {
        1.0
    }
    fn driver(&self, _: Lambda<'_>, _: Partner<'_>) -> f64 {
        0.0
    }
    fn drift_grad_x(&self, _: &[f64], _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn drift_grad_xp(&self, _: &[f64], _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn diffusion_grad_x(&self, _: &[f64], _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn diffusion_grad_xp(&self, _: &[f64], _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn terminal_grad_x(&self, _: &[f64], _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn terminal_grad_xp(&self, _: &[f64], _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn driver_grad_lambda(&self, _: Lambda<'_>, _: Partner<'_>, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn driver_grad_partner(&self, _: Lambda<'_>, _: Partner<'_>, out: &mut [f64]) {
        out.fill(0.0);
    }
}

pub fn unit_terminal_model() -> ModelSpec {
    ModelSpec::custom("unit_terminal", Arc::new(UnitTerminal), vec![0.0], 1.0, 0.0).unwrap()
}
