use std::sync::Arc;

use mfbsde::fluctuation::{
    clt_compare, empirical_fields, residual_block_variance, solve_limit_system, theoretical_covariance, CltConfig, FieldBlock, FieldLattice,
    FieldSource, LimitConfig,
};
use mfbsde::forward::{
    forward_error, sample_approximating_law, solve_limit_forward, LawFlow, PicardConfig,
};
use mfbsde::model::{catalog_model, ModelSpec};
use mfbsde::noise::{Role, StreamKey, TimeGrid};
use mfbsde::stats::{fit_loglog_slope, moments};

fn setup(name: &str, beta: f64, s: f64) -> (ModelSpec, TimeGrid, LawFlow) {
    let model = catalog_model(name, &[beta, s], &[1.0], 1.0).unwrap();
    let grid = TimeGrid::new(1.0, 32).unwrap();
    let law = solve_limit_forward(&model, &grid, 0, &StreamKey::root(0), false).unwrap();
    (model, grid, law)
}

fn field_source(law: &LawFlow, members: usize, seed: u64) -> FieldSource {
    FieldSource::from_paths(Arc::new(law.sample_paths(&StreamKey::root(seed), members, true).unwrap()))
}

fn within(got: f64, target: f64, rel: f64) -> bool {
    (got - target).abs() <= rel * target.abs()
}

#[test]
fn limit_forward_variance_matches_integrated_field() {
    // Xbar_1 = int_0^1 xi1_t dt with Cov(xi1_s, xi1_t) = beta^2 s^2 min(s, t)
    let (beta, s) = (1.0, 0.5);
    let (model, grid, law) = setup("ou_mean_field", beta, s);
    let source = field_source(&law, 2048, 31);
    let cfg = LimitConfig {
        members: 4000,
        backward: false,
        ..LimitConfig::default()
    };
    let root = StreamKey::root(32);
    let limit = solve_limit_system(
        &model,
        &law,
        &source,
        &root.derive(Role::Stage, 0),
        &root.derive(Role::Stage, 1),
        &cfg,
    )
    .unwrap();
    let mo = moments(&limit.xbar_at(grid.steps(), 0));
    let target = beta * beta * s * s / 3.0;
    assert!(within(mo.variance, target, 0.15), "variance {} vs {target}", mo.variance);
    assert!(mo.mean.abs() <= 4.0 * mo.mean_se, "mean {}", mo.mean);
    assert!(limit.xbar_at(0, 0).iter().all(|&v| v == 0.0));
}

#[test]
fn limit_backward_is_frozen_at_time_zero() {
    // Ybar_t = xi3 + Xbar_T is known at time zero, so Zbar = 0 and
    // Var(Ybar) = s^2 (T + beta T^2 + beta^2 T^3 / 3)
    let (beta, s) = (1.0, 0.5);
    let (model, grid, law) = setup("mf_bsde_linear", beta, s);
    let source = field_source(&law, 2048, 33);
    let cfg = LimitConfig {
        members: 4000,
        ..LimitConfig::default()
    };
    let root = StreamKey::root(34);
    let limit = solve_limit_system(
        &model,
        &law,
        &source,
        &root.derive(Role::Stage, 0),
        &root.derive(Role::Stage, 1),
        &cfg,
    )
    .unwrap();
    let target = s * s * (1.0 + beta + beta * beta / 3.0);
    let bw = limit.backward.as_ref().unwrap();
    for i in [0, grid.steps() / 2, grid.steps()] {
        let mo = moments(&bw.y_at(i));
        assert!(within(mo.variance, target, 0.15), "node {i}: {} vs {target}", mo.variance);
    }
    let zs: Vec<f64> = (0..bw.reps).flat_map(|m| (0..grid.steps()).map(move |i| (m, i))).map(|(m, i)| bw.z(m, i)[0]).collect();
    let rms = (zs.iter().map(|z| z * z).sum::<f64>() / zs.len() as f64).sqrt();
    assert!(rms < 0.1, "Zbar rms {rms}");
    assert!(limit.provenance.kl_rank_used > 0);
}

#[test]
fn scaled_forward_error_matches_limit() {
    let (beta, s) = (1.0, 0.5);
    let (model, grid, law) = setup("ou_mean_field", beta, s);
    let root = StreamKey::root(35);
    let n = 64;
    let err = forward_error(
        &model,
        n,
        &grid,
        1000,
        &PicardConfig::default(),
        &root.derive(Role::Stage, 0),
        &root.derive(Role::Stage, 1),
    )
    .unwrap();
    let source = field_source(&law, 2048, 36);
    let cfg = LimitConfig {
        members: 2000,
        backward: false,
        ..LimitConfig::default()
    };
    let limit =
        solve_limit_system(&model, &law, &source, &root.derive(Role::Stage, 2), &root.derive(Role::Stage, 3), &cfg)
            .unwrap();
    let report = clt_compare(n, &err.run.paths, &err.limit, None, &limit, &CltConfig::default()).unwrap();
    assert_eq!(report.entries.len(), 2);
    for e in &report.entries {
        assert!(e.ks_pass, "{e:?}");
        assert!(e.variance_pass, "{e:?}");
    }
    assert!(!report.exact_agreement);
}

#[test]
fn empirical_drift_field_has_limit_moments() {
    let (beta, s) = (1.0, 0.5);
    let (model, grid, _) = setup("ou_mean_field", beta, s);
    let root = StreamKey::root(37);
    let n = 256;
    let picard = PicardConfig {
        cloud_size: 8192,
        ..PicardConfig::default()
    };
    let err = forward_error(&model, n, &grid, 2000, &picard, &root.derive(Role::Stage, 0), &root.derive(Role::Stage, 1))
        .unwrap();
    let run = &err.run;
    let center =
        sample_approximating_law(&model, &grid, &run.cloud, n, &root.derive(Role::Center, 0), 8192, true).unwrap();
    let lattice = FieldLattice::new(1, &grid, vec![16, 32], vec![vec![1.0]], vec![])
        .unwrap()
        .restricted(&[FieldBlock::Drift]);
    let fields = empirical_fields(&model, run, None, &FieldSource::from_paths(Arc::new(center)), &lattice).unwrap();
    for (e, entry) in lattice.entries.iter().enumerate() {
        let mo = moments(&fields.column(e));
        let target = beta * beta * s * s * grid.time(entry.node);
        assert!(mo.mean.abs() <= 4.0 * mo.mean_se, "{entry:?}: mean {}", mo.mean);
        assert!(within(mo.variance, target, 0.15), "{entry:?}: variance {} vs {target}", mo.variance);
        assert!(mo.skewness.abs() <= 4.0 * mo.skewness_se, "{entry:?}: skewness {}", mo.skewness);
        assert!(
            mo.excess_kurtosis.abs() <= 4.0 * mo.kurtosis_se,
            "{entry:?}: excess kurtosis {}",
            mo.excess_kurtosis
        );
    }
}

#[test]
fn drift_field_covariance_scales_quadratically() {
    let (model, grid, law) = setup("ou_mean_field", 1.0, 0.5);
    let doubled = catalog_model("ou_mean_field", &[2.0, 0.5], &[1.0], 1.0).unwrap();
    let source = field_source(&law, 1024, 39);
    let lattice = FieldLattice::new(1, &grid, vec![8, 16, 32], vec![vec![0.0], vec![1.0]], vec![])
        .unwrap()
        .restricted(&[FieldBlock::Drift]);
    let base = theoretical_covariance(&model, &source, &lattice).unwrap();
    let scaled = theoretical_covariance(&doubled, &source, &lattice).unwrap();
    for (b, s) in base.values.iter().zip(&scaled.values) {
        assert!((s - 4.0 * b).abs() <= 1e-12 * (1.0 + b.abs()), "{s} vs 4 * {b}");
    }
}

#[test]
fn residual_block_decays_like_inverse_n() {
    let (model, grid, _) = setup("ou_mean_field", 1.0, 0.5);
    let root = StreamKey::root(38);
    let lattice = FieldLattice::new(1, &grid, vec![32], vec![vec![1.0]], vec![])
        .unwrap()
        .restricted(&[FieldBlock::Drift]);
    let ns = [16usize, 64, 256];
    let mut vals = Vec::new();
    let mut ses = Vec::new();
    for &n in &ns {
        let err = forward_error(
            &model,
            n,
            &grid,
            1000,
            &PicardConfig::default(),
            &root.derive(Role::Stage, 0),
            &root.derive(Role::Stage, 1),
        )
        .unwrap();
        let v = residual_block_variance(&model, &err.run.paths, &err.limit, &lattice).unwrap();
        vals.push(v[0].value);
        ses.push(v[0].stderr);
    }
    let nsf: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    let fit = fit_loglog_slope(&nsf, &vals, &ses).unwrap();
    assert!((fit.slope + 1.0).abs() <= 0.35, "slope {} from {vals:?}", fit.slope);
}
