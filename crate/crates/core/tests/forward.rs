use std::sync::Arc;

use mfbsde::forward::{
    forward_error, solve_classical_system, solve_limit_forward, solve_sde_n, LawFlow, PicardConfig,
};
use mfbsde::model::{catalog_model, LinearGaussian, ModelSpec};
use mfbsde::noise::{Role, StreamKey, TimeGrid};
use mfbsde::stats::moments;

fn keys(seed: u64) -> (StreamKey, StreamKey) {
    let root = StreamKey::root(seed);
    (root.derive(Role::Stage, 0), root.derive(Role::Stage, 1))
}

#[test]
fn brownian_cloud_has_unit_terminal_variance() {
    let lg = LinearGaussian::new(1, 0.0, 0.0, 1.0, false);
    let model = ModelSpec::custom("brownian", Arc::new(lg), vec![0.0], 1.0, 0.0).unwrap();
    let grid = TimeGrid::new(1.0, 64).unwrap();
    let m = 4096;
    let law = solve_limit_forward(&model, &grid, m, &StreamKey::root(21), false).unwrap();
    let (_, var) = law.marginal_moments(64);
    let rel = (var[0] - 1.0).abs();
    assert!(rel <= 3.0 * (2.0 / m as f64).sqrt(), "variance {}", var[0]);
}

#[test]
fn interacting_cloud_tracks_mean_curve() {
    // same coefficients as ou_mean_field(1, 1) but without the closed form,
    // so the limit is simulated
    let lg = LinearGaussian::new(1, 0.0, 1.0, 1.0, false);
    let model = ModelSpec::custom("ou_cloud", Arc::new(lg), vec![1.0], 1.0, 1.0).unwrap();
    let grid = TimeGrid::new(1.0, 64).unwrap();
    let m = 4096;
    let law = solve_limit_forward(&model, &grid, m, &StreamKey::root(22), false).unwrap();
    let cloud = law.cloud().unwrap();
    let xs = cloud.coordinate(64, 0);
    let mo = moments(&xs);
    let e = std::f64::consts::E;
    assert!(
        (mo.mean - e).abs() <= 3.0 * mo.variance.sqrt() / (m as f64).sqrt(),
        "mean {}",
        mo.mean
    );
}

#[test]
fn approximation_mean_is_consistent() {
    let model = catalog_model("ou_mean_field", &[1.0, 0.5], &[1.0], 1.0).unwrap();
    let grid = TimeGrid::new(1.0, 64).unwrap();
    let law = solve_limit_forward(&model, &grid, 0, &StreamKey::root(0), false).unwrap();
    let (w, env) = keys(23);
    for n in [32, 128] {
        let run = solve_sde_n(&model, n, &grid, &law, &PicardConfig::default(), &w, &env, 2000).unwrap();
        let mo = moments(&run.paths.coordinate(64, 0));
        let e = std::f64::consts::E;
        assert!((mo.mean - e).abs() <= 4.0 * mo.mean_se, "N={n}: mean {}", mo.mean);
        assert!(run.provenance.converged, "{:?}", run.provenance);
    }
}

#[test]
fn particle_system_mean_follows_mean_curve() {
    let model = catalog_model("ou_mean_field", &[1.0, 0.5], &[1.0], 1.0).unwrap();
    let grid = TimeGrid::new(1.0, 64).unwrap();
    let n = 512;
    let system = solve_classical_system(&model, n, &grid, &StreamKey::root(24)).unwrap();
    let mo = moments(&system.coordinate(64, 0));
    let e = std::f64::consts::E;
    assert!((mo.mean - e).abs() <= 4.0 * mo.variance.sqrt() / (n as f64).sqrt());
}

#[test]
fn forward_error_quarters_when_n_quadruples() {
    let model = catalog_model("ou_mean_field", &[1.0, 0.5], &[1.0], 1.0).unwrap();
    let grid = TimeGrid::new(1.0, 64).unwrap();
    let picard = PicardConfig::default();
    let (w, env) = keys(25);
    let e16 = forward_error(&model, 16, &grid, 2000, &picard, &w, &env).unwrap().estimate;
    let e64 = forward_error(&model, 64, &grid, 2000, &picard, &w, &env).unwrap().estimate;
    let ratio = e64.value / e16.value;
    assert!((0.125..=0.5).contains(&ratio), "ratio {ratio}");

    let e1 = forward_error(&model, 1, &grid, 2000, &picard, &w, &env).unwrap().estimate;
    let e4 = forward_error(&model, 4, &grid, 2000, &picard, &w, &env).unwrap().estimate;
    assert!(e1.value.is_finite() && e4.value.is_finite());
    assert!(e4.value < e1.value, "{e4:?} vs {e1:?}");
}

#[test]
fn closed_form_law_is_gaussian_on_grid() {
    let model = catalog_model("ou_mean_field", &[1.0, 0.5], &[1.0], 1.0).unwrap();
    let grid = TimeGrid::new(1.0, 64).unwrap();
    let law = solve_limit_forward(&model, &grid, 0, &StreamKey::root(0), false).unwrap();
    assert!(matches!(law, LawFlow::ClosedForm(_)));
    let (m, v) = law.marginal_moments(64);
    assert!((m[0] - (1.0f64 + 1.0 / 64.0).powi(64)).abs() < 1e-12);
    assert!((v[0] - 0.25).abs() < 1e-15);
}

#[test]
fn increments_are_recovered_from_limit_paths() {
    let model = catalog_model("tanh_bounded", &[0.5, 0.4], &[0.2, -0.1], 1.0).unwrap();
    let grid = TimeGrid::new(1.0, 16).unwrap();
    let law = solve_limit_forward(&model, &grid, 256, &StreamKey::root(26), false).unwrap();
    let keys: Vec<StreamKey> = (0..5).map(|r| StreamKey::root(27).derive(Role::Replication, r)).collect();
    let paths = mfbsde::forward::simulate_limit_paths(&model, &grid, &law, &keys).unwrap();
    let back = mfbsde::forward::recover_increments(&model, &law, paths.values().to_vec()).unwrap();
    for r in 0..5 {
        for (a, b) in back.increments(r).iter().zip(paths.increments(r)) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}
