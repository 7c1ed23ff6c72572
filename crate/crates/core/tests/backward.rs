mod common;

use mfbsde::backward::{
    solve_bsde_n, solve_lambda_cloud, y_error, z_error, RegressionConfig,
};
use mfbsde::forward::{solve_limit_forward, solve_sde_n, PicardConfig};
use mfbsde::model::{catalog_model, check_gradients, Probe};
use mfbsde::noise::{Role, StreamKey, TimeGrid};

fn keys(seed: u64) -> (StreamKey, StreamKey, StreamKey) {
    let root = StreamKey::root(seed);
    (
        root.derive(Role::Stage, 0),
        root.derive(Role::Stage, 1),
        root.derive(Role::Stage, 2),
    )
}

fn small_picard() -> PicardConfig {
    PicardConfig {
        cloud_size: 512,
        ..PicardConfig::default()
    }
}

#[test]
fn test_models_have_consistent_gradients() {
    for model in [common::own_state_model(2), common::unit_terminal_model()] {
        let d = model.dim;
        let probes: Vec<Probe> = (0..20)
            .map(|k| {
                let v = 0.37 * k as f64 - 3.0;
                Probe {
                    x: vec![v; d],
                    y: -v,
                    z: vec![0.5 * v; d],
                    xp: vec![1.0 - v; d],
                    yp: v * v,
                }
            })
            .collect();
        let report = check_gradients(&model, &probes).unwrap();
        assert!(report.pass, "{}: {:?}", model.name, report.max_error());
    }
}

#[test]
fn unit_terminal_gives_unit_y_for_every_n() {
    let model = common::unit_terminal_model();
    let grid = TimeGrid::new(1.0, 32).unwrap();
    let (w, env, lam) = keys(31);
    let law = solve_limit_forward(&model, &grid, 512, &lam, false).unwrap();
    let reg = RegressionConfig::default();
    let limit = solve_lambda_cloud(&model, &law, 512, &lam.derive(Role::Stage, 9), &reg).unwrap();
    for n in [1, 4, 16] {
        let run = solve_sde_n(&model, n, &grid, &law, &small_picard(), &w, &env, 40).unwrap();
        let pair = solve_bsde_n(&model, &run, &law, Some(&limit), &reg).unwrap();
        assert!(pair.approx.y.iter().all(|&y| (y - 1.0).abs() < 1e-12), "N={n}");
        assert!(pair.approx.z.iter().all(|&z| z.abs() < 1e-12), "N={n}");
    }
}

#[test]
fn decoupled_model_matches_limit_bit_for_bit() {
    let model = common::own_state_model(1);
    let grid = TimeGrid::new(1.0, 32).unwrap();
    let (w, env, lam) = keys(32);
    let law = solve_limit_forward(&model, &grid, 512, &lam, false).unwrap();
    let reg = RegressionConfig::default();
    let limit = solve_lambda_cloud(&model, &law, 512, &lam.derive(Role::Stage, 9), &reg).unwrap();
    for n in [1, 8] {
        let run = solve_sde_n(&model, n, &grid, &law, &small_picard(), &w, &env, 12).unwrap();
        let pair = solve_bsde_n(&model, &run, &law, Some(&limit), &reg).unwrap();
        assert_eq!(run.paths.values(), pair.limit_paths.values(), "N={n}");
        assert_eq!(pair.approx.y, pair.limit.y, "N={n}");
        assert_eq!(pair.approx.z, pair.limit.z, "N={n}");
        assert_eq!(y_error(&pair).value, 0.0);
        assert_eq!(z_error(&pair).value, 0.0);
    }
}

#[test]
fn linear_model_y_error_quarters() {
    let model = catalog_model("mf_bsde_linear", &[1.0, 1.0], &[1.0], 1.0).unwrap();
    let grid = TimeGrid::new(1.0, 64).unwrap();
    let (w, env, _) = keys(33);
    let law = solve_limit_forward(&model, &grid, 0, &StreamKey::root(0), false).unwrap();
    let reg = RegressionConfig::default();
    let mut errs = Vec::new();
    for n in [16, 64] {
        let run = solve_sde_n(&model, n, &grid, &law, &PicardConfig::default(), &w, &env, 2000).unwrap();
        let pair = solve_bsde_n(&model, &run, &law, None, &reg).unwrap();
        errs.push(y_error(&pair));
    }
    let ratio = errs[1].value / errs[0].value;
    assert!((0.125..=0.5).contains(&ratio), "ratio {ratio}: {errs:?}");
}

#[test]
fn interacting_driver_runs_environment_picard() {
    let model = catalog_model("tanh_bounded", &[0.5, 0.4], &[0.0], 1.0).unwrap();
    let grid = TimeGrid::new(1.0, 32).unwrap();
    let (w, env, lam) = keys(34);
    let law = solve_limit_forward(&model, &grid, 1024, &lam, true).unwrap();
    let reg = RegressionConfig::default();
    let limit = solve_lambda_cloud(&model, &law, 1024, &lam.derive(Role::Stage, 9), &reg).unwrap();
    let picard = PicardConfig {
        cloud_size: 1024,
        ..PicardConfig::default()
    };
    let run = solve_sde_n(&model, 8, &grid, &law, &picard, &w, &env, 50).unwrap();
    let pair = solve_bsde_n(&model, &run, &law, Some(&limit), &reg).unwrap();
    let prov = &pair.approx.provenance;
    assert!(prov.picard_levels >= 2, "{prov:?}");
    assert!(prov.picard_converged, "{prov:?}");
    assert!(!prov.z_cap_exceeded, "{prov:?}");
    assert!(pair.approx.y.iter().chain(&pair.approx.z).all(|v| v.is_finite()));

    assert!(solve_bsde_n(&model, &run, &law, None, &reg).is_err());
}
