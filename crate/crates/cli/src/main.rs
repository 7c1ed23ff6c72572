use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use mfbsde::backward::{
    solve_bsde_n, solve_lambda_cloud, solve_mfbsde, BsdeSolution, DriverPartners, RegressionConfig,
};
use mfbsde::error::{Error, Result};
use mfbsde::forward::{
    recover_increments, simulate_limit_paths, solve_limit_forward, solve_sde_n, LawFlow, PathEnsemble, PicardConfig,
};
use mfbsde::harness::{
    emit_report, parse_config_value, parse_model_config, run_clt_study, run_convergence_study, ExperimentConfig,
    StudyReport,
};
use mfbsde::model::ModelSpec;
use mfbsde::noise::{Role, StreamKey, TimeGrid};

#[derive(Parser)]
#[command(name = "mfbsde", version, about = "Mean-field forward-backward SDE approximation studies")]
struct Cli {
    /// Root seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the forward approximation (or the limit) and write paths.
    Forward(ForwardArgs),
    /// Solve the backward equation and write `(Y, Z)`.
    Backward(BackwardArgs),
    /// Convergence-rate study.
    Convergence(ConfigArgs),
    /// Fluctuation study.
    Clt(CltArgs),
    /// Check a configuration document.
    Validate(ConfigArgs),
}

#[derive(Clone, Copy, Debug)]
enum Size {
    N(usize),
    Limit,
}

impl FromStr for Size {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "limit" {
            return Ok(Size::Limit);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Size::N(n)),
            _ => Err(format!("expected a positive integer or `limit`, got `{s}`")),
        }
    }
}

#[derive(Args)]
struct ForwardArgs {
    /// Model document.
    #[arg(long)]
    model: PathBuf,
    /// Number of environment copies, or `limit`.
    #[arg(long)]
    n: Size,
    #[arg(long, default_value_t = 64)]
    steps: usize,
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    /// Picard cloud size.
    #[arg(long, default_value_t = 4096)]
    cloud: usize,
}

#[derive(Args)]
struct BackwardArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    n: Size,
    /// Forward path file written by `forward --n limit`, or `fresh`.
    #[arg(long, default_value = "fresh")]
    paths: String,
    #[arg(long, default_value_t = 2)]
    degree: usize,
    #[arg(long, default_value_t = 64)]
    steps: usize,
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    #[arg(long, default_value_t = 4096)]
    cloud: usize,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct CltArgs {
    /// Full configuration document.
    #[arg(long, conflicts_with_all = ["model", "n", "reps", "lattice"])]
    config: Option<PathBuf>,
    /// Model document, used with `--n`.
    #[arg(long, requires = "n")]
    model: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    /// Lattice document `{"times": [...], "x": [[...], ...]}`.
    #[arg(long)]
    lattice: Option<PathBuf>,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.display().to_string(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn json(text: &str) -> Result<Value> {
    serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("not valid JSON: {e}")]))
}

/// Parses a configuration, letting `--seed` fill or override `study.seed`.
fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut value = json(&read(path)?)?;
    if let Some(seed) = seed {
        if let Some(study) = value.get_mut("study").and_then(Value::as_object_mut) {
            study.insert("seed".into(), seed.into());
        }
    }
    parse_config_value(&value)
}

fn required_seed(seed: Option<u64>) -> Result<u64> {
    seed.ok_or_else(|| Error::Config(vec!["`--seed` is required".into()]))
}

fn load_model(path: &Path) -> Result<ModelSpec> {
    parse_model_config(&read(path)?)?.build()
}

fn limit_law(model: &ModelSpec, grid: &TimeGrid, cloud: usize, seed: u64) -> Result<LawFlow> {
    solve_limit_forward(model, grid, cloud, &StreamKey::root(seed).derive(Role::Stage, 0), true)
}

fn rep_keys(seed: u64, reps: usize) -> Vec<StreamKey> {
    let w = StreamKey::root(seed).derive(Role::Stage, 2);
    (0..reps).map(|r| w.derive(Role::Replication, r as u64)).collect()
}

fn paths_csv(paths: &PathEnsemble) -> String {
    let grid = paths.grid();
    let mut out = String::from("rep,t,coord,value\n");
    for r in 0..paths.reps() {
        for i in 0..grid.nodes_len() {
            for (c, v) in paths.value(r, i).iter().enumerate() {
                let _ = writeln!(out, "{r},{},{},{v:e}", grid.time(i), c + 1);
            }
        }
    }
    out
}

fn bsde_csv(sol: &BsdeSolution) -> String {
    let grid = sol.grid;
    let mut out = String::from("rep,t,y");
    for c in 1..=sol.dim {
        let _ = write!(out, ",z_{c}");
    }
    out.push('\n');
    for r in 0..sol.reps {
        for i in 0..grid.nodes_len() {
            let _ = write!(out, "{r},{},{:e}", grid.time(i), sol.y(r, i));
            for z in sol.z(r, i) {
                let _ = write!(out, ",{z:e}");
            }
            out.push('\n');
        }
    }
    out
}

/// Reads `rep,t,coord,value` rows into `[rep][node][coord]` values.
fn parse_paths_csv(text: &str, grid: &TimeGrid, dim: usize) -> Result<Vec<f64>> {
    let bad = |line: usize, why: &str| Error::Config(vec![format!("path file line {line}: {why}")]);
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "rep,t,coord,value" => {}
        _ => return Err(bad(1, "expected header `rep,t,coord,value`")),
    }
    let nodes = grid.nodes_len();
    let mut values: Vec<Option<f64>> = Vec::new();
    for (k, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad(k + 1, "expected 4 fields"));
        }
        let rep: usize = f[0].trim().parse().map_err(|_| bad(k + 1, "bad rep"))?;
        let t: f64 = f[1].trim().parse().map_err(|_| bad(k + 1, "bad t"))?;
        let coord: usize = f[2].trim().parse().map_err(|_| bad(k + 1, "bad coord"))?;
        let v: f64 = f[3].trim().parse().map_err(|_| bad(k + 1, "bad value"))?;
        let i = grid.nearest_node(t);
        if (grid.time(i) - t).abs() > 1e-9 * grid.horizon().max(1.0) {
            return Err(bad(k + 1, "time is not a grid node"));
        }
        if coord == 0 || coord > dim {
            return Err(bad(k + 1, "coordinate out of range"));
        }
        let at = (rep * nodes + i) * dim + coord - 1;
        if values.len() <= at {
            values.resize((rep + 1) * nodes * dim, None);
        }
        values[at] = Some(v);
    }
    values
        .into_iter()
        .collect::<Option<Vec<f64>>>()
        .filter(|v| !v.is_empty())
        .ok_or_else(|| Error::Config(vec!["path file does not cover every (rep, t, coord)".into()]))
}

fn output(cli_out: &Option<PathBuf>, default: &str) -> PathBuf {
    cli_out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn run_forward(cli: &Cli, a: &ForwardArgs) -> Result<()> {
    let seed = required_seed(cli.seed)?;
    let model = load_model(&a.model)?;
    let grid = TimeGrid::new(model.horizon, a.steps)?;
    let law = limit_law(&model, &grid, a.cloud, seed)?;
    let paths = match a.n {
        Size::Limit => simulate_limit_paths(&model, &grid, &law, &rep_keys(seed, a.reps))?,
        Size::N(n) => {
            let picard = PicardConfig {
                cloud_size: a.cloud,
                ..PicardConfig::default()
            };
            let root = StreamKey::root(seed);
            let run = solve_sde_n(
                &model,
                n,
                &grid,
                &law,
                &picard,
                &root.derive(Role::Stage, 2),
                &root.derive(Role::Stage, 3),
                a.reps,
            )?;
            eprintln!(
                "picard levels {} converged {} distances {:?}",
                run.provenance.picard_levels, run.provenance.converged, run.provenance.distances
            );
            run.paths
        }
    };
    let out = output(&cli.out, "paths.csv");
    write(&out, &paths_csv(&paths))?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn run_backward(cli: &Cli, a: &BackwardArgs) -> Result<()> {
    let seed = required_seed(cli.seed)?;
    let model = load_model(&a.model)?;
    let grid = TimeGrid::new(model.horizon, a.steps)?;
    let law = limit_law(&model, &grid, a.cloud, seed)?;
    let reg = RegressionConfig {
        degree: a.degree,
        ..RegressionConfig::default()
    };
    let root = StreamKey::root(seed);
    let lambda = if model.interaction().driver {
        Some(solve_lambda_cloud(&model, &law, 512, &root.derive(Role::Stage, 1), &reg)?)
    } else {
        None
    };
    let sol = match a.n {
        Size::Limit => {
            let paths = if a.paths == "fresh" {
                simulate_limit_paths(&model, &grid, &law, &rep_keys(seed, a.reps))?
            } else {
                let values = parse_paths_csv(&read(Path::new(&a.paths))?, &grid, model.dim)?;
                recover_increments(&model, &law, values)?
            };
            let partners = match &lambda {
                Some(l) => DriverPartners::Cloud(l),
                None => DriverPartners::Own,
            };
            solve_mfbsde(&model, &law, &paths, &reg, partners)?
        }
        Size::N(n) => {
            if a.paths != "fresh" {
                return Err(Error::Config(vec![
                    "`--paths <file>` is supported with `--n limit`; approximations need their environments".into(),
                ]));
            }
            let picard = PicardConfig {
                cloud_size: a.cloud,
                ..PicardConfig::default()
            };
            let run = solve_sde_n(
                &model,
                n,
                &grid,
                &law,
                &picard,
                &root.derive(Role::Stage, 2),
                &root.derive(Role::Stage, 3),
                a.reps,
            )?;
            solve_bsde_n(&model, &run, &law, lambda.as_ref(), &reg)?.approx
        }
    };
    let p = &sol.provenance;
    eprintln!(
        "fallback nodes {:?}, non-contracting nodes {:?}, max |Z| {:.4}{}",
        p.fallback_nodes,
        p.non_contracting_nodes,
        p.max_abs_z,
        if p.z_cap_exceeded { " (above cap)" } else { "" }
    );
    let out = output(&cli.out, "bsde.csv");
    write(&out, &bsde_csv(&sol))?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn summarize(report: &StudyReport) {
    for v in &report.verdicts {
        println!("{:<28} {:<16} {}", v.criterion, v.verdict, v.detail);
    }
    for s in &report.failed_stages {
        println!("failed stage: {s}");
    }
    println!("verdict: {}", report.verdict);
}

fn finish_study(cli: &Cli, cfg: &ExperimentConfig, report: &StudyReport) -> Result<()> {
    let dir = cli
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let files = emit_report(report, &dir)?;
    summarize(report);
    for f in files {
        eprintln!("wrote {}", f.display());
    }
    Ok(())
}

fn clt_config(cli: &Cli, a: &CltArgs) -> Result<ExperimentConfig> {
    if let Some(path) = &a.config {
        return load_config(path, cli.seed);
    }
    let (Some(model), Some(n)) = (&a.model, a.n) else {
        return Err(Error::Config(vec!["give `--config` or `--model` with `--n`".into()]));
    };
    let model_doc = json(&read(model)?)?;
    let model_block = model_doc.get("model").cloned().unwrap_or(model_doc);
    let mut study = serde_json::json!({ "n": [n], "seed": required_seed(cli.seed)? });
    if let Some(r) = a.reps {
        study["reps"] = r.into();
    }
    if let Some(path) = &a.lattice {
        study["probes"] = json(&read(path)?)?;
    }
    parse_config_value(&serde_json::json!({ "model": model_block, "study": study }))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Forward(a) => run_forward(cli, a),
        Command::Backward(a) => run_backward(cli, a),
        Command::Convergence(a) => {
            let cfg = load_config(&a.config, cli.seed)?;
            let report = run_convergence_study(&cfg)?;
            finish_study(cli, &cfg, &report)
        }
        Command::Clt(a) => {
            let cfg = clt_config(cli, a)?;
            let report = run_clt_study(&cfg)?;
            finish_study(cli, &cfg, &report)
        }
        Command::Validate(a) => {
            let cfg = load_config(&a.config, cli.seed)?;
            println!(
                "ok: model {} dim {}, N {:?}, reps {}, seed {}",
                cfg.model.name,
                cfg.model.x0.len(),
                cfg.study.n,
                cfg.study.reps,
                cfg.study.seed
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Config(violations)) => {
            for v in violations {
                eprintln!("error: {v}");
            }
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_parses_numbers_and_limit() {
        assert!(matches!("limit".parse::<Size>(), Ok(Size::Limit)));
        assert!(matches!("16".parse::<Size>(), Ok(Size::N(16))));
        assert!("0".parse::<Size>().is_err());
        assert!("x".parse::<Size>().is_err());
    }

    #[test]
    fn path_file_round_trip() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let keys: Vec<StreamKey> = (0..3).map(|r| StreamKey::root(1).derive(Role::Replication, r)).collect();
        let values: Vec<f64> = (0..3 * 5 * 2).map(|k| k as f64 * 0.1).collect();
        let paths = PathEnsemble::new(grid, 2, values.clone(), vec![0.0; 3 * 4 * 2], keys).unwrap();
        let text = paths_csv(&paths);
        assert_eq!(parse_paths_csv(&text, &grid, 2).unwrap(), values);
        let missing: String = text.lines().take(5).collect::<Vec<_>>().join("\n");
        assert!(parse_paths_csv(&missing, &grid, 2).is_err());
        assert!(parse_paths_csv("a,b\n", &grid, 2).is_err());
    }
}
