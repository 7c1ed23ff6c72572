//! Experiment configuration: a JSON document with `model`, `grid`, `study`
//! and `output` blocks. Unknown keys are rejected and every violation is
//! reported, not only the first.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::backward::RegressionConfig;
use crate::error::{Error, Result};
use crate::forward::PicardConfig;
use crate::model::{catalog_model, catalog_params, ModelSpec};
use crate::noise::TimeGrid;

/// `{"name": "ou_mean_field", "beta": 1.0, "s": 0.5, "x0": [1.0], "T": 1.0}`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    /// Catalog parameters in positional order.
    pub params: Vec<f64>,
    pub x0: Vec<f64>,
    pub horizon: f64,
}

impl ModelConfig {
    pub fn build(&self) -> Result<ModelSpec> {
        catalog_model(&self.name, &self.params, &self.x0, self.horizon)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub n: Vec<usize>,
    pub reps: usize,
    /// Cloud representing each Picard law iterate, and the limit cloud when
    /// the model has no closed form.
    pub cloud_size: usize,
    /// Cloud carrying `(X, Y)` of the limit for interacting drivers.
    pub env_cloud: usize,
    /// Disjoint approximating-law cloud centering the empirical fields.
    pub center_cloud: usize,
    /// Cloud defining the Gaussian field law.
    pub field_cloud: usize,
    /// Members of the limit-system ensemble.
    pub members: usize,
    pub picard_iters: usize,
    pub picard_tol: f64,
    pub antithetic: bool,
    pub degree: usize,
    pub companions: usize,
    pub z_cap: f64,
    /// Also run the backward component.
    pub backward: bool,
    /// Lattice times of the field covariance table.
    pub probe_times: Vec<f64>,
    /// Space probes of the field covariance table; `[x0]` when empty.
    pub probe_x: Vec<Vec<f64>>,
    /// Times at which scaled errors are compared with the limit.
    pub clt_times: Vec<f64>,
    pub ks_alpha: f64,
    pub variance_tolerance: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub steps: usize,
    pub study: StudyConfig,
    pub output_dir: Option<String>,
}

impl ExperimentConfig {
    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.model.horizon, self.steps)
    }

    pub fn picard(&self) -> PicardConfig {
        PicardConfig {
            max_iters: self.study.picard_iters,
            tol: self.study.picard_tol,
            cloud_size: self.study.cloud_size,
            antithetic: self.study.antithetic,
        }
    }

    pub fn regression(&self) -> RegressionConfig {
        RegressionConfig {
            degree: self.study.degree,
            companions: self.study.companions,
            z_cap: self.study.z_cap,
            ..RegressionConfig::default()
        }
    }

    /// Probe points of the field covariance table.
    pub fn probe_x(&self) -> Vec<Vec<f64>> {
        if self.study.probe_x.is_empty() {
            vec![self.model.x0.clone()]
        } else {
            self.study.probe_x.clone()
        }
    }
}

const TOP_KEYS: &[&str] = &["model", "grid", "study", "output"];
const GRID_KEYS: &[&str] = &["T", "steps"];
const OUTPUT_KEYS: &[&str] = &["dir"];
const STUDY_KEYS: &[&str] = &[
    "n",
    "reps",
    "cloud_size",
    "env_cloud",
    "center_cloud",
    "field_cloud",
    "members",
    "picard_iters",
    "picard_tol",
    "antithetic",
    "degree",
    "companions",
    "z_cap",
    "backward",
    "probes",
    "clt_times",
    "ks_alpha",
    "variance_tolerance",
    "seed",
];
const PROBE_KEYS: &[&str] = &["times", "x"];

struct Reader {
    errors: Vec<String>,
}

impl Reader {
    fn object<'v>(&mut self, v: Option<&'v Value>, path: &str, allowed: &[&str]) -> Option<&'v Map<String, Value>> {
        let v = v?;
        let Some(map) = v.as_object() else {
            self.errors.push(format!("`{path}` must be an object"));
            return None;
        };
        for key in map.keys() {
            if !allowed.contains(&key.as_str()) {
                self.errors.push(format!("unknown key `{path}.{key}`"));
            }
        }
        Some(map)
    }

    fn number(&mut self, map: Option<&Map<String, Value>>, path: &str, key: &str) -> Option<f64> {
        let v = map?.get(key)?;
        match v.as_f64() {
            Some(x) if x.is_finite() => Some(x),
            _ => {
                self.errors.push(format!("`{path}.{key}` must be a finite number"));
                None
            }
        }
    }

    fn count(&mut self, map: Option<&Map<String, Value>>, path: &str, key: &str, default: usize) -> usize {
        let Some(v) = map.and_then(|m| m.get(key)) else {
            return default;
        };
        match v.as_u64() {
            Some(0) => {
                self.errors.push(format!("`{path}.{key}` must be positive"));
                default
            }
            Some(x) => x as usize,
            None => {
                self.errors.push(format!("`{path}.{key}` must be a positive integer"));
                default
            }
        }
    }

    fn flag(&mut self, map: Option<&Map<String, Value>>, path: &str, key: &str, default: bool) -> bool {
        match map.and_then(|m| m.get(key)) {
            None => default,
            Some(Value::Bool(b)) => *b,
            Some(_) => {
                self.errors.push(format!("`{path}.{key}` must be true or false"));
                default
            }
        }
    }

    fn numbers(&mut self, v: Option<&Value>, label: &str) -> Option<Vec<f64>> {
        let arr = v?.as_array();
        let parsed: Option<Vec<f64>> = arr.and_then(|a| a.iter().map(|x| x.as_f64().filter(|x| x.is_finite())).collect());
        if parsed.is_none() {
            self.errors.push(format!("`{label}` must be a list of finite numbers"));
        }
        parsed
    }
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("not valid JSON: {e}")]))?;
    parse_config_value(&value)
}

/// Validates an already parsed document; see [`parse_config`].
pub fn parse_config_value(value: &Value) -> Result<ExperimentConfig> {
    let mut r = Reader { errors: Vec::new() };
    let Some(top) = r.object(Some(value), "config", TOP_KEYS) else {
        return Err(Error::Config(r.errors));
    };
    let model = parse_model(&mut r, top.get("model"));

    let grid = r.object(top.get("grid"), "grid", GRID_KEYS);
    let steps = r.count(grid, "grid", "steps", 64);
    if let (Some(t), Some(m)) = (r.number(grid, "grid", "T"), &model) {
        if t != m.horizon {
            r.errors.push(format!("`grid.T` = {t} disagrees with `model.T` = {}", m.horizon));
        }
    }

    let study = r.object(top.get("study"), "study", STUDY_KEYS);
    if top.get("study").is_none() {
        r.errors.push("missing block `study`".into());
    }
    let n: Vec<usize> = match study.and_then(|s| s.get("n")) {
        None => {
            r.errors.push("missing field `study.n`".into());
            Vec::new()
        }
        Some(v) => match v.as_array().and_then(|a| a.iter().map(|x| x.as_u64().map(|x| x as usize)).collect::<Option<Vec<_>>>()) {
            Some(ns) => ns,
            None => {
                r.errors.push("`study.n` must be a list of positive integers".into());
                Vec::new()
            }
        },
    };
    if n.contains(&0) {
        r.errors.push("`study.n` entries must be positive".into());
    }
    if n.windows(2).any(|w| w[1] <= w[0]) {
        r.errors.push(format!("`study.n` {n:?} is not strictly increasing"));
    }
    if study.is_some() && study.and_then(|s| s.get("n")).is_some() && n.is_empty() {
        r.errors.push("`study.n` is empty".into());
    }
    let seed = match study.and_then(|s| s.get("seed")) {
        None => {
            r.errors.push("missing field `study.seed`".into());
            0
        }
        Some(v) => v.as_u64().unwrap_or_else(|| {
            r.errors.push("`study.seed` must be a non-negative integer".into());
            0
        }),
    };
    let probes = r.object(study.and_then(|s| s.get("probes")), "study.probes", PROBE_KEYS);
    let horizon = model.as_ref().map_or(1.0, |m| m.horizon);
    let probe_times = match probes.and_then(|p| p.get("times")) {
        None => vec![0.25 * horizon, 0.5 * horizon, horizon],
        Some(v) => r.numbers(Some(v), "study.probes.times").unwrap_or_default(),
    };
    let clt_times = match study.and_then(|s| s.get("clt_times")) {
        None => vec![0.5 * horizon, horizon],
        Some(v) => r.numbers(Some(v), "study.clt_times").unwrap_or_default(),
    };
    for (label, times) in [("study.probes.times", &probe_times), ("study.clt_times", &clt_times)] {
        if times.iter().any(|&t| !(0.0..=horizon).contains(&t)) {
            r.errors.push(format!("`{label}` must lie in [0, T]"));
        }
    }
    let dim = model.as_ref().map(|m| m.x0.len());
    let probe_x: Vec<Vec<f64>> = match probes.and_then(|p| p.get("x")) {
        None => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .enumerate()
            .filter_map(|(k, v)| r.numbers(Some(v), &format!("study.probes.x[{k}]")))
            .collect(),
        Some(_) => {
            r.errors.push("`study.probes.x` must be a list of points".into());
            Vec::new()
        }
    };
    if let Some(d) = dim {
        if probe_x.iter().any(|p| p.len() != d) {
            r.errors.push(format!("`study.probes.x` points must have dimension {d}"));
        }
    }
    let mut fraction = |key: &str, default: f64, open_unit: bool| -> f64 {
        match r.number(study, "study", key) {
            None => default,
            Some(x) if x > 0.0 && (!open_unit || x < 1.0) => x,
            Some(x) => {
                r.errors.push(format!("`study.{key}` = {x} out of range"));
                default
            }
        }
    };
    let picard_tol = fraction("picard_tol", 1e-3, false);
    let z_cap = fraction("z_cap", 5.0, false);
    let ks_alpha = fraction("ks_alpha", 0.01, true);
    let variance_tolerance = fraction("variance_tolerance", 0.15, false);
    let study_cfg = StudyConfig {
        reps: r.count(study, "study", "reps", 2000),
        cloud_size: r.count(study, "study", "cloud_size", 4096),
        env_cloud: r.count(study, "study", "env_cloud", 512),
        center_cloud: r.count(study, "study", "center_cloud", 8192),
        field_cloud: r.count(study, "study", "field_cloud", 2048),
        members: r.count(study, "study", "members", 4000),
        picard_iters: r.count(study, "study", "picard_iters", 5),
        antithetic: r.flag(study, "study", "antithetic", true),
        degree: match study.and_then(|s| s.get("degree")) {
            None => 2,
            Some(v) => v.as_u64().map(|x| x as usize).unwrap_or_else(|| {
                r.errors.push("`study.degree` must be a non-negative integer".into());
                2
            }),
        },
        companions: r.count(study, "study", "companions", 64),
        backward: r.flag(study, "study", "backward", false),
        n,
        picard_tol,
        z_cap,
        probe_times,
        probe_x,
        clt_times,
        ks_alpha,
        variance_tolerance,
        seed,
    };
    let output = r.object(top.get("output"), "output", OUTPUT_KEYS);
    let output_dir = match output.and_then(|o| o.get("dir")) {
        None => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => {
            r.errors.push("`output.dir` must be a string".into());
            None
        }
    };
    if let Some(m) = &model {
        if let Err(e) = m.build() {
            r.errors.push(format!("model: {e}"));
        }
    }
    match model {
        Some(model) if r.errors.is_empty() => Ok(ExperimentConfig {
            model,
            steps,
            study: study_cfg,
            output_dir,
        }),
        _ => Err(Error::Config(r.errors)),
    }
}

fn parse_model(r: &mut Reader, v: Option<&Value>) -> Option<ModelConfig> {
    let Some(v) = v else {
        r.errors.push("missing block `model`".into());
        return None;
    };
    let Some(map) = v.as_object() else {
        r.errors.push("`model` must be an object".into());
        return None;
    };
    let Some(name) = map.get("name").and_then(Value::as_str) else {
        r.errors.push("missing field `model.name`".into());
        return None;
    };
    let Some(names) = catalog_params(name) else {
        r.errors.push(format!("unknown model `{name}`"));
        return None;
    };
    let mut allowed = vec!["name", "x0", "T"];
    allowed.extend_from_slice(names);
    r.object(Some(v), "model", &allowed);
    let mut params = Vec::new();
    for p in names {
        match r.number(Some(map), "model", p) {
            Some(x) => params.push(x),
            None if !map.contains_key(*p) => r.errors.push(format!("missing field `model.{p}`")),
            None => {}
        }
    }
    let x0 = match map.get("x0") {
        None => {
            r.errors.push("missing field `model.x0`".into());
            None
        }
        Some(v) => r.numbers(Some(v), "model.x0"),
    };
    let horizon = r.number(Some(map), "model", "T").unwrap_or(1.0);
    let x0 = x0?;
    (params.len() == names.len()).then(|| ModelConfig {
        name: name.to_string(),
        params,
        x0,
        horizon,
    })
}

/// Parses a bare model document: either `{"model": {...}}` or the block
/// itself.
pub fn parse_model_config(text: &str) -> Result<ModelConfig> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("not valid JSON: {e}")]))?;
    let block = value.get("model").unwrap_or(&value);
    let mut r = Reader { errors: Vec::new() };
    let m = parse_model(&mut r, Some(block));
    if let Some(top) = value.as_object().filter(|_| value.get("model").is_some()) {
        // a full experiment document is accepted; only its model block is read
        for key in top.keys().filter(|k| !TOP_KEYS.contains(&k.as_str())) {
            r.errors.push(format!("unknown key `{key}`"));
        }
    }
    match m {
        Some(m) if r.errors.is_empty() => {
            m.build()?;
            Ok(m)
        }
        _ => Err(Error::Config(r.errors)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "model": {"name": "ou_mean_field", "beta": 1.0, "s": 0.5, "x0": [1.0]},
        "study": {"n": [8, 16, 32], "seed": 7}
    }"#;

    fn violations(text: &str) -> Vec<String> {
        match parse_config(text) {
            Err(Error::Config(v)) => v,
            other => panic!("expected violations, got {other:?}"),
        }
    }

    #[test]
    fn minimal_document_gets_defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.steps, 64);
        assert_eq!(c.study.degree, 2);
        assert_eq!(c.study.picard_iters, 5);
        assert_eq!(c.model.params, vec![1.0, 0.5]);
        assert_eq!(c.model.horizon, 1.0);
        assert_eq!(c.probe_x(), vec![vec![1.0]]);
        assert_eq!(c.study.seed, 7);
        c.model.build().unwrap();
    }

    #[test]
    fn missing_seed_is_named() {
        let v = violations(r#"{"model": {"name": "constant", "b0": 0, "s": 1, "x0": [0]}, "study": {"n": [1, 2, 3]}}"#);
        assert_eq!(v, vec!["missing field `study.seed`".to_string()]);
    }

    #[test]
    fn decreasing_n_is_rejected() {
        let v = violations(r#"{"model": {"name": "constant", "b0": 0, "s": 1, "x0": [0]}, "study": {"n": [16, 8], "seed": 1}}"#);
        assert!(v.iter().any(|e| e.contains("not strictly increasing")), "{v:?}");
    }

    #[test]
    fn all_violations_are_collected() {
        let v = violations(
            r#"{"model": {"name": "ou_mean_field", "beta": 1, "x0": [0], "colour": 1},
                "grid": {"steps": 0, "dt": 0.1},
                "study": {"n": [4, 4], "reps": -1},
                "extra": {}}"#,
        );
        for needle in [
            "unknown key `config.extra`",
            "unknown key `model.colour`",
            "missing field `model.s`",
            "`grid.steps` must be positive",
            "unknown key `grid.dt`",
            "not strictly increasing",
            "`study.reps` must be a positive integer",
            "missing field `study.seed`",
        ] {
            assert!(v.iter().any(|e| e.contains(needle)), "{needle} not in {v:?}");
        }
    }

    #[test]
    fn bad_model_parameters_are_reported() {
        let v = violations(r#"{"model": {"name": "ou_mean_field", "beta": 1, "s": 1, "x0": [0], "T": -1}, "study": {"n": [1], "seed": 1}}"#);
        assert!(v.iter().any(|e| e.starts_with("model:")), "{v:?}");
        let v = violations(r#"{"model": {"name": "nope", "x0": [0]}, "study": {"n": [1], "seed": 1}}"#);
        assert_eq!(v, vec!["unknown model `nope`".to_string()]);
    }

    #[test]
    fn model_document_forms() {
        let a = parse_model_config(r#"{"model": {"name": "tanh_bounded", "a": 0.5, "s": 0.4, "x0": [0, 1]}}"#).unwrap();
        let b = parse_model_config(r#"{"name": "tanh_bounded", "a": 0.5, "s": 0.4, "x0": [0, 1]}"#).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.build().unwrap().dim, 2);
        assert!(parse_model_config(r#"{"model": {"name": "constant", "b0": 0, "s": 1, "x0": [0]}, "x": 1}"#).is_err());
    }
}
