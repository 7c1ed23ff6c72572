use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use super::config::{ExperimentConfig, ModelConfig};
use super::{config_hash, Provenance};
use crate::error::{Error, Result};
use crate::fluctuation::CltReport;

/// Version of the `report.json` layout.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub n: usize,
    /// `x`, `y` or `z`.
    pub metric: String,
    pub value: f64,
    pub stderr: f64,
    /// Every sample was exactly zero.
    pub exact: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeRow {
    pub metric: String,
    pub slope: Option<f64>,
    pub slope_se: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub points: usize,
    pub target_low: f64,
    pub target_high: f64,
    pub verdict: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceRow {
    pub i: usize,
    pub j: usize,
    /// Block pair, e.g. `11` for drift against drift.
    pub block: String,
    pub node_i: usize,
    pub node_j: usize,
    /// Theoretical entry.
    pub value: f64,
    pub stderr: f64,
    pub empirical: f64,
    pub empirical_stderr: f64,
    pub within: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub criterion: String,
    /// `pass`, `fail`, `exact`, `degenerate-pass`, `degraded` or `no-data`.
    pub verdict: String,
    pub detail: String,
}

impl Verdict {
    pub fn new(criterion: &str, verdict: &str, detail: String) -> Self {
        Verdict {
            criterion: criterion.into(),
            verdict: verdict.into(),
            detail,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub schema_version: u32,
    /// `convergence` or `clt`; empty for an empty study.
    pub kind: String,
    /// Seconds since the Unix epoch. The only field that differs between
    /// runs of the same configuration.
    pub timestamp: u64,
    pub model: Option<ModelConfig>,
    pub config: Option<ExperimentConfig>,
    pub errors: Vec<ErrorRow>,
    pub slopes: Vec<SlopeRow>,
    pub covariance: Vec<CovarianceRow>,
    pub clt: Option<CltReport>,
    /// `(rep, t, coord, value)` rows of `fluctuations.csv`.
    #[serde(skip)]
    pub fluctuations: Vec<(usize, f64, usize, f64)>,
    pub verdicts: Vec<Verdict>,
    /// Overall verdict.
    pub verdict: String,
    pub failed_stages: Vec<String>,
    pub provenance: Option<Provenance>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl StudyReport {
    /// A report without any study.
    pub fn empty() -> Self {
        StudyReport {
            schema_version: SCHEMA_VERSION,
            kind: String::new(),
            timestamp: now(),
            model: None,
            config: None,
            errors: Vec::new(),
            slopes: Vec::new(),
            covariance: Vec::new(),
            clt: None,
            fluctuations: Vec::new(),
            verdicts: Vec::new(),
            verdict: "no-data".into(),
            failed_stages: Vec::new(),
            provenance: None,
        }
    }

    pub(crate) fn new(kind: &str, config: &ExperimentConfig, reference: String) -> Self {
        StudyReport {
            kind: kind.into(),
            model: Some(config.model.clone()),
            config: Some(config.clone()),
            provenance: Some(Provenance {
                config_hash: config_hash(config),
                seed: config.study.seed,
                version: env!("CARGO_PKG_VERSION").into(),
                reference,
                runs: Vec::new(),
                jitter: None,
                limit: None,
            }),
            ..StudyReport::empty()
        }
    }

    pub fn verdict_of(&self, criterion: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.criterion == criterion)
    }

    pub(crate) fn finish_verdict(&mut self) {
        let v = &self.verdicts;
        self.verdict = if v.is_empty() {
            "no-data"
        } else if v.iter().any(|v| v.verdict == "fail") {
            "fail"
        } else if v.iter().any(|v| v.verdict == "degraded") || !self.failed_stages.is_empty() {
            "degraded"
        } else if v.iter().all(|v| v.verdict == "exact") {
            "exact"
        } else if v.iter().all(|v| v.verdict != "pass") {
            "degenerate-pass"
        } else {
            "pass"
        }
        .into();
    }

    fn provenance_mut(&mut self) -> &mut Provenance {
        self.provenance.get_or_insert_with(|| Provenance {
            config_hash: String::new(),
            seed: 0,
            version: env!("CARGO_PKG_VERSION").into(),
            reference: String::new(),
            runs: Vec::new(),
            jitter: None,
            limit: None,
        })
    }
}

// Field accessors used by the studies.
impl StudyReport {
    pub(crate) fn runs_mut(&mut self) -> &mut Vec<super::RunProvenance> {
        &mut self.provenance_mut().runs
    }
}

fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:e}")
    } else {
        String::new()
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), num)
}

fn write(path: PathBuf, text: &str) -> Result<PathBuf> {
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes `report.json`, `errors.csv` and `slope.csv`, plus
/// `covariance.csv` and `fluctuations.csv` for fluctuation studies.
/// Returns the written paths.
pub fn emit_report(report: &StudyReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let json = serde_json::to_string_pretty(report)?;
    written.push(write(dir.join("report.json"), &(json + "\n"))?);

    let mut csv = String::from("N,metric,value,stderr\n");
    for r in &report.errors {
        let _ = writeln!(csv, "{},{},{},{}", r.n, r.metric, num(r.value), num(r.stderr));
    }
    written.push(write(dir.join("errors.csv"), &csv)?);

    let mut csv = String::from("metric,slope,slope_se,ci_low,ci_high,points,verdict\n");
    for s in &report.slopes {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            s.metric,
            opt(s.slope),
            opt(s.slope_se),
            opt(s.ci_low),
            opt(s.ci_high),
            s.points,
            s.verdict
        );
    }
    written.push(write(dir.join("slope.csv"), &csv)?);

    if report.kind == "clt" {
        let mut csv = String::from("i,j,block,value,stderr,empirical,empirical_stderr\n");
        for r in &report.covariance {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                r.i,
                r.j,
                r.block,
                num(r.value),
                num(r.stderr),
                num(r.empirical),
                num(r.empirical_stderr)
            );
        }
        written.push(write(dir.join("covariance.csv"), &csv)?);
        let mut csv = String::from("rep,t,coord,value\n");
        for (r, t, c, v) in &report.fluctuations {
            let _ = writeln!(csv, "{r},{t},{c},{}", num(*v));
        }
        written.push(write(dir.join("fluctuations.csv"), &csv)?);
    }
    Ok(written)
}
