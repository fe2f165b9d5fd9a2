//! Report assembly and output files.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{validate, ExperimentConfig};
use crate::experiments::{run_experiment, Payload, Row};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub library_version: String,
    pub experiment: String,
    pub config: ExperimentConfig,
    pub payload: Payload,
    pub wall_clock_seconds: f64,
}

impl RunReport {
    /// The numeric part as canonical JSON text; equal across reruns of one config.
    pub fn payload_json(&self) -> String {
        serde_json::to_string(&self.payload).expect("payload serializes")
    }
}

/// Why a run did not produce a report.
#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("invalid config: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("{0:#}")]
    Failed(anyhow::Error),
}

impl RunError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Invalid(_) => "validation",
            Self::Failed(e) if e.downcast_ref::<std::io::Error>().is_some() => "io",
            Self::Failed(_) => "runtime",
        }
    }

    pub fn messages(&self) -> Vec<String> {
        match self {
            Self::Invalid(v) => v.clone(),
            Self::Failed(e) => vec![format!("{e:#}")],
        }
    }

    /// The JSON error block printed on stderr.
    pub fn block(&self) -> Value {
        serde_json::json!({ "error": { "kind": self.kind(), "messages": self.messages() } })
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Invalid(_) => 2,
            Self::Failed(_) => 1,
        }
    }
}

pub fn run(config: &ExperimentConfig) -> Result<RunReport, RunError> {
    let problems = validate(config);
    if !problems.is_empty() {
        return Err(RunError::Invalid(problems));
    }
    let start = Instant::now();
    let payload = run_experiment(config).map_err(RunError::Failed)?;
    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        library_version: env!("CARGO_PKG_VERSION").into(),
        experiment: config.kind.name().into(),
        config: config.clone(),
        payload,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Writes `report.json` and, when asked, `trials.csv` into `dir`.
pub fn write_report(report: &RunReport, dir: &Path, csv: bool) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("report.json");
    fs::write(&path, serde_json::to_string_pretty(report)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    if csv {
        write_rows(&report.payload.records, &dir.join("trials.csv"))?;
    }
    Ok(())
}

/// Flat table with the union of record keys as columns.
pub fn write_rows(rows: &[Row], path: &Path) -> Result<()> {
    let columns: BTreeSet<&String> = rows.iter().flat_map(|r| r.keys()).collect();
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(&columns)?;
    for r in rows {
        w.write_record(columns.iter().map(|c| match r.get(*c) {
            None | Some(Value::Null) => String::new(),
            Some(Value::String(s)) => s.clone(),
            Some(v) => v.to_string(),
        }))?;
    }
    w.flush()?;
    Ok(())
}
