//! Run artifacts: per-epoch metrics CSV, JSON summary and the
//! reproducibility manifest.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Phase;
use crate::trainer::RunReport;

pub const METRICS_VERSION: u32 = 1;
pub const METRICS_HEADER: &str = "# axtrain-metrics v1\nphase,epoch,steps,train_loss,eval_accuracy,mean_iter_secs,calibrations";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "model.axtn";

fn phase_name(p: Phase) -> &'static str {
    match p {
        Phase::Exact => "exact",
        Phase::Injection => "injection",
        Phase::Accurate => "accurate",
    }
}

/// One row per epoch under [`METRICS_HEADER`]; a missing accuracy is an
/// empty field.
pub fn metrics_csv(report: &RunReport) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for e in &report.epochs {
        let acc = e.eval_accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{},{:.6e},{}",
            phase_name(e.phase),
            e.epoch,
            e.steps,
            e.train_loss,
            acc,
            e.mean_iter_secs,
            e.calibrations
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_sha256: Option<String>,
    pub seed: Option<u64>,
    pub metrics_version: u32,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config_sha256: Option<String>, seed: Option<u64>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_sha256,
            seed,
            metrics_version: METRICS_VERSION,
            outputs: vec![],
        }
    }
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Invariant(format!("json: {e}")))
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(MANIFEST_FILE), json(manifest)? + "\n")?;
    Ok(())
}

/// Writes the metrics CSV and the JSON summary into `dir`.
pub fn write_report(dir: &Path, report: &RunReport) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(METRICS_FILE), metrics_csv(report))?;
    std::fs::write(dir.join(SUMMARY_FILE), json(report)? + "\n")?;
    Ok(vec![METRICS_FILE.into(), SUMMARY_FILE.into()])
}

pub fn read_summary(path: &Path) -> Result<RunReport> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
