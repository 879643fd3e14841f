//! Report emission: per-task JSON records, the aggregate CSV mirroring the
//! benchmark table columns, and ablation-sweep tables. All float formatting
//! is fixed so identical runs produce byte-identical files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

pub const AGGREGATE_HEADER: &str =
    "task,acc_f,acc_r,acc_n,acc_o,kl_to_oracle,mia_rate,tunable_ratio,chance_level";

pub fn aggregate_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(AGGREGATE_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.task,
            r.acc_f,
            r.acc_r,
            r.acc_n,
            r.acc_o,
            r.kl_to_oracle,
            r.mia_rate,
            r.tunable_ratio,
            r.chance_level
        ));
    }
    out
}

pub fn write_aggregate(reports: &[MetricsReport], path: &Path) -> Result<()> {
    std::fs::write(path, aggregate_csv(reports))?;
    Ok(())
}

pub fn write_report_json(report: &MetricsReport, path: &Path) -> Result<()> {
    let text =
        serde_json::to_string_pretty(report).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_report_json(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))
}

/// One row of an ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameter: String,
    pub value: String,
    pub tunable_ratio: f64,
    pub acc_f: f64,
    pub acc_r: f64,
    pub acc_n: f64,
    pub acc_o: f64,
}

pub const SWEEP_HEADER: &str = "parameter,value,tunable_ratio,acc_f,acc_r,acc_n,acc_o";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.parameter, r.value, r.tunable_ratio, r.acc_f, r.acc_r, r.acc_n, r.acc_o
        ));
    }
    out
}

pub fn write_sweep(rows: &[SweepRow], path: &Path) -> Result<()> {
    std::fs::write(path, sweep_csv(rows))?;
    Ok(())
}
