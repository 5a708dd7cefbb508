//! Plot-data and report writers: trajectory CSV, summary/report JSON, and
//! histogram CSV. Floats are written with 17 significant digits so a
//! re-read reproduces them bit-exactly.

use crate::controller::StepDiagnostics;
use crate::harness::{CampaignSummary, Histogram, RunRecord, StepRow, ValidationReport};
use crate::moments::{MomentState, MOMENT_NAMES};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot encode {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("malformed trajectory file {path} at line {line}: {detail}")]
    Malformed {
        path: String,
        line: usize,
        detail: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExportError + '_ {
    move |source| ExportError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// 17-significant-digit decimal form, enough to round-trip any f64.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn format_opt(x: Option<f64>) -> String {
    x.map(format_f64).unwrap_or_default()
}

fn parse_f64(field: &str) -> Result<f64, String> {
    field
        .parse::<f64>()
        .map_err(|e| format!("bad float '{field}': {e}"))
}

fn parse_opt(field: &str) -> Result<Option<f64>, String> {
    if field.is_empty() {
        Ok(None)
    } else {
        parse_f64(field).map(Some)
    }
}

pub const TRAJECTORY_HEADER: &str =
    "time,s_f,c_f_realized,m00,m10,m01,m11,m20,m02,m12,m21,m22,mean_drug,mean_mass,drug_second";

/// One CSV row per sampling instant, `t = 0` included.
pub fn write_trajectory_csv(path: &Path, record: &RunRecord) -> Result<(), ExportError> {
    let mut out = String::new();
    out.push_str(TRAJECTORY_HEADER);
    out.push('\n');
    for row in &record.rows {
        let mut line = String::new();
        let _ = write!(
            line,
            "{},{},{}",
            format_f64(row.time),
            format_opt(row.s_f),
            format_opt(row.c_f_realized)
        );
        for v in row.state.0 {
            let _ = write!(line, ",{}", format_f64(v));
        }
        let _ = write!(
            line,
            ",{},{},{}",
            format_f64(row.mean_drug),
            format_f64(row.mean_mass),
            format_f64(row.drug_second)
        );
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Reads a trajectory CSV back into rows (the inverse of
/// [`write_trajectory_csv`]).
pub fn read_trajectory_csv(path: &Path) -> Result<Vec<StepRow>, ExportError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let malformed = |line: usize, detail: String| ExportError::Malformed {
        path: path.display().to_string(),
        line,
        detail,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == TRAJECTORY_HEADER => {}
        Some((n, other)) => {
            return Err(malformed(n + 1, format!("unexpected header '{other}'")));
        }
        None => return Err(malformed(1, "empty file".into())),
    }
    let mut rows = Vec::new();
    for (n, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 15 {
            return Err(malformed(
                n + 1,
                format!("{} fields, want 15", fields.len()),
            ));
        }
        let mut state = [0.0; 9];
        for (k, slot) in state.iter_mut().enumerate() {
            *slot = parse_f64(fields[3 + k]).map_err(|d| malformed(n + 1, d))?;
        }
        rows.push(StepRow {
            time: parse_f64(fields[0]).map_err(|d| malformed(n + 1, d))?,
            s_f: parse_opt(fields[1]).map_err(|d| malformed(n + 1, d))?,
            c_f_realized: parse_opt(fields[2]).map_err(|d| malformed(n + 1, d))?,
            state: MomentState(state),
            mean_drug: parse_f64(fields[12]).map_err(|d| malformed(n + 1, d))?,
            mean_mass: parse_f64(fields[13]).map_err(|d| malformed(n + 1, d))?,
            drug_second: parse_f64(fields[14]).map_err(|d| malformed(n + 1, d))?,
        });
    }
    Ok(rows)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), ExportError> {
    let text = serde_json::to_string_pretty(value).map_err(|source| ExportError::Json {
        path: path.display().to_string(),
        source,
    })?;
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_summary_json(path: &Path) -> Result<CampaignSummary, ExportError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| ExportError::Json {
        path: path.display().to_string(),
        source,
    })
}

/// Histogram bins as CSV: `bin_lo,bin_hi,count`.
pub fn write_histogram_csv(path: &Path, histogram: &Histogram) -> Result<(), ExportError> {
    let mut out = String::from("bin_lo,bin_hi,count\n");
    for ((lo, hi), count) in histogram.edges().into_iter().zip(&histogram.counts) {
        let _ = writeln!(out, "{},{},{count}", format_f64(lo), format_f64(hi));
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Per-step controller diagnostics as JSON lines.
pub fn write_diagnostics_jsonl(
    path: &Path,
    diagnostics: &[StepDiagnostics],
) -> Result<(), ExportError> {
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    for d in diagnostics {
        let line = serde_json::to_string(d).map_err(|source| ExportError::Json {
            path: path.display().to_string(),
            source,
        })?;
        writeln!(file, "{line}").map_err(io_err(path))?;
    }
    Ok(())
}

/// Emits the cNMC oracle CSV: `time,m00..m22,seed,n`.
pub fn write_oracle_csv(
    path: &Path,
    snapshots: &[(f64, MomentState)],
    seed: u64,
    n: usize,
) -> Result<(), ExportError> {
    let mut out = String::from("time,");
    out.push_str(&MOMENT_NAMES.join(","));
    out.push_str(",seed,n\n");
    for (t, m) in snapshots {
        let mut line = format_f64(*t);
        for v in m.0 {
            let _ = write!(line, ",{}", format_f64(v));
        }
        let _ = write!(line, ",{seed},{n}");
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Writes a campaign bundle into `dir`: per-run trajectories and
/// diagnostics, the failure list, and the summary.
pub fn write_campaign(
    dir: &Path,
    result: &crate::harness::CampaignResult,
) -> Result<(), ExportError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (k, record) in result.runs.iter().enumerate() {
        let base = dir.join(format!("run_{k:03}"));
        write_trajectory_csv(&base.with_extension("csv"), record)?;
        write_diagnostics_jsonl(&base.with_extension("jsonl"), &record.diagnostics)?;
    }
    if !result.failures.is_empty() {
        write_json(&dir.join("failures.json"), &result.failures)?;
    }
    write_json(&dir.join("summary.json"), &result.summary)?;
    write_histogram_csv(
        &dir.join("histogram_drug.csv"),
        &result.summary.histogram_drug,
    )?;
    write_histogram_csv(
        &dir.join("histogram_mass.csv"),
        &result.summary.histogram_mass,
    )?;
    Ok(())
}

/// Writes the surrogate-validation bundle into `dir`: the report plus one
/// histogram pair per horizon step.
pub fn write_validation(dir: &Path, report: &ValidationReport) -> Result<(), ExportError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_json(&dir.join("report.json"), report)?;
    for step in &report.steps {
        write_histogram_csv(
            &dir.join(format!("step{}_mc.csv", step.step)),
            &step.histogram_mc,
        )?;
        write_histogram_csv(
            &dir.join(format!("step{}_pce.csv", step.step)),
            &step.histogram_pce,
        )?;
    }
    Ok(())
}
