//! Report assembly from directories of measure and eval JSON files.

use std::fs;
use std::path::{Path, PathBuf};

use rmprobe_core::downstream::{self, CorrelationReport, EncoderSummary, EvalResult};
use rmprobe_core::error::{Error, Result};
use rmprobe_core::metrics::MetricsRecord;

use serde::de::DeserializeOwned;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn json_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "json") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Read every metrics and eval JSON under the two directories, keep the
/// noise-driven metric records (the score is only interpreted under the
/// noise schedule), join, and correlate.
pub fn assemble(
    metrics_dir: &Path,
    evals_dir: &Path,
    include_pgd: bool,
) -> Result<CorrelationReport> {
    let mut encoders: Vec<EncoderSummary> = Vec::new();
    let mut pre_warnings = Vec::new();
    for path in json_files(metrics_dir)? {
        let record: MetricsRecord = read_json(&path)?;
        let alteration = record.meta.get("alteration").map(String::as_str);
        if !include_pgd && alteration != Some("noise") {
            pre_warnings.push(format!(
                "skipped {} (alteration {:?}, correlations use the noise schedule)",
                path.display(),
                alteration.unwrap_or("unknown")
            ));
            continue;
        }
        let get = |key: &str, fallback: &str| {
            record
                .meta
                .get(key)
                .cloned()
                .unwrap_or_else(|| fallback.to_string())
        };
        encoders.push(EncoderSummary {
            encoder_id: get("encoder_id", &file_stem(&path)),
            method: get("method", "unknown"),
            embedding_dim: record.embedding_dim,
            optimizer: get("optimizer", "unknown"),
            rmqm: record.rmqm,
        });
    }
    let mut evals: Vec<EvalResult> = Vec::new();
    for path in json_files(evals_dir)? {
        evals.push(read_json(&path)?);
    }
    let mut report = downstream::build_report(&encoders, &evals)?;
    pre_warnings.append(&mut report.warnings);
    report.warnings = pre_warnings;
    Ok(report)
}

pub fn write_scatter_csv(report: &CorrelationReport, path: &Path) -> Result<()> {
    let mut csv = String::from("encoder_id,method,dim,optimizer,rmqm,task,raw_acc,norm_acc\n");
    for row in &report.rows {
        csv.push_str(&format!(
            "{},{},{},{},{:?},{},{:?},{:?}\n",
            row.encoder_id,
            row.method,
            row.embedding_dim,
            row.optimizer,
            row.rmqm,
            row.task_id,
            row.raw_accuracy,
            row.normalized_accuracy,
        ));
    }
    fs::write(path, csv)?;
    Ok(())
}
