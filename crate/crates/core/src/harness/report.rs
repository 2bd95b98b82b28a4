//! CSV and JSON report writers.

use std::path::Path;

use serde::Serialize;

use crate::analysis::{AttentionStats, SimilarityProfile};
use crate::error::{PdsError, Result};
use crate::fusion::StageWeight;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimilarityRecord {
    pub point: String,
    pub window: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionRecord {
    pub bin_low: f64,
    pub bin_high: f64,
    pub pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRecord {
    pub config: String,
    /// Empty for a config aborted on a too-short item.
    pub median_ms: Option<f64>,
    pub speedup: Option<f64>,
    pub final_len: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeightRecord {
    pub stage: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
}

pub fn similarity_records(profile: &SimilarityProfile) -> Vec<SimilarityRecord> {
    profile
        .rows
        .iter()
        .map(|r| SimilarityRecord {
            point: r.point.clone(),
            window: r.window,
            value: r.similarity,
        })
        .collect()
}

pub fn attention_records(stats: &AttentionStats) -> Vec<AttentionRecord> {
    stats
        .bins
        .iter()
        .map(|b| AttentionRecord {
            bin_low: b.low,
            bin_high: b.high,
            pct: b.pct,
        })
        .collect()
}

pub fn weight_records(weights: &[StageWeight]) -> Vec<WeightRecord> {
    weights
        .iter()
        .map(|w| WeightRecord {
            stage: w.stage,
            weight: w.weight,
        })
        .collect()
}

fn csv_error(e: csv::Error) -> PdsError {
    PdsError::Format(e.to_string())
}

/// Serializes `rows` with a header line.
pub fn to_csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(csv_error)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| PdsError::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| PdsError::Format(e.to_string()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    std::fs::write(path, to_csv_string(rows)?)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| PdsError::Format(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
