//! Diagnostic measurements over representations and attention weights.

use serde::Serialize;

use crate::encoder::{downsampled_lengths, Capture, FeatureBatch, TracePoint};
use crate::error::{PdsError, Result};
use crate::model::PdsModel;
use crate::numerics::attention::average_heads;
use crate::numerics::Tensor;

pub const DEFAULT_WINDOWS: [usize; 3] = [1, 2, 3];
pub const ATTENTION_BIN_WIDTH: f64 = 0.025;
pub const ATTENTION_RANGE: f64 = 2.0;
pub const LENGTH_RATIO_BIN_WIDTH: f64 = 2.0;

/// Mean over positions of the mean cosine similarity to the neighbours
/// within `window` steps on either side. Windows are truncated at the
/// sequence ends; zero vectors have similarity 0 to everything.
pub fn representation_similarity(rep: &Tensor, window: usize) -> Result<f64> {
    if rep.rank() != 2 {
        return Err(PdsError::config(format!(
            "expected (time, dim), got {:?}",
            rep.shape()
        )));
    }
    if window == 0 {
        return Err(PdsError::config("similarity window must be at least 1"));
    }
    let (t, d) = (rep.dim(0), rep.dim(1));
    if t < 2 {
        return Err(PdsError::UndefinedSimilarity(t));
    }
    let rows: Vec<&[f64]> = rep.data().chunks_exact(d).collect();
    let norms: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut total = 0.0;
    for i in 0..t {
        let lo = i.saturating_sub(window);
        let hi = (i + window).min(t - 1);
        let mut sum = 0.0;
        for j in (lo..=hi).filter(|&j| j != i) {
            if norms[i] > 0.0 && norms[j] > 0.0 {
                let dot: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| a * b).sum();
                sum += dot / (norms[i] * norms[j]);
            }
        }
        total += sum / (hi - lo) as f64;
    }
    Ok(total / t as f64)
}

/// Which intermediate representations a profile measures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProfilePoints {
    AfterEachDownSample,
    AfterEachLayer,
    /// The encoder input and the output of every stage but the last.
    BeforeEachDownSample,
}

impl std::str::FromStr for ProfilePoints {
    type Err = PdsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "after-ds" => Ok(Self::AfterEachDownSample),
            "after-layer" => Ok(Self::AfterEachLayer),
            "before-ds" => Ok(Self::BeforeEachDownSample),
            other => Err(PdsError::config(format!(
                "unknown measurement points {other:?} (expected after-ds, after-layer or before-ds)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimilarityRow {
    pub point: String,
    pub window: usize,
    pub similarity: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct SimilarityProfile {
    pub rows: Vec<SimilarityRow>,
    /// Number of `(item, point)` pairs skipped for having fewer than two valid positions.
    pub skipped: usize,
}

impl SimilarityProfile {
    pub fn points(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if out.last() != Some(&r.point.as_str()) {
                out.push(&r.point);
            }
        }
        out
    }

    pub fn get(&self, point: &str, window: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.point == point && r.window == window)
            .map(|r| r.similarity)
    }
}

/// Per-item similarity on valid rows, then averaged over the batch.
/// Returns `None` when no item has two valid positions.
pub fn batch_similarity(
    rep: &Tensor,
    lengths: &[usize],
    window: usize,
    skipped: &mut usize,
) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut count = 0;
    for (b, &len) in lengths.iter().enumerate() {
        if len < 2 {
            *skipped += 1;
            continue;
        }
        let rows = rep.item_rows(b, len)?;
        sum += representation_similarity(&rows, window)?;
        count += 1;
    }
    Ok((count > 0).then(|| sum / count as f64))
}

fn select(captures: &[Capture], points: ProfilePoints) -> Vec<(String, &Capture)> {
    match points {
        ProfilePoints::AfterEachDownSample => captures
            .iter()
            .filter(|c| matches!(c.point, TracePoint::AfterDownSample { .. }))
            .map(|c| (c.point.label(), c))
            .collect(),
        ProfilePoints::AfterEachLayer => captures
            .iter()
            .filter(|c| matches!(c.point, TracePoint::AfterLayer { .. }))
            .map(|c| (c.point.label(), c))
            .collect(),
        ProfilePoints::BeforeEachDownSample => {
            // the last capture before each down-sampling
            let mut out = Vec::new();
            for (i, c) in captures.iter().enumerate() {
                if let TracePoint::AfterDownSample { stage } = c.point {
                    out.push((format!("before-ds{}", stage + 1), &captures[i - 1]));
                }
            }
            out
        }
    }
}

/// Similarity at the requested points of an eval-mode forward pass.
pub fn similarity_profile(
    model: &PdsModel,
    batch: &FeatureBatch,
    points: ProfilePoints,
    windows: &[usize],
) -> Result<SimilarityProfile> {
    similarity_profile_batches(model, std::slice::from_ref(batch), points, windows)
}

/// Like [`similarity_profile`], averaging per item over several batches.
pub fn similarity_profile_batches(
    model: &PdsModel,
    batches: &[FeatureBatch],
    points: ProfilePoints,
    windows: &[usize],
) -> Result<SimilarityProfile> {
    // (label, window) -> (sum of per-item similarities, items)
    let mut acc: Vec<(String, usize, f64, usize)> = Vec::new();
    let mut skipped = 0;
    for batch in batches {
        let mut captures = Vec::new();
        model.encode_traced(batch, Some(&mut captures))?;
        for (label, capture) in select(&captures, points) {
            for (b, &len) in capture.lengths.iter().enumerate() {
                if len < 2 {
                    skipped += 1;
                    continue;
                }
                let rows = capture.rep.item_rows(b, len)?;
                for &w in windows {
                    let sim = representation_similarity(&rows, w)?;
                    match acc.iter_mut().find(|e| e.0 == label && e.1 == w) {
                        Some(e) => {
                            e.2 += sim;
                            e.3 += 1;
                        }
                        None => acc.push((label.clone(), w, sim, 1)),
                    }
                }
            }
        }
    }
    Ok(SimilarityProfile {
        rows: acc
            .into_iter()
            .map(|(point, window, sum, n)| SimilarityRow {
                point,
                window,
                similarity: sum / n as f64,
            })
            .collect(),
        skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistogramBin {
    pub low: f64,
    /// `f64::INFINITY` for the overflow bin.
    pub high: f64,
    pub pct: f64,
}

/// Fixed-width histogram over `[0, upper)` plus an overflow bin, as percentages.
pub fn histogram(values: &[f64], bin_width: f64, upper: f64) -> Result<Vec<HistogramBin>> {
    if !(bin_width > 0.0 && upper > 0.0) {
        return Err(PdsError::config(
            "histogram needs a positive bin width and range",
        ));
    }
    let n = (upper / bin_width).round() as usize;
    let mut counts = vec![0usize; n + 1];
    for &v in values {
        let k = if v < 0.0 {
            0
        } else {
            ((v / bin_width).floor() as usize).min(n)
        };
        counts[k] += 1;
    }
    let total = values.len().max(1) as f64;
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(k, c)| HistogramBin {
            low: k as f64 * bin_width,
            high: if k == n {
                f64::INFINITY
            } else {
                (k + 1) as f64 * bin_width
            },
            pct: 100.0 * c as f64 / total,
        })
        .collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct AttentionStats {
    pub layer: usize,
    pub bin_width: f64,
    pub bins: Vec<HistogramBin>,
    /// Head-averaged weight received by each valid encoder position, summed over valid target positions.
    pub position_sums: Vec<f64>,
    /// Sum of `position_sums`; equals the number of valid target positions.
    pub total_mass: f64,
    pub target_positions: usize,
}

impl AttentionStats {
    pub fn mean_position_sum(&self) -> f64 {
        self.total_mass / self.position_sums.len().max(1) as f64
    }
}

/// Distribution of summed cross-attention per encoder position.
///
/// `cross_attention` is `(layers, batch, heads, target, memory)`; `layer`
/// defaults to the last one.
pub fn attention_weight_distribution(
    cross_attention: &Tensor,
    memory_lengths: &[usize],
    target_lengths: &[usize],
    layer: Option<usize>,
    bin_width: f64,
) -> Result<AttentionStats> {
    let &[layers, batch, heads, tt, tm] = cross_attention.shape() else {
        return Err(PdsError::config(format!(
            "cross-attention must be (layers, batch, heads, target, memory), got {:?}",
            cross_attention.shape()
        )));
    };
    if memory_lengths.len() != batch || target_lengths.len() != batch {
        return Err(PdsError::config(
            "length lists do not match the attention batch",
        ));
    }
    let layer = layer.unwrap_or(layers - 1);
    if layer >= layers {
        return Err(PdsError::config(format!(
            "layer {layer} out of range for {layers} layers"
        )));
    }
    let per_layer = batch * heads * tt * tm;
    let slice = Tensor::new(
        vec![batch, heads, tt, tm],
        cross_attention.data()[layer * per_layer..(layer + 1) * per_layer].to_vec(),
    )?;
    let avg = average_heads(&slice)?;
    let mut position_sums = Vec::new();
    for b in 0..batch {
        for m in 0..memory_lengths[b] {
            let s: f64 = (0..target_lengths[b])
                .map(|t| avg.data()[(b * tt + t) * tm + m])
                .sum();
            position_sums.push(s);
        }
    }
    let total_mass = position_sums.iter().sum();
    Ok(AttentionStats {
        layer,
        bin_width,
        bins: histogram(&position_sums, bin_width, ATTENTION_RANGE)?,
        position_sums,
        total_mass,
        target_positions: target_lengths.iter().sum(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct LengthRatioStats {
    pub ratios: Vec<f64>,
    /// Pairs dropped for an empty transcript.
    pub excluded: usize,
    pub bin_width: f64,
    pub bins: Vec<HistogramBin>,
}

impl LengthRatioStats {
    /// Lower edge of the most populated bin.
    pub fn mode_bin(&self) -> Option<&HistogramBin> {
        self.bins
            .iter()
            .max_by(|a, b| a.pct.total_cmp(&b.pct).then(b.low.total_cmp(&a.low)))
    }
}

/// Histogram of frame-count / token-count ratios.
pub fn length_ratio_stats(
    feature_lengths: &[usize],
    transcript_lengths: &[usize],
    bin_width: f64,
) -> Result<LengthRatioStats> {
    if feature_lengths.len() != transcript_lengths.len() {
        return Err(PdsError::config(
            "feature and transcript length lists differ in size",
        ));
    }
    let mut excluded = 0;
    let ratios: Vec<f64> = feature_lengths
        .iter()
        .zip(transcript_lengths)
        .filter_map(|(&f, &t)| {
            if t == 0 {
                excluded += 1;
                None
            } else {
                Some(f as f64 / t as f64)
            }
        })
        .collect();
    let max = ratios.iter().copied().fold(0.0, f64::max);
    let upper = ((max / bin_width).floor() + 1.0) * bin_width;
    let mut bins = histogram(&ratios, bin_width, upper)?;
    // every ratio is below `upper`, so the overflow bin is always empty
    bins.pop();
    Ok(LengthRatioStats {
        ratios,
        excluded,
        bin_width,
        bins,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "verdict", rename_all = "lowercase")]
pub enum CtcVerdict {
    Valid { final_len: usize },
    Invalid { final_len: usize },
}

impl CtcVerdict {
    pub fn is_valid(&self) -> bool {
        matches!(self, CtcVerdict::Valid { .. })
    }

    pub fn final_len(&self) -> usize {
        match *self {
            CtcVerdict::Valid { final_len } | CtcVerdict::Invalid { final_len } => final_len,
        }
    }
}

/// Whether an input of `input_len` frames still covers `label_len` labels
/// after down-sampling by `strides`.
pub fn ctc_validity_check(input_len: usize, strides: &[usize], label_len: usize) -> CtcVerdict {
    let final_len = downsampled_lengths(&[input_len], strides)[0];
    if final_len >= label_len {
        CtcVerdict::Valid { final_len }
    } else {
        CtcVerdict::Invalid { final_len }
    }
}

/// Fraction of `(input_len, label_len)` pairs that are invalid under `strides`.
pub fn invalid_fraction(pairs: &[(usize, usize)], strides: &[usize]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let bad = pairs
        .iter()
        .filter(|&&(i, l)| !ctc_validity_check(i, strides, l).is_valid())
        .count();
    bad as f64 / pairs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_rows_are_fully_similar() {
        let rep = Tensor::from_fn(vec![6, 3], |i| (i % 3) as f64 + 1.0);
        for w in DEFAULT_WINDOWS {
            assert!((representation_similarity(&rep, w).unwrap() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn alternating_orthogonal_rows() {
        let rep = Tensor::from_fn(vec![7, 2], |i| if (i / 2) % 2 == i % 2 { 1.0 } else { 0.0 });
        assert_eq!(representation_similarity(&rep, 1).unwrap(), 0.0);
    }

    #[test]
    fn zero_rows_count_as_dissimilar() {
        let rep = Tensor::zeros(vec![4, 3]);
        assert_eq!(representation_similarity(&rep, 2).unwrap(), 0.0);
    }

    #[test]
    fn single_row_is_undefined() {
        let rep = Tensor::zeros(vec![1, 3]);
        assert!(matches!(
            representation_similarity(&rep, 1),
            Err(PdsError::UndefinedSimilarity(1))
        ));
    }

    #[test]
    fn uniform_attention_is_a_single_spike() {
        // T_M = 10, T_tgt = 5, uniform rows: every position receives 0.5
        let w = Tensor::full(vec![1, 1, 2, 5, 10], 0.1);
        let stats =
            attention_weight_distribution(&w, &[10], &[5], None, ATTENTION_BIN_WIDTH).unwrap();
        assert!(stats.position_sums.iter().all(|&s| (s - 0.5).abs() < 1e-12));
        assert!((stats.total_mass - 5.0).abs() < 1e-12);
        let full: Vec<_> = stats.bins.iter().filter(|b| b.pct > 0.0).collect();
        assert_eq!(full.len(), 1);
        assert_eq!(full[0].pct, 100.0);
        assert!(full[0].low <= 0.5 && 0.5 < full[0].high);
        let total: f64 = stats.bins.iter().map(|b| b.pct).sum();
        assert!((total - 100.0).abs() < 1e-9);
    }

    #[test]
    fn length_ratios() {
        let stats = length_ratio_stats(&[100, 200, 50], &[10, 10, 0], 2.0).unwrap();
        assert_eq!(stats.ratios, vec![10.0, 20.0]);
        assert_eq!(stats.excluded, 1);
        let total: f64 = stats.bins.iter().map(|b| b.pct).sum();
        assert!((total - 100.0).abs() < 1e-12);
    }

    #[test]
    fn ctc_cases() {
        let s32 = [2, 2, 2, 2, 2];
        assert_eq!(
            ctc_validity_check(3000, &s32, 90),
            CtcVerdict::Valid { final_len: 94 }
        );
        assert_eq!(
            ctc_validity_check(3000, &s32, 100),
            CtcVerdict::Invalid { final_len: 94 }
        );
        assert!(ctc_validity_check(3000, &[2, 2], 700).is_valid());
    }
}
