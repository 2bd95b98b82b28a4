//! Eval-mode forward-pass benchmark.

use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::report::BenchRecord;
use crate::encoder::{check_lengths, FeatureBatch};
use crate::error::{PdsError, Result};
use crate::model::{ModelConfig, PdsModel};
use crate::numerics::Tensor;

pub const MIN_WARMUP: usize = 3;
pub const MIN_RUNS: usize = 10;
pub const DEFAULT_BASELINE: &str = "stack-4";

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub warmup: usize,
    pub runs: usize,
    pub baseline: String,
    /// Worker threads; above 1 the batch is split into item groups encoded concurrently.
    pub threads: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            warmup: MIN_WARMUP,
            runs: MIN_RUNS,
            baseline: DEFAULT_BASELINE.to_string(),
            threads: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AbortedItem {
    pub index: usize,
    pub length: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchEntry {
    pub config: String,
    pub parameters: usize,
    pub median_ms: Option<f64>,
    pub speedup: Option<f64>,
    /// Longest output sequence in the batch.
    pub final_len: Option<usize>,
    pub peak_memory_estimate_bytes: usize,
    pub times_ms: Vec<f64>,
    pub aborted: Option<AbortedItem>,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchmarkReport {
    pub input_sha256: String,
    pub batch_size: usize,
    pub max_frames: usize,
    pub warmup: usize,
    pub runs: usize,
    pub threads: usize,
    pub baseline: String,
    pub entries: Vec<BenchEntry>,
}

impl BenchmarkReport {
    pub fn entry(&self, config: &str) -> Option<&BenchEntry> {
        self.entries.iter().find(|e| e.config == config)
    }

    pub fn records(&self) -> Vec<BenchRecord> {
        self.entries
            .iter()
            .map(|e| BenchRecord {
                config: e.config.clone(),
                median_ms: e.median_ms,
                speedup: e.speedup,
                final_len: e.final_len,
            })
            .collect()
    }
}

/// SHA-256 over the padded features (f64 little-endian) and the lengths.
pub fn input_hash(batch: &FeatureBatch) -> String {
    let mut h = Sha256::new();
    for &d in batch.features.shape() {
        h.update((d as u64).to_le_bytes());
    }
    for v in batch.features.data() {
        h.update(v.to_le_bytes());
    }
    for &l in &batch.lengths {
        h.update((l as u64).to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Rough upper bound on live memory during an eval forward: parameters,
/// the input, every stage output (fusion keeps them all) and the working
/// set of the widest layer.
pub fn memory_estimate(model: &PdsModel, batch: &FeatureBatch) -> usize {
    const F64: usize = 8;
    const WORKING_COPIES: usize = 6;
    let enc = &model.config.encoder;
    let b = batch.batch_size();
    let mut t = batch.max_len();
    let mut levels = 0;
    let mut working = 0;
    for (m, s) in enc.stages.iter().enumerate() {
        t = t.div_ceil(s.stride);
        let rep = b * t * s.hidden_dim;
        levels = if model.fusion.is_some() {
            levels + rep
        } else {
            rep
        };
        let ffn_chunk = 256 * enc.stage_ffn_dim(m);
        working = working.max(WORKING_COPIES * rep + ffn_chunk);
    }
    F64 * (model.num_parameters() + batch.features.len() + levels + working)
}

fn sub_batch(batch: &FeatureBatch, items: std::ops::Range<usize>) -> Result<FeatureBatch> {
    let parts = items
        .map(|i| batch.features.item_rows(i, batch.lengths[i]))
        .collect::<Result<Vec<Tensor>>>()?;
    FeatureBatch::from_items(&parts)
}

fn forward_once(model: &PdsModel, batch: &FeatureBatch, groups: &[FeatureBatch]) -> Result<usize> {
    if groups.is_empty() {
        let (_, lengths) = model.encode_output(batch)?;
        return Ok(lengths.into_iter().max().unwrap_or(0));
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = groups
            .iter()
            .map(|g| s.spawn(move || model.encode_output(g)))
            .collect();
        let mut longest = 0;
        for h in handles {
            let (_, lengths) = h
                .join()
                .map_err(|_| PdsError::Numerical("benchmark worker panicked".into()))??;
            longest = longest.max(lengths.into_iter().max().unwrap_or(0));
        }
        Ok(longest)
    })
}

/// Times an eval-mode forward of `batch` through every named config.
///
/// Configs are run round-robin, starting one position later each round, so
/// slow drifts in machine load spread evenly. A config whose strides shrink
/// some item to length 0 is reported as aborted and not timed.
pub fn run_benchmark(
    configs: &[(String, ModelConfig)],
    batch: &FeatureBatch,
    opts: &BenchOptions,
) -> Result<BenchmarkReport> {
    if opts.warmup < MIN_WARMUP || opts.runs < MIN_RUNS {
        return Err(PdsError::config(format!(
            "benchmark needs at least {MIN_WARMUP} warmup and {MIN_RUNS} timed runs"
        )));
    }
    if configs.is_empty() {
        return Err(PdsError::config("no benchmark configs given"));
    }
    let threads = opts.threads.max(1).min(batch.batch_size());
    let groups = if threads > 1 {
        let per = batch.batch_size().div_ceil(threads);
        (0..batch.batch_size())
            .step_by(per)
            .map(|s| sub_batch(batch, s..(s + per).min(batch.batch_size())))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    let mut models = Vec::with_capacity(configs.len());
    let mut entries = Vec::with_capacity(configs.len());
    for (name, cfg) in configs {
        let model = PdsModel::new(cfg.clone(), opts.seed)?;
        let aborted = match check_lengths(&batch.lengths, &cfg.encoder.strides()) {
            Ok(()) => None,
            Err(PdsError::ItemTooShort { index, length }) => Some(AbortedItem { index, length }),
            Err(e) => return Err(e),
        };
        entries.push(BenchEntry {
            config: name.clone(),
            parameters: model.num_parameters(),
            median_ms: None,
            speedup: None,
            final_len: None,
            peak_memory_estimate_bytes: memory_estimate(&model, batch),
            times_ms: Vec::with_capacity(opts.runs),
            aborted,
        });
        models.push(model);
    }

    let n = configs.len();
    for round in 0..opts.warmup + opts.runs {
        for k in 0..n {
            let i = (round + k) % n;
            if entries[i].aborted.is_some() {
                continue;
            }
            let start = Instant::now();
            let final_len = forward_once(&models[i], batch, &groups)?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            entries[i].final_len = Some(final_len);
            if round >= opts.warmup {
                entries[i].times_ms.push(ms);
            }
        }
    }

    for e in &mut entries {
        if e.aborted.is_none() {
            e.median_ms = Some(median(&e.times_ms));
        }
    }
    let base = entries
        .iter()
        .find(|e| e.config == opts.baseline)
        .and_then(|e| e.median_ms);
    for e in &mut entries {
        e.speedup = base.zip(e.median_ms).map(|(b, t)| b / t);
    }
    Ok(BenchmarkReport {
        input_sha256: input_hash(batch),
        batch_size: batch.batch_size(),
        max_frames: batch.max_len(),
        warmup: opts.warmup,
        runs: opts.runs,
        threads,
        baseline: opts.baseline.clone(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, Preset};

    fn micro(p: Preset) -> ModelConfig {
        ModelConfig::encoder_only(p, EncoderConfig::micro(p, 8, Some(1)))
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn hash_depends_on_content() {
        let a = FeatureBatch::new(Tensor::zeros(vec![1, 4, 2]), vec![4]).unwrap();
        let b = FeatureBatch::new(Tensor::zeros(vec![1, 4, 2]), vec![3]).unwrap();
        assert_eq!(input_hash(&a), input_hash(&a.clone()));
        assert_ne!(input_hash(&a), input_hash(&b));
        assert_eq!(input_hash(&a).len(), 64);
    }

    #[test]
    fn speedup_against_baseline() {
        let batch = FeatureBatch::new(Tensor::full(vec![2, 40, 80], 0.1), vec![40, 1]).unwrap();
        let configs = vec![
            ("stack-4".to_string(), micro(Preset::Stack4)),
            ("pds-base-8".to_string(), micro(Preset::PdsBase8)),
        ];
        let report = run_benchmark(&configs, &batch, &BenchOptions::default()).unwrap();
        assert!(report.entries.iter().all(|e| e.aborted.is_none()));
        assert_eq!(report.entry("stack-4").unwrap().speedup, Some(1.0));
        assert_eq!(report.entry("pds-base-8").unwrap().final_len, Some(5));
        assert_eq!(report.entry("stack-4").unwrap().times_ms.len(), MIN_RUNS);
    }

    #[test]
    fn empty_item_aborts_config() {
        let batch = FeatureBatch::new(Tensor::full(vec![2, 40, 80], 0.1), vec![40, 0]).unwrap();
        let report = run_benchmark(
            &[("pds-base-8".into(), micro(Preset::PdsBase8))],
            &batch,
            &BenchOptions::default(),
        )
        .unwrap();
        let e = &report.entries[0];
        assert_eq!(
            e.aborted.as_ref().map(|a| (a.index, a.length)),
            Some((1, 0))
        );
        assert!(e.times_ms.is_empty() && e.median_ms.is_none());
    }

    #[test]
    fn too_few_runs_rejected() {
        let batch = FeatureBatch::new(Tensor::full(vec![1, 16, 80], 0.1), vec![16]).unwrap();
        let opts = BenchOptions {
            runs: 3,
            ..Default::default()
        };
        assert!(run_benchmark(&[("x".into(), micro(Preset::Stack4))], &batch, &opts).is_err());
    }

    #[test]
    fn threaded_run_matches_lengths() {
        let batch = FeatureBatch::new(Tensor::full(vec![3, 32, 80], 0.1), vec![32, 20, 9]).unwrap();
        let opts = BenchOptions {
            threads: 2,
            ..Default::default()
        };
        let report = run_benchmark(
            &[("pds-base-16".into(), micro(Preset::PdsBase16))],
            &batch,
            &opts,
        )
        .unwrap();
        assert_eq!(report.threads, 2);
        assert_eq!(report.entries[0].final_len, Some(2));
    }
}
