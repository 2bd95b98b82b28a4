//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on a validation or input error, 2 on a
//! numerical failure (divergence, failed gradient check).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::bench::{run_benchmark, BenchOptions, DEFAULT_BASELINE, MIN_RUNS, MIN_WARMUP};
use super::config::{RunConfig, RunMode};
use super::features::{generate_synthetic_features, FeatureFile, LengthDist};
use super::gradcheck::{model_check_config, model_grad_check};
use super::report::{attention_records, similarity_records, weight_records, write_csv, write_json};
use super::train::{train_toy, ToyConfig, ToyTask};
use crate::analysis::{
    attention_weight_distribution, ctc_validity_check, histogram, similarity_profile_batches,
    AttentionStats, CtcVerdict, ProfilePoints, ATTENTION_BIN_WIDTH, ATTENTION_RANGE,
    DEFAULT_WINDOWS,
};
use crate::decoder::{DecoderConfig, TokenBatch, FIRST_TOKEN};
use crate::encoder::config::DEFAULT_FFN_DIM;
use crate::encoder::{BlockType, Preset};
use crate::error::{PdsError, Result};
use crate::model::PdsModel;
use crate::numerics::{Backend, Eval};

#[derive(Debug, Parser)]
#[command(
    name = "pds",
    version,
    about = "Progressive down-sampling encoder toolkit"
)]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Named encoder preset; replaces the stages of --config.
    #[arg(long, global = true, value_name = "NAME")]
    pub preset: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Directory receiving reports.
    #[arg(long, global = true, value_name = "DIR", default_value = "pds-out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Feature file; synthetic features are generated when absent.
    #[arg(long, value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// Synthetic items to generate.
    #[arg(long, default_value_t = 8)]
    pub items: usize,
    #[arg(long, default_value_t = 200)]
    pub min_frames: usize,
    #[arg(long, default_value_t = 1000)]
    pub max_frames: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic feature file.
    Gen {
        #[arg(long, default_value_t = 16)]
        items: usize,
        #[arg(long, default_value_t = 100)]
        min_frames: usize,
        #[arg(long, default_value_t = 1000)]
        max_frames: usize,
        #[arg(long, default_value = "features.pdsf")]
        file: String,
    },
    /// Run the encoder and print per-stage lengths.
    Encode {
        #[arg(long, value_name = "FILE")]
        input: Option<PathBuf>,
        /// Frame counts of synthetic items when no input is given.
        #[arg(long, value_delimiter = ',', default_value = "1000")]
        frames: Vec<usize>,
    },
    /// Time eval-mode forward passes of several presets on one batch.
    Bench {
        #[arg(long, value_name = "FILE")]
        input: Option<PathBuf>,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "stack-4,pds-base-8,pds-base-16,pds-base-32"
        )]
        configs: Vec<String>,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 3000)]
        frames: usize,
        #[arg(long, default_value_t = MIN_WARMUP)]
        warmup: usize,
        #[arg(long, default_value_t = MIN_RUNS)]
        runs: usize,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long, default_value = DEFAULT_BASELINE)]
        baseline: String,
    },
    /// Neighbour similarity of intermediate representations.
    Similarity {
        #[command(flatten)]
        input: InputArgs,
        /// after-ds, after-layer or before-ds.
        #[arg(long, default_value = "after-ds")]
        points: String,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        windows: Vec<usize>,
    },
    /// Distribution of summed cross-attention per encoder position.
    AttnDist {
        #[command(flatten)]
        input: InputArgs,
        /// Decoder layer to analyse; the last by default.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, default_value_t = ATTENTION_BIN_WIDTH)]
        bin_width: f64,
        #[arg(long, default_value_t = 6)]
        decoder_layers: usize,
        #[arg(long, default_value_t = 1000)]
        vocab: usize,
    },
    /// Whether the compressed length still covers the label length.
    CtcCheck {
        #[arg(long)]
        input_len: Option<usize>,
        #[arg(long)]
        label_len: Option<usize>,
        /// Check every item of a feature file against its transcript length.
        #[arg(long, value_name = "FILE")]
        input: Option<PathBuf>,
    },
    /// Train a micro model on a toy task.
    TrainToy {
        /// copy or per-unit-classification.
        #[arg(long, default_value = "copy")]
        task: String,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Finite-difference gradient check of a micro model with fusion.
    Gradcheck {
        /// Use the width-8, one-layer-per-stage micro model (required).
        #[arg(long)]
        micro: bool,
        /// transformer or conformer; both when absent.
        #[arg(long)]
        block: Option<String>,
    },
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// The run configuration after applying --config, --preset and --seed.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(name) = &cli.preset {
        cfg = cfg.with_preset(name.parse()?);
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The preset named by --preset or the config file, ignoring the built-in default.
fn explicit_preset(cli: &Cli, cfg: &RunConfig) -> Option<Preset> {
    if cli.preset.is_some() || cli.config.is_some() {
        cfg.preset
    } else {
        None
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let out = cli.out.as_path();
    std::fs::create_dir_all(out)?;
    match &cli.command {
        Command::Gen {
            items,
            min_frames,
            max_frames,
            file,
        } => cmd_gen(&cfg, out, *items, *min_frames, *max_frames, file),
        Command::Encode { input, frames } => cmd_encode(&cfg, out, input.as_deref(), frames),
        Command::Bench {
            input,
            configs,
            batch,
            frames,
            warmup,
            runs,
            threads,
            baseline,
        } => {
            let opts = BenchOptions {
                warmup: *warmup,
                runs: *runs,
                baseline: baseline.clone(),
                threads: *threads,
                seed: cfg.seed,
            };
            cmd_bench(&cfg, out, input.as_deref(), configs, *batch, *frames, &opts)
        }
        Command::Similarity {
            input,
            points,
            windows,
        } => cmd_similarity(&cfg, out, input, points, windows),
        Command::AttnDist {
            input,
            layer,
            bin_width,
            decoder_layers,
            vocab,
        } => cmd_attn_dist(
            &cfg,
            out,
            input,
            *layer,
            *bin_width,
            *decoder_layers,
            *vocab,
        ),
        Command::CtcCheck {
            input_len,
            label_len,
            input,
        } => cmd_ctc_check(&cfg, out, *input_len, *label_len, input.as_deref()),
        Command::TrainToy {
            task,
            steps,
            lr,
            dim,
        } => cmd_train_toy(
            &cfg,
            explicit_preset(cli, &cfg),
            out,
            task,
            *steps,
            *lr,
            *dim,
        ),
        Command::Gradcheck { micro, block } => cmd_gradcheck(
            &cfg,
            explicit_preset(cli, &cfg),
            out,
            *micro,
            block.as_deref(),
        ),
    }
}

fn load_or_generate(cfg: &RunConfig, input: &InputArgs) -> Result<FeatureFile> {
    match &input.input {
        Some(path) => FeatureFile::load(path),
        None => generate_synthetic_features(
            input.items,
            LengthDist::Uniform {
                min: input.min_frames,
                max: input.max_frames,
            },
            cfg.seed,
        ),
    }
}

fn cmd_gen(
    cfg: &RunConfig,
    out: &Path,
    items: usize,
    min: usize,
    max: usize,
    file: &str,
) -> Result<()> {
    let features = generate_synthetic_features(items, LengthDist::Uniform { min, max }, cfg.seed)?;
    let path = out.join(file);
    features.save(&path)?;
    let frames: usize = features.frame_counts().iter().sum();
    println!(
        "wrote {} items ({frames} frames) to {}",
        features.len(),
        path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct LevelReport {
    stage: usize,
    shape: Vec<usize>,
    lengths: Vec<usize>,
    nominal_ratio: usize,
}

#[derive(Serialize)]
struct EncodeReport {
    config: String,
    parameters: usize,
    input_lengths: Vec<usize>,
    levels: Vec<LevelReport>,
    output_shape: Vec<usize>,
}

fn cmd_encode(cfg: &RunConfig, out: &Path, input: Option<&Path>, frames: &[usize]) -> Result<()> {
    let file = match input {
        Some(path) => FeatureFile::load(path)?,
        None => {
            let mut items = Vec::new();
            for (i, &f) in frames.iter().enumerate() {
                let one = generate_synthetic_features(
                    1,
                    LengthDist::Fixed { frames: f },
                    cfg.seed.wrapping_add(i as u64),
                )?;
                items.extend(one.items);
            }
            FeatureFile {
                items,
                transcript_lengths: None,
            }
        }
    };
    let idx: Vec<usize> = (0..file.len()).collect();
    let batch = file.batch(&idx)?;
    let model = PdsModel::new(cfg.model_config()?, cfg.seed)?;
    let mut b = match cfg.mode {
        RunMode::Eval => Eval::new(&model.store),
        RunMode::Train => Eval::train(&model.store, cfg.seed),
    };
    let x = b.constant(batch.features.clone());
    let enc = model.encode_with(&mut b, &x, &batch.lengths, None)?;
    for item in 0..batch.batch_size() {
        let lens: Vec<String> = enc
            .levels
            .iter()
            .map(|l| l.lengths[item].to_string())
            .collect();
        println!("{}", lens.join(","));
    }
    let report = EncodeReport {
        config: cfg.name(),
        parameters: model.num_parameters(),
        input_lengths: batch.lengths.clone(),
        levels: enc
            .levels
            .iter()
            .enumerate()
            .map(|(stage, l)| LevelReport {
                stage,
                shape: l.rep.shape().to_vec(),
                lengths: l.lengths.clone(),
                nominal_ratio: l.nominal_ratio,
            })
            .collect(),
        output_shape: enc.output.shape().to_vec(),
    };
    write_json(&out.join("encode.json"), &report)
}

fn cmd_bench(
    cfg: &RunConfig,
    out: &Path,
    input: Option<&Path>,
    names: &[String],
    batch_size: usize,
    frames: usize,
    opts: &BenchOptions,
) -> Result<()> {
    if cfg.mode != RunMode::Eval {
        return Err(PdsError::config("benchmarks run in eval mode only"));
    }
    let batch = match input {
        Some(path) => {
            let file = FeatureFile::load(path)?;
            let idx: Vec<usize> = (0..batch_size.min(file.len())).collect();
            file.batch(&idx)?
        }
        None => {
            let file =
                generate_synthetic_features(batch_size, LengthDist::Fixed { frames }, cfg.seed)?;
            file.batch(&(0..batch_size).collect::<Vec<_>>())?
        }
    };
    let configs = names
        .iter()
        .map(|n| {
            let p: Preset = n.parse()?;
            let mut c = cfg.clone().with_preset(p);
            c.fusion = None;
            Ok((p.name().to_string(), c.model_config()?))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = run_benchmark(&configs, &batch, opts)?;
    println!("input sha256 {}", report.input_sha256);
    for e in &report.entries {
        match (&e.aborted, e.median_ms) {
            (Some(a), _) => println!(
                "{:<12} aborted: item {} of length {} compresses to 0",
                e.config, a.index, a.length
            ),
            (None, Some(ms)) => println!(
                "{:<12} {:>10.1} ms  speedup {}  final_len {}",
                e.config,
                ms,
                e.speedup.map_or("-".to_string(), |s| format!("{s:.3}")),
                e.final_len.unwrap_or(0)
            ),
            (None, None) => {}
        }
    }
    write_csv(&out.join("bench.csv"), &report.records())?;
    write_json(&out.join("bench.json"), &report)
}

fn cmd_similarity(
    cfg: &RunConfig,
    out: &Path,
    input: &InputArgs,
    points: &str,
    windows: &[usize],
) -> Result<()> {
    let points: ProfilePoints = points.parse()?;
    let windows = if windows.is_empty() {
        &DEFAULT_WINDOWS[..]
    } else {
        windows
    };
    let file = load_or_generate(cfg, input)?;
    let model = PdsModel::new(cfg.model_config()?, cfg.seed)?;
    let profile =
        similarity_profile_batches(&model, &file.batches(cfg.batch_size)?, points, windows)?;
    for r in &profile.rows {
        println!("{:<12} window {}  {:.4}", r.point, r.window, r.similarity);
    }
    write_csv(&out.join("similarity.csv"), &similarity_records(&profile))
}

#[derive(Serialize)]
struct AttentionSummary {
    layer: usize,
    target_positions: usize,
    encoder_positions: usize,
    total_mass: f64,
    mean_position_sum: f64,
}

fn cmd_attn_dist(
    cfg: &RunConfig,
    out: &Path,
    input: &InputArgs,
    layer: Option<usize>,
    bin_width: f64,
    decoder_layers: usize,
    vocab: usize,
) -> Result<()> {
    let file = load_or_generate(cfg, input)?;
    let mut model_cfg = cfg.model_config()?;
    let width = model_cfg.encoder.output_dim();
    let mut dec = DecoderConfig::new(
        width,
        cfg.heads,
        cfg.ffn_dim.unwrap_or(DEFAULT_FFN_DIM),
        vocab,
    );
    dec.num_layers = decoder_layers;
    model_cfg.decoder = Some(dec);
    let model = PdsModel::new(model_cfg, cfg.seed)?;
    let decoder = model.decoder.as_ref().expect("decoder configured");

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let transcripts: Vec<usize> = match &file.transcript_lengths {
        Some(t) => t.iter().map(|&l| l as usize).collect(),
        None => file
            .frame_counts()
            .iter()
            .map(|&f| (f / 35).max(1))
            .collect(),
    };
    let mut sums = Vec::new();
    let mut target_positions = 0;
    let mut stats_layer = 0;
    let idx: Vec<usize> = (0..file.len()).collect();
    for chunk in idx.chunks(cfg.batch_size) {
        let batch = file.batch(chunk)?;
        let enc = model.encode(&batch)?;
        let seqs: Vec<Vec<usize>> = chunk
            .iter()
            .map(|&i| {
                (0..transcripts[i])
                    .map(|_| rng.random_range(FIRST_TOKEN..vocab))
                    .collect()
            })
            .collect();
        let (inputs, _) = TokenBatch::teacher_forcing(&seqs)?;
        let mut b = Eval::new(&model.store);
        let memory = b.constant(enc.output.clone());
        let dec_out = decoder.forward(&mut b, &memory, &enc.lengths, &inputs, true)?;
        let weights = dec_out.cross_attention.expect("cross-attention kept");
        let stats = attention_weight_distribution(
            &weights,
            &enc.lengths,
            &inputs.lengths,
            layer,
            bin_width,
        )?;
        stats_layer = stats.layer;
        target_positions += stats.target_positions;
        sums.extend(stats.position_sums);
    }
    let bins = histogram(&sums, bin_width, ATTENTION_RANGE)?;
    let total_mass: f64 = sums.iter().sum();
    let summary = AttentionSummary {
        layer: stats_layer,
        target_positions,
        encoder_positions: sums.len(),
        total_mass,
        mean_position_sum: total_mass / sums.len().max(1) as f64,
    };
    println!(
        "layer {}: {} encoder positions, mean summed weight {:.4} (total {:.6} over {} target positions)",
        summary.layer, summary.encoder_positions, summary.mean_position_sum, summary.total_mass, summary.target_positions
    );
    let stats = AttentionStats {
        layer: stats_layer,
        bin_width,
        bins,
        position_sums: Vec::new(),
        total_mass,
        target_positions,
    };
    write_csv(&out.join("attention.csv"), &attention_records(&stats))?;
    write_json(&out.join("attention.json"), &summary)
}

#[derive(Serialize)]
struct CtcReport {
    input_len: usize,
    label_len: usize,
    #[serde(flatten)]
    verdict: CtcVerdict,
}

#[derive(Serialize)]
struct CtcCorpusReport {
    items: usize,
    invalid: usize,
    invalid_fraction: f64,
    results: Vec<CtcReport>,
}

fn cmd_ctc_check(
    cfg: &RunConfig,
    out: &Path,
    input_len: Option<usize>,
    label_len: Option<usize>,
    input: Option<&Path>,
) -> Result<()> {
    let strides = cfg.encoder_config()?.strides();
    match (input_len, label_len, input) {
        (Some(i), Some(l), None) => {
            let verdict = ctc_validity_check(i, &strides, l);
            let word = if verdict.is_valid() {
                "valid"
            } else {
                "invalid"
            };
            println!(
                "{word}: final length {} for {l} labels",
                verdict.final_len()
            );
            write_json(
                &out.join("ctc.json"),
                &CtcReport {
                    input_len: i,
                    label_len: l,
                    verdict,
                },
            )
        }
        (None, None, Some(path)) => {
            let file = FeatureFile::load(path)?;
            let labels = file.transcript_lengths.as_ref().ok_or_else(|| {
                PdsError::config(format!("{} has no transcript lengths", path.display()))
            })?;
            let results: Vec<CtcReport> = file
                .frame_counts()
                .into_iter()
                .zip(labels)
                .map(|(i, &l)| CtcReport {
                    input_len: i,
                    label_len: l as usize,
                    verdict: ctc_validity_check(i, &strides, l as usize),
                })
                .collect();
            let invalid = results.iter().filter(|r| !r.verdict.is_valid()).count();
            let report = CtcCorpusReport {
                items: results.len(),
                invalid,
                invalid_fraction: invalid as f64 / results.len().max(1) as f64,
                results,
            };
            println!(
                "{} of {} items invalid ({:.2}%)",
                invalid,
                report.items,
                100.0 * report.invalid_fraction
            );
            write_json(&out.join("ctc.json"), &report)
        }
        _ => Err(PdsError::config(
            "ctc-check needs --input-len with --label-len, or --input alone",
        )),
    }
}

fn cmd_train_toy(
    cfg: &RunConfig,
    preset: Option<Preset>,
    out: &Path,
    task: &str,
    steps: usize,
    lr: Option<f64>,
    dim: Option<usize>,
) -> Result<()> {
    let mut toy = ToyConfig::new(task.parse::<ToyTask>()?);
    if let Some(p) = preset {
        toy.preset = p;
    }
    toy.block_type = cfg.block_type;
    toy.steps = steps;
    toy.seed = cfg.seed;
    if let Some(lr) = lr {
        toy.lr = lr;
    }
    if let Some(d) = dim {
        toy.dim = d;
    }
    let report = train_toy(&toy)?;
    println!(
        "{} steps: loss {:.4} -> {:.4} ({:.1}% lower), accuracy {:.3}",
        toy.steps,
        report.initial_loss,
        report.final_loss,
        100.0 * report.reduction,
        report.accuracy
    );
    if let Some(em) = report.exact_match {
        println!("held-out greedy exact match: {:.3}", em);
    }
    for w in &report.fusion_weights {
        println!(
            "fusion weight stage {}: {:.4} (init {:.4})",
            w.stage, w.weight, report.initial_fusion_weight
        );
    }
    write_csv(&out.join("loss.csv"), &report.losses)?;
    write_csv(
        &out.join("weights.csv"),
        &weight_records(&report.fusion_weights),
    )?;
    write_json(&out.join("train.json"), &report)
}

fn cmd_gradcheck(
    cfg: &RunConfig,
    preset: Option<Preset>,
    out: &Path,
    micro: bool,
    block: Option<&str>,
) -> Result<()> {
    if !micro {
        return Err(PdsError::config(
            "gradcheck runs on the micro model; pass --micro",
        ));
    }
    let preset = preset.unwrap_or(Preset::PdsBase8);
    let blocks = match block {
        Some(b) => vec![b.parse::<BlockType>()?],
        None => vec![BlockType::Transformer, BlockType::Conformer],
    };
    let gc = model_check_config(cfg.seed);
    let mut reports = Vec::new();
    let mut failed = Vec::new();
    for b in blocks {
        let report = model_grad_check(preset, b, cfg.seed, &gc)?;
        let name = format!("{preset}/{}", b.name());
        println!(
            "{name}: {} (max relative error {:.3e}, tolerance {:.0e}, {} entries checked, {} skipped at kinks)",
            if report.passed { "pass" } else { "FAIL" },
            report.max_rel_error,
            report.tol,
            report.checked,
            report.nonsmooth
        );
        if !report.passed {
            failed.push(name.clone());
        }
        reports.push((name, report));
    }
    write_json(&out.join("gradcheck.json"), &reports)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(PdsError::Numerical(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}
