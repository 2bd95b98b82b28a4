#![allow(dead_code)]

use pds::encoder::config::FEATURE_DIM;
use pds::encoder::{BlockType, EncoderConfig, FeatureBatch, LevelOutput, Preset, StageSpec};
use pds::fusion::Fusion;
use pds::model::{ModelConfig, PdsModel};
use pds::numerics::param::uniform;
use pds::numerics::{Backend, Eval, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent oracle for the length law: repeated `ceil(len / s)` in integers.
pub fn iterated_ceil(len: usize, strides: &[usize]) -> usize {
    strides.iter().fold(len, |l, &s| l.div_ceil(s))
}

pub fn random_items(lengths: &[usize], dim: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    lengths
        .iter()
        .map(|&l| uniform(&[l, dim], 1.0, &mut rng))
        .collect()
}

pub fn random_batch(lengths: &[usize], seed: u64) -> FeatureBatch {
    FeatureBatch::from_items(&random_items(lengths, FEATURE_DIM, seed)).unwrap()
}

/// Width-8 encoder with one layer per stage unless `layers` is given.
pub fn micro_model(
    preset: Preset,
    block: BlockType,
    fusion: bool,
    layers: Option<usize>,
    seed: u64,
) -> PdsModel {
    let config = ModelConfig {
        encoder: EncoderConfig::micro(preset, 8, layers).with_block(block),
        fusion,
        decoder: None,
    };
    PdsModel::new(config, seed).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Rows `0..len` of item `b` of a `(batch, time, dim)` tensor.
pub fn item_rows(t: &Tensor, b: usize, len: usize) -> Vec<f64> {
    t.item_rows(b, len).unwrap().into_data()
}

/// Zero-layer micro model with fusion over one input channel, for length checks.
pub fn alignment_model(preset: Preset) -> PdsModel {
    let encoder = EncoderConfig {
        input_dim: 1,
        ..EncoderConfig::micro(preset, 8, Some(0))
    };
    PdsModel::new(
        ModelConfig {
            encoder,
            fusion: true,
            decoder: None,
        },
        0,
    )
    .unwrap()
}

/// Top-stage length and the aligned length of every stage for one batch.
pub fn aligned_lengths(model: &PdsModel, lengths: &[usize]) -> (usize, Vec<usize>) {
    let t = *lengths.iter().max().unwrap();
    let x = Tensor::zeros(vec![lengths.len(), t, model.config.encoder.input_dim]);
    let fusion = model.fusion.as_ref().unwrap();
    let mut b = Eval::new(&model.store);
    let x = b.constant(x);
    let levels = model.encoder.forward(&mut b, &x, lengths, None).unwrap();
    let top = levels.last().unwrap();
    let t_m = b.value(&top.rep).dim(1);
    let out = (0..levels.len())
        .map(|m| {
            let aligned = fusion.align_level(&mut b, m, &levels[m], top).unwrap();
            b.value(&aligned).dim(1)
        })
        .collect();
    (t_m, out)
}

fn tie_pipelines(store: &mut ParamStore, levels: usize) {
    let names: Vec<String> = store
        .iter()
        .map(|(_, p)| p.name.clone())
        .filter(|n| n.starts_with("fusion.stage0.") && n != "fusion.stage0.weight")
        .collect();
    for name in names {
        let src = store.get(store.id(&name).unwrap()).clone();
        for m in 1..levels {
            let id = store
                .id(&name.replacen("stage0", &format!("stage{m}"), 1))
                .unwrap();
            *store.get_mut(id) = src.clone();
        }
    }
}

/// Fuses `m` copies of one random level through tied stride-1 pipelines with
/// their initial `1/m` weights, and returns the largest distance from that
/// level passed through a single pipeline and norm.
pub fn fuse_identical_levels(m: usize, lengths: &[usize], seed: u64) -> f64 {
    let config = EncoderConfig {
        stages: (0..m).map(|_| StageSpec::new(1, 0, 6)).collect(),
        ..EncoderConfig::micro(Preset::PdsBase8, 6, Some(0))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let fusion = Fusion::new(&config, &mut store, &mut rng).unwrap();
    // non-trivial but shared pipeline parameters
    for (id, p) in store
        .iter()
        .map(|(id, p)| (id, p.name.clone()))
        .collect::<Vec<_>>()
    {
        if p.starts_with("fusion.stage0.") && p != "fusion.stage0.weight" {
            let shape = store.get(id).shape().to_vec();
            let mut t = uniform(&shape, 0.8, &mut rng);
            t.data_mut().iter_mut().for_each(|v| *v += 1.0);
            *store.get_mut(id) = t;
        }
    }
    tie_pipelines(&mut store, m);
    let t = *lengths.iter().max().unwrap();
    let h = uniform(&[lengths.len(), t, 6], 1.0, &mut rng);
    let mut b = Eval::new(&store);
    let levels: Vec<_> = (0..m)
        .map(|_| LevelOutput {
            rep: b.constant(h.clone()),
            lengths: lengths.to_vec(),
            nominal_ratio: 1,
        })
        .collect();
    let fused = fusion.fuse(&mut b, &levels).unwrap();
    let single = fusion
        .align_level(&mut b, 0, &levels[0], &levels[m - 1])
        .unwrap();
    let single = fusion.norms[0].forward(&mut b, &single).unwrap();
    let single = b.mask_time(single, lengths).unwrap();
    max_abs_diff(b.value(&fused).data(), b.value(&single).data())
}

/// Brute force: for each position, average cosine similarity to every other
/// position at distance at most `d`, then average over positions.
pub fn similarity_oracle(rows: &[Vec<f64>], d: usize) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
        }
    };
    let t = rows.len() as i64;
    let mut total = 0.0;
    for i in 0..t {
        let mut s = 0.0;
        let mut n = 0;
        for j in 0..t {
            if j != i && (j - i).abs() <= d as i64 {
                s += cos(&rows[i as usize], &rows[j as usize]);
                n += 1;
            }
        }
        total += s / n as f64;
    }
    total / t as f64
}
