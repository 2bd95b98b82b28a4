//! A gradient check for each differentiable primitive on small random inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::activation::Activation;
use super::attention::AttentionSpec;
use super::backend::{Backend, FeedForwardParams};
use super::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use super::norm::{RunningStats, NORM_EPS};
use super::param::{uniform, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

pub type OpCheck = fn(&GradCheckConfig, u64) -> Result<GradCheckReport>;

/// Every primitive check, by name.
pub const OP_CHECKS: &[(&str, OpCheck)] = &[
    ("conv1d", conv1d),
    ("depthwise_conv1d", depthwise_conv1d),
    ("layer_norm", layer_norm),
    ("batch_norm", batch_norm),
    ("activations", activations),
    ("attention", attention),
    ("causal_attention", causal_attention),
    ("plumbing", plumbing),
    ("linear_cross_entropy", linear_cross_entropy),
    ("feed_forward_relu", feed_forward_relu),
    ("feed_forward_swish", feed_forward_swish),
];

/// Settings used by [`run_op_checks`].
pub fn op_check_config(seed: u64) -> GradCheckConfig {
    GradCheckConfig {
        max_entries_per_tensor: 200,
        seed,
        ..Default::default()
    }
}

/// Runs every entry of [`OP_CHECKS`].
pub fn run_op_checks(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let cfg = op_check_config(seed);
    OP_CHECKS
        .iter()
        .map(|&(name, f)| Ok((name, f(&cfg, seed)?)))
        .collect()
}

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(salt))
}

fn conv1d(cfg: &GradCheckConfig, seed: u64) -> Result<GradCheckReport> {
    let mut rng = rng(seed, 1);
    let mut store = ParamStore::new();
    let w = store.register("k", uniform(&[5, 3, 4], 1.0, &mut rng))?;
    let b = store.register("b", uniform(&[4], 1.0, &mut rng))?;
    let mut inputs = vec![uniform(&[2, 7, 3], 1.0, &mut rng)];
    let coeff = uniform(&[2, 4, 4], 1.0, &mut rng);
    grad_check(&mut store, &mut inputs, cfg, |tape, xs| {
        let (w, b) = (tape.param(w), tape.param(b));
        let y = tape.conv1d(&xs[0], &w, &b, 2, 2)?;
        tape.dot_const(&y, &coeff)
    })
}

fn depthwise_conv1d(cfg: &GradCheckConfig, seed: u64) -> Result<GradCheckReport> {
    let mut rng = rng(seed, 2);
    let mut store = ParamStore::new();
    let w = store.register("k", uniform(&[5, 3], 1.0, &mut rng))?;
    let b = store.register("b", uniform(&[3], 1.0, &mut rng))?;
    let mut inputs = vec![uniform(&[2, 6, 3], 1.0, &mut rng)];
    let coeff = uniform(&[2, 6, 3], 1.0, &mut rng);
    grad_check(&mut store, &mut inputs, cfg, |tape, xs| {
        let (w, b) = (tape.param(w), tape.param(b));
        let y = tape.depthwise_conv1d(&xs[0], &w, &b, 2)?;
        tape.dot_const(&y, &coeff)
    })
}

fn layer_norm(cfg: &GradCheckConfig, seed: u64) -> Result<GradCheckReport> {
    let mut rng = rng(seed, 3);
    let mut store = ParamStore::new();
    let g = store.register("g", uniform(&[8], 1.0, &mut rng))?;
    let b = store.register("b", uniform(&[8], 1.0, &mut rng))?;
    let mut inputs = vec![uniform(&[3, 8], 1.0, &mut rng)];
    let coeff = uniform(&[3, 8], 1.0, &mut rng);
    grad_check(&mut store, &mut inputs, cfg, |tape, xs| {
        let (g, b) = (tape.param(g), tape.param(b));
        let y = tape.layer_norm(&xs[0], &g, &b, NORM_EPS)?;
        tape.dot_const(&y, &coeff)
    })
}

/// Training-mode batch norm over a padded batch.
fn batch_norm(cfg: &GradCheckConfig, seed: u64) -> Result<GradCheckReport> {
    let mut rng = rng(seed, 4);
    let mut store = ParamStore::new();
    let g = store.register("g", uniform(&[3], 1.0, &mut rng))?;
    let b = store.register("b", uniform(&[3], 1.0, &mut rng))?;
    let running = RunningStats::new(3);
    let mut inputs = vec![uniform(&[2, 5, 3], 1.0, &mut rng)];
    let coeff = uniform(&[2, 5, 3], 1.0, &mut rng);
    grad_check(&mut store, &mut inputs, cfg, |tape, xs| {
        let (g, b) = (tape.param(g), tape.param(b));
        let y = tape.batch_norm(&xs[0], &g, &b, &[5, 3], &running, NORM_EPS)?;
        tape.dot_const(&y, &coeff)
    })
}

fn activations(cfg: &GradCheckConfig, seed: u64) -> Result<GradCheckReport> {
    let mut rng = rng(seed, 5);
    let mut store = ParamStore::new();
    let mut inputs = vec![uniform(&[4, 6], 1.0, &mut rng)];
    let c_full = uniform(&[4, 6], 1.0, &mut rng);
    let c_half = uniform(&[4, 3], 1.0, &mut rng);
    grad_check(&mut store, &mut inputs, cfg, |tape, xs| {
        let r = tape.relu(xs[0]);
        let s = tape.swish(xs[0]);
        let g = tape.glu(&xs[0])?;
        let l1 = tape.dot_const(&r, &c_full)?;
        let l2 = tape.dot_const(&s, &c_full)?;
        let l3 = tape.dot_const(&g, &c_half)?;
        let l = tape.add(l1, &l2)?;
        tape.add(l, &l3)
    })
}

fn attention_check(cfg: &GradCheckConfig, seed: u64, causal: bool) -> Result<GradCheckReport> {
    let mut rng = rng(seed, 6 + u64::from(causal));
    let mut store = ParamStore::new();
    let mut inputs: Vec<Tensor> = (0..3).map(|_| uniform(&[2, 4, 6], 1.0, &mut rng)).collect();
    let coeff = uniform(&[2, 4, 6], 1.0, &mut rng);
    let spec = AttentionSpec {
        heads: 2,
        key_lengths: vec![4, 3],
        causal,
        keep_weights: false,
    };
    grad_check(&mut store, &mut inputs, cfg, |tape, xs| {
        let (y, _) = tape.attention(&xs[0], &xs[1], &xs[2], &spec)?;
        tape.dot_const(&y, &coeff)
    })
}

/// Multi-head attention with a key mask.
fn attention(cfg: &GradCheckConfig, seed: u64) -> Result<GradCheckReport> {
    attention_check(cfg, seed, false)
}

fn causal_attention(cfg: &GradCheckConfig, seed: u64) -> Result<GradCheckReport> {
    attention_check(cfg, seed, true)
}

/// Embedding, additions, scaling, masking and padding.
fn plumbing(cfg: &GradCheckConfig, seed: u64) -> Result<GradCheckReport> {
    let mut rng = rng(seed, 8);
    let mut store = ParamStore::new();
    let w = store.register("w", Tensor::scalar(0.7))?;
    let table = store.register("emb", uniform(&[5, 3], 1.0, &mut rng))?;
    let pe = uniform(&[4, 3], 1.0, &mut rng);
    let mut inputs = vec![uniform(&[2, 4, 3], 1.0, &mut rng)];
    let coeff = uniform(&[2, 6, 3], 1.0, &mut rng);
    grad_check(&mut store, &mut inputs, cfg, |tape, xs| {
        let w = tape.param(w);
        let t = tape.param(table);
        let e = tape.embedding(&t, &[1, 4, 4, 0, 2, 2, 3, 1], 2, 4)?;
        let x = tape.add(xs[0], &e)?;
        let x = tape.add_const(x, &pe)?;
        let x = tape.scalar_mul(&w, &x)?;
        let x = tape.scale(x, 1.5);
        let x = tape.mask_time(x, &[4, 2])?;
        let x = tape.pad_time(&x, 6)?;
        tape.dot_const(&x, &coeff)
    })
}

fn linear_cross_entropy(cfg: &GradCheckConfig, seed: u64) -> Result<GradCheckReport> {
    let mut rng = rng(seed, 9);
    let mut store = ParamStore::new();
    let w = store.register("w", uniform(&[3, 5], 1.0, &mut rng))?;
    let b = store.register("b", uniform(&[5], 1.0, &mut rng))?;
    let mut inputs = vec![uniform(&[2, 3, 3], 1.0, &mut rng)];
    let targets = [1, 4, 0, 2, 3, 3];
    grad_check(&mut store, &mut inputs, cfg, |tape, xs| {
        let (w, b) = (tape.param(w), tape.param(b));
        let logits = tape.linear(&xs[0], &w, Some(&b))?;
        tape.cross_entropy(&logits, &targets, &[3, 2])
    })
}

fn feed_forward_check(
    cfg: &GradCheckConfig,
    seed: u64,
    act: Activation,
) -> Result<GradCheckReport> {
    let mut rng = rng(seed, 10);
    let mut store = ParamStore::new();
    let up_w = store.register("up.w", uniform(&[4, 7], 1.0, &mut rng))?;
    let up_b = store.register("up.b", uniform(&[7], 1.0, &mut rng))?;
    let down_w = store.register("down.w", uniform(&[7, 4], 1.0, &mut rng))?;
    let down_b = store.register("down.b", uniform(&[4], 1.0, &mut rng))?;
    let mut inputs = vec![uniform(&[2, 3, 4], 1.0, &mut rng)];
    let keep = Tensor::from_fn(vec![2, 3, 4], |i| if i % 3 == 0 { 0.0 } else { 1.5 });
    let coeff = uniform(&[2, 3, 4], 1.0, &mut rng);
    grad_check(&mut store, &mut inputs, cfg, |tape, xs| {
        let (uw, ub, dw, db) = (
            tape.param(up_w),
            tape.param(up_b),
            tape.param(down_w),
            tape.param(down_b),
        );
        let params = FeedForwardParams {
            up_w: &uw,
            up_b: &ub,
            down_w: &dw,
            down_b: &db,
            act,
            dropout: 0.0,
        };
        let y = tape.feed_forward(&xs[0], params)?;
        let y = tape.mul_const(&y, keep.clone())?;
        tape.dot_const(&y, &coeff)
    })
}

/// Fused feed-forward followed by a constant elementwise mask.
fn feed_forward_relu(cfg: &GradCheckConfig, seed: u64) -> Result<GradCheckReport> {
    feed_forward_check(cfg, seed, Activation::Relu)
}

fn feed_forward_swish(cfg: &GradCheckConfig, seed: u64) -> Result<GradCheckReport> {
    feed_forward_check(cfg, seed, Activation::Swish)
}
