//! Masked softmax and the scaled dot-product core of multi-head attention.
//!
//! Projections live outside this module (they are ordinary linear layers); the
//! core here takes already-projected queries, keys and values of width `D` and
//! splits them into `heads` slices of width `D / heads`.

use super::linalg::{gemm, MatRef};
use super::mask::ValidMask;
use super::tensor::Tensor;
use crate::error::{PdsError, Result};

/// Additive score for masked positions.
pub const MASK_SCORE: f64 = -1e9;

/// Query rows scored together; keeps the score block cache-resident.
const QUERY_BLOCK: usize = 128;

/// `exp(x)` for `x <= 0`, branch-free so softmax rows vectorize.
/// Relative error is within a few ulps of `f64::exp`; results below
/// `exp(-708)` flush to zero.
#[inline(always)]
fn exp_nonpositive(x: f64) -> f64 {
    const SHIFTER: f64 = 6755399441055744.0; // 1.5 * 2^52
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let underflow = x < -708.0;
    let xc = x.max(-708.0);
    let kf = xc * std::f64::consts::LOG2_E + SHIFTER;
    let k = kf - SHIFTER;
    let r = xc - k * LN2_HI - k * LN2_LO;
    let mut p = 1.0 / 479_001_600.0;
    for c in [
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    let bits = (kf.to_bits() as i64 - SHIFTER.to_bits() as i64 + 1023) << 52;
    let v = p * f64::from_bits(bits as u64);
    if underflow {
        0.0
    } else {
        v
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = exp_nonpositive(*v - max);
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Softmax over the last axis with positions beyond each item's valid length masked out.
///
/// `scores` has shape `(batch, ..., time)`; `mask` carries one length per batch item.
pub fn softmax_masked(scores: &Tensor, mask: &ValidMask) -> Result<Tensor> {
    let t = scores.last_dim();
    if scores.rank() < 2 || scores.dim(0) != mask.batch() || mask.max_len() != t {
        return Err(PdsError::config(format!(
            "mask of batch {} x {} does not fit scores {:?}",
            mask.batch(),
            mask.max_len(),
            scores.shape()
        )));
    }
    let rows_per_item = scores.len() / (mask.batch() * t.max(1));
    let mut out = scores.data().to_vec();
    for (r, row) in out.chunks_exact_mut(t).enumerate() {
        let len = mask.lengths()[r / rows_per_item];
        if len == 0 {
            return Err(PdsError::EmptyAttention { row: r });
        }
        for v in &mut row[len..] {
            *v += MASK_SCORE;
        }
        softmax_in_place(row);
    }
    Tensor::new(scores.shape().to_vec(), out)
}

/// How a scaled dot-product attention call is masked and what it keeps.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub heads: usize,
    /// Valid key count per batch item.
    pub key_lengths: Vec<usize>,
    /// Query `i` may only attend to keys `j <= i`.
    pub causal: bool,
    /// Return the `(batch, heads, q, k)` weights alongside the output.
    pub keep_weights: bool,
}

pub struct AttentionOutput {
    pub out: Tensor,
    /// Per-head probabilities `(batch, heads, q, k)`, present when kept or needed for backward.
    pub probs: Option<Tensor>,
}

struct Dims {
    batch: usize,
    tq: usize,
    tk: usize,
    d: usize,
    dh: usize,
}

fn dims(q: &Tensor, k: &Tensor, v: &Tensor, spec: &AttentionSpec) -> Result<Dims> {
    let (batch, tq, d) = q.btc()?;
    let (kb, tk, kd) = k.btc()?;
    if (kb, kd) != (batch, d) || k.shape() != v.shape() {
        return Err(PdsError::config(format!(
            "attention operands q {:?}, k {:?}, v {:?} disagree",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if spec.heads == 0 || d % spec.heads != 0 {
        return Err(PdsError::config(format!(
            "model width {d} is not divisible by {} heads",
            spec.heads
        )));
    }
    if spec.key_lengths.len() != batch || spec.key_lengths.iter().any(|&l| l > tk) {
        return Err(PdsError::config(format!(
            "key lengths {:?} inconsistent with batch {batch} x {tk}",
            spec.key_lengths
        )));
    }
    Ok(Dims {
        batch,
        tq,
        tk,
        d,
        dh: d / spec.heads,
    })
}

/// Scaled dot-product attention with `1/sqrt(D/heads)` scaling.
///
/// Keys beyond the valid length receive weight exactly zero (they are excluded
/// from the softmax, equivalent to an infinite negative score).
pub fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    spec: &AttentionSpec,
    store_probs: bool,
) -> Result<AttentionOutput> {
    let Dims {
        batch,
        tq,
        tk,
        d,
        dh,
    } = dims(q, k, v, spec)?;
    let h = spec.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let keep = store_probs || spec.keep_weights;
    let mut probs = if keep {
        vec![0.0; batch * h * tq * tk]
    } else {
        Vec::new()
    };
    let mut out = vec![0.0; batch * tq * d];
    let block = QUERY_BLOCK.min(tq);
    let mut scores = vec![0.0; block * tk];
    for b in 0..batch {
        let klen = spec.key_lengths[b];
        if klen == 0 {
            return Err(PdsError::EmptyAttention { row: b * tq });
        }
        for head in 0..h {
            let k_off = b * tk * d + head * dh;
            let mut q0 = 0;
            while q0 < tq {
                let rows = block.min(tq - q0);
                let q_off = (b * tq + q0) * d + head * dh;
                let s = &mut scores[..rows * klen];
                gemm(
                    rows,
                    dh,
                    klen,
                    scale,
                    MatRef::dense(q.data(), d).at(q_off),
                    MatRef::dense(k.data(), d).at(k_off).t(),
                    0.0,
                    s,
                    0,
                    klen,
                );
                for (i, row) in s.chunks_exact_mut(klen).enumerate() {
                    if spec.causal {
                        for v in row.iter_mut().skip(q0 + i + 1) {
                            *v += MASK_SCORE;
                        }
                    }
                    softmax_in_place(row);
                }
                gemm(
                    rows,
                    klen,
                    dh,
                    1.0,
                    MatRef::dense(s, klen),
                    MatRef::dense(v.data(), d).at(k_off),
                    0.0,
                    &mut out,
                    (b * tq + q0) * d + head * dh,
                    d,
                );
                if keep {
                    let base = (b * h + head) * tq * tk;
                    for i in 0..rows {
                        let dst = base + (q0 + i) * tk;
                        probs[dst..dst + klen].copy_from_slice(&s[i * klen..(i + 1) * klen]);
                    }
                }
                q0 += rows;
            }
        }
    }
    Ok(AttentionOutput {
        out: Tensor::new(vec![batch, tq, d], out)?,
        probs: if keep {
            Some(Tensor::new(vec![batch, h, tq, tk], probs)?)
        } else {
            None
        },
    })
}

/// Gradients of [`attention_forward`] with respect to `(q, k, v)`.
pub fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    spec: &AttentionSpec,
    probs: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let Dims {
        batch,
        tq,
        tk,
        d,
        dh,
    } = dims(q, k, v, spec)?;
    let h = spec.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut p = vec![0.0; tq * tk];
    let mut dp = vec![0.0; tq * tk];
    for b in 0..batch {
        let klen = spec.key_lengths[b];
        for head in 0..h {
            let q_off = b * tq * d + head * dh;
            let k_off = b * tk * d + head * dh;
            let base = (b * h + head) * tq * tk;
            let p = &mut p[..tq * klen];
            for i in 0..tq {
                p[i * klen..(i + 1) * klen]
                    .copy_from_slice(&probs.data()[base + i * tk..base + i * tk + klen]);
            }
            let go = MatRef::dense(grad_out.data(), d).at(q_off);
            // dV = P^T dO
            gemm(
                klen,
                tq,
                dh,
                1.0,
                MatRef::dense(p, klen).t(),
                go,
                1.0,
                &mut dv,
                k_off,
                d,
            );
            // dP = dO V^T
            let dp = &mut dp[..tq * klen];
            gemm(
                tq,
                dh,
                klen,
                1.0,
                go,
                MatRef::dense(v.data(), d).at(k_off).t(),
                0.0,
                dp,
                0,
                klen,
            );
            // dS = P * (dP - rowsum(dP * P))
            for (prow, dprow) in p.chunks_exact(klen).zip(dp.chunks_exact_mut(klen)) {
                let dot: f64 = prow.iter().zip(dprow.iter()).map(|(a, b)| a * b).sum();
                for (ds, pv) in dprow.iter_mut().zip(prow) {
                    *ds = pv * (*ds - dot);
                }
            }
            let ds = &dp[..];
            // dQ = scale * dS K ; dK = scale * dS^T Q
            gemm(
                tq,
                klen,
                dh,
                scale,
                MatRef::dense(ds, klen),
                MatRef::dense(k.data(), d).at(k_off),
                1.0,
                &mut dq,
                q_off,
                d,
            );
            gemm(
                klen,
                tq,
                dh,
                scale,
                MatRef::dense(ds, klen).t(),
                MatRef::dense(q.data(), d).at(q_off),
                1.0,
                &mut dk,
                k_off,
                d,
            );
        }
    }
    Ok((
        Tensor::new(q.shape().to_vec(), dq)?,
        Tensor::new(k.shape().to_vec(), dk)?,
        Tensor::new(v.shape().to_vec(), dv)?,
    ))
}

/// Averages `(batch, heads, q, k)` weights over the head axis.
pub fn average_heads(weights: &Tensor) -> Result<Tensor> {
    let &[b, h, tq, tk] = weights.shape() else {
        return Err(PdsError::config("expected (batch, heads, q, k) weights"));
    };
    let mut out = vec![0.0; b * tq * tk];
    for bi in 0..b {
        for head in 0..h {
            let src = &weights.data()[(bi * h + head) * tq * tk..(bi * h + head + 1) * tq * tk];
            for (o, w) in out[bi * tq * tk..(bi + 1) * tq * tk].iter_mut().zip(src) {
                *o += w / h as f64;
            }
        }
    }
    Tensor::new(vec![b, tq, tk], out)
}

#[cfg(test)]
mod tests {
    use super::exp_nonpositive;

    #[test]
    fn fast_exp_matches_std() {
        let mut worst: f64 = 0.0;
        for i in 0..200_000 {
            let x = -(i as f64) * 0.0035;
            let rel = (exp_nonpositive(x) - x.exp()).abs() / x.exp();
            worst = worst.max(rel);
        }
        assert!(worst < 1e-14, "{worst}");
        assert_eq!(exp_nonpositive(0.0), 1.0);
        assert_eq!(exp_nonpositive(-1e9), 0.0);
        assert_eq!(exp_nonpositive(f64::NEG_INFINITY), 0.0);
    }

    use super::*;

    #[test]
    fn softmax_of_equal_scores() {
        let s = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let m = ValidMask::from_lengths(vec![2]);
        assert_eq!(softmax_masked(&s, &m).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_renormalizes_over_valid_prefix() {
        let s = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let m = ValidMask::new(vec![2], 3).unwrap();
        let p = softmax_masked(&s, &m).unwrap();
        let e = 1f64.exp() + 2f64.exp();
        assert!((p.data()[0] - 1f64.exp() / e).abs() < 1e-15);
        assert!((p.data()[1] - 2f64.exp() / e).abs() < 1e-15);
        assert_eq!(p.data()[2], 0.0);
    }

    #[test]
    fn softmax_all_masked_row_is_error() {
        let s = Tensor::zeros(vec![2, 3]);
        let m = ValidMask::new(vec![3, 0], 3).unwrap();
        assert!(matches!(
            softmax_masked(&s, &m),
            Err(PdsError::EmptyAttention { row: 1 })
        ));
    }

    #[test]
    fn heads_must_divide_width() {
        let q = Tensor::zeros(vec![1, 2, 6]);
        let spec = AttentionSpec {
            heads: 4,
            key_lengths: vec![2],
            causal: false,
            keep_weights: false,
        };
        assert!(attention_forward(&q, &q, &q, &spec, false).is_err());
    }

    #[test]
    fn causal_first_row_attends_only_to_itself() {
        let q = Tensor::from_fn(vec![1, 3, 2], |i| i as f64 * 0.3);
        let spec = AttentionSpec {
            heads: 1,
            key_lengths: vec![3],
            causal: true,
            keep_weights: true,
        };
        let out = attention_forward(&q, &q, &q, &spec, false).unwrap();
        let p = out.probs.unwrap();
        assert_eq!(&p.data()[..3], &[1.0, 0.0, 0.0]);
        assert_eq!(&out.out.data()[..2], &q.data()[..2]);
    }
}
