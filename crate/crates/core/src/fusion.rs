//! Representation fusion: every stage output is aligned to the coarsest
//! length and the aligned levels are combined with learnable scalar weights.

use rand::Rng;
use serde::Serialize;

use crate::encoder::{EncoderConfig, LevelOutput};
use crate::error::{PdsError, Result};
use crate::layers::{BatchNorm, LayerNorm};
use crate::numerics::param::xavier_uniform;
use crate::numerics::{Backend, ParamId, ParamStore, Tensor};

/// `LN -> pad to r * T_M -> conv(kernel = stride = r) -> BN -> ReLU`.
#[derive(Clone, Debug)]
pub struct AlignPipeline {
    pub norm: LayerNorm,
    pub kernel: ParamId,
    pub bias: ParamId,
    pub batch_norm: BatchNorm,
    pub ratio: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl AlignPipeline {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        ratio: usize,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if ratio == 0 {
            return Err(PdsError::config(format!(
                "{name}: alignment ratio must be a positive integer"
            )));
        }
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d_in)?,
            kernel: store.register(
                format!("{name}.conv.weight"),
                xavier_uniform(&[ratio, d_in, d_out], ratio * d_in, ratio * d_out, rng),
            )?,
            bias: store.register(format!("{name}.conv.bias"), Tensor::zeros(vec![d_out]))?,
            batch_norm: BatchNorm::new(store, &format!("{name}.batch_norm"), d_out)?,
            ratio,
            d_in,
            d_out,
        })
    }

    /// Aligns `level` to `(batch, target_len, d_out)` with valid lengths `target_lengths`.
    pub fn forward<'p, B: Backend<'p>>(
        &self,
        b: &mut B,
        level: &LevelOutput<B::V>,
        target_len: usize,
        target_lengths: &[usize],
    ) -> Result<B::V> {
        let t = b.value(&level.rep).dim(1);
        let padded = self.ratio * target_len;
        if t > padded {
            return Err(PdsError::config(format!(
                "level of length {t} does not fit {target_len} outputs at ratio {}",
                self.ratio
            )));
        }
        let h = self.norm.forward(b, &level.rep)?;
        let h = b.mask_time(h, &level.lengths)?;
        let h = b.pad_time(&h, padded)?;
        let w = b.param(self.kernel);
        let bias = b.param(self.bias);
        let h = b.conv1d(&h, &w, &bias, self.ratio, 0)?;
        let h = b.mask_time(h, target_lengths)?;
        let h = self.batch_norm.forward(b, &h, target_lengths)?;
        let h = b.relu(h);
        b.mask_time(h, target_lengths)
    }
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub pipelines: Vec<AlignPipeline>,
    pub norms: Vec<LayerNorm>,
    pub weights: Vec<ParamId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StageWeight {
    pub stage: usize,
    pub weight: f64,
}

/// `r_m`: product of the strides of the stages after `m`.
pub fn alignment_ratios(strides: &[usize]) -> Vec<usize> {
    (0..strides.len())
        .map(|m| strides[m + 1..].iter().product())
        .collect()
}

impl Fusion {
    pub fn new(config: &EncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        let m = config.stages.len();
        if m == 0 {
            return Err(PdsError::config("fusion needs at least one stage"));
        }
        let d_top = config.output_dim();
        let ratios = alignment_ratios(&config.strides());
        let mut pipelines = Vec::with_capacity(m);
        let mut norms = Vec::with_capacity(m);
        let mut weights = Vec::with_capacity(m);
        for (i, (stage, &r)) in config.stages.iter().zip(&ratios).enumerate() {
            let name = format!("fusion.stage{i}");
            pipelines.push(AlignPipeline::new(
                store,
                &format!("{name}.align"),
                r,
                stage.hidden_dim,
                d_top,
                rng,
            )?);
            norms.push(LayerNorm::new(store, &format!("{name}.norm"), d_top)?);
            weights.push(store.register(format!("{name}.weight"), Tensor::scalar(1.0 / m as f64))?);
        }
        Ok(Self {
            pipelines,
            norms,
            weights,
        })
    }

    pub fn num_levels(&self) -> usize {
        self.pipelines.len()
    }

    /// Aligns stage `m` to the top stage's length.
    pub fn align_level<'p, B: Backend<'p>>(
        &self,
        b: &mut B,
        m: usize,
        level: &LevelOutput<B::V>,
        top: &LevelOutput<B::V>,
    ) -> Result<B::V> {
        let target_len = b.value(&top.rep).dim(1);
        self.pipelines[m].forward(b, level, target_len, &top.lengths)
    }

    /// `sum_m W_m * LN_m(align_m(H_m))`, shaped like the top level.
    pub fn fuse<'p, B: Backend<'p>>(
        &self,
        b: &mut B,
        levels: &[LevelOutput<B::V>],
    ) -> Result<B::V> {
        let Some(top) = levels.last() else {
            return Err(PdsError::config("cannot fuse an empty list of levels"));
        };
        if levels.len() != self.num_levels() {
            return Err(PdsError::config(format!(
                "{} levels given to a fusion over {} stages",
                levels.len(),
                self.num_levels()
            )));
        }
        let mut out: Option<B::V> = None;
        for (m, level) in levels.iter().enumerate() {
            let h = self.align_level(b, m, level, top)?;
            let h = self.norms[m].forward(b, &h)?;
            let w = b.param(self.weights[m]);
            let h = b.scalar_mul(&w, &h)?;
            out = Some(match out {
                None => h,
                Some(acc) => b.add(acc, &h)?,
            });
        }
        b.mask_time(out.expect("at least one level"), &top.lengths)
    }

    pub fn weights_report(&self, store: &ParamStore) -> Vec<StageWeight> {
        self.weights
            .iter()
            .enumerate()
            .map(|(stage, &id)| StageWeight {
                stage,
                weight: store.get(id).item(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratios_are_suffix_products() {
        assert_eq!(alignment_ratios(&[2, 2, 2, 2, 2]), vec![16, 8, 4, 2, 1]);
        assert_eq!(alignment_ratios(&[2, 2, 1, 2]), vec![4, 2, 2, 1]);
        assert_eq!(alignment_ratios(&[2, 2]), vec![2, 1]);
    }
}
