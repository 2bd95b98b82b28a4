use rand::Rng;

use super::config::StageSpec;
use super::position::sinusoidal_pe;
use crate::error::Result;
use crate::layers::LayerNorm;
use crate::numerics::param::xavier_uniform;
use crate::numerics::{Backend, ParamId, ParamStore, Tensor};

/// Strided convolution, layer norm and position encoding.
#[derive(Clone, Debug)]
pub struct DownSample {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub norm: LayerNorm,
    pub stride: usize,
    pub pad: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl DownSample {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        spec: &StageSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let k = spec.ds_kernel;
        let kernel = store.register(
            format!("{name}.conv.weight"),
            xavier_uniform(
                &[k, d_in, spec.hidden_dim],
                k * d_in,
                k * spec.hidden_dim,
                rng,
            ),
        )?;
        let bias = store.register(
            format!("{name}.conv.bias"),
            Tensor::zeros(vec![spec.hidden_dim]),
        )?;
        Ok(Self {
            kernel,
            bias,
            norm: LayerNorm::new(store, &format!("{name}.norm"), spec.hidden_dim)?,
            stride: spec.stride,
            pad: spec.ds_padding(),
            d_in,
            d_out: spec.hidden_dim,
        })
    }

    /// Returns the down-sampled sequence; `out_lengths` must be `ceil(len / stride)`.
    pub fn forward<'p, B: Backend<'p>>(
        &self,
        b: &mut B,
        x: &B::V,
        out_lengths: &[usize],
    ) -> Result<B::V> {
        let w = b.param(self.kernel);
        let bias = b.param(self.bias);
        let h = b.conv1d(x, &w, &bias, self.stride, self.pad)?;
        let h = b.mask_time(h, out_lengths)?;
        let h = self.norm.forward(b, &h)?;
        let t = b.value(&h).dim(1);
        let pe = sinusoidal_pe(t, self.d_out)?;
        let h = b.add_const(h, &pe)?;
        b.mask_time(h, out_lengths)
    }
}
