use crate::error::{PdsError, Result};
use crate::numerics::Tensor;

/// Sinusoidal position encoding of shape `(len, dim)`:
/// `PE(t, 2i) = sin(t / 10000^(2i/dim))`, `PE(t, 2i+1) = cos(t / 10000^(2i/dim))`.
pub fn sinusoidal_pe(len: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(PdsError::config(format!(
            "position encoding width {dim} must be positive and even"
        )));
    }
    let inv_freq: Vec<f64> = (0..dim / 2)
        .map(|i| 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64))
        .collect();
    let mut data = vec![0.0; len * dim];
    for t in 0..len {
        let row = &mut data[t * dim..(t + 1) * dim];
        for (i, f) in inv_freq.iter().enumerate() {
            let angle = t as f64 * f;
            row[2 * i] = angle.sin();
            row[2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![len, dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn origin_row() {
        let pe = sinusoidal_pe(3, 6).unwrap();
        assert_eq!(&pe.data()[..6], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn first_channel_is_sin_t() {
        let pe = sinusoidal_pe(50, 8).unwrap();
        for t in 0..50 {
            assert!((pe.data()[t * 8] - (t as f64).sin()).abs() < 1e-15);
        }
    }

    #[test]
    fn odd_width_rejected() {
        assert!(sinusoidal_pe(4, 7).is_err());
    }

    proptest! {
        #[test]
        fn bounded(len in 1usize..200, half in 1usize..40) {
            let pe = sinusoidal_pe(len, 2 * half).unwrap();
            prop_assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
