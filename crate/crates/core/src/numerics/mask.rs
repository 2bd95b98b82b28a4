use super::tensor::Tensor;
use crate::error::{PdsError, Result};

/// Prefix validity of a padded batch: item `b` is valid on `0..lengths[b]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidMask {
    lengths: Vec<usize>,
    max_len: usize,
}

impl ValidMask {
    pub fn new(lengths: Vec<usize>, max_len: usize) -> Result<Self> {
        if let Some(&bad) = lengths.iter().find(|&&l| l > max_len) {
            return Err(PdsError::config(format!(
                "valid length {bad} exceeds padded extent {max_len}"
            )));
        }
        Ok(Self { lengths, max_len })
    }

    /// Mask whose padded extent is the longest length.
    pub fn from_lengths(lengths: Vec<usize>) -> Self {
        let max_len = lengths.iter().copied().max().unwrap_or(0);
        Self { lengths, max_len }
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_valid(&self, b: usize, t: usize) -> bool {
        t < self.lengths[b]
    }

    /// Mask as a `(batch, time)` tensor of ones and zeros.
    pub fn to_tensor(&self) -> Tensor {
        let t = self.max_len;
        Tensor::from_fn(vec![self.batch(), t], |i| {
            if self.is_valid(i / t, i % t) {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// Zeroes every time step at or beyond the item's valid length.
pub fn zero_padded_rows(x: &mut Tensor, lengths: &[usize]) -> Result<()> {
    let (batch, t, c) = x.btc()?;
    if lengths.len() != batch {
        return Err(PdsError::config(format!(
            "{} lengths for a batch of {batch}",
            lengths.len()
        )));
    }
    let data = x.data_mut();
    for (b, &len) in lengths.iter().enumerate() {
        let len = len.min(t);
        data[(b * t + len) * c..(b + 1) * t * c].fill(0.0);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_is_prefix_true() {
        let m = ValidMask::new(vec![2, 0, 3], 3).unwrap();
        assert_eq!(m.to_tensor().data(), &[1., 1., 0., 0., 0., 0., 1., 1., 1.]);
        assert!(ValidMask::new(vec![4], 3).is_err());
    }

    #[test]
    fn zeroing_padded_rows() {
        let mut x = Tensor::full(vec![2, 3, 1], 1.0);
        zero_padded_rows(&mut x, &[1, 3]).unwrap();
        assert_eq!(x.data(), &[1., 0., 0., 1., 1., 1.]);
    }
}
