use crate::error::{PdsError, Result};
use crate::numerics::Tensor;

/// Utterances outside `[MIN_FRAMES, MAX_FRAMES]` are dropped at ingestion.
pub const MIN_FRAMES: usize = 5;
pub const MAX_FRAMES: usize = 3000;

pub fn keep_utterance(frames: usize) -> bool {
    (MIN_FRAMES..=MAX_FRAMES).contains(&frames)
}

/// Length after one stride-`stride` stage: `ceil(len / stride)`.
pub fn downsampled_length(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

/// Iterated `ceil(len / stride)` over `strides`.
pub fn downsampled_lengths(lengths: &[usize], strides: &[usize]) -> Vec<usize> {
    lengths
        .iter()
        .map(|&l| strides.iter().fold(l, |acc, &s| downsampled_length(acc, s)))
        .collect()
}

/// Padded batch of frame-level features with per-item valid lengths.
#[derive(Clone, Debug)]
pub struct FeatureBatch {
    pub features: Tensor,
    pub lengths: Vec<usize>,
}

impl FeatureBatch {
    pub fn new(features: Tensor, lengths: Vec<usize>) -> Result<Self> {
        let (b, t, _) = features.btc()?;
        if lengths.len() != b {
            return Err(PdsError::config(format!(
                "{} lengths for batch of {b}",
                lengths.len()
            )));
        }
        if let Some(&bad) = lengths.iter().find(|&&l| l > t) {
            return Err(PdsError::config(format!(
                "length {bad} exceeds padded extent {t}"
            )));
        }
        Ok(Self { features, lengths })
    }

    /// Right-pads `(frames, dim)` items with zeros into one batch.
    pub fn from_items(items: &[Tensor]) -> Result<Self> {
        let dim = match items.first() {
            Some(t) if t.rank() == 2 => t.dim(1),
            Some(t) => {
                return Err(PdsError::config(format!(
                    "item shape {:?} is not (frames, dim)",
                    t.shape()
                )))
            }
            None => return Err(PdsError::config("empty batch")),
        };
        let lengths: Vec<usize> = items.iter().map(|t| t.dim(0)).collect();
        let t_max = *lengths.iter().max().unwrap();
        let mut data = vec![0.0; items.len() * t_max * dim];
        for (b, item) in items.iter().enumerate() {
            if item.rank() != 2 || item.dim(1) != dim {
                return Err(PdsError::config(format!(
                    "item {b} has shape {:?}, expected (frames, {dim})",
                    item.shape()
                )));
            }
            data[b * t_max * dim..b * t_max * dim + item.len()].copy_from_slice(item.data());
        }
        Self::new(Tensor::new(vec![items.len(), t_max, dim], data)?, lengths)
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.features.dim(1)
    }

    pub fn dim(&self) -> usize {
        self.features.dim(2)
    }

    /// Valid rows of item `b` as a standalone single-item batch.
    pub fn item(&self, b: usize) -> Result<FeatureBatch> {
        let len = self.lengths[b];
        let rows = self.features.item_rows(b, len)?;
        Self::new(rows.reshape(vec![1, len, self.dim()])?, vec![len])
    }

    /// Rejects items that cannot be encoded (zero length after compression).
    pub fn check_encodable(&self, strides: &[usize]) -> Result<()> {
        for (index, (&len, fin)) in self
            .lengths
            .iter()
            .zip(downsampled_lengths(&self.lengths, strides))
            .enumerate()
        {
            if fin == 0 {
                return Err(PdsError::ItemTooShort { index, length: len });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ceil_chain_examples() {
        assert_eq!(downsampled_lengths(&[3000], &[2, 2, 2, 2]), vec![188]);
        assert_eq!(downsampled_lengths(&[37], &[2]), vec![19]);
        assert_eq!(downsampled_lengths(&[100, 37], &[2]), vec![50, 19]);
        assert_eq!(downsampled_lengths(&[1000], &[2, 2]), vec![250]);
        assert_eq!(downsampled_lengths(&[64 * 7], &[2, 2, 2, 2, 2, 2]), vec![7]);
    }

    #[test]
    fn ingestion_rule() {
        assert!(!keep_utterance(4));
        assert!(keep_utterance(5));
        assert!(keep_utterance(3000));
        assert!(!keep_utterance(3001));
    }

    #[test]
    fn zero_length_item_rejected_with_index() {
        let batch = FeatureBatch::new(Tensor::zeros(vec![2, 4, 1]), vec![4, 0]).unwrap();
        assert!(matches!(
            batch.check_encodable(&[2, 2]),
            Err(PdsError::ItemTooShort {
                index: 1,
                length: 0
            })
        ));
    }

    #[test]
    fn from_items_pads() {
        let a = Tensor::full(vec![2, 2], 1.0);
        let b = Tensor::full(vec![3, 2], 2.0);
        let batch = FeatureBatch::from_items(&[a, b]).unwrap();
        assert_eq!(batch.features.shape(), &[2, 3, 2]);
        assert_eq!(&batch.features.data()[..6], &[1., 1., 1., 1., 0., 0.]);
        assert_eq!(batch.item(1).unwrap().features.data(), &[2.0; 6]);
    }
}
