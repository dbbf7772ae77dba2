use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;

use super::EncodedDataset;
use crate::seed;

/// One mini-batch: `B × M` feature ids and `B` labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Array2<u32>,
    pub labels: Vec<u8>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Iterator over the mini-batches of one epoch.
pub struct Batches<'a> {
    data: &'a EncodedDataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some(Batch {
            ids: self.data.ids().select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.data.labels()[i]).collect(),
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for Batches<'_> {}

/// Shuffled mini-batches; the permutation depends only on
/// `(shuffle_seed, epoch)`. A `batch_size` of zero is treated as one.
pub fn batches(
    data: &EncodedDataset,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: u64,
) -> Batches<'_> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut seed::rng(shuffle_seed, &[seed::tag("batches"), epoch]));
    Batches {
        data,
        order,
        batch_size: batch_size.max(1),
        pos: 0,
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn dataset(n: usize) -> EncodedDataset {
        let ids = Array2::from_shape_fn((n, 1), |(i, _)| i as u32);
        let labels = (0..n).map(|i| (i % 2) as u8).collect();
        EncodedDataset::new(ids, labels, vec![n.max(1)]).unwrap()
    }

    fn first_col(bs: Batches<'_>) -> Vec<u32> {
        bs.flat_map(|b| b.ids.column(0).to_vec()).collect()
    }

    #[test]
    fn batch_sizes() {
        let d = dataset(5);
        let sizes: Vec<_> = batches(&d, 2, 0, 0).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
    }

    #[test]
    fn permutation_depends_on_epoch() {
        let d = dataset(64);
        assert_eq!(first_col(batches(&d, 8, 3, 0)), first_col(batches(&d, 8, 3, 0)));
        assert_ne!(first_col(batches(&d, 8, 3, 0)), first_col(batches(&d, 8, 3, 1)));
    }

    proptest! {
        #[test]
        fn every_instance_once_per_epoch(n in 1usize..300, bs in 1usize..64, seed in any::<u64>(), epoch in 0u64..5) {
            let d = dataset(n);
            let mut seen = first_col(batches(&d, bs, seed, epoch));
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n as u32).collect::<Vec<_>>());
        }

        #[test]
        fn labels_multiset_preserved(n in 1usize..300, bs in 1usize..64, seed in any::<u64>()) {
            let d = dataset(n);
            let mut got: Vec<u8> = batches(&d, bs, seed, 0).flat_map(|b| b.labels).collect();
            let mut want = d.labels().to_vec();
            got.sort_unstable();
            want.sort_unstable();
            prop_assert_eq!(got, want);
        }
    }
}
