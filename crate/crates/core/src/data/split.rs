use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::EncodedDataset;
use crate::error::{Error, Result};
use crate::seed;

/// Train/valid/test fractions and the seed of the assignment permutation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
            seed: 2023,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("train", self.train), ("valid", self.valid), ("test", self.test)] {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::Config(format!(
                    "split.{name} must lie in (0,1), got {r}"
                )));
            }
        }
        let sum = self.train + self.valid + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// `(train, valid, test)` sizes: valid and test are floored, train takes
    /// the remainder.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        // The epsilon absorbs representation error such as 0.29 * 100 = 28.999...
        let floor = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
        let valid = floor(self.valid);
        let test = floor(self.test);
        (n.saturating_sub(valid + test), valid, test)
    }

    /// Index sets for each split, each in ascending original order.
    pub fn assign(&self, n: usize) -> Result<[Vec<usize>; 3]> {
        self.validate()?;
        let (n_train, n_valid, _) = self.sizes(n);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut seed::rng(self.seed, &[seed::tag("split")]));
        let mut train = perm[..n_train].to_vec();
        let mut valid = perm[n_train..n_train + n_valid].to_vec();
        let mut test = perm[n_train + n_valid..].to_vec();
        for (name, part) in [("train", &train), ("valid", &valid), ("test", &test)] {
            if part.is_empty() {
                return Err(Error::EmptySplit(name));
            }
        }
        train.sort_unstable();
        valid.sort_unstable();
        test.sort_unstable();
        Ok([train, valid, test])
    }
}

/// Disjoint, exhaustive, seed-deterministic partition of `dataset`.
pub fn split(
    dataset: &EncodedDataset,
    spec: &SplitSpec,
) -> Result<(EncodedDataset, EncodedDataset, EncodedDataset)> {
    let [train, valid, test] = spec.assign(dataset.len())?;
    Ok((
        dataset.subset(&train),
        dataset.subset(&valid),
        dataset.subset(&test),
    ))
}
