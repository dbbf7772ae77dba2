//! Seeded generator for a purely multiplicative click task.
//!
//! Every (field, value) pair owns a latent factor; the ground-truth logit is
//! the sum over field pairs of factor inner products, standardized to a
//! configurable scale. Labels are Bernoulli draws from its sigmoid, so an
//! additive model cannot do better than chance while a model with second-order
//! capacity can approach the Bayes rate.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{FieldDecl, FieldGroup, RawTable};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_instances: usize,
    pub n_fields: usize,
    pub vocab_size: usize,
    pub latent_dim: usize,
    /// Standard deviation of the ground-truth logit.
    pub logit_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_instances: 50_000,
            n_fields: 8,
            vocab_size: 20,
            latent_dim: 4,
            logit_scale: 6.0,
            seed: 17,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_fields < 2 {
            return Err(Error::Config("synthetic.n_fields must be >= 2".into()));
        }
        if self.n_instances == 0 || self.vocab_size == 0 || self.latent_dim == 0 {
            return Err(Error::Config(
                "synthetic n_instances, vocab_size and latent_dim must be positive".into(),
            ));
        }
        if !(self.logit_scale.is_finite() && self.logit_scale > 0.0) {
            return Err(Error::Config("synthetic.logit_scale must be positive".into()));
        }
        Ok(())
    }

    /// Field declarations `f0..f{M-1}`: the first quarter is tagged user, the
    /// second quarter item, the rest context.
    pub fn field_decls(&self) -> Vec<FieldDecl> {
        let m = self.n_fields;
        let quarter = (m / 4).max(1);
        (0..m)
            .map(|i| {
                let group = if i < quarter {
                    FieldGroup::User
                } else if i < 2 * quarter {
                    FieldGroup::Item
                } else {
                    FieldGroup::Context
                };
                FieldDecl::new(format!("f{i}"), group)
            })
            .collect()
    }

    pub fn generate(&self) -> Result<SyntheticData> {
        self.validate()?;
        let (m, v, r) = (self.n_fields, self.vocab_size, self.latent_dim);
        let mut rng = seed::rng(self.seed, &[seed::tag("synthetic")]);
        let factors: Vec<f64> = (0..m * v * r)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let factor = |field: usize, value: usize| {
            let start = (field * v + value) * r;
            &factors[start..start + r]
        };

        let values: Vec<usize> = (0..self.n_instances * m)
            .map(|_| rng.random_range(0..v))
            .collect();
        let mut raw = Vec::with_capacity(self.n_instances);
        let mut sum = vec![0.0; r];
        for row in values.chunks(m) {
            sum.iter_mut().for_each(|s| *s = 0.0);
            let mut self_dots = 0.0;
            for (field, &value) in row.iter().enumerate() {
                let u = factor(field, value);
                for (s, x) in sum.iter_mut().zip(u) {
                    *s += x;
                }
                self_dots += u.iter().map(|x| x * x).sum::<f64>();
            }
            let total: f64 = sum.iter().map(|x| x * x).sum();
            raw.push(0.5 * (total - self_dots));
        }

        let n = raw.len() as f64;
        let mean = raw.iter().sum::<f64>() / n;
        let var = raw.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt().max(f64::MIN_POSITIVE);
        let logits: Vec<f64> = raw
            .iter()
            .map(|x| self.logit_scale * (x - mean) / std)
            .collect();
        let labels: Vec<u8> = logits
            .iter()
            .map(|&z| (rng.random::<f64>() < 1.0 / (1.0 + (-z).exp())) as u8)
            .collect();

        let decls = self.field_decls();
        let rows = values
            .chunks(m)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(field, value)| format!("f{field}_{value:03}"))
                    .collect()
            })
            .collect();
        Ok(SyntheticData {
            table: RawTable {
                fields: decls.iter().map(|d| d.name.clone()).collect(),
                rows,
                labels: Some(labels),
            },
            decls,
            logits,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub table: RawTable,
    pub decls: Vec<FieldDecl>,
    /// Ground-truth logits, aligned with `table.rows`.
    pub logits: Vec<f64>,
}
