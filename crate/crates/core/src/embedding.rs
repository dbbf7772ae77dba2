//! Per-field embedding tables stored as one stacked matrix.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamView, ParamViewMut, Parameters};

/// `total_ids × d` weights; field `i`, local id `j` lives at row
/// `offsets[i] + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    weights: Array2<f64>,
    offsets: Vec<usize>,
    field_sizes: Vec<usize>,
    generation: u64,
}

impl EmbeddingTable {
    /// Uniform initialization in `[-1/sqrt(d), 1/sqrt(d)]`.
    pub fn new(field_sizes: &[usize], dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let total = validate_sizes(field_sizes, dim)?;
        let bound = 1.0 / (dim as f64).sqrt();
        let weights = Array2::from_shape_simple_fn((total, dim), || rng.random_range(-bound..=bound));
        Self::from_weights(weights, field_sizes)
    }

    pub fn from_weights(weights: Array2<f64>, field_sizes: &[usize]) -> Result<Self> {
        let total = validate_sizes(field_sizes, weights.ncols())?;
        if weights.nrows() != total {
            return Err(Error::shape("embedding weights", &[total, weights.ncols()], weights.shape()));
        }
        let offsets = field_sizes
            .iter()
            .scan(0, |acc, &s| {
                let o = *acc;
                *acc += s;
                Some(o)
            })
            .collect();
        Ok(Self {
            weights,
            offsets,
            field_sizes: field_sizes.to_vec(),
            generation: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn num_fields(&self) -> usize {
        self.field_sizes.len()
    }

    /// Width of the concatenated embedding `M·d`.
    pub fn output_dim(&self) -> usize {
        self.num_fields() * self.dim()
    }

    pub fn total_rows(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn field_sizes(&self) -> &[usize] {
        &self.field_sizes
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn global_row(&self, field: usize, id: u32) -> Result<usize> {
        let size = self.field_sizes[field];
        if id as usize >= size {
            return Err(Error::IdOutOfRange {
                field,
                id: id as usize,
                size,
            });
        }
        Ok(self.offsets[field] + id as usize)
    }

    fn check_ids(&self, ids: &ArrayView2<'_, u32>) -> Result<()> {
        if ids.ncols() != self.num_fields() {
            return Err(Error::shape("embedding ids", &[ids.nrows(), self.num_fields()], ids.shape()));
        }
        for row in ids.rows() {
            for (field, &id) in row.iter().enumerate() {
                self.global_row(field, id)?;
            }
        }
        Ok(())
    }

    /// Gathers and concatenates field embeddings: `B × M` ids to `B × (M·d)`.
    pub fn forward(&self, ids: ArrayView2<'_, u32>) -> Result<Array2<f64>> {
        self.check_ids(&ids)?;
        let d = self.dim();
        let mut out = Array2::zeros((ids.nrows(), self.output_dim()));
        for (ids_row, mut out_row) in ids.rows().into_iter().zip(out.rows_mut()) {
            for (field, &id) in ids_row.iter().enumerate() {
                let r = self.offsets[field] + id as usize;
                out_row
                    .slice_mut(s![field * d..(field + 1) * d])
                    .assign(&self.weights.row(r));
            }
        }
        Ok(out)
    }

    /// Scatter-adds upstream slices into the rows each `(b, field)` gathered.
    pub fn backward(&self, ids: ArrayView2<'_, u32>, upstream: ArrayView2<'_, f64>) -> Result<EmbeddingGrad> {
        self.check_ids(&ids)?;
        if upstream.shape() != [ids.nrows(), self.output_dim()] {
            return Err(Error::shape(
                "embedding upstream",
                &[ids.nrows(), self.output_dim()],
                upstream.shape(),
            ));
        }
        let d = self.dim();
        let mut grad = EmbeddingGrad::new(d);
        for (ids_row, up_row) in ids.rows().into_iter().zip(upstream.rows()) {
            for (field, &id) in ids_row.iter().enumerate() {
                let r = self.offsets[field] + id as usize;
                grad.accumulate(r, up_row.slice(s![field * d..(field + 1) * d]));
            }
        }
        Ok(grad)
    }

    /// `weight · Σ ||w_r||²` over the distinct rows gathered by `ids`, and its
    /// gradient.
    pub fn l2_penalty(&self, ids: ArrayView2<'_, u32>, weight: f64) -> Result<(f64, EmbeddingGrad)> {
        self.check_ids(&ids)?;
        let mut grad = EmbeddingGrad::new(self.dim());
        if weight == 0.0 {
            return Ok((0.0, grad));
        }
        let mut rows: Vec<usize> = ids
            .rows()
            .into_iter()
            .flat_map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(f, &id)| self.offsets[f] + id as usize)
                    .collect::<Vec<_>>()
            })
            .collect();
        rows.sort_unstable();
        rows.dedup();
        let mut penalty = 0.0;
        for r in rows {
            let w = self.weights.row(r);
            penalty += w.dot(&w);
            grad.accumulate(r, (&w * (2.0 * weight)).view());
        }
        Ok((weight * penalty, grad))
    }
}

fn validate_sizes(field_sizes: &[usize], dim: usize) -> Result<usize> {
    if field_sizes.is_empty() {
        return Err(Error::Config("embedding needs at least one field".into()));
    }
    if dim == 0 {
        return Err(Error::Config("embedding dimension must be >= 1".into()));
    }
    if field_sizes.contains(&0) {
        return Err(Error::Config("every field needs at least one id".into()));
    }
    Ok(field_sizes.iter().sum())
}

impl Parameters for EmbeddingTable {
    fn params(&self) -> Vec<ParamView<'_>> {
        vec![ParamView {
            name: "weights".into(),
            shape: self.weights.shape().to_vec(),
            data: self.weights.as_slice().expect("standard layout"),
            sparse: true,
        }]
    }

    fn params_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        self.generation += 1;
        vec![ParamViewMut {
            name: "weights".into(),
            shape: self.weights.shape().to_vec(),
            data: self.weights.as_slice_mut().expect("standard layout"),
            sparse: true,
        }]
    }
}

/// Row-sparse gradient of an embedding table; rows iterate in ascending
/// order so reductions are deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrad {
    dim: usize,
    rows: BTreeMap<usize, Array1<f64>>,
}

impl EmbeddingGrad {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn accumulate(&mut self, row: usize, g: ndarray::ArrayView1<'_, f64>) {
        *self
            .rows
            .entry(row)
            .or_insert_with(|| Array1::zeros(self.dim)) += &g;
    }

    pub fn merge(&mut self, other: &EmbeddingGrad) {
        for (&r, g) in &other.rows {
            self.accumulate(r, g.view());
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = (usize, &Array1<f64>)> {
        self.rows.iter().map(|(&r, g)| (r, g))
    }

    pub fn touched(&self) -> Vec<usize> {
        self.rows.keys().copied().collect()
    }

    pub fn get(&self, row: usize) -> Option<&Array1<f64>> {
        self.rows.get(&row)
    }

    pub fn to_dense(&self, total_rows: usize) -> Array2<f64> {
        let mut out = Array2::zeros((total_rows, self.dim));
        for (&r, g) in &self.rows {
            out.row_mut(r).assign(g);
        }
        out
    }
}
