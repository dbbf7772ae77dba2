//! Stream-specific soft feature selection.
//!
//! A gate MLP maps a conditional input (a learnable vector, or the embedding
//! slices of a chosen set of fields) to logits `g` over every coordinate of
//! the concatenated embedding `e`; the stream then sees `2·sigmoid(g) ⊙ e`.
//! The last gate layer starts at zero, so every weight starts at exactly 1.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::FieldGroup;
use crate::error::{Error, Result};
use crate::mlp::{Activation, LayerSpec, Mlp, MlpCache, MlpGrads, Mode};
use crate::params::{prefixed, prefixed_mut, view, view_mut, ParamView, ParamViewMut, Parameters};

/// What the gate network is conditioned on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(try_from = "String", into = "String")]
pub enum GateCondition {
    #[default]
    Learned,
    Group(FieldGroup),
    Fields(Vec<String>),
}

impl FromStr for GateCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "learned" {
            return Ok(GateCondition::Learned);
        }
        if let Some(g) = s.strip_prefix("group:") {
            return Ok(GateCondition::Group(g.trim().parse()?));
        }
        if let Some(list) = s.strip_prefix("fields:") {
            let list = list.trim();
            let inner = list
                .strip_prefix('[')
                .and_then(|l| l.strip_suffix(']'))
                .unwrap_or(list);
            let names: Vec<String> = inner
                .split(',')
                .map(|n| n.trim().trim_matches('"').to_owned())
                .filter(|n| !n.is_empty())
                .collect();
            if names.is_empty() {
                return Err(Error::Config("gate condition fields:[...] lists no fields".into()));
            }
            return Ok(GateCondition::Fields(names));
        }
        Err(Error::Config(format!(
            "unknown gate condition {s:?} (expected learned, group:<user|item|context|other> or fields:[...])"
        )))
    }
}

impl TryFrom<String> for GateCondition {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<GateCondition> for String {
    fn from(c: GateCondition) -> String {
        c.to_string()
    }
}

impl fmt::Display for GateCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GateCondition::Learned => f.write_str("learned"),
            GateCondition::Group(g) => write!(f, "group:{g}"),
            GateCondition::Fields(names) => write!(f, "fields:[{}]", names.join(",")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    pub condition: GateCondition,
    /// Hidden widths of the gate MLP; `None` means one ReLU layer of width `M·d`.
    pub hidden: Option<Vec<usize>>,
    /// Length of the learnable condition vector; `None` means `M·d`.
    pub learned_dim: Option<usize>,
}

/// Field metadata a gate needs to resolve its condition.
#[derive(Debug, Clone, Copy)]
pub struct FieldLayout<'a> {
    pub names: &'a [String],
    pub groups: &'a [FieldGroup],
    pub dim: usize,
}

impl FieldLayout<'_> {
    pub fn num_fields(&self) -> usize {
        self.names.len()
    }

    pub fn embedding_width(&self) -> usize {
        self.names.len() * self.dim
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Source {
    Learned(Array1<f64>),
    Fields(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGate {
    source: Source,
    mlp: Mlp,
    dim: usize,
    width: usize,
    generation: u64,
}

#[derive(Debug, Clone)]
pub struct GateCache {
    generation: u64,
    e: Array2<f64>,
    sig: Array2<f64>,
    mlp: MlpCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateGrads {
    pub condition: Option<Array1<f64>>,
    pub mlp: MlpGrads,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl GateConfig {
    /// Field indices feeding the gate, or `None` for a learned vector.
    pub fn resolve(&self, layout: &FieldLayout<'_>) -> Result<Option<Vec<usize>>> {
        match &self.condition {
            GateCondition::Learned => Ok(None),
            GateCondition::Group(g) => {
                let idx: Vec<usize> = (0..layout.num_fields()).filter(|&i| layout.groups[i] == *g).collect();
                if idx.is_empty() {
                    return Err(Error::Config(format!("gate condition group:{g} selects no fields")));
                }
                Ok(Some(idx))
            }
            GateCondition::Fields(names) => names
                .iter()
                .map(|n| {
                    layout
                        .names
                        .iter()
                        .position(|x| x == n)
                        .ok_or_else(|| Error::Config(format!("gate condition names unknown field {n:?}")))
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
        }
    }

    pub fn validate(&self, layout: &FieldLayout<'_>) -> Result<()> {
        self.resolve(layout)?;
        if self.learned_dim == Some(0) {
            return Err(Error::Config("gate learned_dim must be >= 1".into()));
        }
        if let Some(h) = &self.hidden {
            if h.contains(&0) {
                return Err(Error::Config("gate hidden widths must be >= 1".into()));
            }
        }
        Ok(())
    }
}

impl FeatureGate {
    pub fn new(config: &GateConfig, layout: &FieldLayout<'_>, rng: &mut impl Rng) -> Result<Self> {
        config.validate(layout)?;
        let width = layout.embedding_width();
        let (source, cond_dim) = match config.resolve(layout)? {
            None => {
                let n = config.learned_dim.unwrap_or(width);
                let bound = 1.0 / (n as f64).sqrt();
                let v = Array1::from_shape_simple_fn(n, || rng.random_range(-bound..=bound));
                (Source::Learned(v), n)
            }
            Some(idx) => {
                let n = idx.len() * layout.dim;
                (Source::Fields(idx), n)
            }
        };
        let hidden = config.hidden.clone().unwrap_or_else(|| vec![width]);
        let mut specs: Vec<LayerSpec> = hidden
            .iter()
            .map(|&u| LayerSpec::new(u, Activation::Relu, 0.0))
            .collect();
        specs.push(LayerSpec::new(width, Activation::Identity, 0.0));
        let mut mlp = Mlp::new(cond_dim, &specs, rng)?;
        mlp.zero_last_layer();
        Ok(Self {
            source,
            mlp,
            dim: layout.dim,
            width,
            generation: 0,
        })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn is_learned(&self) -> bool {
        matches!(self.source, Source::Learned(_))
    }

    pub fn condition_vector(&self) -> Option<&Array1<f64>> {
        match &self.source {
            Source::Learned(v) => Some(v),
            Source::Fields(_) => None,
        }
    }

    pub fn condition_fields(&self) -> Option<&[usize]> {
        match &self.source {
            Source::Learned(_) => None,
            Source::Fields(idx) => Some(idx),
        }
    }

    fn condition_input(&self, e: &ArrayView2<'_, f64>) -> Array2<f64> {
        match &self.source {
            Source::Learned(v) => v.view().insert_axis(Axis(0)).to_owned(),
            Source::Fields(idx) => {
                let d = self.dim;
                let mut x = Array2::zeros((e.nrows(), idx.len() * d));
                for (k, &f) in idx.iter().enumerate() {
                    x.slice_mut(s![.., k * d..(k + 1) * d])
                        .assign(&e.slice(s![.., f * d..(f + 1) * d]));
                }
                x
            }
        }
    }

    /// Selection weights `2·sigmoid(g)`: one row for a learned condition,
    /// one row per instance otherwise.
    pub fn weights(&self, e: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_e(&e)?;
        let g = self.mlp.predict(self.condition_input(&e).view())?;
        Ok(g.mapv(|v| 2.0 * sigmoid(v)))
    }

    fn check_e(&self, e: &ArrayView2<'_, f64>) -> Result<()> {
        if e.ncols() != self.width {
            return Err(Error::shape("gate input", &[e.nrows(), self.width], e.shape()));
        }
        Ok(())
    }

    pub fn forward(&self, e: ArrayView2<'_, f64>) -> Result<(Array2<f64>, GateCache)> {
        self.check_e(&e)?;
        let x = self.condition_input(&e);
        let (g, mlp_cache) = self.mlp.forward(x.view(), Mode::Eval)?;
        let sig = g.mapv(sigmoid);
        let h = &e * &(&sig * 2.0);
        Ok((
            h,
            GateCache {
                generation: self.generation,
                e: e.to_owned(),
                sig,
                mlp: mlp_cache,
            },
        ))
    }

    /// Returns parameter gradients and the full gradient with respect to
    /// `e`, including the path through field-conditioned gate inputs.
    pub fn backward(&self, cache: &GateCache, upstream: ArrayView2<'_, f64>) -> Result<(GateGrads, Array2<f64>)> {
        if cache.generation != self.generation {
            return Err(Error::StaleCache("gate"));
        }
        if upstream.dim() != cache.e.dim() {
            return Err(Error::shape("gate upstream", cache.e.shape(), upstream.shape()));
        }
        let mut de = &upstream * &(&cache.sig * 2.0);
        let mut dweight = &upstream * &cache.e;
        if cache.sig.nrows() == 1 && cache.e.nrows() != 1 {
            dweight = dweight.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        let dg = &dweight * &cache.sig.mapv(|s| 2.0 * s * (1.0 - s));
        let (mlp_grads, dx) = self.mlp.backward(&cache.mlp, dg.view())?;
        let condition = match &self.source {
            Source::Learned(_) => Some(dx.row(0).to_owned()),
            Source::Fields(idx) => {
                let d = self.dim;
                for (k, &f) in idx.iter().enumerate() {
                    let mut col = de.slice_mut(s![.., f * d..(f + 1) * d]);
                    col += &dx.slice(s![.., k * d..(k + 1) * d]);
                }
                None
            }
        };
        Ok((
            GateGrads {
                condition,
                mlp: mlp_grads,
            },
            de,
        ))
    }
}

impl Parameters for FeatureGate {
    fn params(&self) -> Vec<ParamView<'_>> {
        let mut out = Vec::new();
        if let Source::Learned(v) = &self.source {
            out.push(view("condition", v.shape(), v.as_slice().unwrap()));
        }
        out.extend(prefixed("mlp", self.mlp.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        self.generation += 1;
        let mut out = Vec::new();
        if let Source::Learned(v) = &mut self.source {
            let shape = v.shape().to_vec();
            out.push(view_mut("condition", &shape, v.as_slice_mut().unwrap()));
        }
        out.extend(prefixed_mut("mlp", self.mlp.params_mut()));
        out
    }
}

impl Parameters for GateGrads {
    fn params(&self) -> Vec<ParamView<'_>> {
        let mut out = Vec::new();
        if let Some(v) = &self.condition {
            out.push(view("condition", v.shape(), v.as_slice().unwrap()));
        }
        out.extend(prefixed("mlp", self.mlp.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        let mut out = Vec::new();
        if let Some(v) = &mut self.condition {
            let shape = v.shape().to_vec();
            out.push(view_mut("condition", &shape, v.as_slice_mut().unwrap()));
        }
        out.extend(prefixed_mut("mlp", self.mlp.params_mut()));
        out
    }
}
