//! Stream-level fusion producing the pre-sigmoid logit.
//!
//! Multi-head bilinear fusion splits `o1` and `o2` into `k` aligned chunks
//! and sums, over heads, `b_j + w1_jᵀo1_j + w2_jᵀo2_j + o1_jᵀ W3_j o2_j`.
//! With `k = 1` this is full bilinear fusion; with `W3 = 0` it is the
//! concat-linear fusion; with `k = d1 = d2` and unit `W3_j` its cross term is
//! the element-wise product sum. The FM second-order term is the special
//! case `o1 = o2` with an upper-triangular low-rank `W3`; no separate FM layer
//! is provided.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{view, view_mut, ParamView, ParamViewMut, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    Sum,
    Concat,
    Ewp,
    Bilinear,
}

impl std::fmt::Display for FusionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionKind::Sum => "sum",
            FusionKind::Concat => "concat",
            FusionKind::Ewp => "ewp",
            FusionKind::Bilinear => "bilinear",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSpec {
    pub kind: FusionKind,
    #[serde(default = "one")]
    pub heads: usize,
}

fn one() -> usize {
    1
}

impl Default for FusionSpec {
    fn default() -> Self {
        Self::bilinear(1)
    }
}

impl FusionSpec {
    pub fn bilinear(heads: usize) -> Self {
        Self {
            kind: FusionKind::Bilinear,
            heads,
        }
    }

    pub fn linear(kind: FusionKind) -> Self {
        Self { kind, heads: 1 }
    }

    pub fn validate(&self, d1: usize, d2: usize) -> Result<()> {
        match self.kind {
            FusionKind::Bilinear => {
                let k = self.heads;
                if k == 0 {
                    return Err(Error::Config("fusion.heads must be >= 1".into()));
                }
                if d1 % k != 0 || d2 % k != 0 {
                    return Err(Error::Config(format!(
                        "fusion.heads = {k} must divide both stream widths ({d1}, {d2})"
                    )));
                }
            }
            FusionKind::Sum | FusionKind::Ewp if d1 != d2 => {
                return Err(Error::Config(format!(
                    "{} fusion needs equal stream widths, got {d1} and {d2}",
                    self.kind
                )));
            }
            _ => {}
        }
        Ok(())
    }

    /// Size of the `W3` blocks, `d1·d2/k`; zero for linear fusions.
    pub fn matrix_param_count(&self, d1: usize, d2: usize) -> Result<usize> {
        self.validate(d1, d2)?;
        Ok(match self.kind {
            FusionKind::Bilinear => d1 * d2 / self.heads,
            _ => 0,
        })
    }
}

/// Number of learnable scalars in a fusion layer.
pub fn fusion_param_count(spec: &FusionSpec, d1: usize, d2: usize) -> Result<usize> {
    spec.validate(d1, d2)?;
    Ok(match spec.kind {
        FusionKind::Bilinear => spec.heads + d1 + d2 + d1 * d2 / spec.heads,
        FusionKind::Concat => d1 + d2 + 1,
        FusionKind::Sum | FusionKind::Ewp => d1 + 1,
    })
}

/// How a linear head combines the stream outputs before the dot product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearMode {
    /// One stream only (the single-MLP baseline).
    Single,
    Sum,
    Concat,
    Ewp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFusion {
    pub mode: LinearMode,
    pub weight: Array1<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BilinearFusion {
    /// `k` per-head biases.
    pub bias: Array1<f64>,
    /// `k × d1/k`
    pub w1: Array2<f64>,
    /// `k × d2/k`
    pub w2: Array2<f64>,
    /// `k × d1/k × d2/k`
    pub w3: Array3<f64>,
}

impl BilinearFusion {
    pub fn heads(&self) -> usize {
        self.bias.len()
    }

    fn check(&self) -> Result<()> {
        let k = self.heads();
        let (p, q) = (self.w1.ncols(), self.w2.ncols());
        if k == 0 || self.w1.nrows() != k || self.w2.nrows() != k || self.w3.dim() != (k, p, q) {
            return Err(Error::shape(
                "bilinear parameters",
                &[k, p, q],
                &[self.w1.nrows(), self.w2.nrows(), self.w3.len()],
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FusionLayer {
    Linear(LinearFusion),
    Bilinear(BilinearFusion),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fusion {
    layer: FusionLayer,
    d1: usize,
    d2: usize,
    generation: u64,
}

#[derive(Debug, Clone)]
pub struct FusionCache {
    generation: u64,
    o1: Array2<f64>,
    o2: Option<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FusionGrads {
    Linear { weight: Array1<f64>, bias: Array1<f64> },
    Bilinear(BilinearFusion),
}

impl Fusion {
    /// Linear weights are uniform in `±1/sqrt(d1+d2)`; bilinear `w1`/`w2` are
    /// drawn from the same stream as the concat weights and `W3`, `b` start at
    /// zero, so a fresh bilinear layer computes the concat-linear fusion of an
    /// identically seeded concat layer.
    pub fn new(spec: &FusionSpec, d1: usize, d2: usize, rng: &mut impl Rng) -> Result<Self> {
        spec.validate(d1, d2)?;
        let fused = match spec.kind {
            FusionKind::Concat | FusionKind::Bilinear => d1 + d2,
            FusionKind::Sum | FusionKind::Ewp => d1,
        };
        let bound = 1.0 / ((d1 + d2) as f64).sqrt();
        let w = Array1::from_shape_simple_fn(fused, || rng.random_range(-bound..=bound));
        let layer = match spec.kind {
            FusionKind::Bilinear => {
                let k = spec.heads;
                FusionLayer::Bilinear(BilinearFusion {
                    bias: Array1::zeros(k),
                    w1: w.slice(s![..d1]).to_owned().into_shape_with_order((k, d1 / k)).unwrap(),
                    w2: w.slice(s![d1..]).to_owned().into_shape_with_order((k, d2 / k)).unwrap(),
                    w3: Array3::zeros((k, d1 / k, d2 / k)),
                })
            }
            kind => FusionLayer::Linear(LinearFusion {
                mode: match kind {
                    FusionKind::Sum => LinearMode::Sum,
                    FusionKind::Concat => LinearMode::Concat,
                    _ => LinearMode::Ewp,
                },
                weight: w,
                bias: Array1::zeros(1),
            }),
        };
        Ok(Self {
            layer,
            d1,
            d2,
            generation: 0,
        })
    }

    /// Linear read-out of a single stream.
    pub fn single(d1: usize, rng: &mut impl Rng) -> Result<Self> {
        if d1 == 0 {
            return Err(Error::Config("stream width must be >= 1".into()));
        }
        let bound = 1.0 / (d1 as f64).sqrt();
        Ok(Self {
            layer: FusionLayer::Linear(LinearFusion {
                mode: LinearMode::Single,
                weight: Array1::from_shape_simple_fn(d1, || rng.random_range(-bound..=bound)),
                bias: Array1::zeros(1),
            }),
            d1,
            d2: 0,
            generation: 0,
        })
    }

    pub fn from_layer(layer: FusionLayer, d1: usize, d2: usize) -> Result<Self> {
        match &layer {
            FusionLayer::Bilinear(b) => {
                b.check()?;
                let k = b.heads();
                if b.w1.ncols() * k != d1 || b.w2.ncols() * k != d2 {
                    return Err(Error::shape("bilinear widths", &[d1, d2], &[b.w1.len(), b.w2.len()]));
                }
            }
            FusionLayer::Linear(l) => {
                let want = match l.mode {
                    LinearMode::Single | LinearMode::Sum | LinearMode::Ewp => d1,
                    LinearMode::Concat => d1 + d2,
                };
                if l.weight.len() != want || l.bias.len() != 1 {
                    return Err(Error::shape("linear fusion weight", &[want], &[l.weight.len()]));
                }
                if matches!(l.mode, LinearMode::Sum | LinearMode::Ewp) && d1 != d2 {
                    return Err(Error::Config("sum/ewp fusion needs equal widths".into()));
                }
            }
        }
        Ok(Self {
            layer,
            d1,
            d2,
            generation: 0,
        })
    }

    pub fn layer(&self) -> &FusionLayer {
        &self.layer
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d1, self.d2)
    }

    pub fn is_two_stream(&self) -> bool {
        !matches!(&self.layer, FusionLayer::Linear(l) if l.mode == LinearMode::Single)
    }

    fn check_inputs(&self, o1: &ArrayView2<'_, f64>, o2: Option<&ArrayView2<'_, f64>>) -> Result<()> {
        if o1.ncols() != self.d1 {
            return Err(Error::shape("fusion o1", &[o1.nrows(), self.d1], o1.shape()));
        }
        match (self.is_two_stream(), o2) {
            (true, Some(o2)) if o2.ncols() == self.d2 && o2.nrows() == o1.nrows() => Ok(()),
            (true, Some(o2)) => Err(Error::shape("fusion o2", &[o1.nrows(), self.d2], o2.shape())),
            (true, None) => Err(Error::Config("two-stream fusion needs both stream outputs".into())),
            (false, None) => Ok(()),
            (false, Some(_)) => Err(Error::Config("single-stream head got a second stream".into())),
        }
    }

    pub fn forward(&self, o1: ArrayView2<'_, f64>, o2: Option<ArrayView2<'_, f64>>) -> Result<(Array1<f64>, FusionCache)> {
        self.check_inputs(&o1, o2.as_ref())?;
        let logits = match &self.layer {
            FusionLayer::Linear(l) => {
                let fused = fuse_linear(l.mode, &o1, o2.as_ref());
                fused.dot(&l.weight) + l.bias[0]
            }
            FusionLayer::Bilinear(b) => {
                let o2 = o2.as_ref().expect("checked");
                let (p, q) = (b.w1.ncols(), b.w2.ncols());
                let mut out = Array1::zeros(o1.nrows());
                for j in 0..b.heads() {
                    let a = o1.slice(s![.., j * p..(j + 1) * p]);
                    let c = o2.slice(s![.., j * q..(j + 1) * q]);
                    let cross = (&a.dot(&b.w3.index_axis(Axis(0), j)) * &c).sum_axis(Axis(1));
                    out += &(cross + a.dot(&b.w1.row(j)) + c.dot(&b.w2.row(j)) + b.bias[j]);
                }
                out
            }
        };
        Ok((
            logits,
            FusionCache {
                generation: self.generation,
                o1: o1.to_owned(),
                o2: o2.map(|o| o.to_owned()),
            },
        ))
    }

    /// Per-head contributions `B × k` (a single column for linear heads).
    pub fn head_logits(&self, o1: ArrayView2<'_, f64>, o2: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_inputs(&o1, Some(&o2))?;
        match &self.layer {
            FusionLayer::Bilinear(b) => {
                let (p, q) = (b.w1.ncols(), b.w2.ncols());
                let mut out = Array2::zeros((o1.nrows(), b.heads()));
                for j in 0..b.heads() {
                    let a = o1.slice(s![.., j * p..(j + 1) * p]);
                    let c = o2.slice(s![.., j * q..(j + 1) * q]);
                    let cross = (&a.dot(&b.w3.index_axis(Axis(0), j)) * &c).sum_axis(Axis(1));
                    out.column_mut(j)
                        .assign(&(cross + a.dot(&b.w1.row(j)) + c.dot(&b.w2.row(j)) + b.bias[j]));
                }
                Ok(out)
            }
            FusionLayer::Linear(_) => Ok(self.forward(o1, Some(o2))?.0.insert_axis(Axis(1))),
        }
    }

    pub fn backward(
        &self,
        cache: &FusionCache,
        upstream: ArrayView1<'_, f64>,
    ) -> Result<(FusionGrads, Array2<f64>, Option<Array2<f64>>)> {
        if cache.generation != self.generation {
            return Err(Error::StaleCache("fusion"));
        }
        let o1 = &cache.o1;
        if upstream.len() != o1.nrows() {
            return Err(Error::shape("fusion upstream", &[o1.nrows()], upstream.shape()));
        }
        let u = upstream.insert_axis(Axis(1));
        match &self.layer {
            FusionLayer::Linear(l) => {
                let fused = fuse_linear(l.mode, &o1.view(), cache.o2.as_ref().map(|o| o.view()).as_ref());
                let dweight = fused.t().dot(&upstream);
                let dbias = Array1::from_elem(1, upstream.sum());
                let dfused = &u * &l.weight.view().insert_axis(Axis(0));
                let (do1, do2) = match l.mode {
                    LinearMode::Single => (dfused, None),
                    LinearMode::Sum => (dfused.clone(), Some(dfused)),
                    LinearMode::Concat => (
                        dfused.slice(s![.., ..self.d1]).to_owned(),
                        Some(dfused.slice(s![.., self.d1..]).to_owned()),
                    ),
                    LinearMode::Ewp => {
                        let o2 = cache.o2.as_ref().expect("two-stream cache");
                        (&dfused * o2, Some(&dfused * o1))
                    }
                };
                Ok((
                    FusionGrads::Linear {
                        weight: dweight,
                        bias: dbias,
                    },
                    do1,
                    do2,
                ))
            }
            FusionLayer::Bilinear(b) => {
                let o2 = cache.o2.as_ref().expect("two-stream cache");
                let (k, p, q) = (b.heads(), b.w1.ncols(), b.w2.ncols());
                let mut g = BilinearFusion {
                    bias: Array1::zeros(k),
                    w1: Array2::zeros((k, p)),
                    w2: Array2::zeros((k, q)),
                    w3: Array3::zeros((k, p, q)),
                };
                let mut do1 = Array2::zeros(o1.dim());
                let mut do2 = Array2::zeros(o2.dim());
                for j in 0..k {
                    let a = o1.slice(s![.., j * p..(j + 1) * p]);
                    let c = o2.slice(s![.., j * q..(j + 1) * q]);
                    let w3 = b.w3.index_axis(Axis(0), j);
                    let ua = &a * &u;
                    g.bias[j] = upstream.sum();
                    g.w1.row_mut(j).assign(&ua.sum_axis(Axis(0)));
                    g.w2.row_mut(j).assign(&(&c * &u).sum_axis(Axis(0)));
                    g.w3.index_axis_mut(Axis(0), j).assign(&ua.t().dot(&c));
                    let d1 = (c.dot(&w3.t()) + b.w1.row(j)) * u;
                    let d2 = (a.dot(&w3) + b.w2.row(j)) * u;
                    do1.slice_mut(s![.., j * p..(j + 1) * p]).assign(&d1);
                    do2.slice_mut(s![.., j * q..(j + 1) * q]).assign(&d2);
                }
                Ok((FusionGrads::Bilinear(g), do1, Some(do2)))
            }
        }
    }
}

fn fuse_linear(mode: LinearMode, o1: &ArrayView2<'_, f64>, o2: Option<&ArrayView2<'_, f64>>) -> Array2<f64> {
    match (mode, o2) {
        (LinearMode::Single, _) => o1.to_owned(),
        (LinearMode::Sum, Some(o2)) => o1 + o2,
        (LinearMode::Ewp, Some(o2)) => o1 * o2,
        (LinearMode::Concat, Some(o2)) => ndarray::concatenate(Axis(1), &[o1.view(), o2.view()]).unwrap(),
        _ => unreachable!("inputs checked before fusing"),
    }
}

fn bilinear_views(b: &BilinearFusion) -> Vec<ParamView<'_>> {
    vec![
        view("bias", b.bias.shape(), b.bias.as_slice().unwrap()),
        view("w1", b.w1.shape(), b.w1.as_slice().unwrap()),
        view("w2", b.w2.shape(), b.w2.as_slice().unwrap()),
        view("w3", b.w3.shape(), b.w3.as_slice().unwrap()),
    ]
}

fn bilinear_views_mut(b: &mut BilinearFusion) -> Vec<ParamViewMut<'_>> {
    let shapes = [
        b.bias.shape().to_vec(),
        b.w1.shape().to_vec(),
        b.w2.shape().to_vec(),
        b.w3.shape().to_vec(),
    ];
    vec![
        view_mut("bias", &shapes[0], b.bias.as_slice_mut().unwrap()),
        view_mut("w1", &shapes[1], b.w1.as_slice_mut().unwrap()),
        view_mut("w2", &shapes[2], b.w2.as_slice_mut().unwrap()),
        view_mut("w3", &shapes[3], b.w3.as_slice_mut().unwrap()),
    ]
}

fn linear_views<'a>(weight: &'a Array1<f64>, bias: &'a Array1<f64>) -> Vec<ParamView<'a>> {
    vec![
        view("weight", weight.shape(), weight.as_slice().unwrap()),
        view("bias", bias.shape(), bias.as_slice().unwrap()),
    ]
}

fn linear_views_mut<'a>(weight: &'a mut Array1<f64>, bias: &'a mut Array1<f64>) -> Vec<ParamViewMut<'a>> {
    let (ws, bs) = (weight.shape().to_vec(), bias.shape().to_vec());
    vec![
        view_mut("weight", &ws, weight.as_slice_mut().unwrap()),
        view_mut("bias", &bs, bias.as_slice_mut().unwrap()),
    ]
}

impl Parameters for Fusion {
    fn params(&self) -> Vec<ParamView<'_>> {
        match &self.layer {
            FusionLayer::Linear(l) => linear_views(&l.weight, &l.bias),
            FusionLayer::Bilinear(b) => bilinear_views(b),
        }
    }

    fn params_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        self.generation += 1;
        match &mut self.layer {
            FusionLayer::Linear(l) => linear_views_mut(&mut l.weight, &mut l.bias),
            FusionLayer::Bilinear(b) => bilinear_views_mut(b),
        }
    }
}

impl Parameters for FusionGrads {
    fn params(&self) -> Vec<ParamView<'_>> {
        match self {
            FusionGrads::Linear { weight, bias } => linear_views(weight, bias),
            FusionGrads::Bilinear(b) => bilinear_views(b),
        }
    }

    fn params_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        match self {
            FusionGrads::Linear { weight, bias } => linear_views_mut(weight, bias),
            FusionGrads::Bilinear(b) => bilinear_views_mut(b),
        }
    }
}
