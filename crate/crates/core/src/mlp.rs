//! Dense feed-forward layers with cached forward passes and exact backward
//! passes.
//!
//! Weights are stored `out × in`; inputs and outputs are row-major batches.
//! Dropout is inverted (kept units are scaled by `1/(1-p)`) and its masks are
//! a pure function of `(seed, salt, layer, step)`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{standard, view, view_mut, ParamView, ParamViewMut, Parameters};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub units: usize,
    pub activation: Activation,
    pub dropout: f64,
}

impl LayerSpec {
    pub fn new(units: usize, activation: Activation, dropout: f64) -> Self {
        Self {
            units,
            activation,
            dropout,
        }
    }
}

/// Identifies the dropout mask stream of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub salt: u64,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train(DropoutKey),
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
    pub dropout: f64,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    in_dim: usize,
    layers: Vec<Dense>,
    generation: u64,
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    generation: u64,
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl Mlp {
    /// Kaiming-uniform weights (`±sqrt(6/fan_in)`), zero biases.
    pub fn new(in_dim: usize, specs: &[LayerSpec], rng: &mut impl Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut fan_in = in_dim;
        for spec in specs {
            let bound = (6.0 / fan_in.max(1) as f64).sqrt();
            layers.push(Dense {
                weight: Array2::from_shape_simple_fn((spec.units, fan_in), || {
                    rng.random_range(-bound..=bound)
                }),
                bias: Array1::zeros(spec.units),
                activation: spec.activation,
                dropout: spec.dropout,
            });
            fan_in = spec.units;
        }
        Self::from_layers(in_dim, layers)
    }

    pub fn from_layers(in_dim: usize, layers: Vec<Dense>) -> Result<Self> {
        if in_dim == 0 {
            return Err(Error::Config("MLP input dimension must be >= 1".into()));
        }
        if layers.is_empty() {
            return Err(Error::Config("MLP needs at least one layer".into()));
        }
        let mut fan_in = in_dim;
        for (i, l) in layers.iter().enumerate() {
            if l.in_dim() != fan_in || l.bias.len() != l.out_dim() || l.out_dim() == 0 {
                return Err(Error::Config(format!(
                    "MLP layer {i}: weight {:?} and bias {} do not chain from width {fan_in}",
                    l.weight.shape(),
                    l.bias.len()
                )));
            }
            if !(0.0..1.0).contains(&l.dropout) {
                return Err(Error::Config(format!(
                    "MLP layer {i}: dropout rate {} outside [0,1)",
                    l.dropout
                )));
            }
            fan_in = l.out_dim();
        }
        Ok(Self {
            in_dim,
            layers,
            generation: 0,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(self.in_dim, Dense::out_dim)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn zero_last_layer(&mut self) {
        if let Some(l) = self.layers.last_mut() {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        self.generation += 1;
    }

    fn check_input(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.in_dim {
            return Err(Error::shape("mlp input", &[x.nrows(), self.in_dim], x.shape()));
        }
        Ok(())
    }

    fn affine(layer: &Dense, x: &ArrayView2<'_, f64>) -> Array2<f64> {
        let mut z = x.dot(&layer.weight.t());
        z += &layer.bias;
        z
    }

    fn activate(a: Activation, z: &Array2<f64>) -> Array2<f64> {
        match a {
            Activation::Relu => z.mapv(|v| v.max(0.0)),
            Activation::Identity => z.clone(),
        }
    }

    fn dropout_mask(key: DropoutKey, layer: usize, rate: f64, shape: (usize, usize)) -> Array2<f64> {
        let mut rng = seed::rng(key.seed, &[key.salt, layer as u64, key.step]);
        let keep = 1.0 / (1.0 - rate);
        Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < rate { 0.0 } else { keep })
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>, mode: Mode) -> Result<(Array2<f64>, MlpCache)> {
        self.check_input(&x)?;
        let n = self.layers.len();
        let mut cache = MlpCache {
            generation: self.generation,
            inputs: Vec::with_capacity(n),
            pre_activations: Vec::with_capacity(n),
            masks: Vec::with_capacity(n),
        };
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = Self::affine(layer, &h.view());
            let mut a = Self::activate(layer.activation, &z);
            let mask = match mode {
                Mode::Train(key) if layer.dropout > 0.0 => {
                    let m = Self::dropout_mask(key, i, layer.dropout, a.dim());
                    a *= &m;
                    Some(m)
                }
                _ => None,
            };
            cache.inputs.push(h);
            cache.pre_activations.push(z);
            cache.masks.push(mask);
            h = a;
        }
        Ok((h, cache))
    }

    /// Eval-mode forward without retaining intermediates.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut h = x.to_owned();
        for layer in &self.layers {
            h = Self::activate(layer.activation, &Self::affine(layer, &h.view()));
        }
        Ok(h)
    }

    pub fn backward(&self, cache: &MlpCache, upstream: ArrayView2<'_, f64>) -> Result<(MlpGrads, Array2<f64>)> {
        if cache.generation != self.generation || cache.inputs.len() != self.layers.len() {
            return Err(Error::StaleCache("mlp"));
        }
        let batch = cache.inputs[0].nrows();
        if upstream.shape() != [batch, self.out_dim()] {
            return Err(Error::shape("mlp upstream", &[batch, self.out_dim()], upstream.shape()));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if let Some(m) = &cache.masks[i] {
                delta *= m;
            }
            if layer.activation == Activation::Relu {
                delta.zip_mut_with(&cache.pre_activations[i], |d, &z| {
                    if z <= 0.0 {
                        *d = 0.0
                    }
                });
            }
            let dw = standard(delta.t().dot(&cache.inputs[i]));
            let db = delta.sum_axis(Axis(0));
            delta = delta.dot(&layer.weight);
            grads.push((dw, db));
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, delta))
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            layers: self
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weight.dim()), Array1::zeros(l.bias.len())))
                .collect(),
        }
    }
}

impl Parameters for Mlp {
    fn params(&self) -> Vec<ParamView<'_>> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    view(format!("layer{i}.weight"), l.weight.shape(), l.weight.as_slice().unwrap()),
                    view(format!("layer{i}.bias"), l.bias.shape(), l.bias.as_slice().unwrap()),
                ]
            })
            .collect()
    }

    fn params_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        self.generation += 1;
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                let ws = l.weight.shape().to_vec();
                let bs = l.bias.shape().to_vec();
                [
                    view_mut(format!("layer{i}.weight"), &ws, l.weight.as_slice_mut().unwrap()),
                    view_mut(format!("layer{i}.bias"), &bs, l.bias.as_slice_mut().unwrap()),
                ]
            })
            .collect()
    }
}

impl Parameters for MlpGrads {
    fn params(&self) -> Vec<ParamView<'_>> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, (w, b))| {
                [
                    view(format!("layer{i}.weight"), w.shape(), w.as_slice().unwrap()),
                    view(format!("layer{i}.bias"), b.shape(), b.as_slice().unwrap()),
                ]
            })
            .collect()
    }

    fn params_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, (w, b))| {
                let ws = w.shape().to_vec();
                let bs = b.shape().to_vec();
                [
                    view_mut(format!("layer{i}.weight"), &ws, w.as_slice_mut().unwrap()),
                    view_mut(format!("layer{i}.bias"), &bs, b.as_slice_mut().unwrap()),
                ]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::{grad_check, GradCheckOptions};

    fn single(w: Array2<f64>, act: Activation) -> Mlp {
        let n = w.nrows();
        let in_dim = w.ncols();
        Mlp::from_layers(
            in_dim,
            vec![Dense {
                weight: w,
                bias: Array1::zeros(n),
                activation: act,
                dropout: 0.0,
            }],
        )
        .unwrap()
    }

    fn random_mlp(seed: u64, dropout: f64) -> Mlp {
        let specs = [
            LayerSpec::new(7, Activation::Relu, dropout),
            LayerSpec::new(5, Activation::Relu, dropout),
            LayerSpec::new(3, Activation::Identity, 0.0),
        ];
        let mut m = Mlp::new(4, &specs, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        // non-zero biases so the bias path is exercised
        for (i, p) in m.params_mut().into_iter().enumerate() {
            if p.name.ends_with("bias") {
                p.data.iter_mut().enumerate().for_each(|(j, b)| *b = 0.1 * ((i + j) as f64).sin());
            }
        }
        m
    }

    fn random_input(b: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((b, d), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_layer_passes_input() {
        let m = single(Array2::eye(3), Activation::Identity);
        let x = array![[1.0, -2.0, 3.0]];
        assert_eq!(m.forward(x.view(), Mode::Eval).unwrap().0, x);
    }

    #[test]
    fn relu_layer_clips() {
        let m = single(Array2::eye(2), Activation::Relu);
        let y = m.forward(array![[-1.0, 2.0]].view(), Mode::Eval).unwrap().0;
        assert_eq!(y, array![[0.0, 2.0]]);
    }

    #[test]
    fn dimension_mismatch() {
        let m = single(Array2::eye(2), Activation::Relu);
        assert!(m.forward(array![[1.0, 2.0, 3.0]].view(), Mode::Eval).is_err());
        let bad = Dense {
            weight: Array2::zeros((2, 3)),
            bias: Array1::zeros(2),
            activation: Activation::Relu,
            dropout: 0.0,
        };
        assert!(Mlp::from_layers(2, vec![bad]).is_err());
    }

    #[test]
    fn dropout_rate_one_rejected() {
        let specs = [LayerSpec::new(2, Activation::Relu, 1.0)];
        assert!(matches!(
            Mlp::new(2, &specs, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        let m = random_mlp(3, 0.0);
        let x = random_input(6, 4, 4);
        let y = m.forward(x.view(), Mode::Eval).unwrap().0;
        for b in 0..6 {
            let mut h: Vec<f64> = x.row(b).to_vec();
            for l in m.layers() {
                let mut next = vec![0.0; l.out_dim()];
                for (o, v) in next.iter_mut().enumerate() {
                    let mut acc = l.bias[o];
                    for (i, hi) in h.iter().enumerate() {
                        acc += l.weight[[o, i]] * hi;
                    }
                    *v = match l.activation {
                        Activation::Relu => acc.max(0.0),
                        Activation::Identity => acc,
                    };
                }
                h = next;
            }
            for (o, want) in h.iter().enumerate() {
                assert!((y[[b, o]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_backward_closed_form() {
        let w = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let m = single(w.clone(), Activation::Identity);
        let x = array![[1.0, -1.0], [0.5, 2.0]];
        let up = array![[1.0, 0.0, -1.0], [2.0, 1.0, 0.0]];
        let (_, cache) = m.forward(x.view(), Mode::Eval).unwrap();
        let (g, dx) = m.backward(&cache, up.view()).unwrap();
        assert_eq!(dx, up.dot(&w));
        assert_eq!(g.layers[0].0, up.t().dot(&x));
        assert_eq!(g.layers[0].1, array![3.0, 1.0, -1.0]);
    }

    #[test]
    fn identity_weight_backward_is_upstream() {
        let m = single(Array2::eye(3), Activation::Identity);
        let x = random_input(2, 3, 0);
        let up = random_input(2, 3, 1);
        let (_, cache) = m.forward(x.view(), Mode::Eval).unwrap();
        assert_eq!(m.backward(&cache, up.view()).unwrap().1, up);
    }

    #[test]
    fn relu_blocks_negative_preactivation() {
        let m = single(Array2::eye(2), Activation::Relu);
        let (_, cache) = m.forward(array![[-1.0, 2.0]].view(), Mode::Eval).unwrap();
        let (g, dx) = m.backward(&cache, array![[5.0, 7.0]].view()).unwrap();
        assert_eq!(dx, array![[0.0, 7.0]]);
        assert_eq!(g.layers[0].1, array![0.0, 7.0]);
    }

    #[test]
    fn stale_cache_detected() {
        let mut m = random_mlp(0, 0.0);
        let x = random_input(2, 4, 0);
        let (_, cache) = m.forward(x.view(), Mode::Eval).unwrap();
        m.params_mut()[0].data[0] += 1.0;
        assert!(matches!(
            m.backward(&cache, Array2::zeros((2, 3)).view()),
            Err(Error::StaleCache(_))
        ));
    }

    #[test]
    fn eval_mode_is_pure_and_ignores_dropout() {
        let m = random_mlp(1, 0.5);
        let x = random_input(5, 4, 2);
        let a = m.forward(x.view(), Mode::Eval).unwrap().0;
        let b = m.forward(x.view(), Mode::Eval).unwrap().0;
        assert_eq!(a, b);
        assert_eq!(a, m.predict(x.view()).unwrap());
    }

    #[test]
    fn dropout_masks_are_keyed() {
        let m = random_mlp(1, 0.5);
        let x = random_input(5, 4, 2);
        let key = DropoutKey { seed: 1, salt: 2, step: 3 };
        let a = m.forward(x.view(), Mode::Train(key)).unwrap().0;
        let b = m.forward(x.view(), Mode::Train(key)).unwrap().0;
        let c = m.forward(x.view(), Mode::Train(DropoutKey { step: 4, ..key })).unwrap().0;
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        let layer = Dense {
            weight: Array2::eye(4),
            bias: Array1::zeros(4),
            activation: Activation::Identity,
            dropout: 0.3,
        };
        let m = Mlp::from_layers(4, vec![layer]).unwrap();
        let x = array![[1.0, 2.0, -3.0, 0.5]];
        let trials = 20_000;
        let mut mean = Array2::<f64>::zeros((1, 4));
        for step in 0..trials {
            let key = DropoutKey { seed: 9, salt: 0, step };
            mean += &m.forward(x.view(), Mode::Train(key)).unwrap().0;
        }
        mean /= trials as f64;
        // per-unit std of a single draw is |x|*sqrt(p/(1-p)) ~ 0.65|x|; 5 sigma of the mean
        for (got, want) in mean.iter().zip(x.iter()) {
            let tol = 5.0 * want.abs() * (0.3f64 / 0.7).sqrt() / (trials as f64).sqrt();
            assert!((got - want).abs() < tol, "{got} vs {want}");
        }
    }

    #[test]
    fn backward_matches_finite_differences_with_frozen_mask() {
        for (seed, dropout) in [(5u64, 0.0), (6, 0.25)] {
            let mut m = random_mlp(seed, dropout);
            let x = random_input(8, 4, seed + 10);
            let probe = random_input(8, 3, seed + 20);
            let key = DropoutKey { seed, salt: 1, step: 0 };
            let loss = |m: &Mlp| -> Result<f64> {
                let y = m.forward(x.view(), Mode::Train(key))?.0;
                Ok((&y * &probe).sum() + 0.5 * y.mapv(|v| v * v).sum())
            };
            let (y, cache) = m.forward(x.view(), Mode::Train(key)).unwrap();
            let (grads, dx) = m.backward(&cache, (&probe + &y).view()).unwrap();
            let report = grad_check(&mut m, &grads, loss, &GradCheckOptions::default()).unwrap();
            assert!(report.passed, "{report:?}");

            // input gradient via finite differences
            let eps = 1e-5;
            for b in 0..8 {
                for i in 0..4 {
                    let mut xp = x.clone();
                    xp[[b, i]] += eps;
                    let mut xm = x.clone();
                    xm[[b, i]] -= eps;
                    let f = |xx: &Array2<f64>| {
                        let y = m.forward(xx.view(), Mode::Train(key)).unwrap().0;
                        (&y * &probe).sum() + 0.5 * y.mapv(|v| v * v).sum()
                    };
                    let num = (f(&xp) - f(&xm)) / (2.0 * eps);
                    assert!((num - dx[[b, i]]).abs() < 1e-6 * num.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn adjoint_identity_first_order() {
        // <upstream, y(x + εv) - y(x)> / ε -> <dx, v>
        let m = random_mlp(8, 0.0);
        let x = random_input(4, 4, 30);
        let v = random_input(4, 4, 31);
        let up = random_input(4, 3, 32);
        let (y0, cache) = m.forward(x.view(), Mode::Eval).unwrap();
        let (_, dx) = m.backward(&cache, up.view()).unwrap();
        let eps = 1e-6;
        let y1 = m.predict((&x + &(&v * eps)).view()).unwrap();
        let lhs = (&up * &(y1 - y0)).sum() / eps;
        let rhs = (&dx * &v).sum();
        assert!((lhs - rhs).abs() < 1e-4 * rhs.abs().max(1.0));
    }
}
