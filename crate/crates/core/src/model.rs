//! The composed CTR model: embedding, optional per-stream gates, one or two
//! MLP streams and a fusion head.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureSchema, FieldGroup};
use crate::embedding::{EmbeddingGrad, EmbeddingTable};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionCache, FusionGrads, FusionKind, FusionSpec};
use crate::gating::{FeatureGate, FieldLayout, GateCache, GateConfig, GateGrads};
use crate::gating::sigmoid;
use crate::mlp::{Activation, DropoutKey, LayerSpec, Mlp, MlpCache, MlpGrads, Mode};
use crate::params::{prefixed, prefixed_mut, ParamView, ParamViewMut, Parameters};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    FinalMlp,
    DualMlp,
    Mlp,
    NoFs,
    Sum,
    Concat,
    Ewp,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Mlp,
        Variant::DualMlp,
        Variant::FinalMlp,
        Variant::NoFs,
        Variant::Sum,
        Variant::Concat,
        Variant::Ewp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::FinalMlp => "FinalMLP",
            Variant::DualMlp => "DualMLP",
            Variant::Mlp => "MLP",
            Variant::NoFs => "FinalMLP-noFS",
            Variant::Sum => "FinalMLP-sum",
            Variant::Concat => "FinalMLP-concat",
            Variant::Ewp => "FinalMLP-ewp",
        }
    }

    pub fn uses_gates(self) -> bool {
        matches!(self, Variant::FinalMlp | Variant::Sum | Variant::Concat | Variant::Ewp)
    }

    pub fn two_stream(self) -> bool {
        self != Variant::Mlp
    }

    /// Fusion actually used, given the configured one.
    pub fn fusion(self, configured: FusionSpec) -> Option<FusionSpec> {
        match self {
            Variant::Mlp => None,
            Variant::FinalMlp | Variant::NoFs => Some(configured),
            Variant::DualMlp | Variant::Concat => Some(FusionSpec::linear(FusionKind::Concat)),
            Variant::Sum => Some(FusionSpec::linear(FusionKind::Sum)),
            Variant::Ewp => Some(FusionSpec::linear(FusionKind::Ewp)),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['_', ' '], "-");
        Ok(match key.as_str() {
            "finalmlp" => Variant::FinalMlp,
            "dualmlp" => Variant::DualMlp,
            "mlp" => Variant::Mlp,
            "finalmlp-nofs" | "nofs" | "w/o-fs" => Variant::NoFs,
            "finalmlp-sum" | "sum" => Variant::Sum,
            "finalmlp-concat" | "concat" => Variant::Concat,
            "finalmlp-ewp" | "ewp" => Variant::Ewp,
            _ => return Err(Error::Config(format!("unknown variant {s:?}"))),
        })
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.name().to_owned()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    /// Layer widths; the last one is the stream output width.
    pub units: Vec<usize>,
    /// Dropout after every layer except the output layer.
    pub dropout: f64,
    pub output_activation: Activation,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            units: vec![400, 400, 400],
            dropout: 0.0,
            output_activation: Activation::Identity,
        }
    }
}

impl StreamConfig {
    pub fn new(units: Vec<usize>) -> Self {
        Self {
            units,
            ..Self::default()
        }
    }

    pub fn output_dim(&self) -> usize {
        self.units.last().copied().unwrap_or(0)
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let n = self.units.len();
        self.units
            .iter()
            .enumerate()
            .map(|(i, &u)| {
                if i + 1 == n {
                    LayerSpec::new(u, self.output_activation, 0.0)
                } else {
                    LayerSpec::new(u, Activation::Relu, self.dropout)
                }
            })
            .collect()
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if self.units.is_empty() || self.units.contains(&0) {
            return Err(Error::Config(format!("{name}.units must be a non-empty list of positive widths")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("{name}.dropout must lie in [0, 1)")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureSelectionConfig {
    pub stream1: GateConfig,
    pub stream2: GateConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub embedding_dim: usize,
    pub stream1: StreamConfig,
    pub stream2: StreamConfig,
    pub feature_selection: FeatureSelectionConfig,
    pub fusion: FusionSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::FinalMlp,
            embedding_dim: 10,
            stream1: StreamConfig::default(),
            stream2: StreamConfig::default(),
            feature_selection: FeatureSelectionConfig::default(),
            fusion: FusionSpec::default(),
        }
    }
}

impl ModelConfig {
    /// Checks every sub-config the variant reads, without allocating weights.
    pub fn validate(&self, fields: &FieldInfo) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be >= 1".into()));
        }
        fields.validate()?;
        self.stream1.validate("stream1")?;
        if self.variant.two_stream() {
            self.stream2.validate("stream2")?;
            let spec = self.variant.fusion(self.fusion).expect("two-stream");
            spec.validate(self.stream1.output_dim(), self.stream2.output_dim())?;
        }
        if self.variant.uses_gates() {
            let layout = fields.layout(self.embedding_dim);
            self.feature_selection.stream1.validate(&layout)?;
            self.feature_selection.stream2.validate(&layout)?;
        }
        Ok(())
    }
}

/// Field metadata the model is built against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldInfo {
    pub names: Vec<String>,
    pub groups: Vec<FieldGroup>,
    pub sizes: Vec<usize>,
}

impl FieldInfo {
    pub fn from_schema(schema: &FeatureSchema) -> Self {
        Self {
            names: schema.field_names(),
            groups: schema.groups(),
            sizes: schema.field_sizes(),
        }
    }

    /// Anonymous fields `f0..` in group `other`.
    pub fn from_sizes(sizes: &[usize]) -> Self {
        Self {
            names: (0..sizes.len()).map(|i| format!("f{i}")).collect(),
            groups: vec![FieldGroup::Other; sizes.len()],
            sizes: sizes.to_vec(),
        }
    }

    pub fn layout(&self, dim: usize) -> FieldLayout<'_> {
        FieldLayout {
            names: &self.names,
            groups: &self.groups,
            dim,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.names.len() != self.sizes.len() || self.groups.len() != self.sizes.len() {
            return Err(Error::Config("field metadata must describe at least one field consistently".into()));
        }
        if self.sizes.contains(&0) {
            return Err(Error::Config("every field needs at least one id".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    embedding: EmbeddingTable,
    gate1: Option<FeatureGate>,
    gate2: Option<FeatureGate>,
    stream1: Mlp,
    stream2: Option<Mlp>,
    fusion: Fusion,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    ids: Array2<u32>,
    gate1: Option<GateCache>,
    gate2: Option<GateCache>,
    stream1: MlpCache,
    stream2: Option<MlpCache>,
    fusion: FusionCache,
}

/// Gradients laid out exactly like [`Model`]'s parameter list. The embedding
/// gradient is kept dense so it zips with the table.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub embedding: Array2<f64>,
    pub gate1: Option<GateGrads>,
    pub gate2: Option<GateGrads>,
    pub stream1: MlpGrads,
    pub stream2: Option<MlpGrads>,
    pub fusion: FusionGrads,
}

impl ModelGrads {
    pub fn add_embedding(&mut self, g: &EmbeddingGrad) {
        for (r, row) in g.rows() {
            let mut dst = self.embedding.row_mut(r);
            dst += row;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for p in self.params_mut() {
            p.data.iter_mut().for_each(|x| *x *= factor);
        }
    }
}

/// Per-component parameter counts in model order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub components: Vec<(String, usize)>,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.components.iter().map(|(_, n)| n).sum()
    }

    pub fn get(&self, name: &str) -> usize {
        self.components
            .iter()
            .find(|(n, _)| n == name)
            .map_or(0, |(_, c)| *c)
    }
}

fn stream_mode(mode: Mode, stream: u64) -> Mode {
    match mode {
        Mode::Train(key) => Mode::Train(DropoutKey {
            salt: seed::derive(key.salt, &[stream]),
            ..key
        }),
        Mode::Eval => Mode::Eval,
    }
}

impl Model {
    /// Every component draws from its own seed-derived stream, so two
    /// variants built from one seed share identical embeddings, streams and
    /// linear fusion weights.
    pub fn new(config: &ModelConfig, fields: &FieldInfo, seed: u64) -> Result<Self> {
        config.validate(fields)?;
        let d = config.embedding_dim;
        let rng = |name: &str| seed::rng(seed, &[seed::tag("model"), seed::tag(name)]);
        let embedding = EmbeddingTable::new(&fields.sizes, d, &mut rng("embedding"))?;
        let width = embedding.output_dim();
        let layout = fields.layout(d);
        let (gate1, gate2) = if config.variant.uses_gates() {
            (
                Some(FeatureGate::new(&config.feature_selection.stream1, &layout, &mut rng("gate1"))?),
                Some(FeatureGate::new(&config.feature_selection.stream2, &layout, &mut rng("gate2"))?),
            )
        } else {
            (None, None)
        };
        let stream1 = Mlp::new(width, &config.stream1.layer_specs(), &mut rng("stream1"))?;
        let d1 = stream1.out_dim();
        let (stream2, fusion) = match config.variant.fusion(config.fusion) {
            Some(spec) => {
                let s2 = Mlp::new(width, &config.stream2.layer_specs(), &mut rng("stream2"))?;
                let f = Fusion::new(&spec, d1, s2.out_dim(), &mut rng("fusion"))?;
                (Some(s2), f)
            }
            None => (None, Fusion::single(d1, &mut rng("fusion"))?),
        };
        Ok(Self {
            config: config.clone(),
            embedding,
            gate1,
            gate2,
            stream1,
            stream2,
            fusion,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn embedding(&self) -> &EmbeddingTable {
        &self.embedding
    }

    pub fn gates(&self) -> (Option<&FeatureGate>, Option<&FeatureGate>) {
        (self.gate1.as_ref(), self.gate2.as_ref())
    }

    pub fn streams(&self) -> (&Mlp, Option<&Mlp>) {
        (&self.stream1, self.stream2.as_ref())
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    pub fn forward(&self, ids: ArrayView2<'_, u32>, mode: Mode) -> Result<(Array1<f64>, ForwardCache)> {
        let e = self.embedding.forward(ids)?;
        let (h1, gate1) = match &self.gate1 {
            Some(g) => {
                let (h, c) = g.forward(e.view())?;
                (h, Some(c))
            }
            None => (e.clone(), None),
        };
        let (h2, gate2) = match &self.gate2 {
            Some(g) => {
                let (h, c) = g.forward(e.view())?;
                (h, Some(c))
            }
            None => (e, None),
        };
        let (o1, stream1) = self.stream1.forward(h1.view(), stream_mode(mode, 1))?;
        let (o2, stream2) = match &self.stream2 {
            Some(s) => {
                let (o, c) = s.forward(h2.view(), stream_mode(mode, 2))?;
                (Some(o), Some(c))
            }
            None => (None, None),
        };
        let (logits, fusion) = self.fusion.forward(o1.view(), o2.as_ref().map(|o| o.view()))?;
        Ok((
            logits,
            ForwardCache {
                ids: ids.to_owned(),
                gate1,
                gate2,
                stream1,
                stream2,
                fusion,
            },
        ))
    }

    pub fn backward(&self, cache: &ForwardCache, dlogits: ArrayView1<'_, f64>) -> Result<ModelGrads> {
        let (fusion, do1, do2) = self.fusion.backward(&cache.fusion, dlogits)?;
        let (stream1, dh1) = self.stream1.backward(&cache.stream1, do1.view())?;
        let (stream2, dh2) = match (&self.stream2, &cache.stream2, do2) {
            (Some(s), Some(c), Some(d)) => {
                let (g, dh) = s.backward(c, d.view())?;
                (Some(g), Some(dh))
            }
            (None, None, None) => (None, None),
            _ => return Err(Error::StaleCache("model streams")),
        };
        let (gate1, de1) = match (&self.gate1, &cache.gate1) {
            (Some(g), Some(c)) => {
                let (gg, de) = g.backward(c, dh1.view())?;
                (Some(gg), de)
            }
            (None, None) => (None, dh1),
            _ => return Err(Error::StaleCache("model gates")),
        };
        let mut de = de1;
        let mut gate2 = None;
        if let Some(dh2) = dh2 {
            match (&self.gate2, &cache.gate2) {
                (Some(g), Some(c)) => {
                    let (gg, de2) = g.backward(c, dh2.view())?;
                    gate2 = Some(gg);
                    de += &de2;
                }
                (None, None) => de += &dh2,
                _ => return Err(Error::StaleCache("model gates")),
            }
        }
        let eg = self.embedding.backward(cache.ids.view(), de.view())?;
        Ok(ModelGrads {
            embedding: eg.to_dense(self.embedding.total_rows()),
            gate1,
            gate2,
            stream1,
            stream2,
            fusion,
        })
    }

    /// Eval-mode logits.
    pub fn logits(&self, ids: ArrayView2<'_, u32>) -> Result<Array1<f64>> {
        Ok(self.forward(ids, Mode::Eval)?.0)
    }

    /// Eval-mode click probabilities, computed in fixed-size chunks.
    pub fn predict(&self, ids: ArrayView2<'_, u32>) -> Result<Array1<f64>> {
        const CHUNK: usize = 4096;
        let mut out = Vec::with_capacity(ids.nrows());
        let mut start = 0;
        while start < ids.nrows() {
            let end = (start + CHUNK).min(ids.nrows());
            let z = self.logits(ids.slice(ndarray::s![start..end, ..]))?;
            out.extend(z.iter().map(|&v| sigmoid(v)));
            start = end;
        }
        Ok(Array1::from(out))
    }

    pub fn zero_grads(&self) -> ModelGrads {
        let gate = |g: &FeatureGate| GateGrads {
            condition: g.condition_vector().map(|v| Array1::zeros(v.len())),
            mlp: g.mlp().zero_grads(),
        };
        let fusion = match self.fusion.layer() {
            crate::fusion::FusionLayer::Linear(l) => FusionGrads::Linear {
                weight: Array1::zeros(l.weight.len()),
                bias: Array1::zeros(1),
            },
            crate::fusion::FusionLayer::Bilinear(b) => {
                let mut z = b.clone();
                z.bias.fill(0.0);
                z.w1.fill(0.0);
                z.w2.fill(0.0);
                z.w3.fill(0.0);
                FusionGrads::Bilinear(z)
            }
        };
        ModelGrads {
            embedding: Array2::zeros(self.embedding.weights().dim()),
            gate1: self.gate1.as_ref().map(gate),
            gate2: self.gate2.as_ref().map(gate),
            stream1: self.stream1.zero_grads(),
            stream2: self.stream2.as_ref().map(Mlp::zero_grads),
            fusion,
        }
    }

    /// Adds uniform noise in `±scale` to every parameter, moving zero-started
    /// tensors off their initial values.
    pub fn perturb(&mut self, seed: u64, scale: f64) {
        let mut rng = seed::rng(seed, &[seed::tag("perturb")]);
        for p in self.params_mut() {
            for x in p.data.iter_mut() {
                *x += rng.random_range(-scale..=scale);
            }
        }
    }

    pub fn param_counts(&self) -> ParamCounts {
        let mut components = vec![("embedding".to_owned(), self.embedding.num_params())];
        if let Some(g) = &self.gate1 {
            components.push(("gate1".into(), g.num_params()));
        }
        if let Some(g) = &self.gate2 {
            components.push(("gate2".into(), g.num_params()));
        }
        components.push(("stream1".into(), self.stream1.num_params()));
        if let Some(s) = &self.stream2 {
            components.push(("stream2".into(), s.num_params()));
        }
        components.push(("fusion".into(), self.fusion.num_params()));
        ParamCounts { components }
    }
}

impl Parameters for Model {
    fn params(&self) -> Vec<ParamView<'_>> {
        let mut out = prefixed("embedding", self.embedding.params());
        if let Some(g) = &self.gate1 {
            out.extend(prefixed("gate1", g.params()));
        }
        if let Some(g) = &self.gate2 {
            out.extend(prefixed("gate2", g.params()));
        }
        out.extend(prefixed("stream1", self.stream1.params()));
        if let Some(s) = &self.stream2 {
            out.extend(prefixed("stream2", s.params()));
        }
        out.extend(prefixed("fusion", self.fusion.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        let mut out = prefixed_mut("embedding", self.embedding.params_mut());
        if let Some(g) = &mut self.gate1 {
            out.extend(prefixed_mut("gate1", g.params_mut()));
        }
        if let Some(g) = &mut self.gate2 {
            out.extend(prefixed_mut("gate2", g.params_mut()));
        }
        out.extend(prefixed_mut("stream1", self.stream1.params_mut()));
        if let Some(s) = &mut self.stream2 {
            out.extend(prefixed_mut("stream2", s.params_mut()));
        }
        out.extend(prefixed_mut("fusion", self.fusion.params_mut()));
        out
    }
}

impl Parameters for ModelGrads {
    fn params(&self) -> Vec<ParamView<'_>> {
        let mut out = vec![ParamView {
            name: "embedding.weights".into(),
            shape: self.embedding.shape().to_vec(),
            data: self.embedding.as_slice().expect("standard layout"),
            sparse: true,
        }];
        if let Some(g) = &self.gate1 {
            out.extend(prefixed("gate1", g.params()));
        }
        if let Some(g) = &self.gate2 {
            out.extend(prefixed("gate2", g.params()));
        }
        out.extend(prefixed("stream1", self.stream1.params()));
        if let Some(s) = &self.stream2 {
            out.extend(prefixed("stream2", s.params()));
        }
        out.extend(prefixed("fusion", self.fusion.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        let shape = self.embedding.shape().to_vec();
        let mut out = vec![ParamViewMut {
            name: "embedding.weights".into(),
            shape,
            data: self.embedding.as_slice_mut().expect("standard layout"),
            sparse: true,
        }];
        if let Some(g) = &mut self.gate1 {
            out.extend(prefixed_mut("gate1", g.params_mut()));
        }
        if let Some(g) = &mut self.gate2 {
            out.extend(prefixed_mut("gate2", g.params_mut()));
        }
        out.extend(prefixed_mut("stream1", self.stream1.params_mut()));
        if let Some(s) = &mut self.stream2 {
            out.extend(prefixed_mut("stream2", s.params_mut()));
        }
        out.extend(prefixed_mut("fusion", self.fusion.params_mut()));
        out
    }
}
