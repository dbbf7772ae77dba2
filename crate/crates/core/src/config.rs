//! Declarative run configuration (TOML) and dataset preparation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::synthetic::SyntheticSpec;
use crate::data::{EncodedDataset, FeatureSchema, FieldDecl, RawTable, SplitSpec, LABEL_COLUMN};
use crate::error::{Error, Result};
use crate::fusion::FusionSpec;
use crate::model::{FeatureSelectionConfig, FieldInfo, ModelConfig, StreamConfig, Variant};
use crate::train::TrainConfig;

/// Where instances come from. Exactly one of `synthetic`, `path` (one file,
/// split by `[split]`) or `train`/`valid`/`test` (pre-split files) is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub synthetic: Option<SyntheticSpec>,
    pub path: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Field declarations; defaults to every non-label column, group `other`.
    pub fields: Option<Vec<FieldDecl>>,
    pub min_count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub variant: Variant,
    pub embedding_dim: usize,
    pub stream1: StreamConfig,
    pub stream2: StreamConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            variant: m.variant,
            embedding_dim: m.embedding_dim,
            stream1: m.stream1,
            stream2: m.stream2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub variants: Vec<Variant>,
    /// Head counts swept for variants that use the configured bilinear fusion.
    pub heads: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Size the MLP variant's layers to the FinalMLP parameter count.
    pub match_mlp_budget: bool,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            variants: vec![Variant::Sum, Variant::Concat, Variant::Ewp, Variant::FinalMlp],
            heads: vec![1],
            seeds: vec![1],
            match_mlp_budget: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub batch_size: usize,
    pub eps: f64,
    pub threshold: f64,
    /// Uniform noise added to every parameter so zero-started tensors are
    /// checked away from their initial values.
    pub perturb: f64,
    pub sparse_samples: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            eps: 1e-5,
            threshold: 1e-4,
            perturb: 0.1,
            sparse_samples: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory; not stored in model files.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub split: SplitSpec,
    pub model: ModelSection,
    pub feature_selection: FeatureSelectionConfig,
    pub fusion: FusionSpec,
    pub train: TrainConfig,
    pub ablate: AblateConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 2023,
            out_dir: None,
            data: DataConfig::default(),
            split: SplitSpec::default(),
            model: ModelSection::default(),
            feature_selection: FeatureSelectionConfig::default(),
            fusion: FusionSpec::default(),
            train: TrainConfig::default(),
            ablate: AblateConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Io { .. } => e,
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => Error::Config(format!("{}: {other}", path.display())),
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            variant: self.model.variant,
            embedding_dim: self.model.embedding_dim,
            stream1: self.model.stream1.clone(),
            stream2: self.model.stream2.clone(),
            feature_selection: self.feature_selection.clone(),
            fusion: self.fusion,
        }
    }

    /// Every check that does not need the data's field layout.
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.split.validate()?;
        self.train.validate()?;
        if self.model.embedding_dim == 0 {
            return Err(Error::Config("model.embedding_dim must be >= 1".into()));
        }
        self.model.stream1.validate("model.stream1")?;
        let two_stream = self.model.variant.two_stream()
            || self.ablate.variants.iter().any(|v| v.two_stream());
        if two_stream {
            self.model.stream2.validate("model.stream2")?;
        }
        let (d1, d2) = (self.model.stream1.output_dim(), self.model.stream2.output_dim());
        if let Some(spec) = self.model.variant.fusion(self.fusion) {
            spec.validate(d1, d2)?;
        }
        for v in &self.ablate.variants {
            if let Some(spec) = v.fusion(self.fusion) {
                spec.validate(d1, d2)?;
            }
        }
        for &k in &self.ablate.heads {
            FusionSpec { heads: k, ..self.fusion }.validate(d1, d2)?;
        }
        if self.ablate.seeds.is_empty() || self.ablate.variants.is_empty() {
            return Err(Error::Config("ablate.variants and ablate.seeds must be non-empty".into()));
        }
        let g = &self.gradcheck;
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if g.batch_size == 0 || !positive(g.eps) || !positive(g.threshold) || !(g.perturb.is_finite() && g.perturb >= 0.0) {
            return Err(Error::Config(
                "gradcheck needs batch_size >= 1, eps > 0, threshold > 0 and perturb >= 0".into(),
            ));
        }
        Ok(())
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let pre_split = [&self.train, &self.valid, &self.test];
        let n_split = pre_split.iter().filter(|p| p.is_some()).count();
        let sources = usize::from(self.synthetic.is_some()) + usize::from(self.path.is_some()) + usize::from(n_split > 0);
        if sources > 1 {
            return Err(Error::Config(
                "data: set only one of synthetic, path or train/valid/test".into(),
            ));
        }
        if n_split > 0 && n_split < 3 {
            return Err(Error::Config("data: train, valid and test must be given together".into()));
        }
        if let Some(s) = &self.synthetic {
            s.validate()?;
        }
        if let Some(fields) = &self.fields {
            if fields.is_empty() {
                return Err(Error::Config("data.fields must not be empty".into()));
            }
            for f in fields {
                f.validate()?;
            }
        }
        Ok(())
    }

    pub fn synthetic_spec(&self) -> Option<SyntheticSpec> {
        match (&self.synthetic, &self.path, &self.train) {
            (Some(s), _, _) => Some(s.clone()),
            (None, None, None) => Some(SyntheticSpec::default()),
            _ => None,
        }
    }

    fn decls_for(&self, path: &Path) -> Result<Vec<FieldDecl>> {
        if let Some(f) = &self.fields {
            return Ok(f.clone());
        }
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok(rdr
            .headers()?
            .iter()
            .map(str::trim)
            .filter(|h| *h != LABEL_COLUMN)
            .map(|h| FieldDecl::new(h, Default::default()))
            .collect())
    }
}

/// Encoded splits plus the schema built from the training split.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub schema: FeatureSchema,
    pub train: EncodedDataset,
    pub valid: EncodedDataset,
    pub test: EncodedDataset,
    /// Raw tokens of the test split, for exporting it next to a model.
    pub test_raw: RawTable,
}

impl Prepared {
    pub fn fields(&self) -> FieldInfo {
        FieldInfo::from_schema(&self.schema)
    }
}

fn from_splits(decls: &[FieldDecl], min_count: usize, tables: [RawTable; 3]) -> Result<Prepared> {
    let [train, valid, test] = tables;
    let schema = FeatureSchema::build(train.rows.iter(), decls, min_count)?;
    Ok(Prepared {
        train: schema.encode(&train)?,
        valid: schema.encode(&valid)?,
        test: schema.encode(&test)?,
        test_raw: test,
        schema,
    })
}

/// Loads or generates the data, splits it and encodes every split with a
/// vocabulary built from the training rows only.
pub fn prepare_data(data: &DataConfig, split: &SplitSpec) -> Result<Prepared> {
    data.validate()?;
    let min_count = data.min_count.unwrap_or(1);
    let by_spec = |table: RawTable, decls: &[FieldDecl]| -> Result<Prepared> {
        let [tr, va, te] = split.assign(table.len())?;
        from_splits(decls, min_count, [table.select(&tr), table.select(&va), table.select(&te)])
    };
    if let Some(spec) = data.synthetic_spec() {
        let syn = spec.generate()?;
        let decls = data.fields.clone().unwrap_or(syn.decls);
        return by_spec(syn.table, &decls);
    }
    if let Some(path) = &data.path {
        let decls = data.decls_for(path)?;
        let names: Vec<String> = decls.iter().map(|d| d.name.clone()).collect();
        let table = RawTable::read_csv(path, &names, true)?;
        return by_spec(table, &decls);
    }
    let paths = [&data.train, &data.valid, &data.test].map(|p| p.clone().expect("validated"));
    let decls = data.decls_for(&paths[0])?;
    let names: Vec<String> = decls.iter().map(|d| d.name.clone()).collect();
    let mut tables = Vec::with_capacity(3);
    for p in &paths {
        tables.push(RawTable::read_csv(p, &names, true)?);
    }
    let tables: [RawTable; 3] = tables.try_into().expect("three tables");
    from_splits(&decls, min_count, tables)
}

/// Encodes a file against a stored schema. Missing columns are reported as
/// a schema mismatch.
pub fn encode_file(schema: &FeatureSchema, path: &Path, require_label: bool) -> Result<(RawTable, Option<EncodedDataset>)> {
    let names = schema.field_names();
    let table = RawTable::read_csv(path, &names, require_label).map_err(|e| match e {
        Error::UnknownColumn(c) => Error::SchemaMismatch(format!(
            "{} has no column {c:?}; the model expects columns {names:?}",
            path.display()
        )),
        other => other,
    })?;
    let encoded = if table.labels.is_some() {
        Some(schema.encode(&table)?)
    } else {
        None
    };
    Ok((table, encoded))
}
