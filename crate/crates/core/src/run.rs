//! End-to-end workflows driven by a [`RunConfig`].

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{prepare_data, Prepared, RunConfig};
use crate::container::{ModelContainer, TrainSummary};
use crate::data::FeatureSchema;
use crate::error::{Error, Result};
use crate::fusion::{FusionKind, FusionSpec};
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::loss::bce_loss;
use crate::metrics::{evaluate, EvalReport};
use crate::mlp::Mode;
use crate::model::{FieldInfo, Model, ModelConfig, Variant};
use crate::params::Parameters;
use crate::train::{train_model, EpochRecord};

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub container: ModelContainer,
    pub history: Vec<EpochRecord>,
    pub test: EvalReport,
    pub prepared: Prepared,
}

/// Prepares the data, trains, restores the best epoch and scores the test
/// split.
pub fn train_run(cfg: &RunConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let prepared = prepare_data(&cfg.data, &cfg.split)?;
    train_prepared(cfg, &cfg.model_config(), prepared)
}

pub fn train_prepared(cfg: &RunConfig, model_config: &ModelConfig, prepared: Prepared) -> Result<TrainRun> {
    let model = Model::new(model_config, &prepared.fields(), cfg.seed)?;
    let out = train_model(model, &cfg.train, &prepared.train, &prepared.valid, cfg.seed)?;
    let (test, _) = evaluate(&out.model, &prepared.test)?;
    let best = &out.history[out.best_epoch];
    let summary = TrainSummary {
        variant: model_config.variant.name().to_owned(),
        seed: cfg.seed,
        epochs_run: out.history.len(),
        best_epoch: out.best_epoch,
        val_auc: best.val_auc,
        val_logloss: best.val_logloss,
        test_auc: test.auc,
        test_logloss: test.logloss,
        parameters: test.parameters.clone(),
    };
    let mut stored = cfg.clone();
    stored.model.variant = model_config.variant;
    stored.model.stream1 = model_config.stream1.clone();
    stored.model.stream2 = model_config.stream2.clone();
    stored.fusion = model_config.fusion;
    let container = ModelContainer::new(prepared.schema.clone(), stored, out.model, Some(summary));
    Ok(TrainRun {
        container,
        history: out.history,
        test,
        prepared,
    })
}

/// Builds a small synthetic batch with the configured field layout.
pub fn gradcheck_batch(cfg: &RunConfig) -> Result<(FeatureSchema, ndarray::Array2<u32>, Vec<u8>)> {
    let mut spec = cfg.data.synthetic_spec().unwrap_or_default();
    if let Some(f) = &cfg.data.fields {
        spec.n_fields = f.len().max(2);
    }
    spec.n_instances = cfg.gradcheck.batch_size;
    spec.vocab_size = spec.vocab_size.min(8);
    let syn = spec.generate()?;
    let decls = match &cfg.data.fields {
        Some(f) if f.len() == spec.n_fields => f.clone(),
        _ => syn.decls,
    };
    let schema = FeatureSchema::build(syn.table.rows.iter(), &decls, 1)?;
    let data = schema.encode(&syn.table)?;
    Ok((schema, data.ids().clone(), data.labels().to_vec()))
}

/// Central-difference check of the full composed model (eval mode, so
/// dropout is off) on a synthetic batch. `inject_bug` doubles every analytic
/// gradient and must make the check fail.
pub fn gradcheck_run(cfg: &RunConfig, model_config: &ModelConfig, inject_bug: bool) -> Result<GradCheckReport> {
    cfg.validate()?;
    let (schema, ids, labels) = gradcheck_batch(cfg)?;
    let mut model = Model::new(model_config, &FieldInfo::from_schema(&schema), cfg.seed)?;
    model.perturb(cfg.seed, cfg.gradcheck.perturb);
    let l2 = cfg.train.embedding_l2;

    let (logits, cache) = model.forward(ids.view(), Mode::Eval)?;
    let (_, dlogits) = bce_loss(logits.view(), &labels)?;
    let mut grads = model.backward(&cache, dlogits.view())?;
    if l2 > 0.0 {
        grads.add_embedding(&model.embedding().l2_penalty(ids.view(), l2)?.1);
    }
    if inject_bug {
        grads.scale(2.0);
    }
    let loss = |m: &Model| -> Result<f64> {
        let z = m.logits(ids.view())?;
        let (l, _) = bce_loss(z.view(), &labels)?;
        let pen = if l2 > 0.0 { m.embedding().l2_penalty(ids.view(), l2)?.0 } else { 0.0 };
        Ok(l + pen)
    };
    let opts = GradCheckOptions {
        eps: cfg.gradcheck.eps,
        threshold: cfg.gradcheck.threshold,
        sparse_samples: cfg.gradcheck.sparse_samples,
        seed: cfg.seed,
        ..GradCheckOptions::default()
    };
    grad_check(&mut model, &grads, loss, &opts)
}

/// Total parameters of a single-stream model with `depth` equal layers of
/// width `w`, computed without allocating it.
fn mlp_count(embedding: usize, input: usize, depth: usize, w: usize) -> usize {
    embedding + input * w + w + (depth - 1) * (w * w + w) + w + 1
}

/// Single-MLP config whose parameter count is closest to `reference`'s.
/// Depth follows `reference.stream1`; all layers share one width.
pub fn matched_mlp_config(reference: &ModelConfig, fields: &FieldInfo) -> Result<ModelConfig> {
    let target = Model::new(reference, fields, 0)?.num_params();
    let embedding: usize = fields.sizes.iter().sum::<usize>() * reference.embedding_dim;
    let input = fields.sizes.len() * reference.embedding_dim;
    let depth = reference.stream1.units.len().max(1);
    let w = (1..=16_384)
        .min_by_key(|&w| mlp_count(embedding, input, depth, w).abs_diff(target))
        .expect("non-empty range");
    let mut cfg = reference.clone();
    cfg.variant = Variant::Mlp;
    cfg.stream1.units = vec![w; depth];
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub heads: Option<usize>,
    pub seed: u64,
    pub test_auc: f64,
    pub test_logloss: f64,
    pub val_auc: f64,
    pub n_parameters: usize,
    pub fusion_parameters: usize,
    pub fusion_matrix_parameters: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub wall_time: f64,
}

pub const ABLATION_HEADER: &str = "variant,heads,seed,test_auc,test_logloss,val_auc,n_parameters,fusion_parameters,fusion_matrix_parameters,best_epoch,epochs_run,wall_time";

impl AblationRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{},{},{},{},{},{:.3}",
            self.variant,
            self.heads.map(|k| k.to_string()).unwrap_or_default(),
            self.seed,
            self.test_auc,
            self.test_logloss,
            self.val_auc,
            self.n_parameters,
            self.fusion_parameters,
            self.fusion_matrix_parameters,
            self.best_epoch,
            self.epochs_run,
            self.wall_time
        )
    }
}

/// The (variant, heads) grid of a sweep, in declared order. Variants that
/// read the configured bilinear fusion expand over `ablate.heads`.
pub fn ablation_plan(cfg: &RunConfig) -> Vec<(Variant, Option<usize>)> {
    let mut plan = Vec::new();
    for &v in &cfg.ablate.variants {
        let bilinear = matches!(v, Variant::FinalMlp | Variant::NoFs) && cfg.fusion.kind == FusionKind::Bilinear;
        if bilinear {
            plan.extend(cfg.ablate.heads.iter().map(|&k| (v, Some(k))));
        } else {
            plan.push((v, None));
        }
    }
    plan
}

/// Runs every (variant, heads, seed) combination on one data preparation.
/// `on_row` sees each row as soon as it finishes; an error aborts the sweep.
pub fn ablate_run(cfg: &RunConfig, mut on_row: impl FnMut(&AblationRow) -> Result<()>) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let prepared = prepare_data(&cfg.data, &cfg.split)?;
    let mut rows = Vec::new();
    for &seed in &cfg.ablate.seeds {
        for (variant, heads) in ablation_plan(cfg) {
            let mut mc = cfg.model_config();
            mc.variant = variant;
            if let Some(k) = heads {
                mc.fusion = FusionSpec { heads: k, ..mc.fusion };
            }
            if variant == Variant::Mlp && cfg.ablate.match_mlp_budget {
                let reference = ModelConfig {
                    variant: Variant::FinalMlp,
                    ..mc.clone()
                };
                mc = matched_mlp_config(&reference, &prepared.fields())?;
            }
            let run_cfg = RunConfig { seed, ..cfg.clone() };
            let start = Instant::now();
            let run = train_prepared(&run_cfg, &mc, prepared.clone())
                .map_err(|e| Error::Config(format!("ablation run {variant} heads={heads:?} seed={seed} failed: {e}")))?;
            let summary = run.container.summary.as_ref().expect("trained");
            let fusion_matrix_parameters = match mc.variant.fusion(mc.fusion) {
                Some(spec) => spec.matrix_param_count(mc.stream1.output_dim(), mc.stream2.output_dim())?,
                None => 0,
            };
            let row = AblationRow {
                variant: variant.name().to_owned(),
                heads,
                seed,
                test_auc: run.test.auc,
                test_logloss: run.test.logloss,
                val_auc: summary.val_auc,
                n_parameters: run.test.n_parameters,
                fusion_parameters: run.test.parameters.get("fusion"),
                fusion_matrix_parameters,
                best_epoch: summary.best_epoch,
                epochs_run: summary.epochs_run,
                wall_time: start.elapsed().as_secs_f64(),
            };
            on_row(&row)?;
            rows.push(row);
        }
    }
    Ok(rows)
}
