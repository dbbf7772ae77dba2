//! Mini-batch training with early stopping on validation AUC.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{batches, EncodedDataset};
use crate::error::{Error, Result};
use crate::loss::bce_loss;
use crate::metrics::{auc, logloss};
use crate::mlp::{DropoutKey, Mode};
use crate::model::{FieldInfo, Model, ModelConfig};
use crate::optim::{AdamConfig, AdamState};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Weight of the squared L2 norm of embedding rows touched by a batch.
    pub embedding_l2: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping; 0 acts as 1.
    pub patience: usize,
    /// Record per-epoch wall time in the metrics CSV. Off by default so that
    /// repeated runs produce identical files.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            embedding_l2: 0.0,
            batch_size: 4096,
            max_epochs: 100,
            patience: 2,
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("train.max_epochs must be >= 1".into()));
        }
        if !(self.embedding_l2.is_finite() && self.embedding_l2 >= 0.0) {
            return Err(Error::Config("train.embedding_l2 must be a finite non-negative number".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    pub val_logloss: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,val_auc,val_logloss,wall_time";

/// Renders the per-epoch metrics CSV. `wall_time` is left empty unless
/// requested.
pub fn metrics_csv(history: &[EpochRecord], with_wall_time: bool) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in history {
        let _ = write!(out, "{},{:.17e},{:.17e},{:.17e},", r.epoch, r.train_loss, r.val_auc, r.val_logloss);
        if with_wall_time {
            let _ = write!(out, "{:.3}", r.wall_time);
        }
        out.push('\n');
    }
    out
}

pub fn write_metrics_csv(path: &Path, history: &[EpochRecord], with_wall_time: bool) -> Result<()> {
    crate::io::write_atomic(path, metrics_csv(history, with_wall_time).as_bytes())
}

/// Runs one optimizer step on a batch and returns the mean BCE.
pub fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    ids: ndarray::ArrayView2<'_, u32>,
    labels: &[u8],
    embedding_l2: f64,
    mode: Mode,
) -> Result<f64> {
    let (logits, cache) = model.forward(ids, mode)?;
    let (loss, dlogits) = bce_loss(logits.view(), labels)?;
    let mut grads = model.backward(&cache, dlogits.view())?;
    if embedding_l2 > 0.0 {
        let (_, g) = model.embedding().l2_penalty(ids, embedding_l2)?;
        grads.add_embedding(&g);
    }
    adam.step(model, &grads)?;
    Ok(loss)
}

fn validation(model: &Model, valid: &EncodedDataset) -> Result<(f64, f64)> {
    let scores = model.predict(valid.ids().view())?;
    let scores = scores.as_slice().expect("contiguous");
    Ok((auc(scores, valid.labels())?, logloss(scores, valid.labels())?))
}

/// Trains a fresh model. Deterministic given the configs, the data and
/// `seed`.
pub fn train(
    model_config: &ModelConfig,
    config: &TrainConfig,
    fields: &FieldInfo,
    train: &EncodedDataset,
    valid: &EncodedDataset,
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    let model = Model::new(model_config, fields, seed)?;
    train_model(model, config, train, valid, seed)
}

pub fn train_model(
    mut model: Model,
    config: &TrainConfig,
    train: &EncodedDataset,
    valid: &EncodedDataset,
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if valid.is_empty() {
        return Err(Error::EmptySplit("valid"));
    }
    let mut adam = AdamState::new(config.adam(), &model)?;
    let shuffle_seed = seed::derive(seed, &[seed::tag("shuffle")]);
    let dropout_seed = seed::derive(seed, &[seed::tag("dropout")]);

    let mut history = Vec::new();
    let mut best: Option<(usize, f64, Model)> = None;
    let mut bad_epochs = 0;
    let mut step: u64 = 0;
    for epoch in 0..config.max_epochs {
        let start = Instant::now();
        let mut loss_sum = 0.0;
        for (b, batch) in batches(train, config.batch_size, shuffle_seed, epoch as u64).enumerate() {
            let mode = Mode::Train(DropoutKey {
                seed: dropout_seed,
                salt: 0,
                step,
            });
            let loss = match train_step(&mut model, &mut adam, batch.ids.view(), &batch.labels, config.embedding_l2, mode) {
                Ok(l) if l.is_finite() => l,
                Ok(l) => return Err(Error::Diverged { epoch, batch: b, loss: l }),
                Err(Error::NonFinite(_)) | Err(Error::NonFiniteGradient(_)) => {
                    return Err(Error::Diverged {
                        epoch,
                        batch: b,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            loss_sum += loss * batch.labels.len() as f64;
            step += 1;
        }
        let (val_auc, val_logloss) = validation(&model, valid)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_auc,
            val_logloss,
            wall_time: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train_loss {:.6} val_auc {:.4} val_logloss {:.6}",
            record.train_loss,
            val_auc,
            val_logloss
        );
        history.push(record);

        if best.as_ref().is_none_or(|(_, a, _)| val_auc > *a) {
            best = Some((epoch, val_auc, model.clone()));
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= config.patience.max(1) {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    let (best_epoch, best_val_auc, model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_auc,
    })
}
