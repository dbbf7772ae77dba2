//! Ranking and calibration metrics.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::EncodedDataset;
use crate::error::{Error, Result};
use crate::model::{Model, ParamCounts};

pub const LOGLOSS_EPS: f64 = 1e-7;

/// Area under the ROC curve with average ranks for ties.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (num, den) = auc_fraction(scores, labels)?;
    Ok(num as f64 / den as f64)
}

/// AUC as the exact fraction `U2 / (2·n_pos·n_neg)`, where `U2` is the
/// Mann-Whitney statistic computed from doubled average ranks.
pub fn auc_fraction(scores: &[f64], labels: &[u8]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc labels", &[scores.len()], &[labels.len()]));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("score at row {i}")));
    }
    if let Some(row) = labels.iter().position(|&y| y > 1) {
        return Err(Error::InvalidLabel {
            row,
            value: labels[row].to_string(),
        });
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Positions i..j share the average of ranks i+1..=j; doubled: i+1+j.
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        rank_sum2 += pos_in_group * (i as u64 + 1 + j as u64);
        i = j;
    }
    Ok((rank_sum2 - n_pos * (n_pos + 1), 2 * n_pos * n_neg))
}

/// Mean binary cross-entropy with scores clamped to `[ε, 1-ε]`.
pub fn logloss(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("logloss labels", &[scores.len()], &[labels.len()]));
    }
    if scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let p = s.clamp(LOGLOSS_EPS, 1.0 - LOGLOSS_EPS);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub logloss: f64,
    pub n_instances: usize,
    pub n_parameters: usize,
    pub parameters: ParamCounts,
    pub wall_seconds: f64,
}

pub fn count_parameters(model: &Model) -> ParamCounts {
    model.param_counts()
}

/// Scores `data` in eval mode and computes both metrics.
pub fn evaluate(model: &Model, data: &EncodedDataset) -> Result<(EvalReport, Vec<f64>)> {
    let start = Instant::now();
    let scores = model.predict(data.ids().view())?.to_vec();
    let parameters = count_parameters(model);
    let report = EvalReport {
        auc: auc(&scores, data.labels())?,
        logloss: logloss(&scores, data.labels())?,
        n_instances: data.len(),
        n_parameters: parameters.total(),
        parameters,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((report, scores))
}
