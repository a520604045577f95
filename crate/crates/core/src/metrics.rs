//! Ranking and calibration metrics.

use serde::{Deserialize, Serialize};

use crate::error::{DlfError, Result};

/// Probabilities are clipped to `[PROB_CLIP, 1 - PROB_CLIP]` before taking logs.
pub const PROB_CLIP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub logloss: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl EvalReport {
    pub fn compute(scores: &[f64], labels: &[f64]) -> Result<Self> {
        let n_pos = labels.iter().filter(|&&y| y > 0.5).count();
        Ok(EvalReport {
            auc: auc(scores, labels)?,
            logloss: logloss(scores, labels)?,
            n_pos,
            n_neg: labels.len() - n_pos,
        })
    }
}

/// Area under the ROC curve via the Mann-Whitney rank-sum statistic. Tied
/// scores share their average rank.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(scores, labels)?;
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(DlfError::Numeric(format!("score {i} is NaN")));
    }
    let n_pos = labels.iter().filter(|&&y| y > 0.5).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(DlfError::MetricUndefined(format!(
            "AUC needs both classes (positives {n_pos}, negatives {n_neg})"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut pos_rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks are 1-based: the tie group covers ranks start+1 ..= end
        let avg_rank = (start + 1 + end) as f64 / 2.0;
        let positives = order[start..end].iter().filter(|&&i| labels[i] > 0.5).count();
        pos_rank_sum += avg_rank * positives as f64;
        start = end;
    }

    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean negative log-likelihood of binary labels.
pub fn logloss(scores: &[f64], labels: &[f64]) -> Result<f64> {
    clipped_bce(scores, labels)
}

/// Binary cross-entropy on probabilities clipped to `[1e-7, 1 - 1e-7]`.
pub fn clipped_bce(probs: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(probs, labels)?;
    if probs.is_empty() {
        return Err(DlfError::shape("cross-entropy of an empty vector"));
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / probs.len() as f64)
}

fn check_lengths(scores: &[f64], labels: &[f64]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(DlfError::shape(format!("{} scores against {} labels", scores.len(), labels.len())));
    }
    Ok(())
}
