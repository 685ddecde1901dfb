//! Ensemble-diversity terms over the predictions of `K` sampled models.
//!
//! Two quantities are tracked per sample:
//!
//! * the Shannon entropy of the ensemble's mean prediction, and
//! * `ln det(G·Gᵀ)`, where row `k` of `G` is model `k`'s probability vector
//!   with the true-class entry removed and scaled to unit length. The
//!   determinant is clamped below at [`LOGDET_CLAMP`], so the term lies in
//!   `[ln 1e-20, 0]` and reaches `0` exactly when the rows are orthogonal.
//!
//! Training rewards both (they enter the loss with negative sign).

use crate::autodiff::{Tape, Var, LOGDET_CLAMP};
use crate::error::{Error, Result};
use crate::linalg;

/// Per-sample diversity statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiversityTerms {
    pub entropy: f64,
    pub logdet: f64,
}

fn check_sizes(k: usize, classes: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Contract("diversity needs at least one model".into()));
    }
    if k + 1 > classes {
        return Err(Error::Contract(format!(
            "{k} models need at least {} classes for a full-rank Gram matrix, got {classes}",
            k + 1
        )));
    }
    Ok(())
}

/// Non-maximal prediction: `probs` without entry `label`.
pub fn non_maximal(probs: &[f64], label: usize) -> Vec<f64> {
    probs
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label)
        .map(|(_, &p)| p)
        .collect()
}

/// Direct evaluation of both terms for one sample.
pub fn diversity_terms(rows: &[Vec<f64>], label: usize) -> Result<DiversityTerms> {
    let k = rows.len();
    let classes = rows.first().map_or(0, Vec::len);
    check_sizes(k, classes)?;
    if rows.iter().any(|r| r.len() != classes) {
        return Err(Error::Dimension("prediction rows differ in length".into()));
    }
    if label >= classes {
        return Err(Error::Index(format!("label {label} out of 0..{classes}")));
    }
    let mean: Vec<f64> = (0..classes)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / k as f64)
        .collect();
    let entropy = -mean
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>();

    let normalized: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let v = non_maximal(r, label);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let d = normalized.first().map_or(0, Vec::len);
    let flat: Vec<f64> = normalized.concat();
    let logdet = linalg::row_lq(&flat, k, d).gram_logdet(k).max(LOGDET_CLAMP.ln());
    Ok(DiversityTerms { entropy, logdet })
}

/// Mean pairwise cosine similarity of the rows' non-maximal predictions.
/// `None` for fewer than two rows.
pub fn mean_pairwise_cosine(rows: &[Vec<f64>], label: usize) -> Option<f64> {
    if rows.len() < 2 {
        return None;
    }
    let vecs: Vec<Vec<f64>> = rows.iter().map(|r| non_maximal(r, label)).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..vecs.len() {
        for j in i + 1..vecs.len() {
            let dot: f64 = vecs[i].iter().zip(&vecs[j]).map(|(a, b)| a * b).sum();
            let na: f64 = vecs[i].iter().map(|a| a * a).sum();
            let nb: f64 = vecs[j].iter().map(|b| b * b).sum();
            let denom = (na * nb).sqrt();
            total += if denom > 0.0 { dot / denom } else { 0.0 };
            pairs += 1;
        }
    }
    Some(total / pairs as f64)
}

/// Batch mean of `H(mean_k p_k)` over `K` tensors of shape `[B×C]`.
pub fn ensemble_entropy(tape: &mut Tape, probs: &[Var]) -> Result<Var> {
    let first = *probs
        .first()
        .ok_or_else(|| Error::Contract("diversity needs at least one model".into()))?;
    let mut mean = first;
    for &p in &probs[1..] {
        mean = tape.add(mean, p)?;
    }
    let mean = tape.scale(mean, 1.0 / probs.len() as f64);
    let rows = tape.row_entropy(mean)?;
    tape.mean(rows)
}

/// Batch mean of the log-det of the Gram matrix of L2-normalized
/// non-maximal predictions.
pub fn logdet_diversity(tape: &mut Tape, probs: &[Var], labels: &[usize]) -> Result<Var> {
    let first = *probs
        .first()
        .ok_or_else(|| Error::Contract("diversity needs at least one model".into()))?;
    let classes = tape.value(first).shape().get(1).copied().unwrap_or(0);
    check_sizes(probs.len(), classes)?;
    let mut normalized = Vec::with_capacity(probs.len());
    for &p in probs {
        let rest = tape.drop_columns(p, labels)?;
        normalized.push(tape.l2_normalize_rows(rest)?);
    }
    let stacked = tape.stack_rows(&normalized)?;
    let logdets = tape.batched_gram_logdet(stacked)?;
    tape.mean(logdets)
}

/// Batch means of the ensemble entropy and the log-det term, built on the
/// tape so they can be differentiated. `probs` holds `K` tensors of shape
/// `[B×C]`.
pub fn diversity_regularizer(tape: &mut Tape, probs: &[Var], labels: &[usize]) -> Result<(Var, Var)> {
    let logdet = logdet_diversity(tape, probs, labels)?;
    let entropy = ensemble_entropy(tape, probs)?;
    Ok((entropy, logdet))
}
