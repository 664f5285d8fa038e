use std::cmp::Ordering;

use crate::error::{CcfError, Result};

/// Rank-based ROC AUC (Mann–Whitney U) with average ranks for tied scores:
/// the probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(CcfError::invalid(
            "auc",
            format!("{} scores for {} labels", scores.len(), labels.len()),
        ));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CcfError::AucUndefined);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));

    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tie group i..=j shares their average
        let avg = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        pos_rank_sum += avg * pos_in_group as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Relative AUC improvement over a base model, in percent:
/// `((measured − 0.5) / (base − 0.5) − 1) × 100`.
pub fn rela_impr(measured_auc: f64, base_auc: f64) -> Result<f64> {
    if base_auc <= 0.5 {
        return Err(CcfError::BaseAtChance(base_auc));
    }
    Ok(((measured_auc - 0.5) / (base_auc - 0.5) - 1.0) * 100.0)
}
