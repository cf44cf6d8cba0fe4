//! Ranking metrics: ROC-AUC per task and macro-averaged over tasks.

use crate::error::{Error, Result};

/// Probability that a uniformly random positive outscores a uniformly random
/// negative, ties counting one half (Mann-Whitney). Computed from tie-averaged
/// ranks in O(n log n).
pub fn roc_auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dimension(
            "roc_auc",
            format!("{} labels", scores.len()),
            format!("{}", labels.len()),
        ));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count();
    let n_neg = labels.iter().filter(|&&y| y == 0.0).count();
    if n_pos + n_neg != labels.len() {
        return Err(Error::invalid("roc_auc", "labels must be 0 or 1"));
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid(
            "roc_auc",
            "needs at least one positive and one negative",
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("scores must not be NaN"));
    // Tie-averaged ranks, 1-based.
    let mut rank = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            rank[idx] = avg;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = labels
        .iter()
        .zip(&rank)
        .filter(|(&y, _)| y == 1.0)
        .map(|(_, &r)| r)
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Per-task AUC over observed labels; `None` for tasks whose observed
/// labels are single-class (or entirely unobserved). `scores` and `labels`
/// are n_instances x n_tasks row-major; `mask` marks observed labels.
pub fn per_task_roc_auc(
    scores: &[f64],
    labels: &[f64],
    mask: &[f64],
    n_tasks: usize,
) -> Result<Vec<Option<f64>>> {
    if n_tasks == 0 || scores.len() != labels.len() || scores.len() != mask.len() {
        return Err(Error::invalid("per_task_roc_auc", "mismatched buffers"));
    }
    let n = scores.len() / n_tasks;
    let mut out = Vec::with_capacity(n_tasks);
    for t in 0..n_tasks {
        let mut s = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            if mask[i * n_tasks + t] != 0.0 {
                s.push(scores[i * n_tasks + t]);
                y.push(labels[i * n_tasks + t]);
            }
        }
        let has_pos = y.iter().any(|&v| v == 1.0);
        let has_neg = y.iter().any(|&v| v == 0.0);
        if !has_pos || !has_neg {
            out.push(None);
            continue;
        }
        out.push(Some(roc_auc(&s, &y)?));
    }
    Ok(out)
}

/// Mean AUC over tasks, skipping tasks whose observed labels are single-class.
/// Errors when every task is skipped.
pub fn macro_roc_auc(
    scores: &[f64],
    labels: &[f64],
    mask: &[f64],
    n_tasks: usize,
) -> Result<f64> {
    let per_task = per_task_roc_auc(scores, labels, mask, n_tasks)?;
    let used: Vec<f64> = per_task.into_iter().flatten().collect();
    if used.is_empty() {
        return Err(Error::invalid(
            "macro_roc_auc",
            "every task was single-class or unobserved",
        ));
    }
    Ok(used.iter().sum::<f64>() / used.len() as f64)
}
