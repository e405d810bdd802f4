//! Query-guided top-k retention inside each window, and late removal of
//! every non-text token.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::allocator::BudgetPlan;
use crate::tokens::{Modality, TokenStream};
use crate::{Error, Result};

/// The `budget` highest-scoring indices, ties to the lower index, returned
/// in ascending order.
pub fn select_topk(scores: &[f64], budget: usize) -> Result<Vec<usize>> {
    if budget > scores.len() {
        return Err(Error::SelectionTooLarge { k: budget, n: scores.len() });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| {
        scores[j]
            .partial_cmp(&scores[i])
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    idx.truncate(budget);
    idx.sort_unstable();
    Ok(idx)
}

/// Survivors of one drop layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub layer: usize,
    /// Original positions of surviving visual/audio tokens, ascending.
    pub kept: Vec<u64>,
    /// Dropped `[visual, audio]` counts per window.
    pub dropped: Vec<[usize; 2]>,
    /// Budget plan applied, absent for late removal.
    pub plan: Option<BudgetPlan>,
}

/// Applies `plan` to `stream`, keeping the top-scoring tokens of every
/// (window, modality) group.
///
/// `scores_v` / `scores_a` hold one score per visual / audio row of the
/// stream, in stream order. Text rows pass through untouched.
pub fn apply_budget(
    stream: &TokenStream,
    layer: usize,
    plan: &BudgetPlan,
    scores_v: &[f64],
    scores_a: &[f64],
) -> Result<(TokenStream, LayerSelection)> {
    let layout = stream.layout();
    let windows = layout.windows();
    if plan.windows() != windows {
        return Err(Error::Shape(format!("plan covers {} windows, stream has {windows}", plan.windows())));
    }
    if scores_v.len() != layout.total_v() || scores_a.len() != layout.total_a() {
        return Err(Error::Shape(format!(
            "got {} visual / {} audio scores for {} / {} tokens",
            scores_v.len(),
            scores_a.len(),
            layout.total_v(),
            layout.total_a()
        )));
    }
    for t in 0..windows {
        if plan.b_v[t] > layout.n_v[t] || plan.b_a[t] > layout.n_a[t] {
            return Err(Error::Shape(format!(
                "window {t}: plan keeps ({}, {}) of ({}, {}) tokens",
                plan.b_v[t], plan.b_a[t], layout.n_v[t], layout.n_a[t]
            )));
        }
    }

    let mut keep = vec![false; stream.len()];
    let mut dropped = vec![[0usize; 2]; windows];
    for (slot, m, scores, budgets) in [
        (0, Modality::Visual, scores_v, &plan.b_v),
        (1, Modality::Audio, scores_a, &plan.b_a),
    ] {
        let rows = stream.rows_of(m);
        let mut start = 0;
        while start < rows.len() {
            let w = stream.window_id(rows[start]).expect("non-text rows carry a window") as usize;
            let mut end = start;
            while end < rows.len() && stream.window_id(rows[end]) == Some(w as u32) {
                end += 1;
            }
            let chosen = select_topk(&scores[start..end], budgets[w])?;
            for i in chosen {
                keep[rows[start + i]] = true;
            }
            dropped[w][slot] = (end - start) - budgets[w];
            start = end;
        }
    }

    let rows: Vec<usize> = (0..stream.len())
        .filter(|&i| keep[i] || stream.modality(i).is_text())
        .collect();
    let out = stream.select_rows(&rows);
    let kept = (0..out.len())
        .filter(|&i| !out.modality(i).is_text())
        .map(|i| out.position(i))
        .collect();
    Ok((out, LayerSelection { layer, kept, dropped, plan: Some(plan.clone()) }))
}

/// Drops every visual and audio token.
pub fn late_removal(stream: &TokenStream) -> TokenStream {
    let rows = stream.rows_of(Modality::Text);
    stream.select_rows(&rows)
}
