//! Stage I: attention-weighted greedy max-min diversity selection, run
//! independently for every (window, modality) group.
//!
//! The weighted distance from a selected token `i` to a candidate `j` is
//! `(1 - cos(z_i, z_j)) * w_j`, so a candidate's score is its weight times
//! its cosine distance to the closest already-selected token. Ties at every
//! step go to the lowest index.

use serde::{Deserialize, Serialize};

use crate::relevance::SaliencyVector;
use crate::tokens::{validate_stream, Modality, RetentionSpec, TokenStream, WindowLayout};
use crate::{Error, Result};

/// Outcome of [`greedy_maxmin`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GreedySelection {
    /// Picked indices in pick order.
    pub order: Vec<usize>,
    /// Rows with zero norm; their cosine distance is taken as 1.
    pub zero_norm_rows: Vec<usize>,
}

impl GreedySelection {
    pub fn sorted(&self) -> Vec<usize> {
        let mut v = self.order.clone();
        v.sort_unstable();
        v
    }
}

/// Cosine distance matrix of the rows of `embeddings` (row-major, `dim`
/// columns). Zero-norm rows sit at distance 1 from every other row.
pub fn cosine_distances(embeddings: &[f32], dim: usize) -> (Vec<f64>, Vec<usize>) {
    let n = embeddings.len() / dim;
    let rows: Vec<&[f32]> = embeddings.chunks_exact(dim).collect();
    let norms: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt())
        .collect();
    let zero: Vec<usize> = (0..n).filter(|&i| norms[i] == 0.0).collect();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = if norms[i] == 0.0 || norms[j] == 0.0 {
                1.0
            } else {
                let dot: f64 = rows[i].iter().zip(rows[j]).map(|(&a, &b)| a as f64 * b as f64).sum();
                (1.0 - dot / (norms[i] * norms[j])).clamp(0.0, 2.0)
            };
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    (dist, zero)
}

/// Index of the largest score, lowest index on ties; skips `taken`.
fn argmax(scores: &[f64], taken: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if taken[i] {
            continue;
        }
        match best {
            Some(b) if s <= scores[b] => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Greedy max-min selection of `k` of the `n` rows of `embeddings`.
///
/// Seeds with the row whose weighted distance to its nearest neighbour is
/// largest, then repeatedly adds the row maximizing its weighted distance
/// to the closest selected row.
pub fn greedy_maxmin(embeddings: &[f32], dim: usize, weights: &[f64], k: usize) -> Result<GreedySelection> {
    if dim == 0 || !embeddings.len().is_multiple_of(dim) {
        return Err(Error::Shape(format!("{} values do not form rows of {dim}", embeddings.len())));
    }
    let n = embeddings.len() / dim;
    if weights.len() != n {
        return Err(Error::Shape(format!("{} weights for {n} tokens", weights.len())));
    }
    if k > n {
        return Err(Error::SelectionTooLarge { k, n });
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::Shape(format!("weight {w} is not a finite non-negative value")));
    }
    let (dist, zero_norm_rows) = cosine_distances(embeddings, dim);
    if k == 0 {
        return Ok(GreedySelection { order: Vec::new(), zero_norm_rows });
    }
    // scale-free: uniform weights become exactly 1 and compare like plain distances
    let w_max = weights.iter().copied().fold(0.0, f64::max);
    let weights: Vec<f64> = if w_max > 0.0 { weights.iter().map(|w| w / w_max).collect() } else { vec![1.0; n] };

    let mut taken = vec![false; n];
    let nearest: Vec<f64> = (0..n)
        .map(|j| {
            (0..n)
                .filter(|&i| i != j)
                .map(|i| dist[i * n + j])
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    // a lone token has no neighbour; any finite score works
    let seed_scores: Vec<f64> = (0..n)
        .map(|j| if nearest[j].is_finite() { nearest[j] * weights[j] } else { weights[j] })
        .collect();
    let seed = argmax(&seed_scores, &taken).expect("n >= k >= 1");
    taken[seed] = true;
    let mut order = vec![seed];
    let mut min_dist: Vec<f64> = (0..n).map(|j| dist[seed * n + j]).collect();

    while order.len() < k {
        let scores: Vec<f64> = (0..n).map(|j| min_dist[j] * weights[j]).collect();
        let pick = argmax(&scores, &taken).expect("candidates remain while len < k <= n");
        taken[pick] = true;
        order.push(pick);
        for j in 0..n {
            let d = dist[pick * n + j];
            if d < min_dist[j] {
                min_dist[j] = d;
            }
        }
    }
    Ok(GreedySelection { order, zero_norm_rows })
}

/// Tokens kept from a group of `n` at ratio `r`: `floor(r n)`, at least one
/// when `n >= 1` and `r > 0`.
pub fn keep_count(n: usize, r: f64) -> usize {
    if n == 0 || r <= 0.0 {
        return 0;
    }
    // guard against products like 0.29999999 * 10
    let k = (r * n as f64 + 1e-9).floor() as usize;
    k.clamp(1, n)
}

/// One (window, modality) group handed to a saliency provider.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub window: usize,
    pub modality: Modality,
    /// Storage rows of the group in the input stream.
    pub rows: Vec<usize>,
}

/// Outcome of [`win_div_prune`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Original positions of the kept visual/audio tokens, ascending.
    pub kept: Vec<u64>,
    /// Kept `[visual, audio]` counts per window.
    pub per_window_kept: Vec<[usize; 2]>,
    /// Storage rows of the input stream that survive, text included.
    #[serde(skip)]
    pub rows: Vec<usize>,
    /// Storage rows with zero-norm embeddings.
    pub zero_norm_rows: Vec<usize>,
}

impl SelectionResult {
    pub fn kept_v(&self) -> usize {
        self.per_window_kept.iter().map(|c| c[0]).sum()
    }

    pub fn kept_a(&self) -> usize {
        self.per_window_kept.iter().map(|c| c[1]).sum()
    }
}

/// Stage I over a whole stream. Text rows are always kept.
///
/// `saliency` returns the weights for a group, or `None` for uniform
/// weights (plain diversity selection).
pub fn win_div_prune<F>(
    stream: &TokenStream,
    layout: &WindowLayout,
    spec: &RetentionSpec,
    saliency: F,
) -> Result<SelectionResult>
where
    F: FnMut(&Group) -> Option<SaliencyVector>,
{
    win_div_prune_with_ratios(stream, layout, spec.stage1_ratios(), saliency)
}

/// [`win_div_prune`] with explicit `(visual, audio)` keep ratios.
pub fn win_div_prune_with_ratios<F>(
    stream: &TokenStream,
    layout: &WindowLayout,
    ratios: (f64, f64),
    mut saliency: F,
) -> Result<SelectionResult>
where
    F: FnMut(&Group) -> Option<SaliencyVector>,
{
    let report = validate_stream(stream, layout);
    if !report.passed() {
        return Err(Error::InvalidStream(report));
    }
    let (rs_v, rs_a) = ratios;
    for r in [rs_v, rs_a] {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::Config(format!("keep ratio {r} outside [0, 1]")));
        }
    }
    let dim = stream.dim();
    let mut keep = vec![false; stream.len()];
    let mut per_window_kept = vec![[0usize; 2]; layout.windows()];
    let mut zero_norm_rows = Vec::new();

    for t in 0..layout.windows() {
        for (slot, (m, r)) in [(Modality::Visual, rs_v), (Modality::Audio, rs_a)].into_iter().enumerate() {
            let rows = stream.group_rows(t, m);
            if rows.is_empty() {
                continue;
            }
            let k = keep_count(rows.len(), r);
            let group = Group { window: t, modality: m, rows };
            let weights = match saliency(&group) {
                Some(w) if w.len() == group.rows.len() => w,
                Some(w) => {
                    return Err(Error::Shape(format!(
                        "window {t} {m}: {} saliency weights for {} tokens",
                        w.len(),
                        group.rows.len()
                    )))
                }
                None => SaliencyVector::uniform(group.rows.len()),
            };
            let mut emb = Vec::with_capacity(group.rows.len() * dim);
            for &r in &group.rows {
                emb.extend_from_slice(stream.row(r));
            }
            let sel = greedy_maxmin(&emb, dim, weights.values(), k)?;
            zero_norm_rows.extend(sel.zero_norm_rows.iter().map(|&i| group.rows[i]));
            for i in sel.order {
                keep[group.rows[i]] = true;
            }
            per_window_kept[t][slot] = k;
        }
    }

    let mut rows = Vec::new();
    let mut kept = Vec::new();
    for i in 0..stream.len() {
        if stream.modality(i).is_text() {
            rows.push(i);
        } else if keep[i] {
            rows.push(i);
            kept.push(stream.position(i));
        }
    }
    zero_norm_rows.sort_unstable();
    Ok(SelectionResult { kept, per_window_kept, rows, zero_norm_rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_when_k_equals_n() {
        let emb = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let sel = greedy_maxmin(&emb, 2, &[1.0; 3], 3).unwrap();
        assert_eq!(sel.sorted(), vec![0, 1, 2]);
    }

    #[test]
    fn orthogonal_token_and_one_of_the_triple() {
        let emb = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let sel = greedy_maxmin(&emb, 2, &[0.25; 4], 2).unwrap();
        assert_eq!(sel.order, vec![2, 0]);
    }

    #[test]
    fn too_many_requested() {
        assert!(matches!(
            greedy_maxmin(&[1.0, 2.0], 1, &[1.0, 1.0], 3),
            Err(Error::SelectionTooLarge { k: 3, n: 2 })
        ));
    }

    #[test]
    fn zero_norm_rows_reported() {
        let emb = [0.0, 0.0, 1.0, 0.0, 1.0, 0.1];
        let sel = greedy_maxmin(&emb, 2, &[1.0; 3], 2).unwrap();
        assert_eq!(sel.zero_norm_rows, vec![0]);
        assert_eq!(sel.order[0], 0);
    }

    #[test]
    fn weight_favours_salient_candidate() {
        // rows 1 and 2 are equally far from the seed; the heavier one wins
        let emb = [1.0, 0.0, 0.0, 1.0, 0.0, -1.0];
        let sel = greedy_maxmin(&emb, 2, &[1.0, 0.2, 0.9], 2).unwrap();
        assert_eq!(sel.order, vec![0, 2]);
    }

    #[test]
    fn keep_counts() {
        assert_eq!(keep_count(288, 1.4 * 0.30), 120);
        assert_eq!(keep_count(50, 1.4 * 0.65), 45);
        assert_eq!(keep_count(10, 0.3), 3);
        assert_eq!(keep_count(3, 0.01), 1);
        assert_eq!(keep_count(3, 0.0), 0);
        assert_eq!(keep_count(0, 0.5), 0);
        assert_eq!(keep_count(4, 1.0), 4);
    }

    fn two_window_stream() -> TokenStream {
        // per window: 4 visual, 2 audio; then 2 text
        let mut modality = Vec::new();
        let mut window = Vec::new();
        for t in 0..2u32 {
            modality.extend([Modality::Visual; 4]);
            modality.extend([Modality::Audio; 2]);
            window.extend([Some(t); 6]);
        }
        modality.extend([Modality::Text; 2]);
        window.extend([None, None]);
        let n = modality.len();
        let emb: Vec<f32> = (0..n * 3).map(|i| ((i * 7919) % 13) as f32 - 6.0).collect();
        TokenStream::new(3, 2, emb, modality, window, (0..n as u64).collect()).unwrap()
    }

    #[test]
    fn exact_arithmetic_two_windows() {
        let s = two_window_stream();
        let spec = RetentionSpec::new(0.25, 0.25, 2.0, 0.1);
        let res = win_div_prune(&s, &s.layout(), &spec, |_| None).unwrap();
        assert_eq!(res.per_window_kept, vec![[2, 1], [2, 1]]);
        assert_eq!(res.kept.len(), 6);
        assert_eq!(res.rows.len(), 8);
        assert!(res.kept.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn clipped_ratios_are_identity() {
        let s = two_window_stream();
        let spec = RetentionSpec::new(0.8, 0.9, 1.4, 0.1);
        let res = win_div_prune(&s, &s.layout(), &spec, |_| None).unwrap();
        assert_eq!(res.rows, (0..s.len()).collect::<Vec<_>>());
    }

    #[test]
    fn invalid_stream_rejected() {
        let s = two_window_stream();
        let layout = WindowLayout::uniform(2, 5, 2);
        let spec = RetentionSpec::new(0.25, 0.25, 2.0, 0.1);
        assert!(matches!(win_div_prune(&s, &layout, &spec, |_| None), Err(Error::InvalidStream(_))));
    }
}
