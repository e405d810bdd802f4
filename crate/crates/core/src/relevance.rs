//! Saliency and query-relevance signals.

use serde::{Deserialize, Serialize};

use crate::tokens::WindowLayout;
use crate::{Error, Result};

/// Non-negative per-token weights for one (window, modality) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyVector(Vec<f64>);

impl SaliencyVector {
    /// Rejects negative or non-finite weights. An all-zero vector falls
    /// back to uniform weights.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Shape(format!("saliency weight {bad} is not a finite non-negative value")));
        }
        if !values.is_empty() && values.iter().all(|&v| v == 0.0) {
            return Ok(Self::uniform(values.len()));
        }
        Ok(Self(values))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n.max(1) as f64; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Mean attention each token receives: `value[j] = (1/n) sum_i attn[i][j]`.
pub fn mean_received_attention(attn: &[Vec<f64>]) -> Result<SaliencyVector> {
    let n = attn.len();
    if let Some(row) = attn.iter().find(|r| r.len() != n) {
        return Err(Error::Shape(format!("attention matrix is not square: {n} rows, a row of {}", row.len())));
    }
    let mut received = vec![0.0; n];
    for row in attn {
        for (acc, &a) in received.iter_mut().zip(row) {
            *acc += a;
        }
    }
    for v in &mut received {
        *v /= n as f64;
    }
    SaliencyVector::new(received)
}

/// Averages per-head attention matrices into one.
pub fn average_heads(heads: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
    let Some(first) = heads.first() else {
        return Err(Error::Shape("no attention heads".into()));
    };
    let n = first.len();
    let mut out = vec![vec![0.0; n]; n];
    for head in heads {
        if head.len() != n || head.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("attention heads disagree in shape".into()));
        }
        for (o, h) in out.iter_mut().zip(head) {
            for (a, b) in o.iter_mut().zip(h) {
                *a += b;
            }
        }
    }
    let k = heads.len() as f64;
    out.iter_mut().flatten().for_each(|v| *v /= k);
    Ok(out)
}

/// Numerically stable softmax of `logits / temperature`.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| ((x - max) / temperature).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Attention of one query over `keys` (row-major, `n x query.len()`):
/// `softmax_i(query . keys[i] * scale)`.
pub fn query_scores(query: &[f32], keys: &[f32], scale: f64) -> Result<Vec<f64>> {
    let d = query.len();
    if d == 0 || !keys.len().is_multiple_of(d) {
        return Err(Error::Shape(format!(
            "key matrix of {} values does not split into rows of {d}",
            keys.len()
        )));
    }
    if keys.is_empty() {
        return Err(Error::Shape("no keys to score".into()));
    }
    let logits: Vec<f64> = keys
        .chunks_exact(d)
        .map(|k| k.iter().zip(query).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() * scale)
        .collect();
    Ok(softmax(&logits, 1.0))
}

/// Window-level relevance to the query.
///
/// `s_v` and `s_a` each sum to one over the windows where that modality is
/// present (absent windows get 0). `s[t]` averages the two where both are
/// present and takes the single present weight otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelevanceScores {
    pub s_v: Vec<f64>,
    pub s_a: Vec<f64>,
    pub s: Vec<f64>,
    pub tau: f64,
}

impl RelevanceScores {
    pub fn windows(&self) -> usize {
        self.s.len()
    }

    /// Relevance from per-modality window weights, combining them by the
    /// presence rule above (presence = positive weight).
    pub fn from_modality_weights(s_v: Vec<f64>, s_a: Vec<f64>, tau: f64) -> Result<Self> {
        if s_v.len() != s_a.len() {
            return Err(Error::Shape(format!(
                "{} visual vs {} audio window weights",
                s_v.len(),
                s_a.len()
            )));
        }
        let s = s_v.iter().zip(&s_a).map(|(&v, &a)| combine(v > 0.0, v, a > 0.0, a)).collect();
        Ok(Self { s_v, s_a, s, tau })
    }

    /// Uniform relevance over `windows` windows.
    pub fn uniform(windows: usize, tau: f64) -> Self {
        let w = vec![1.0 / windows as f64; windows];
        Self { s_v: w.clone(), s_a: w.clone(), s: w, tau }
    }
}

fn combine(has_v: bool, v: f64, has_a: bool, a: f64) -> f64 {
    match (has_v, has_a) {
        (true, true) => 0.5 * (v + a),
        (true, false) => v,
        (false, true) => a,
        (false, false) => 0.0,
    }
}

/// Softmax over per-window means of one modality's token scores; windows
/// with no tokens are left at 0.
fn modality_weights(scores: &[f64], counts: &[usize], tau: f64) -> Vec<f64> {
    let mut means = Vec::new();
    let mut present = Vec::new();
    let mut offset = 0;
    for (t, &n) in counts.iter().enumerate() {
        if n > 0 {
            let sum: f64 = scores[offset..offset + n].iter().sum();
            means.push(sum / n as f64);
            present.push(t);
        }
        offset += n;
    }
    let mut out = vec![0.0; counts.len()];
    if present.is_empty() {
        return out;
    }
    for (t, w) in present.into_iter().zip(softmax(&means, tau)) {
        out[t] = w;
    }
    out
}

/// Per-window relevance from per-token query scores.
///
/// `scores_v` / `scores_a` list one score per visual / audio token in
/// stream order, so the first `n_v[0]` visual scores belong to window 0.
pub fn window_relevance(
    scores_v: &[f64],
    scores_a: &[f64],
    layout: &WindowLayout,
    tau: f64,
) -> Result<RelevanceScores> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature {tau} must be > 0")));
    }
    if scores_v.len() != layout.total_v() || scores_a.len() != layout.total_a() {
        return Err(Error::Shape(format!(
            "got {} visual / {} audio scores for a layout of {} / {}",
            scores_v.len(),
            scores_a.len(),
            layout.total_v(),
            layout.total_a()
        )));
    }
    let s_v = modality_weights(scores_v, &layout.n_v, tau);
    let s_a = modality_weights(scores_a, &layout.n_a, tau);
    let s = (0..layout.windows())
        .map(|t| combine(layout.n_v[t] > 0, s_v[t], layout.n_a[t] > 0, s_a[t]))
        .collect();
    Ok(RelevanceScores { s_v, s_a, s, tau })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_attention_gives_uniform_saliency() {
        let n = 5;
        let attn = vec![vec![1.0 / n as f64; n]; n];
        let s = mean_received_attention(&attn).unwrap();
        assert!(s.values().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn all_attention_on_first_token() {
        let s = mean_received_attention(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(s.values(), &[1.0, 0.0]);
    }

    #[test]
    fn non_square_attention_rejected() {
        assert!(mean_received_attention(&[vec![0.5, 0.5], vec![1.0]]).is_err());
    }

    #[test]
    fn column_means_match_direct_sum() {
        let attn = vec![vec![0.2, 0.3, 0.5], vec![0.6, 0.1, 0.3], vec![0.05, 0.9, 0.05]];
        let s = mean_received_attention(&attn).unwrap();
        let expect = [0.85 / 3.0, 1.3 / 3.0, 0.85 / 3.0];
        for (g, w) in s.values().iter().zip(expect) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    #[test]
    fn heads_are_averaged() {
        let a = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let b = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert_eq!(average_heads(&[a, b]).unwrap(), vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
    }

    #[test]
    fn identical_keys_score_uniformly() {
        let q = [0.3, -1.0, 2.0];
        let keys: Vec<f32> = [1.0, 0.5, -0.25].repeat(4);
        let s = query_scores(&q, &keys, 1.0 / 3f64.sqrt()).unwrap();
        assert!(s.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn aligned_key_wins() {
        let q = [1.0, 0.0, 0.0, 0.0];
        let keys = [0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let s = query_scores(&q, &keys, 0.5).unwrap();
        assert!(s[1] > s[0] && s[1] > s[2]);
        assert!(query_scores(&q, &[], 0.5).is_err());
    }

    #[test]
    fn single_window_and_uniform() {
        let layout = WindowLayout::uniform(1, 3, 2);
        let r = window_relevance(&[0.1, 0.5, 0.4], &[0.3, 0.7], &layout, 0.1).unwrap();
        assert_eq!((r.s_v[0], r.s_a[0], r.s[0]), (1.0, 1.0, 1.0));

        let layout = WindowLayout::uniform(4, 2, 2);
        let r = window_relevance(&[0.125; 8], &[0.125; 8], &layout, 0.1).unwrap();
        for w in [&r.s_v, &r.s_a, &r.s] {
            assert!(w.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn two_window_hand_softmax() {
        let layout = WindowLayout::uniform(2, 2, 2);
        let r = window_relevance(&[0.8, 0.8, 0.2, 0.2], &[0.25; 4], &layout, 0.1).unwrap();
        let e8 = 8f64.exp();
        let e2 = 2f64.exp();
        let v0 = e8 / (e8 + e2);
        assert!((r.s_v[0] - v0).abs() < 1e-12);
        assert!((r.s_v[1] - (1.0 - v0)).abs() < 1e-12);
        assert_eq!(r.s_a, vec![0.5, 0.5]);
        assert!((r.s[0] - (v0 + 0.5) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn absent_modality_window() {
        let layout = WindowLayout::new(vec![2, 2], vec![1, 0]).unwrap();
        let r = window_relevance(&[0.1, 0.1, 0.4, 0.4], &[1.0], &layout, 0.5).unwrap();
        assert_eq!(r.s_a, vec![1.0, 0.0]);
        assert_eq!(r.s[1], r.s_v[1]);
        assert!((r.s_v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bad_temperature() {
        let layout = WindowLayout::uniform(1, 1, 1);
        assert!(window_relevance(&[1.0], &[1.0], &layout, 0.0).is_err());
    }
}
