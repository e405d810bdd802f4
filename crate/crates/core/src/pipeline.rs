//! End-to-end three-stage pruning over a mock L-layer prefill.
//!
//! The mock model only answers attention queries; no hidden states are
//! computed. Stage I runs once before layer 1, Stage II runs at every
//! layer whose scheduled ratio strictly drops, and the non-text stream is
//! removed at the first layer where both modalities are scheduled at zero.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::allocator::allocate;
use crate::divprune::{win_div_prune_with_ratios, SelectionResult};
use crate::relevance::{mean_received_attention, query_scores, window_relevance, SaliencyVector};
use crate::schedule::{build_modality_schedules, strict_drops, ModalitySchedules};
use crate::selector::{apply_budget, late_removal, LayerSelection};
use crate::tokens::{validate_stream, Modality, ModelConfig, RetentionSpec, TokenStream};
use crate::{Error, Result};

/// Attention answers the pipeline needs from a (mock) model.
pub trait AttentionSource {
    /// Stage I weights for the group at storage `rows`; `None` means
    /// uniform weights.
    fn saliency(&self, stream: &TokenStream, rows: &[usize]) -> Result<Option<SaliencyVector>>;

    /// Last-text-token attention over `rows` at `layer`, normalized over
    /// those rows.
    fn query_scores(&self, layer: usize, stream: &TokenStream, rows: &[usize]) -> Result<Vec<f64>>;
}

/// Attention derived from the stream itself: keys are the token
/// embeddings and the query is an explicit vector or the last text row.
/// Stage I weights come from stored attention matrices or per-token
/// saliency when available.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingAttention {
    pub query: Option<Vec<f32>>,
    /// Per-position Stage I weight.
    pub saliency: Option<BTreeMap<u64, f64>>,
    /// Encoder attention per (window, modality) group.
    pub attention: BTreeMap<(u32, Modality), Vec<Vec<f64>>>,
}

impl AttentionSource for EmbeddingAttention {
    fn saliency(&self, stream: &TokenStream, rows: &[usize]) -> Result<Option<SaliencyVector>> {
        let Some(&first) = rows.first() else { return Ok(None) };
        let key = (stream.window_id(first).unwrap_or(0), stream.modality(first));
        if let Some(attn) = self.attention.get(&key) {
            if attn.len() != rows.len() {
                return Err(Error::Shape(format!(
                    "window {} {} attention is {}x{} for {} tokens",
                    key.0,
                    key.1,
                    attn.len(),
                    attn.len(),
                    rows.len()
                )));
            }
            return mean_received_attention(attn).map(Some);
        }
        if let Some(map) = &self.saliency {
            let values = rows
                .iter()
                .map(|&r| map.get(&stream.position(r)).copied().unwrap_or(0.0))
                .collect();
            return SaliencyVector::new(values).map(Some);
        }
        Ok(None)
    }

    fn query_scores(&self, _layer: usize, stream: &TokenStream, rows: &[usize]) -> Result<Vec<f64>> {
        let query: &[f32] = match &self.query {
            Some(q) => q,
            None => {
                let r = stream
                    .last_text_row()
                    .ok_or_else(|| Error::Shape("stream has no text token to act as query".into()))?;
                stream.row(r)
            }
        };
        if query.len() != stream.dim() {
            return Err(Error::Shape(format!("query of length {} for dimension {}", query.len(), stream.dim())));
        }
        let mut keys = Vec::with_capacity(rows.len() * stream.dim());
        for &r in rows {
            keys.extend_from_slice(stream.row(r));
        }
        query_scores(query, &keys, 1.0 / (stream.dim() as f64).sqrt())
    }
}

/// Per-layer ratios for both modalities plus the Stage I ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub stage1_v: f64,
    pub stage1_a: f64,
    pub trr_v: Vec<f64>,
    pub trr_a: Vec<f64>,
}

impl LayerPlan {
    pub fn from_schedules(s: &ModalitySchedules) -> Self {
        Self {
            stage1_v: s.visual.r_s,
            stage1_a: s.audio.r_s,
            trr_v: s.visual.per_layer_trr.clone(),
            trr_a: s.audio.per_layer_trr.clone(),
        }
    }

    /// Layers where either ratio strictly drops.
    pub fn drop_layers(&self) -> Vec<usize> {
        let mut v = strict_drops(self.stage1_v, &self.trr_v);
        v.extend(strict_drops(self.stage1_a, &self.trr_a));
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Record of one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefillTrace {
    pub config: ModelConfig,
    pub windows: usize,
    pub n_v: usize,
    pub n_a: usize,
    pub n_q: usize,
    pub tau: f64,
    pub plan: LayerPlan,
    /// Schedules the plan came from; absent for explicit plans.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedules: Option<ModalitySchedules>,
    /// Sequence length entering each layer; index `l - 1` is layer `l`.
    pub seq_len: Vec<usize>,
    pub retained_v: Vec<usize>,
    pub retained_a: Vec<usize>,
    pub stage1: SelectionResult,
    pub selections: Vec<LayerSelection>,
}

impl PrefillTrace {
    pub fn layers(&self) -> usize {
        self.seq_len.len()
    }

    /// Unpruned sequence length.
    pub fn full_len(&self) -> usize {
        self.n_v + self.n_a + self.n_q
    }

    /// Per-modality tolerance on [`mean_retention`]: up to `T` tokens of
    /// rounding per layer that keeps any tokens.
    pub fn retention_slack(&self) -> (f64, f64) {
        let l = self.layers() as f64;
        let t = self.windows as f64;
        let live = |trr: &[f64]| trr.iter().filter(|&&r| r > 0.0).count() as f64;
        let slack = |count: f64, n: usize| if n == 0 { 0.0 } else { count * t / (l * n as f64) };
        (slack(live(&self.plan.trr_v), self.n_v), slack(live(&self.plan.trr_a), self.n_a))
    }
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub output: TokenStream,
    pub trace: PrefillTrace,
}

/// Runs all three stages with schedules derived from `spec`.
pub fn run_pipeline<A: AttentionSource + ?Sized>(
    stream: &TokenStream,
    source: &A,
    config: &ModelConfig,
    spec: &RetentionSpec,
) -> Result<PipelineRun> {
    spec.validate()?;
    config.validate()?;
    let schedules = build_modality_schedules(config, spec)?;
    let mut run = run_scheduled(stream, source, config, &LayerPlan::from_schedules(&schedules), spec.tau)?;
    run.trace.schedules = Some(schedules);
    Ok(run)
}

/// Runs the three stages with an explicit per-layer plan.
pub fn run_scheduled<A: AttentionSource + ?Sized>(
    stream: &TokenStream,
    source: &A,
    config: &ModelConfig,
    plan: &LayerPlan,
    tau: f64,
) -> Result<PipelineRun> {
    config.validate()?;
    let layers = config.layers;
    if plan.trr_v.len() != layers || plan.trr_a.len() != layers {
        return Err(Error::Shape(format!(
            "plan covers {} / {} layers, model has {layers}",
            plan.trr_v.len(),
            plan.trr_a.len()
        )));
    }
    let layout = stream.layout();
    let report = validate_stream(stream, &layout);
    if !report.passed() {
        return Err(Error::InvalidStream(report));
    }
    let (n_v, n_a) = (layout.total_v(), layout.total_a());
    let n_q = stream.count(Modality::Text);

    let mut saliency_err = None;
    let stage1 = win_div_prune_with_ratios(stream, &layout, (plan.stage1_v, plan.stage1_a), |g| {
        match source.saliency(stream, &g.rows) {
            Ok(s) => s,
            Err(e) => {
                saliency_err.get_or_insert(e);
                None
            }
        }
    })?;
    if let Some(e) = saliency_err {
        return Err(e);
    }
    let mut current = stream.select_rows(&stage1.rows);

    let mut seq_len = Vec::with_capacity(layers);
    let mut retained_v = Vec::with_capacity(layers);
    let mut retained_a = Vec::with_capacity(layers);
    let mut selections = Vec::new();
    let (mut prev_v, mut prev_a) = (plan.stage1_v, plan.stage1_a);

    for layer in 1..=layers {
        let (rv, ra) = (plan.trr_v[layer - 1], plan.trr_a[layer - 1]);
        let cur = current.layout();
        let non_text = cur.total();
        if rv == 0.0 && ra == 0.0 {
            if non_text > 0 {
                let dropped = (0..cur.windows()).map(|t| [cur.n_v[t], cur.n_a[t]]).collect();
                current = late_removal(&current);
                selections.push(LayerSelection { layer, kept: Vec::new(), dropped, plan: None });
            }
        } else if rv < prev_v || ra < prev_a {
            // Stage I floors can leave fewer tokens than the scheduled ratio
            let eff = |r: f64, have: usize, total: usize| {
                if total == 0 {
                    0.0
                } else {
                    r.min(have as f64 / total as f64)
                }
            };
            let r_v = eff(rv, cur.total_v(), n_v);
            let r_a = eff(ra, cur.total_a(), n_a);
            let rows_v = current.rows_of(Modality::Visual);
            let rows_a = current.rows_of(Modality::Audio);
            let scores_v = if rows_v.is_empty() { Vec::new() } else { source.query_scores(layer, &current, &rows_v)? };
            let scores_a = if rows_a.is_empty() { Vec::new() } else { source.query_scores(layer, &current, &rows_a)? };
            let rel = window_relevance(&scores_v, &scores_a, &cur, tau)?;
            let budget = allocate(&rel, r_v, r_a, (n_v, n_a), &cur)?;
            let (next, selection) = apply_budget(&current, layer, &budget, &scores_v, &scores_a)?;
            current = next;
            selections.push(selection);
        }
        prev_v = rv;
        prev_a = ra;
        seq_len.push(current.len());
        retained_v.push(current.count(Modality::Visual));
        retained_a.push(current.count(Modality::Audio));
    }

    let trace = PrefillTrace {
        config: config.clone(),
        windows: layout.windows(),
        n_v,
        n_a,
        n_q,
        tau,
        plan: plan.clone(),
        schedules: None,
        seq_len,
        retained_v,
        retained_a,
        stage1,
        selections,
    };
    Ok(PipelineRun { output: current, trace })
}

/// Realized layer-mean retention `(1/L) sum_l retained_m[l] / N_m` per
/// modality; 0 for an absent modality.
pub fn mean_retention(trace: &PrefillTrace) -> (f64, f64) {
    let mean = |retained: &[usize], n: usize| {
        if n == 0 || retained.is_empty() {
            0.0
        } else {
            retained.iter().map(|&r| r as f64 / n as f64).sum::<f64>() / retained.len() as f64
        }
    };
    (mean(&trace.retained_v, trace.n_v), mean(&trace.retained_a, trace.n_a))
}
