//! Analytic prefill FLOPs and KV footprint of a pipeline trace.
//!
//! Only LLM-side layers are counted; encoder and projector cost is the same
//! for every pruning method at a fixed frame count.

use serde::{Deserialize, Serialize};

use crate::pipeline::PrefillTrace;
use crate::tokens::ModelConfig;

/// Declared per-layer cost model, printed with every report.
pub const COST_MODEL: &str = "flops/v1: 8*n*d^2 + 4*n^2*d + 6*n*d*d_ff";

/// FLOPs of one decoder layer over `n` tokens: QKVO projections,
/// attention score and value products, gated feed-forward.
pub fn layer_flops(n: usize, config: &ModelConfig) -> f64 {
    let n = n as f64;
    let d = config.d_model as f64;
    let ff = config.d_ff as f64;
    8.0 * n * d * d + 4.0 * n * n * d + 6.0 * n * d * ff
}

/// Total FLOPs of a prefill with the given per-layer input lengths.
pub fn sequence_flops(seq_len: &[usize], config: &ModelConfig) -> f64 {
    seq_len.iter().map(|&n| layer_flops(n, config)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub model: String,
    pub flops_per_layer: Vec<f64>,
    pub flops_total: f64,
    /// Same stack with every token kept at every layer.
    pub full_total: f64,
    pub ratio_vs_full: f64,
    pub kv_tokens_per_layer: Vec<usize>,
    pub peak_kv_tokens: usize,
}

/// Cost of per-layer lengths `seq_len` against a full-length run of
/// `full_len` tokens at every layer.
pub fn cost_of(seq_len: &[usize], full_len: usize, config: &ModelConfig) -> CostReport {
    let flops_per_layer: Vec<f64> = seq_len.iter().map(|&n| layer_flops(n, config)).collect();
    let flops_total = flops_per_layer.iter().sum();
    let full_total = seq_len.len() as f64 * layer_flops(full_len, config);
    CostReport {
        model: COST_MODEL.to_string(),
        ratio_vs_full: if full_total > 0.0 { flops_total / full_total } else { 1.0 },
        flops_per_layer,
        flops_total,
        full_total,
        kv_tokens_per_layer: seq_len.to_vec(),
        peak_kv_tokens: seq_len.iter().copied().max().unwrap_or(0),
    }
}

pub fn trace_flops(trace: &PrefillTrace, config: &ModelConfig) -> CostReport {
    cost_of(&trace.seq_len, trace.full_len(), config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::Boundaries;

    fn tiny(layers: usize) -> ModelConfig {
        ModelConfig { layers, d_model: 4, d_ff: 8, n_heads: 1, boundaries: Boundaries::new(1, 2, 2, 3) }
    }

    #[test]
    fn hand_arithmetic() {
        assert_eq!(layer_flops(0, &tiny(3)), 0.0);
        assert_eq!(layer_flops(2, &tiny(3)), 704.0);
    }

    #[test]
    fn strictly_increasing_in_length() {
        let c = ModelConfig::qwen25_omni_7b();
        assert!((0..500).all(|n| layer_flops(n + 1, &c) > layer_flops(n, &c)));
    }

    #[test]
    fn identity_has_ratio_one() {
        let r = cost_of(&[10; 5], 10, &tiny(5));
        assert_eq!(r.ratio_vs_full, 1.0);
        assert_eq!(r.peak_kv_tokens, 10);
    }

    #[test]
    fn halving_trace_matches_direct_sum() {
        let c = tiny(4);
        let lens = [64, 32, 16, 8];
        let r = cost_of(&lens, 64, &c);
        let direct: f64 = lens
            .iter()
            .map(|&n| {
                let n = n as f64;
                8.0 * n * 16.0 + 4.0 * n * n * 4.0 + 6.0 * n * 4.0 * 8.0
            })
            .sum();
        let full = 4.0 * (8.0 * 64.0 * 16.0 + 4.0 * 64.0 * 64.0 * 4.0 + 6.0 * 64.0 * 32.0);
        assert_eq!(r.flops_total, direct);
        assert!((r.ratio_vs_full - direct / full).abs() < 1e-15);
        assert_eq!(r.flops_total, r.flops_per_layer.iter().sum::<f64>());
    }
}
