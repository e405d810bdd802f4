//! Block-wise per-layer retention schedule.
//!
//! Layers are 1-based. The shallow block `[1, L_s]` keeps the Stage I ratio
//! `r_s = min(1, lambda * R)`, the middle block is split into sub-blocks
//! `(L_s, L_m1)`, `[L_m1, L_m2)`, `[L_m2, L_l)` whose ratios fall by
//! `delta`, `delta * e` and `delta * e^2`, and the late block `[L_l, L]`
//! keeps nothing. `delta` is fixed by requiring the layer-mean ratio to
//! equal `R`.

use std::f64::consts::E;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::tokens::{Boundaries, Modality, ModelConfig, RetentionSpec};
use crate::{Error, Result};

/// Negative `r_m3` or `delta` of this magnitude is rounding noise and is
/// snapped to zero; anything larger is infeasible.
const SNAP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    Shallow,
    Middle1,
    Middle2,
    Middle3,
    Late,
}

impl Block {
    pub fn of(layer: usize, b: &Boundaries) -> Block {
        if layer <= b.shallow {
            Block::Shallow
        } else if layer < b.mid1 {
            Block::Middle1
        } else if layer < b.mid2 {
            Block::Middle2
        } else if layer < b.late {
            Block::Middle3
        } else {
            Block::Late
        }
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Block::Shallow => "shallow",
            Block::Middle1 => "middle1",
            Block::Middle2 => "middle2",
            Block::Middle3 => "middle3",
            Block::Late => "late",
        })
    }
}

/// Layer counts of the five blocks, shallow first.
fn block_widths(config: &ModelConfig) -> [usize; 5] {
    let b = config.boundaries;
    [
        b.shallow,
        b.mid1 - b.shallow - 1,
        b.mid2 - b.mid1,
        b.late - b.mid2,
        config.layers - b.late + 1,
    ]
}

/// The constant `C = L_s + 1 + e L_m1 + e^2 L_m2 - (1 + e + e^2) L_l`.
pub fn decay_constant(b: &Boundaries) -> f64 {
    let e2 = E * E;
    b.shallow as f64 + 1.0 + E * b.mid1 as f64 + e2 * b.mid2 as f64 - (1.0 + E + e2) * b.late as f64
}

/// Sub-block ratios `(r_m1, r_m2, r_m3)` for a given `r_s` and `delta`.
fn decay(r_s: f64, delta: f64) -> [f64; 3] {
    let r1 = r_s - delta;
    let r2 = r1 - delta * E;
    let r3 = r2 - delta * E * E;
    [r1, r2, r3]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaSolution {
    pub delta: f64,
    pub c: f64,
}

fn check_inputs(config: &ModelConfig, ratio: f64, lambda: f64) -> Result<()> {
    config.validate()?;
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("ratio {ratio} outside [0, 1]")));
    }
    if !(lambda >= 1.0) || !lambda.is_finite() {
        return Err(Error::Config(format!("lambda {lambda} must be >= 1")));
    }
    Ok(())
}

/// Closed-form decay scale `delta = (L - L_l lambda + lambda) R / C`.
///
/// When `lambda * R > 1` the shallow ratio is clipped to 1, the closed
/// form no longer applies and the budget constraint is solved by
/// [`delta_oracle`] instead.
pub fn solve_delta(config: &ModelConfig, ratio: f64, lambda: f64) -> Result<DeltaSolution> {
    check_inputs(config, ratio, lambda)?;
    let c = decay_constant(&config.boundaries);
    if ratio == 0.0 {
        return Ok(DeltaSolution { delta: 0.0, c });
    }
    if lambda * ratio > 1.0 {
        let delta = delta_oracle(config, ratio, lambda)?;
        return Ok(DeltaSolution { delta, c });
    }
    let l = config.layers as f64;
    let late = config.boundaries.late as f64;
    let mut delta = (l - late * lambda + lambda) * ratio / c;
    if delta < 0.0 {
        if delta > -SNAP {
            delta = 0.0;
        } else {
            return Err(Error::InfeasibleSchedule(format!(
                "delta = {delta:.6} < 0: lambda = {lambda} is too small for the shallow and middle blocks to carry the budget"
            )));
        }
    }
    let r3 = decay(lambda * ratio, delta)[2];
    if r3 < -SNAP {
        return Err(Error::InfeasibleSchedule(format!(
            "r_m3 = {r3:.6} < 0: lambda = {lambda} front-loads more budget than the middle block can shed"
        )));
    }
    Ok(DeltaSolution { delta, c })
}

/// Layer-mean ratio of the block schedule, summed block by block.
fn mean_trr(widths: &[usize; 5], layers: usize, r_s: f64, delta: f64) -> f64 {
    let [r1, r2, r3] = decay(r_s, delta);
    (widths[0] as f64 * r_s + widths[1] as f64 * r1 + widths[2] as f64 * r2 + widths[3] as f64 * r3)
        / layers as f64
}

/// Bisection on `delta` in `[0, r_s]` against the block-by-block layer mean.
///
/// Independent of the closed form; used to cross-check it and to solve the
/// clipped `r_s = 1` case.
pub fn delta_oracle(config: &ModelConfig, ratio: f64, lambda: f64) -> Result<f64> {
    check_inputs(config, ratio, lambda)?;
    if ratio == 0.0 {
        return Ok(0.0);
    }
    let widths = block_widths(config);
    let r_s = (lambda * ratio).min(1.0);
    let f = |d: f64| mean_trr(&widths, config.layers, r_s, d) - ratio;

    let (mut lo, mut hi) = (0.0_f64, r_s);
    let (f_lo, f_hi) = (f(lo), f(hi));
    if f_lo.abs() <= SNAP {
        return Ok(0.0);
    }
    if f_lo < 0.0 || f_hi > 0.0 {
        return Err(Error::InfeasibleSchedule(format!(
            "no delta in [0, {r_s}] meets the budget (mean ratio spans [{:.6}, {:.6}], target {ratio})",
            f_hi + ratio,
            f_lo + ratio
        )));
    }
    // f is strictly decreasing in delta
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let delta = if f(lo).abs() <= f(hi).abs() { lo } else { hi };
    let r3 = decay(r_s, delta)[2];
    if r3 < -SNAP {
        return Err(Error::InfeasibleSchedule(format!(
            "r_m3 = {r3:.6} < 0 at the budget-meeting delta {delta:.6}"
        )));
    }
    Ok(delta)
}

/// Per-layer retention ratios for one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulePlan {
    pub ratio: f64,
    pub lambda: f64,
    pub delta: f64,
    pub c: f64,
    pub r_s: f64,
    pub r_m: [f64; 3],
    pub boundaries: Boundaries,
    /// Index `l - 1` holds the ratio of layer `l`.
    pub per_layer_trr: Vec<f64>,
    /// Layers where the ratio strictly decreases.
    pub drop_layers: Vec<usize>,
}

impl SchedulePlan {
    pub fn layers(&self) -> usize {
        self.per_layer_trr.len()
    }

    /// Ratio at 1-based `layer`.
    pub fn trr(&self, layer: usize) -> f64 {
        self.per_layer_trr[layer - 1]
    }

    pub fn mean(&self) -> f64 {
        self.per_layer_trr.iter().sum::<f64>() / self.layers() as f64
    }

    pub fn block(&self, layer: usize) -> Block {
        Block::of(layer, &self.boundaries)
    }
}

/// Strict decreases of a per-layer ratio vector, with the Stage I ratio as
/// the level entering layer 1.
pub(crate) fn strict_drops(entry: f64, per_layer: &[f64]) -> Vec<usize> {
    let mut prev = entry;
    let mut drops = Vec::new();
    for (i, &r) in per_layer.iter().enumerate() {
        if r < prev {
            drops.push(i + 1);
        }
        prev = r;
    }
    drops
}

pub fn build_schedule(config: &ModelConfig, ratio: f64, lambda: f64) -> Result<SchedulePlan> {
    let DeltaSolution { delta, c } = solve_delta(config, ratio, lambda)?;
    let r_s = (lambda * ratio).min(1.0);
    let mut r_m = decay(r_s, delta);
    if r_m[2] < 0.0 {
        r_m[2] = 0.0;
    }
    let b = config.boundaries;
    let per_layer_trr: Vec<f64> = (1..=config.layers)
        .map(|l| match Block::of(l, &b) {
            Block::Shallow => r_s,
            Block::Middle1 => r_m[0],
            Block::Middle2 => r_m[1],
            Block::Middle3 => r_m[2],
            Block::Late => 0.0,
        })
        .collect();
    let drop_layers = strict_drops(r_s, &per_layer_trr);
    Ok(SchedulePlan {
        ratio,
        lambda,
        delta,
        c,
        r_s,
        r_m,
        boundaries: b,
        per_layer_trr,
        drop_layers,
    })
}

/// Visual and audio schedules obtained by substituting `R_v` and `R_a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySchedules {
    pub visual: SchedulePlan,
    pub audio: SchedulePlan,
}

pub fn build_modality_schedules(config: &ModelConfig, spec: &RetentionSpec) -> Result<ModalitySchedules> {
    let visual = build_schedule(config, spec.ratio_v, spec.lambda)
        .map_err(|e| prefix_modality(e, Modality::Visual))?;
    let audio = build_schedule(config, spec.ratio_a, spec.lambda)
        .map_err(|e| prefix_modality(e, Modality::Audio))?;
    Ok(ModalitySchedules { visual, audio })
}

fn prefix_modality(e: Error, m: Modality) -> Error {
    match e {
        Error::InfeasibleSchedule(msg) => Error::InfeasibleSchedule(format!("{m}: {msg}")),
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationMode {
    Visual,
    Audio,
    Both,
}

/// Per-layer, per-modality ratios of a removal probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSchedule {
    pub remove_at: usize,
    pub mode: AblationMode,
    pub trr_v: Vec<f64>,
    pub trr_a: Vec<f64>,
}

/// Full retention until `remove_at`, then removal of the targeted
/// modality for the rest of the stack.
pub fn ablation_schedule(config: &ModelConfig, remove_at: usize, mode: AblationMode) -> Result<AblationSchedule> {
    if remove_at < 1 || remove_at > config.layers {
        return Err(Error::Config(format!(
            "remove_at = {remove_at} outside [1, {}]",
            config.layers
        )));
    }
    let probe = |hit: bool| -> Vec<f64> {
        (1..=config.layers)
            .map(|l| if hit && l >= remove_at { 0.0 } else { 1.0 })
            .collect()
    };
    Ok(AblationSchedule {
        remove_at,
        mode,
        trr_v: probe(mode != AblationMode::Audio),
        trr_a: probe(mode != AblationMode::Visual),
    })
}
