//! Stage II top-down budget allocation.
//!
//! A drop layer keeping ratios `(r_v, r_a)` of the original `(N_v, N_a)`
//! tokens has a combined budget `r_v N_v + r_a N_a`. It is spread over
//! windows in proportion to the window relevance `S_t` and each window's
//! share is split between modalities in proportion to
//! `S_{t,v} r_v N_v : S_{t,a} r_a N_a`. Only the combined total is
//! conserved; per-modality totals may drift towards the more relevant
//! modality.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::relevance::RelevanceScores;
use crate::tokens::WindowLayout;
use crate::{Error, Result};

/// Integer per-window, per-modality budgets at one drop layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub b: Vec<usize>,
    pub b_v: Vec<usize>,
    pub b_a: Vec<usize>,
    pub total_v: usize,
    pub total_a: usize,
    pub total: usize,
    /// Real-valued window budgets before rounding.
    pub b_real: Vec<f64>,
    /// Real-valued visual budgets before rounding.
    pub b_v_real: Vec<f64>,
}

impl BudgetPlan {
    pub fn windows(&self) -> usize {
        self.b.len()
    }

    /// A plan keeping exactly the given counts.
    pub fn from_counts(b_v: Vec<usize>, b_a: Vec<usize>) -> Result<Self> {
        if b_v.len() != b_a.len() {
            return Err(Error::Shape("visual and audio budgets differ in length".into()));
        }
        let b: Vec<usize> = b_v.iter().zip(&b_a).map(|(v, a)| v + a).collect();
        let total_v = b_v.iter().sum();
        let total_a = b_a.iter().sum();
        Ok(Self {
            b_real: b.iter().map(|&x| x as f64).collect(),
            b_v_real: b_v.iter().map(|&x| x as f64).collect(),
            total: total_v + total_a,
            b,
            b_v,
            b_a,
            total_v,
            total_a,
        })
    }
}

/// Largest-remainder apportionment of `seats` in proportion to `weights`.
///
/// Remainders are ranked by (remainder desc, `tiebreak` desc, index asc).
/// `weights` must have a positive sum.
pub fn largest_remainder(seats: usize, weights: &[f64], tiebreak: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    debug_assert!(sum > 0.0);
    let quotas: Vec<f64> = weights.iter().map(|&w| seats as f64 * w / sum).collect();
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut left = seats.saturating_sub(assigned);
    if left == 0 {
        return out;
    }
    let mut order: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
    order.sort_by(|&i, &j| {
        let (ri, rj) = (quotas[i] - quotas[i].floor(), quotas[j] - quotas[j].floor());
        rj.partial_cmp(&ri)
            .unwrap_or(Ordering::Equal)
            .then_with(|| tiebreak[j].partial_cmp(&tiebreak[i]).unwrap_or(Ordering::Equal))
            .then_with(|| i.cmp(&j))
    });
    // floating error can leave more than one seat per window to hand out
    while left > 0 {
        for &i in &order {
            if left == 0 {
                break;
            }
            out[i] += 1;
            left -= 1;
        }
    }
    out
}

/// Normalizes `s`; an all-zero vector falls back to `fallback`.
fn normalized(s: &[f64], fallback: &[f64]) -> Vec<f64> {
    let sum: f64 = s.iter().sum();
    if sum > 0.0 {
        return s.iter().map(|x| x / sum).collect();
    }
    let sum: f64 = fallback.iter().sum();
    fallback.iter().map(|x| if sum > 0.0 { x / sum } else { 0.0 }).collect()
}

/// Computes the integer budget plan for one drop layer.
///
/// `totals` are the original `(N_v, N_a)` the ratios refer to and
/// `capacity` is the layout entering this layer, which caps every entry.
pub fn allocate(
    rel: &RelevanceScores,
    r_v: f64,
    r_a: f64,
    totals: (usize, usize),
    capacity: &WindowLayout,
) -> Result<BudgetPlan> {
    let windows = capacity.windows();
    if rel.windows() != windows || rel.s_v.len() != windows || rel.s_a.len() != windows {
        return Err(Error::Shape(format!(
            "relevance covers {} windows, layout has {windows}",
            rel.windows()
        )));
    }
    for (name, r) in [("r_v", r_v), ("r_a", r_a)] {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::Config(format!("{name} = {r} outside [0, 1]")));
        }
    }
    let (n_v, n_a) = (totals.0 as f64, totals.1 as f64);
    let demand_v = r_v * n_v;
    let demand_a = r_a * n_a;
    let total_real = demand_v + demand_a;
    let target = total_real.round() as usize;
    let cap: Vec<usize> = (0..windows).map(|t| capacity.n_v[t] + capacity.n_a[t]).collect();
    let cap_total: usize = cap.iter().sum();
    if target > cap_total {
        return Err(Error::InfeasibleAllocation { budget: target, capacity: cap_total });
    }

    let cap_f: Vec<f64> = cap.iter().map(|&c| c as f64).collect();
    let s = normalized(&rel.s, &cap_f);
    let b_real: Vec<f64> = s.iter().map(|x| total_real * x).collect();
    let frac_v: Vec<f64> = (0..windows)
        .map(|t| {
            let wv = rel.s_v[t] * demand_v;
            let wa = rel.s_a[t] * demand_a;
            if wv + wa > 0.0 {
                wv / (wv + wa)
            } else if cap[t] > 0 {
                capacity.n_v[t] as f64 / cap[t] as f64
            } else {
                0.0
            }
        })
        .collect();
    let b_v_real: Vec<f64> = b_real.iter().zip(&frac_v).map(|(b, f)| b * f).collect();

    let mut b = if target == 0 { vec![0; windows] } else { largest_remainder(target, &s, &s) };

    // cap overflow goes to windows with spare room, again by relevance
    let mut excess = 0;
    for t in 0..windows {
        if b[t] > cap[t] {
            excess += b[t] - cap[t];
            b[t] = cap[t];
        }
    }
    while excess > 0 {
        let spare: Vec<f64> = (0..windows).map(|t| (cap[t] - b[t]) as f64).collect();
        let open: Vec<f64> = (0..windows).map(|t| if spare[t] > 0.0 { s[t] } else { 0.0 }).collect();
        let weights = if open.iter().sum::<f64>() > 0.0 { open } else { spare.clone() };
        let shares = largest_remainder(excess, &weights, &s);
        let mut placed = 0;
        for t in 0..windows {
            let add = shares[t].min(cap[t] - b[t]);
            b[t] += add;
            placed += add;
        }
        excess -= placed;
    }

    let mut b_v = vec![0; windows];
    let mut b_a = vec![0; windows];
    for t in 0..windows {
        let want = b[t] as f64 * frac_v[t];
        let mut v = want.floor() as usize;
        let rem = want - want.floor();
        if rem > 0.5 || (rem == 0.5 && rel.s_v[t] >= rel.s_a[t]) {
            v += 1;
        }
        v = v.min(b[t]).min(capacity.n_v[t]);
        let mut a = b[t] - v;
        if a > capacity.n_a[t] {
            a = capacity.n_a[t];
            v = b[t] - a;
        }
        b_v[t] = v;
        b_a[t] = a;
    }

    let total_v = b_v.iter().sum();
    let total_a = b_a.iter().sum();
    Ok(BudgetPlan {
        b,
        b_v,
        b_a,
        total_v,
        total_a,
        total: target,
        b_real,
        b_v_real,
    })
}
