//! Token streams, window layouts, model configuration and retention-ratio
//! arithmetic shared by every stage.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Lowest visual retention ratio the audio-intact mode treats as usable.
///
/// Below this the visual stream is effectively erased; such cells are
/// reported as infeasible rather than returned.
pub const MIN_PRACTICAL_RV: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Audio,
    Text,
}

impl Modality {
    /// Single-byte code used by the container format.
    pub fn code(self) -> u8 {
        match self {
            Modality::Visual => b'v',
            Modality::Audio => b'a',
            Modality::Text => b't',
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            b'v' => Some(Modality::Visual),
            b'a' => Some(Modality::Audio),
            b't' => Some(Modality::Text),
            _ => None,
        }
    }

    pub fn is_text(self) -> bool {
        self == Modality::Text
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Visual => "visual",
            Modality::Audio => "audio",
            Modality::Text => "text",
        })
    }
}

/// An embedded token sequence: one row per token, in original order.
///
/// Rows carry their original sequence position so that any subset keeps
/// the causal order of the input. Construction only checks shapes; use
/// [`validate_stream`] for the ordering and window invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStream {
    dim: usize,
    windows: usize,
    embeddings: Vec<f32>,
    modality: Vec<Modality>,
    window_id: Vec<Option<u32>>,
    position: Vec<u64>,
}

impl TokenStream {
    pub fn new(
        dim: usize,
        windows: usize,
        embeddings: Vec<f32>,
        modality: Vec<Modality>,
        window_id: Vec<Option<u32>>,
        position: Vec<u64>,
    ) -> Result<Self> {
        let n = modality.len();
        if dim == 0 {
            return Err(Error::Shape("embedding dimension must be positive".into()));
        }
        if embeddings.len() != n * dim {
            return Err(Error::Shape(format!(
                "embedding matrix has {} values, expected {n} rows x {dim}",
                embeddings.len()
            )));
        }
        if window_id.len() != n || position.len() != n {
            return Err(Error::Shape(format!(
                "per-row arrays disagree: {n} modalities, {} window ids, {} positions",
                window_id.len(),
                position.len()
            )));
        }
        Ok(Self {
            dim,
            windows,
            embeddings,
            modality,
            window_id,
            position,
        })
    }

    pub fn len(&self) -> usize {
        self.modality.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modality.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Window count `T` of the layout this stream was cut into.
    pub fn windows(&self) -> usize {
        self.windows
    }

    pub fn embeddings(&self) -> &[f32] {
        &self.embeddings
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn modality(&self, i: usize) -> Modality {
        self.modality[i]
    }

    pub fn modalities(&self) -> &[Modality] {
        &self.modality
    }

    pub fn window_id(&self, i: usize) -> Option<u32> {
        self.window_id[i]
    }

    pub fn window_ids(&self) -> &[Option<u32>] {
        &self.window_id
    }

    pub fn position(&self, i: usize) -> u64 {
        self.position[i]
    }

    pub fn positions(&self) -> &[u64] {
        &self.position
    }

    pub fn count(&self, m: Modality) -> usize {
        self.modality.iter().filter(|&&x| x == m).count()
    }

    /// Storage rows of modality `m`, in order.
    pub fn rows_of(&self, m: Modality) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.modality[i] == m).collect()
    }

    /// Storage rows of modality `m` inside window `t`, in order.
    pub fn group_rows(&self, t: usize, m: Modality) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.modality[i] == m && self.window_id[i] == Some(t as u32))
            .collect()
    }

    /// Per-window visual/audio counts of this stream.
    pub fn layout(&self) -> WindowLayout {
        let mut n_v = vec![0; self.windows];
        let mut n_a = vec![0; self.windows];
        for (m, w) in self.modality.iter().zip(&self.window_id) {
            if let Some(w) = w {
                let w = *w as usize;
                if w >= self.windows {
                    continue;
                }
                match m {
                    Modality::Visual => n_v[w] += 1,
                    Modality::Audio => n_a[w] += 1,
                    Modality::Text => {}
                }
            }
        }
        WindowLayout { n_v, n_a }
    }

    /// Keeps the given storage rows. `rows` must be ascending, so the
    /// result stays in original order.
    pub fn select_rows(&self, rows: &[usize]) -> TokenStream {
        debug_assert!(rows.windows(2).all(|w| w[0] < w[1]));
        let mut embeddings = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            embeddings.extend_from_slice(self.row(r));
        }
        TokenStream {
            dim: self.dim,
            windows: self.windows,
            embeddings,
            modality: rows.iter().map(|&r| self.modality[r]).collect(),
            window_id: rows.iter().map(|&r| self.window_id[r]).collect(),
            position: rows.iter().map(|&r| self.position[r]).collect(),
        }
    }

    /// Storage row of the last text token, the query representative.
    pub fn last_text_row(&self) -> Option<usize> {
        (0..self.len()).rev().find(|&i| self.modality[i].is_text())
    }
}

/// Per-window visual and audio token counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowLayout {
    pub n_v: Vec<usize>,
    pub n_a: Vec<usize>,
}

impl WindowLayout {
    pub fn new(n_v: Vec<usize>, n_a: Vec<usize>) -> Result<Self> {
        if n_v.len() != n_a.len() {
            return Err(Error::Shape(format!(
                "layout has {} visual and {} audio windows",
                n_v.len(),
                n_a.len()
            )));
        }
        Ok(Self { n_v, n_a })
    }

    /// `windows` windows of identical shape.
    pub fn uniform(windows: usize, n_v: usize, n_a: usize) -> Self {
        Self {
            n_v: vec![n_v; windows],
            n_a: vec![n_a; windows],
        }
    }

    pub fn windows(&self) -> usize {
        self.n_v.len()
    }

    pub fn total_v(&self) -> usize {
        self.n_v.iter().sum()
    }

    pub fn total_a(&self) -> usize {
        self.n_a.iter().sum()
    }

    pub fn total(&self) -> usize {
        self.total_v() + self.total_a()
    }

    pub fn count(&self, t: usize, m: Modality) -> usize {
        match m {
            Modality::Visual => self.n_v[t],
            Modality::Audio => self.n_a[t],
            Modality::Text => 0,
        }
    }
}

/// One violated stream or layout invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NoWindows,
    LayoutShape { n_v: usize, n_a: usize },
    PositionNotIncreasing { row: usize },
    MissingWindow { row: usize },
    TextWithWindow { row: usize },
    WindowOutOfRange { row: usize, window: u32, windows: usize },
    WindowDecreasing { row: usize, modality: Modality },
    TotalMismatch { modality: Modality, layout: usize, stream: usize },
    WindowCountMismatch { window: usize, modality: Modality, layout: usize, stream: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoWindows => write!(f, "layout has no windows"),
            Violation::LayoutShape { n_v, n_a } => {
                write!(f, "layout has {n_v} visual but {n_a} audio window counts")
            }
            Violation::PositionNotIncreasing { row } => {
                write!(f, "row {row}: position does not increase")
            }
            Violation::MissingWindow { row } => write!(f, "row {row}: non-text row without window id"),
            Violation::TextWithWindow { row } => write!(f, "row {row}: text row carries a window id"),
            Violation::WindowOutOfRange { row, window, windows } => {
                write!(f, "row {row}: window {window} outside [0, {windows})")
            }
            Violation::WindowDecreasing { row, modality } => {
                write!(f, "row {row}: {modality} window id decreases")
            }
            Violation::TotalMismatch { modality, layout, stream } => write!(
                f,
                "sum of {modality} window counts is {layout} but the stream has {stream} {modality} rows"
            ),
            Violation::WindowCountMismatch { window, modality, layout, stream } => write!(
                f,
                "window {window}: layout declares {layout} {modality} tokens, stream has {stream}"
            ),
        }
    }
}

/// Outcome of [`validate_stream`]; empty means the pair is consistent.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Checks every stream and layout invariant, collecting all violations.
pub fn validate_stream(stream: &TokenStream, layout: &WindowLayout) -> ValidationReport {
    let mut violations = Vec::new();
    let windows = layout.windows();
    if windows == 0 {
        violations.push(Violation::NoWindows);
    }
    if layout.n_v.len() != layout.n_a.len() {
        violations.push(Violation::LayoutShape {
            n_v: layout.n_v.len(),
            n_a: layout.n_a.len(),
        });
    }

    let mut last_window: [Option<u32>; 2] = [None, None];
    for i in 0..stream.len() {
        if i > 0 && stream.position(i) <= stream.position(i - 1) {
            violations.push(Violation::PositionNotIncreasing { row: i });
        }
        let m = stream.modality(i);
        match (m, stream.window_id(i)) {
            (Modality::Text, Some(_)) => violations.push(Violation::TextWithWindow { row: i }),
            (Modality::Text, None) => {}
            (_, None) => violations.push(Violation::MissingWindow { row: i }),
            (_, Some(w)) => {
                if w as usize >= windows {
                    violations.push(Violation::WindowOutOfRange { row: i, window: w, windows });
                }
                let slot = &mut last_window[(m == Modality::Audio) as usize];
                if matches!(*slot, Some(prev) if w < prev) {
                    violations.push(Violation::WindowDecreasing { row: i, modality: m });
                }
                *slot = Some(w);
            }
        }
    }

    for m in [Modality::Visual, Modality::Audio] {
        let counts = if m == Modality::Visual { &layout.n_v } else { &layout.n_a };
        let declared: usize = counts.iter().sum();
        let actual = stream.count(m);
        if declared != actual {
            violations.push(Violation::TotalMismatch { modality: m, layout: declared, stream: actual });
        }
        let mut per_window = vec![0usize; counts.len()];
        for i in 0..stream.len() {
            if stream.modality(i) == m {
                if let Some(w) = stream.window_id(i) {
                    if let Some(c) = per_window.get_mut(w as usize) {
                        *c += 1;
                    }
                }
            }
        }
        for (t, (&l, &s)) in counts.iter().zip(&per_window).enumerate() {
            if l != s {
                violations.push(Violation::WindowCountMismatch { window: t, modality: m, layout: l, stream: s });
            }
        }
    }
    ValidationReport { violations }
}

/// Block boundary layers `(L_s, L_m1, L_m2, L_l)`, 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Boundaries {
    pub shallow: usize,
    pub mid1: usize,
    pub mid2: usize,
    pub late: usize,
}

impl Boundaries {
    pub fn new(shallow: usize, mid1: usize, mid2: usize, late: usize) -> Self {
        Self { shallow, mid1, mid2, late }
    }
}

/// LLM dimensions and block boundaries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub boundaries: Boundaries,
}

impl ModelConfig {
    /// 28-layer backbone with boundaries 16/19/21/24.
    pub fn qwen25_omni_7b() -> Self {
        Self {
            layers: 28,
            d_model: 3584,
            d_ff: 18944,
            n_heads: 28,
            boundaries: Boundaries::new(16, 19, 21, 24),
        }
    }

    /// 48-layer MoE backbone with boundaries 27/32/36/40; `d_ff` counts
    /// the eight active experts.
    pub fn qwen3_omni_30b() -> Self {
        Self {
            layers: 48,
            d_model: 2048,
            d_ff: 6144,
            n_heads: 32,
            boundaries: Boundaries::new(27, 32, 36, 40),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.boundaries;
        if !(1 <= b.shallow && b.shallow < b.mid1 && b.mid1 <= b.mid2 && b.mid2 < b.late && b.late <= self.layers) {
            return Err(Error::Config(format!(
                "boundaries must satisfy 1 <= L_s < L_m1 <= L_m2 < L_l <= L, got ({}, {}, {}, {}) with L = {}",
                b.shallow, b.mid1, b.mid2, b.late, self.layers
            )));
        }
        if self.d_model == 0 || self.d_ff == 0 || self.n_heads == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        Ok(())
    }
}

/// Per-modality retention ratios plus the Stage I scale factor and the
/// relevance softmax temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetentionSpec {
    pub ratio_v: f64,
    pub ratio_a: f64,
    pub lambda: f64,
    pub tau: f64,
    /// Overall ratio, if stated; checked against the layout by
    /// [`RetentionSpec::check_layout`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
}

impl RetentionSpec {
    pub fn new(ratio_v: f64, ratio_a: f64, lambda: f64, tau: f64) -> Self {
        Self { ratio_v, ratio_a, lambda, tau, ratio: None }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("ratio_v", self.ratio_v), ("ratio_a", self.ratio_a)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} = {r} outside [0, 1]")));
            }
        }
        if let Some(r) = self.ratio {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("ratio = {r} outside [0, 1]")));
            }
        }
        if !(self.lambda >= 1.0) {
            return Err(Error::Config(format!("lambda = {} must be >= 1", self.lambda)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau = {} must be > 0", self.tau)));
        }
        Ok(())
    }

    /// Stage I ratios `min(1, lambda * R_m)`.
    pub fn stage1_ratios(&self) -> (f64, f64) {
        ((self.lambda * self.ratio_v).min(1.0), (self.lambda * self.ratio_a).min(1.0))
    }

    /// Checks a stated overall ratio against the layout: the implied and
    /// stated budgets may differ by at most one token per window, the
    /// rounding error of percent-valued ratio pairs.
    pub fn check_layout(&self, layout: &WindowLayout) -> Result<()> {
        let Some(r) = self.ratio else { return Ok(()) };
        let implied = self.ratio_v * layout.total_v() as f64 + self.ratio_a * layout.total_a() as f64;
        let stated = r * layout.total() as f64;
        let slack = layout.windows() as f64;
        if (implied - stated).abs() > slack {
            return Err(Error::Config(format!(
                "ratio {r} implies {stated:.1} tokens but (ratio_v, ratio_a) keep {implied:.1}"
            )));
        }
        Ok(())
    }
}

/// Overall retention `(R_v N_v + R_a N_a) / (N_v + N_a)`.
pub fn overall_ratio(ratio_v: f64, ratio_a: f64, layout: &WindowLayout) -> Result<f64> {
    let (nv, na) = (layout.total_v() as f64, layout.total_a() as f64);
    if nv + na == 0.0 {
        return Err(Error::EmptyLayout);
    }
    Ok((ratio_v * nv + ratio_a * na) / (nv + na))
}

/// Visual ratio that meets overall ratio `r` with every audio token kept.
///
/// Results below [`MIN_PRACTICAL_RV`] are rejected as infeasible.
pub fn audio_intact_rv(r: f64, layout: &WindowLayout) -> Result<f64> {
    audio_intact_rv_with_floor(r, layout, MIN_PRACTICAL_RV)
}

/// [`audio_intact_rv`] with an explicit practicality floor; a floor of 0
/// rejects only negative ratios.
pub fn audio_intact_rv_with_floor(r: f64, layout: &WindowLayout, floor: f64) -> Result<f64> {
    let (nv, na) = (layout.total_v() as f64, layout.total_a() as f64);
    if nv + na == 0.0 {
        return Err(Error::EmptyLayout);
    }
    if nv == 0.0 {
        return Err(Error::InfeasibleRatio("layout has no visual tokens".into()));
    }
    let rv = (r * (nv + na) - na) / nv;
    if rv < 0.0 {
        return Err(Error::InfeasibleRatio(format!(
            "overall ratio {r} cannot keep all {na} audio tokens (R_v would be {rv:.4})"
        )));
    }
    if rv < floor {
        return Err(Error::InfeasibleRatio(format!(
            "overall ratio {r} leaves R_v = {rv:.4}, below the practical floor {floor}"
        )));
    }
    Ok(rv.min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(mods: &str, windows: &[Option<u32>], t: usize) -> TokenStream {
        let modality: Vec<_> = mods.bytes().map(|c| Modality::from_code(c).unwrap()).collect();
        let n = modality.len();
        TokenStream::new(2, t, vec![1.0; n * 2], modality, windows.to_vec(), (0..n as u64).collect()).unwrap()
    }

    #[test]
    fn consistent_stream_passes() {
        let s = stream("vvaavat", &[Some(0), Some(0), Some(0), Some(0), Some(1), Some(1), None], 2);
        let layout = WindowLayout::new(vec![2, 1], vec![2, 1]).unwrap();
        let report = validate_stream(&s, &layout);
        assert!(report.passed(), "{report}");
        assert_eq!(s.layout(), layout);
    }

    #[test]
    fn sum_mismatch_is_named() {
        let s = stream("vvat", &[Some(0), Some(0), Some(0), None], 1);
        let layout = WindowLayout::new(vec![3], vec![1]).unwrap();
        let report = validate_stream(&s, &layout);
        assert!(report.violations.contains(&Violation::TotalMismatch {
            modality: Modality::Visual,
            layout: 3,
            stream: 2
        }));
    }

    #[test]
    fn text_row_with_window_is_named() {
        let s = stream("vat", &[Some(0), Some(0), Some(0)], 1);
        let layout = WindowLayout::new(vec![1], vec![1]).unwrap();
        let report = validate_stream(&s, &layout);
        assert_eq!(report.violations, vec![Violation::TextWithWindow { row: 2 }]);
    }

    #[test]
    fn decreasing_window_and_position() {
        let modality = vec![Modality::Visual, Modality::Visual];
        let s = TokenStream::new(1, 2, vec![0.0, 0.0], modality, vec![Some(1), Some(0)], vec![5, 5]).unwrap();
        let layout = WindowLayout::new(vec![1, 1], vec![0, 0]).unwrap();
        let report = validate_stream(&s, &layout);
        assert!(report.violations.contains(&Violation::PositionNotIncreasing { row: 1 }));
        assert!(report.violations.contains(&Violation::WindowDecreasing { row: 1, modality: Modality::Visual }));
    }

    #[test]
    fn overall_ratio_both_selected_row() {
        let layout = WindowLayout::uniform(1, 288, 50);
        let r = overall_ratio(0.30, 0.65, &layout).unwrap();
        assert!((r - 118.9 / 338.0).abs() < 1e-12);
        assert_eq!(format!("{:.4}", r), "0.3518");
        let r = overall_ratio(0.24, 1.0, &layout).unwrap();
        assert_eq!(format!("{:.4}", r), "0.3524");
    }

    #[test]
    fn overall_ratio_equal_ratios_and_empty() {
        let layout = WindowLayout::new(vec![3, 7, 0], vec![1, 0, 9]).unwrap();
        assert!((overall_ratio(0.37, 0.37, &layout).unwrap() - 0.37).abs() < 1e-15);
        assert!(matches!(
            overall_ratio(0.5, 0.5, &WindowLayout::uniform(2, 0, 0)),
            Err(Error::EmptyLayout)
        ));
    }

    #[test]
    fn audio_intact_examples() {
        let layout = WindowLayout::uniform(1, 288, 50);
        let rv = audio_intact_rv(0.35, &layout).unwrap();
        assert!((rv - (0.35 * 338.0 - 50.0) / 288.0).abs() < 1e-15);
        assert_eq!((rv * 100.0).round(), 24.0);
        assert_eq!(audio_intact_rv(1.0, &layout).unwrap(), 1.0);
        assert!(matches!(audio_intact_rv(0.10, &layout), Err(Error::InfeasibleRatio(_))));
        // positive but impractically small
        assert!(audio_intact_rv(0.15, &layout).is_err());
        assert!(audio_intact_rv_with_floor(0.15, &layout, 0.0).is_ok());
    }

    #[test]
    fn boundaries_are_validated() {
        let mut c = ModelConfig::qwen25_omni_7b();
        assert!(c.validate().is_ok());
        c.boundaries = Boundaries::new(16, 16, 21, 24);
        assert!(c.validate().is_err());
        c.boundaries = Boundaries::new(16, 19, 21, 29);
        assert!(c.validate().is_err());
    }

    #[test]
    fn stated_ratio_consistency() {
        let layout = WindowLayout::uniform(4, 288, 50);
        let mut spec = RetentionSpec::new(0.30, 0.65, 1.4, 0.1);
        spec.ratio = Some(0.35);
        assert!(spec.check_layout(&layout).is_ok());
        spec.ratio = Some(0.10);
        spec.ratio_v = 0.06;
        spec.ratio_a = 0.35;
        assert!(spec.check_layout(&layout).is_ok());
        spec.ratio = Some(0.40);
        assert!(spec.check_layout(&layout).is_err());
    }
}
