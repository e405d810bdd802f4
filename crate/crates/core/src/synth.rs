//! Seeded synthetic omni-modal streams with a matching attention oracle.
//!
//! Every random value is a pure function of `(seed, domain, a, b)` through
//! a counter-based SplitMix64 hash, so streams and oracle answers are
//! reproducible bit for bit, independent of call order, and portable to
//! any language that implements the same three-line mixer.

use serde::{Deserialize, Serialize};

use crate::pipeline::AttentionSource;
use crate::relevance::{mean_received_attention, softmax, SaliencyVector};
use crate::tokens::{Modality, TokenStream};
use crate::{Error, Result};

/// Generator name recorded in container headers.
pub const GENERATOR: &str = "splitmix64-counter/box-muller";

const DOMAIN_CENTER: u64 = 1;
const DOMAIN_ASSIGN: u64 = 2;
const DOMAIN_NOISE: u64 = 3;
const DOMAIN_ENCODER_ATTN: u64 = 4;
const DOMAIN_QUERY: u64 = 5;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based 64-bit draw.
pub fn draw(seed: u64, domain: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed ^ domain.wrapping_mul(0xD1B5_4A32_D192_ED03)) ^ a) ^ b)
}

/// Uniform draw in the open interval (0, 1).
pub fn uniform(seed: u64, domain: u64, a: u64, b: u64) -> f64 {
    ((draw(seed, domain, a, b) >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal draw (Box-Muller over counters `2b` and `2b + 1`).
pub fn normal(seed: u64, domain: u64, a: u64, b: u64) -> f64 {
    let u1 = uniform(seed, domain, a, b.wrapping_mul(2));
    let u2 = uniform(seed, domain, a, b.wrapping_mul(2).wrapping_add(1));
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn default_std() -> f64 {
    1.0
}

fn default_clusters() -> usize {
    4
}

fn default_noise() -> f64 {
    0.3
}

/// Shape and randomness of a synthetic stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub windows: usize,
    pub dim: usize,
    pub n_v: usize,
    pub n_a: usize,
    pub n_q: usize,
    #[serde(default)]
    pub planted_windows: Vec<usize>,
    /// Logit gain added to tokens of planted windows, in units of the
    /// background logit standard deviation.
    #[serde(default)]
    pub planted_gain: f64,
    #[serde(default = "default_std")]
    pub background_std: f64,
    /// Scene clusters per window and modality; tokens of one cluster are
    /// near-duplicates, which is the redundancy Stage I removes.
    #[serde(default = "default_clusters")]
    pub clusters: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
}

impl SynthSpec {
    pub fn new(seed: u64, windows: usize, dim: usize, n_v: usize, n_a: usize, n_q: usize) -> Self {
        Self {
            seed,
            windows,
            dim,
            n_v,
            n_a,
            n_q,
            planted_windows: Vec::new(),
            planted_gain: 0.0,
            background_std: default_std(),
            clusters: default_clusters(),
            noise: default_noise(),
        }
    }

    pub fn with_planted(mut self, windows: Vec<usize>, gain: f64) -> Self {
        self.planted_windows = windows;
        self.planted_gain = gain;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.windows == 0 || self.dim == 0 || self.n_q == 0 || self.n_v + self.n_a == 0 {
            return Err(Error::Config("synthetic sizes must be positive".into()));
        }
        if self.clusters == 0 {
            return Err(Error::Config("clusters must be positive".into()));
        }
        if let Some(&w) = self.planted_windows.iter().find(|&&w| w >= self.windows) {
            return Err(Error::Config(format!("planted window {w} outside [0, {})", self.windows)));
        }
        if !(self.planted_gain >= 0.0) || !(self.background_std >= 0.0) || !(self.noise >= 0.0) {
            return Err(Error::Config("gain, background_std and noise must be non-negative".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.windows * (self.n_v + self.n_a) + self.n_q
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Attention oracle of a synthetic stream; answers are keyed by original
/// position, so they stay consistent as the stream shrinks.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOracle {
    spec: SynthSpec,
}

impl SynthOracle {
    pub fn new(spec: SynthSpec) -> Self {
        Self { spec }
    }

    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }

    /// Last-text-token logit for the token at `position` in `window`.
    pub fn query_logit(&self, layer: usize, position: u64, window: Option<u32>) -> f64 {
        let s = &self.spec;
        let mut logit = s.background_std * normal(s.seed, DOMAIN_QUERY, layer as u64, position);
        if let Some(w) = window {
            if s.planted_windows.contains(&(w as usize)) {
                logit += s.planted_gain * s.background_std.max(f64::MIN_POSITIVE);
            }
        }
        logit
    }

    /// Row-softmaxed encoder self-attention among the given positions.
    pub fn encoder_attention(&self, positions: &[u64]) -> Vec<Vec<f64>> {
        positions
            .iter()
            .map(|&i| {
                let logits: Vec<f64> = positions
                    .iter()
                    .map(|&j| normal(self.spec.seed, DOMAIN_ENCODER_ATTN, i, j))
                    .collect();
                softmax(&logits, 1.0)
            })
            .collect()
    }
}

impl AttentionSource for SynthOracle {
    fn saliency(&self, stream: &TokenStream, rows: &[usize]) -> Result<Option<SaliencyVector>> {
        let positions: Vec<u64> = rows.iter().map(|&r| stream.position(r)).collect();
        mean_received_attention(&self.encoder_attention(&positions)).map(Some)
    }

    fn query_scores(&self, layer: usize, stream: &TokenStream, rows: &[usize]) -> Result<Vec<f64>> {
        if rows.is_empty() {
            return Err(Error::Shape("no tokens to score".into()));
        }
        let logits: Vec<f64> = rows
            .iter()
            .map(|&r| self.query_logit(layer, stream.position(r), stream.window_id(r)))
            .collect();
        Ok(softmax(&logits, 1.0))
    }
}

/// Builds the stream described by `spec` and its attention oracle.
///
/// Layout: for each window, `n_v` visual rows then `n_a` audio rows; the
/// `n_q` text rows close the sequence.
pub fn synth_generate(spec: &SynthSpec) -> Result<(TokenStream, SynthOracle)> {
    spec.validate()?;
    let n = spec.len();
    let d = spec.dim;
    let seed = spec.seed;
    let mut embeddings = Vec::with_capacity(n * d);
    let mut modality = Vec::with_capacity(n);
    let mut window_id = Vec::with_capacity(n);

    let center = |t: usize, m: u64, c: u64, k: usize| -> f64 {
        normal(seed, DOMAIN_CENTER, ((t as u64) << 8) | (m << 4) | c, k as u64)
    };
    let mut pos = 0u64;
    for t in 0..spec.windows {
        for (m, count, tag) in [(Modality::Visual, spec.n_v, 0u64), (Modality::Audio, spec.n_a, 1u64)] {
            for _ in 0..count {
                let c = draw(seed, DOMAIN_ASSIGN, pos, 0) % spec.clusters as u64;
                for k in 0..d {
                    let v = center(t, tag, c, k) + spec.noise * normal(seed, DOMAIN_NOISE, pos, k as u64);
                    embeddings.push(v as f32);
                }
                modality.push(m);
                window_id.push(Some(t as u32));
                pos += 1;
            }
        }
    }
    for _ in 0..spec.n_q {
        for k in 0..d {
            embeddings.push(normal(seed, DOMAIN_NOISE, pos, k as u64) as f32);
        }
        modality.push(Modality::Text);
        window_id.push(None);
        pos += 1;
    }
    let stream = TokenStream::new(d, spec.windows, embeddings, modality, window_id, (0..n as u64).collect())?;
    Ok((stream, SynthOracle::new(spec.clone())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relevance::window_relevance;
    use crate::tokens::validate_stream;

    #[test]
    fn same_seed_same_bits() {
        let spec = SynthSpec::new(7, 3, 8, 12, 4, 5);
        let (a, oa) = synth_generate(&spec).unwrap();
        let (b, ob) = synth_generate(&spec).unwrap();
        let bits = |s: &TokenStream| s.embeddings().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let rows = a.rows_of(Modality::Visual);
        let sa = oa.query_scores(19, &a, &rows).unwrap();
        let sb = ob.query_scores(19, &b, &rows).unwrap();
        assert_eq!(
            sa.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            sb.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        let (c, _) = synth_generate(&SynthSpec::new(8, 3, 8, 12, 4, 5)).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn generated_stream_is_valid() {
        let spec = SynthSpec::new(1, 4, 6, 10, 3, 7);
        let (s, _) = synth_generate(&spec).unwrap();
        assert_eq!(s.len(), 4 * 13 + 7);
        assert!(validate_stream(&s, &s.layout()).passed());
    }

    #[test]
    fn uniform_draws_in_open_interval() {
        for i in 0..1000 {
            let u = uniform(3, 9, i, i * 31);
            assert!(u > 0.0 && u < 1.0);
        }
    }

    #[test]
    fn planted_window_wins() {
        let spec = SynthSpec::new(11, 6, 8, 40, 10, 4).with_planted(vec![3], 6.0);
        let (s, oracle) = synth_generate(&spec).unwrap();
        let rv = s.rows_of(Modality::Visual);
        let ra = s.rows_of(Modality::Audio);
        let sv = oracle.query_scores(17, &s, &rv).unwrap();
        let sa = oracle.query_scores(17, &s, &ra).unwrap();
        let rel = window_relevance(&sv, &sa, &s.layout(), 0.1).unwrap();
        let best = (0..6).max_by(|&a, &b| rel.s[a].partial_cmp(&rel.s[b]).unwrap()).unwrap();
        assert_eq!(best, 3);
    }

    #[test]
    fn bad_planted_window() {
        let spec = SynthSpec::new(1, 2, 4, 3, 3, 1).with_planted(vec![2], 1.0);
        assert!(synth_generate(&spec).is_err());
    }
}
