//! Token-stream container, JSON configuration files and CSV reports.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! "OTS1"                      magic, last byte is the format version
//! u64 header_len
//! header_len bytes            canonical JSON header, keys sorted
//! N * d * 4 bytes             f32 embedding matrix, row-major
//! { [u8; 4] tag, u64 len, len bytes }*   optional sections
//! ```
//!
//! Sections: `SALI` one f64 Stage I weight per row; `ATTN` repeated
//! `(u32 window, u8 modality code, u32 n, n*n f64)` encoder attention
//! blocks; `QVEC` d f32 query vector.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::allocator::BudgetPlan;
use crate::cost::CostReport;
use crate::pipeline::{EmbeddingAttention, PrefillTrace};
use crate::schedule::Block;
use crate::tokens::{Modality, ModelConfig, TokenStream};
use crate::{Error, Result};

pub const MAGIC: &[u8; 3] = b"OTS";
pub const VERSION: u8 = b'1';

const TAG_SALIENCY: &[u8; 4] = b"SALI";
const TAG_ATTENTION: &[u8; 4] = b"ATTN";
const TAG_QUERY: &[u8; 4] = b"QVEC";

/// Malformed container; every variant carries the byte offset where
/// decoding failed.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic {found:?} at offset {offset}, expected \"OTS1\"")]
    BadMagic { found: Vec<u8>, offset: usize },

    #[error("unsupported container version {version:?} at offset {offset}")]
    UnsupportedVersion { version: String, offset: usize },

    #[error("truncated {what} at offset {offset}: expected {expected} bytes, found {actual}")]
    Truncated { what: &'static str, expected: u64, actual: u64, offset: usize },

    #[error("count mismatch for {field} at offset {offset}: declared {declared}, found {actual}")]
    CountMismatch { field: String, declared: u64, actual: u64, offset: usize },

    #[error("invalid header at offset {offset}: {message}")]
    Header { message: String, offset: usize },

    #[error("invalid section {tag:?} at offset {offset}: {message}")]
    Section { tag: String, message: String, offset: usize },
}

/// A token stream with its optional side data.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OtsContainer {
    pub stream: Option<TokenStream>,
    /// Free-form provenance of synthetic streams.
    pub generator: Option<Value>,
    /// Stage I weight per row.
    pub saliency: Option<Vec<f64>>,
    /// Encoder attention per (window, modality) group.
    pub attention: BTreeMap<(u32, Modality), Vec<Vec<f64>>>,
    pub query: Option<Vec<f32>>,
}

impl OtsContainer {
    pub fn new(stream: TokenStream) -> Self {
        Self { stream: Some(stream), ..Default::default() }
    }

    pub fn stream(&self) -> &TokenStream {
        self.stream.as_ref().expect("container holds a stream")
    }

    /// Attention source backed by this container's sections.
    pub fn attention_source(&self) -> EmbeddingAttention {
        let stream = self.stream();
        EmbeddingAttention {
            query: self.query.clone(),
            saliency: self
                .saliency
                .as_ref()
                .map(|s| stream.positions().iter().copied().zip(s.iter().copied()).collect()),
            attention: self.attention.clone(),
        }
    }
}

fn header_json(c: &OtsContainer) -> Value {
    let s = c.stream();
    let modality: String = s.modalities().iter().map(|m| m.code() as char).collect();
    json!({
        "version": 1,
        "n": s.len(),
        "d": s.dim(),
        "t": s.windows(),
        "counts": {
            "visual": s.count(Modality::Visual),
            "audio": s.count(Modality::Audio),
            "text": s.count(Modality::Text),
        },
        "modality": modality,
        "window": s.window_ids(),
        "position": s.positions(),
        "generator": c.generator.clone().unwrap_or(Value::Null),
    })
}

fn put_section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

/// Canonical encoding; identical containers give identical bytes.
pub fn write_ots(c: &OtsContainer) -> Vec<u8> {
    let s = c.stream();
    // serde_json maps are ordered by key
    let header = serde_json::to_vec(&header_json(c)).expect("header serializes");
    let mut out = Vec::with_capacity(12 + header.len() + s.embeddings().len() * 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for x in s.embeddings() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    if let Some(sal) = &c.saliency {
        let payload: Vec<u8> = sal.iter().flat_map(|x| x.to_le_bytes()).collect();
        put_section(&mut out, TAG_SALIENCY, &payload);
    }
    if !c.attention.is_empty() {
        let mut payload = Vec::new();
        for ((w, m), rows) in &c.attention {
            payload.extend_from_slice(&w.to_le_bytes());
            payload.push(m.code());
            payload.extend_from_slice(&(rows.len() as u32).to_le_bytes());
            for row in rows {
                for x in row {
                    payload.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        put_section(&mut out, TAG_ATTENTION, &payload);
    }
    if let Some(q) = &c.query {
        let payload: Vec<u8> = q.iter().flat_map(|x| x.to_le_bytes()).collect();
        put_section(&mut out, TAG_QUERY, &payload);
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: u64, what: &'static str) -> std::result::Result<&'a [u8], FormatError> {
        if n > self.remaining() as u64 {
            return Err(FormatError::Truncated {
                what,
                expected: n,
                actual: self.remaining() as u64,
                offset: self.pos,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n as usize];
        self.pos += n as usize;
        Ok(out)
    }

    fn u64(&mut self, what: &'static str) -> std::result::Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Counts {
    visual: u64,
    audio: u64,
    text: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u64,
    n: u64,
    d: u64,
    t: u64,
    counts: Counts,
    modality: String,
    window: Vec<Option<u32>>,
    position: Vec<u64>,
    generator: Value,
}

/// Decodes a container, validating every declared size before reading it.
pub fn read_ots(bytes: &[u8]) -> std::result::Result<OtsContainer, FormatError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if &magic[..3] != MAGIC {
        return Err(FormatError::BadMagic { found: magic.to_vec(), offset: 0 });
    }
    if magic[3] != VERSION {
        return Err(FormatError::UnsupportedVersion {
            version: String::from_utf8_lossy(&magic[3..]).into_owned(),
            offset: 3,
        });
    }
    let header_len = cur.u64("header length")?;
    let header_at = cur.pos;
    let raw = cur.take(header_len, "header")?;
    let h: Header = serde_json::from_slice(raw).map_err(|e| FormatError::Header {
        message: e.to_string(),
        offset: header_at,
    })?;
    if h.version != 1 {
        return Err(FormatError::UnsupportedVersion { version: h.version.to_string(), offset: header_at });
    }
    let mismatch = |field: &str, declared: u64, actual: usize| -> std::result::Result<(), FormatError> {
        if declared != actual as u64 {
            return Err(FormatError::CountMismatch {
                field: field.to_string(),
                declared,
                actual: actual as u64,
                offset: header_at,
            });
        }
        Ok(())
    };
    mismatch("modality", h.n, h.modality.len())?;
    mismatch("window", h.n, h.window.len())?;
    mismatch("position", h.n, h.position.len())?;
    let modality = h
        .modality
        .bytes()
        .map(Modality::from_code)
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| FormatError::Header { message: "unknown modality code".into(), offset: header_at })?;
    let count = |m: Modality| modality.iter().filter(|&&x| x == m).count();
    mismatch("counts.visual", h.counts.visual, count(Modality::Visual))?;
    mismatch("counts.audio", h.counts.audio, count(Modality::Audio))?;
    mismatch("counts.text", h.counts.text, count(Modality::Text))?;
    if h.d == 0 {
        return Err(FormatError::Header { message: "d must be positive".into(), offset: header_at });
    }
    let payload_len = h
        .n
        .checked_mul(h.d)
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| FormatError::Header { message: "payload size overflows".into(), offset: header_at })?;
    let payload = cur.take(payload_len, "payload")?;
    let embeddings: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let d = h.d as usize;
    let stream = TokenStream::new(d, h.t as usize, embeddings, modality, h.window, h.position)
        .map_err(|e| FormatError::Header { message: e.to_string(), offset: header_at })?;

    let mut c = OtsContainer {
        generator: (!h.generator.is_null()).then_some(h.generator),
        ..OtsContainer::new(stream)
    };
    let n = h.n as usize;
    while cur.remaining() > 0 {
        let tag_at = cur.pos;
        let tag: [u8; 4] = cur.take(4, "section tag")?.try_into().unwrap();
        let len = cur.u64("section length")?;
        let body_at = cur.pos;
        let body = cur.take(len, "section")?;
        let tag_str = String::from_utf8_lossy(&tag).into_owned();
        let bad = |message: String| FormatError::Section { tag: tag_str.clone(), message, offset: body_at };
        match &tag {
            TAG_SALIENCY => {
                if len != n as u64 * 8 {
                    return Err(FormatError::CountMismatch {
                        field: "SALI".into(),
                        declared: len,
                        actual: n as u64 * 8,
                        offset: body_at,
                    });
                }
                c.saliency = Some(body.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect());
            }
            TAG_QUERY => {
                if len != d as u64 * 4 {
                    return Err(FormatError::CountMismatch {
                        field: "QVEC".into(),
                        declared: len,
                        actual: d as u64 * 4,
                        offset: body_at,
                    });
                }
                c.query = Some(body.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect());
            }
            TAG_ATTENTION => {
                let mut sc = Cursor { bytes: body, pos: 0 };
                while sc.remaining() > 0 {
                    let w = sc.u32("attention window").map_err(|e| bad(e.to_string()))?;
                    let code = sc.take(1, "attention modality").map_err(|e| bad(e.to_string()))?[0];
                    let m = Modality::from_code(code).ok_or_else(|| bad(format!("modality code {code}")))?;
                    let k = sc.u32("attention size").map_err(|e| bad(e.to_string()))? as u64;
                    let raw = sc.take(k * k * 8, "attention block").map_err(|e| bad(e.to_string()))?;
                    let vals: Vec<f64> = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
                    let rows = if k == 0 { Vec::new() } else { vals.chunks(k as usize).map(<[f64]>::to_vec).collect() };
                    c.attention.insert((w, m), rows);
                }
            }
            _ => {
                return Err(FormatError::Section { tag: tag_str, message: "unknown tag".into(), offset: tag_at });
            }
        }
    }
    Ok(c)
}

pub fn write_ots_file(path: impl AsRef<Path>, c: &OtsContainer) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_ots(c)).map_err(|e| Error::io(path, e))
}

pub fn read_ots_file(path: impl AsRef<Path>) -> Result<OtsContainer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(read_ots(&bytes)?)
}

/// Loads a JSON document; unknown keys are rejected by the target types.
pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn csv_to_string<F>(path: &str, fill: F) -> Result<String>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    let wrap = |source| Error::Csv { path: path.into(), source };
    fill(&mut w).map_err(wrap)?;
    let bytes = w.into_inner().map_err(|e| Error::Csv { path: path.into(), source: e.into_error().into() })?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// One schedule row per layer: `layer,block,trr` or, with a second
/// ratio vector, `layer,block,trr_v,trr_a`.
pub fn schedule_csv(config: &ModelConfig, trr_v: &[f64], trr_a: Option<&[f64]>) -> Result<String> {
    csv_to_string("<schedule>", |w| {
        match trr_a {
            Some(_) => w.write_record(["layer", "block", "trr_v", "trr_a"])?,
            None => w.write_record(["layer", "block", "trr"])?,
        }
        for (i, r) in trr_v.iter().enumerate() {
            let layer = i + 1;
            let block = Block::of(layer, &config.boundaries).to_string();
            match trr_a {
                Some(a) => w.write_record([layer.to_string(), block, r.to_string(), a[i].to_string()])?,
                None => w.write_record([layer.to_string(), block, r.to_string()])?,
            }
        }
        Ok(())
    })
}

pub fn budget_csv(plan: &BudgetPlan) -> Result<String> {
    csv_to_string("<budget>", |w| {
        w.write_record(["window", "b", "b_v", "b_a", "b_real", "b_v_real"])?;
        for t in 0..plan.windows() {
            w.write_record([
                t.to_string(),
                plan.b[t].to_string(),
                plan.b_v[t].to_string(),
                plan.b_a[t].to_string(),
                plan.b_real[t].to_string(),
                plan.b_v_real[t].to_string(),
            ])?;
        }
        Ok(())
    })
}

/// One trace row; enough to recompute every summary number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub layer: usize,
    pub block: Block,
    pub seq_len: usize,
    pub retained_v: usize,
    pub retained_a: usize,
    pub text: usize,
    pub total_v: usize,
    pub total_a: usize,
    pub flops: f64,
    pub flops_full: f64,
}

pub fn trace_rows(trace: &PrefillTrace, cost: &CostReport) -> Vec<TraceRow> {
    let full = crate::cost::layer_flops(trace.full_len(), &trace.config);
    (0..trace.layers())
        .map(|i| TraceRow {
            layer: i + 1,
            block: Block::of(i + 1, &trace.config.boundaries),
            seq_len: trace.seq_len[i],
            retained_v: trace.retained_v[i],
            retained_a: trace.retained_a[i],
            text: trace.n_q,
            total_v: trace.n_v,
            total_a: trace.n_a,
            flops: cost.flops_per_layer[i],
            flops_full: full,
        })
        .collect()
}

pub fn trace_csv(rows: &[TraceRow]) -> Result<String> {
    csv_to_string("<trace>", |w| {
        for r in rows {
            w.serialize(r)?;
        }
        Ok(())
    })
}

pub fn read_trace_csv(path: impl AsRef<Path>) -> Result<Vec<TraceRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|source| Error::Csv { path: path.into(), source })?;
    r.deserialize()
        .collect::<csv::Result<Vec<TraceRow>>>()
        .map_err(|source| Error::Csv { path: path.into(), source })
}

pub fn cost_csv(cost: &CostReport) -> Result<String> {
    csv_to_string("<cost>", |w| {
        w.write_record(["layer", "kv_tokens", "flops"])?;
        for (i, f) in cost.flops_per_layer.iter().enumerate() {
            w.write_record([(i + 1).to_string(), cost.kv_tokens_per_layer[i].to_string(), f.to_string()])?;
        }
        Ok(())
    })
}

/// Summary numbers recomputed from trace rows: final length, mean
/// retention per modality, FLOPs ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSummary {
    pub final_len: usize,
    pub mean_trr_v: f64,
    pub mean_trr_a: f64,
    pub flops_ratio: f64,
}

pub fn summarize_rows(rows: &[TraceRow]) -> RunSummary {
    let l = rows.len().max(1) as f64;
    let mean = |f: &dyn Fn(&TraceRow) -> (usize, usize)| {
        rows.iter()
            .map(|r| {
                let (k, n) = f(r);
                if n == 0 {
                    0.0
                } else {
                    k as f64 / n as f64
                }
            })
            .sum::<f64>()
            / l
    };
    let flops: f64 = rows.iter().map(|r| r.flops).sum();
    let full: f64 = rows.iter().map(|r| r.flops_full).sum();
    RunSummary {
        final_len: rows.last().map_or(0, |r| r.seq_len),
        mean_trr_v: mean(&|r| (r.retained_v, r.total_v)),
        mean_trr_a: mean(&|r| (r.retained_a, r.total_a)),
        flops_ratio: if full > 0.0 { flops / full } else { 1.0 },
    }
}

impl std::fmt::Display for RunSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "final_len={} mean_trr_v={:.4} mean_trr_a={:.4} flops_ratio={:.4}",
            self.final_len, self.mean_trr_v, self.mean_trr_a, self.flops_ratio
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_token() -> TokenStream {
        TokenStream::new(1, 1, vec![2.5], vec![Modality::Visual], vec![Some(0)], vec![0]).unwrap()
    }

    #[test]
    fn minimal_round_trip() {
        let c = OtsContainer::new(one_token());
        let bytes = write_ots(&c);
        assert_eq!(&bytes[..4], b"OTS1");
        let back = read_ots(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(write_ots(&back), bytes);
    }

    #[test]
    fn sections_round_trip() {
        let mut c = OtsContainer::new(one_token());
        c.saliency = Some(vec![0.75]);
        c.query = Some(vec![-1.0]);
        c.attention.insert((0, Modality::Visual), vec![vec![1.0]]);
        c.generator = Some(json!({"name": "x", "seed": 3}));
        let back = read_ots(&write_ots(&c)).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn header_keys_sorted() {
        let bytes = write_ots(&OtsContainer::new(one_token()));
        let len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[12..12 + len]).unwrap();
        let keys = ["\"counts\"", "\"d\"", "\"generator\"", "\"modality\"", "\"n\"", "\"position\"", "\"t\"", "\"version\"", "\"window\""];
        let at: Vec<usize> = keys.iter().map(|k| text.find(k).unwrap()).collect();
        assert!(at.windows(2).all(|w| w[0] < w[1]), "{text}");
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = write_ots(&OtsContainer::new(one_token()));
        bytes[3] = b'9';
        assert!(matches!(read_ots(&bytes), Err(FormatError::UnsupportedVersion { offset: 3, .. })));
        bytes[0] = b'X';
        assert!(matches!(read_ots(&bytes), Err(FormatError::BadMagic { offset: 0, .. })));
    }

    #[test]
    fn truncated_payload_names_sizes() {
        let bytes = write_ots(&OtsContainer::new(one_token()));
        let err = read_ots(&bytes[..bytes.len() - 1]).unwrap_err();
        match err {
            FormatError::Truncated { what: "payload", expected: 4, actual: 3, .. } => {}
            other => panic!("{other}"),
        }
    }

    #[test]
    fn huge_declared_header_is_truncation() {
        let mut bytes = b"OTS1".to_vec();
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(read_ots(&bytes), Err(FormatError::Truncated { what: "header", offset: 12, .. })));
    }

    #[test]
    fn count_mismatch_detected() {
        let bytes = write_ots(&OtsContainer::new(one_token()));
        let len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[12..12 + len]).unwrap().replace("\"visual\":1", "\"visual\":2");
        let mut forged = b"OTS1".to_vec();
        forged.extend_from_slice(&(header.len() as u64).to_le_bytes());
        forged.extend_from_slice(header.as_bytes());
        forged.extend_from_slice(&bytes[12 + len..]);
        assert!(matches!(read_ots(&forged), Err(FormatError::CountMismatch { declared: 2, actual: 1, .. })));
    }

    #[test]
    fn unknown_config_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        fs::write(&p, r#"{"layers":28,"d_model":1,"d_ff":1,"n_heads":1,"boundaries":{"shallow":16,"mid1":19,"mid2":21,"late":24},"extra":1}"#).unwrap();
        assert!(matches!(load_json::<ModelConfig>(&p), Err(Error::Json { .. })));
    }

    #[test]
    fn schedule_csv_header() {
        let c = ModelConfig::qwen25_omni_7b();
        let text = schedule_csv(&c, &vec![0.5; 28], None).unwrap();
        assert!(text.starts_with("layer,block,trr\n1,shallow,0.5\n"));
    }
}
