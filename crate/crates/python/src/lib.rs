//! Python bindings for the pruning engine.

use omniprune::io::{read_ots, write_ots, OtsContainer};
use omniprune::pipeline::PipelineRun;
use omniprune::synth::SynthOracle;
use omniprune::{self as core, Boundaries, Modality, WindowLayout};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "ModelConfig", module = "omniprune_py", skip_from_py_object)]
#[derive(Clone)]
struct PyModelConfig {
    inner: core::ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (layers, boundaries, d_model = 4096, d_ff = 11008, n_heads = 32))]
    fn new(layers: usize, boundaries: (usize, usize, usize, usize), d_model: usize, d_ff: usize, n_heads: usize) -> PyResult<Self> {
        let (s, m1, m2, l) = boundaries;
        let inner = core::ModelConfig { layers, d_model, d_ff, n_heads, boundaries: Boundaries::new(s, m1, m2, l) };
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn qwen25_omni_7b() -> Self {
        Self { inner: core::ModelConfig::qwen25_omni_7b() }
    }

    #[staticmethod]
    fn qwen3_omni_30b() -> Self {
        Self { inner: core::ModelConfig::qwen3_omni_30b() }
    }

    #[getter]
    fn layers(&self) -> usize {
        self.inner.layers
    }

    #[getter]
    fn boundaries(&self) -> (usize, usize, usize, usize) {
        let b = self.inner.boundaries;
        (b.shallow, b.mid1, b.mid2, b.late)
    }

    fn __repr__(&self) -> String {
        let b = self.inner.boundaries;
        format!(
            "ModelConfig(layers={}, boundaries=({}, {}, {}, {}), d_model={}, d_ff={})",
            self.inner.layers, b.shallow, b.mid1, b.mid2, b.late, self.inner.d_model, self.inner.d_ff
        )
    }
}

#[pyclass(name = "Schedule", module = "omniprune_py", get_all)]
struct PySchedule {
    delta: f64,
    c: f64,
    r_s: f64,
    r_m: (f64, f64, f64),
    trr: Vec<f64>,
    drop_layers: Vec<usize>,
}

#[pymethods]
impl PySchedule {
    fn mean(&self) -> f64 {
        self.trr.iter().sum::<f64>() / self.trr.len() as f64
    }
}

#[pyclass(name = "TokenStream", module = "omniprune_py", skip_from_py_object)]
#[derive(Clone)]
struct PyTokenStream {
    inner: core::TokenStream,
    oracle: Option<SynthOracle>,
}

#[pymethods]
impl PyTokenStream {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn windows(&self) -> usize {
        self.inner.windows()
    }

    /// Modality codes, one of "v", "a", "t" per token.
    #[getter]
    fn modalities(&self) -> String {
        self.inner.modalities().iter().map(|m| m.code() as char).collect()
    }

    #[getter]
    fn positions(&self) -> Vec<u64> {
        self.inner.positions().to_vec()
    }

    #[getter]
    fn window_ids(&self) -> Vec<Option<u32>> {
        self.inner.window_ids().to_vec()
    }

    fn embeddings(&self) -> Vec<Vec<f32>> {
        (0..self.inner.len()).map(|i| self.inner.row(i).to_vec()).collect()
    }

    /// Per-window `(n_v, n_a)` counts.
    fn layout(&self) -> Vec<(usize, usize)> {
        let l = self.inner.layout();
        l.n_v.into_iter().zip(l.n_a).collect()
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &write_ots(&OtsContainer::new(self.inner.clone())))
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        let c = read_ots(data).map_err(err)?;
        Ok(Self { inner: c.stream().clone(), oracle: None })
    }
}

#[pyclass(name = "PrefillTrace", module = "omniprune_py")]
struct PyPrefillTrace {
    run: PipelineRun,
    config: core::ModelConfig,
}

#[pymethods]
impl PyPrefillTrace {
    #[getter]
    fn seq_len(&self) -> Vec<usize> {
        self.run.trace.seq_len.clone()
    }

    #[getter]
    fn retained_v(&self) -> Vec<usize> {
        self.run.trace.retained_v.clone()
    }

    #[getter]
    fn retained_a(&self) -> Vec<usize> {
        self.run.trace.retained_a.clone()
    }

    /// Layers where a budget was applied or the non-text stream removed.
    fn drop_layers(&self) -> Vec<usize> {
        self.run.trace.selections.iter().map(|s| s.layer).collect()
    }

    fn mean_retention(&self) -> (f64, f64) {
        core::mean_retention(&self.run.trace)
    }

    fn flops_ratio(&self) -> f64 {
        core::trace_flops(&self.run.trace, &self.config).ratio_vs_full
    }

    fn output(&self) -> PyTokenStream {
        PyTokenStream { inner: self.run.output.clone(), oracle: None }
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.run.trace).map_err(err)
    }
}

#[pyfunction]
fn solve_delta(config: &PyModelConfig, ratio: f64, lam: f64) -> PyResult<(f64, f64)> {
    let s = core::solve_delta(&config.inner, ratio, lam).map_err(err)?;
    Ok((s.delta, s.c))
}

#[pyfunction]
fn build_schedule(config: &PyModelConfig, ratio: f64, lam: f64) -> PyResult<PySchedule> {
    let p = core::build_schedule(&config.inner, ratio, lam).map_err(err)?;
    Ok(PySchedule {
        delta: p.delta,
        c: p.c,
        r_s: p.r_s,
        r_m: (p.r_m[0], p.r_m[1], p.r_m[2]),
        trr: p.per_layer_trr,
        drop_layers: p.drop_layers,
    })
}

#[pyfunction]
fn overall_ratio(ratio_v: f64, ratio_a: f64, n_v: usize, n_a: usize) -> PyResult<f64> {
    core::overall_ratio(ratio_v, ratio_a, &WindowLayout::uniform(1, n_v, n_a)).map_err(err)
}

/// Visual ratio keeping every audio token; raises when infeasible.
#[pyfunction]
fn audio_intact_rv(ratio: f64, n_v: usize, n_a: usize) -> PyResult<f64> {
    core::audio_intact_rv(ratio, &WindowLayout::uniform(1, n_v, n_a)).map_err(err)
}

/// Greedy max-min picks over row vectors, in pick order.
#[pyfunction]
#[pyo3(signature = (rows, k, weights = None))]
fn greedy_maxmin(rows: Vec<Vec<f32>>, k: usize, weights: Option<Vec<f64>>) -> PyResult<Vec<usize>> {
    let dim = rows.first().map_or(1, Vec::len);
    if rows.iter().any(|r| r.len() != dim) {
        return Err(PyValueError::new_err("rows differ in length"));
    }
    let weights = weights.unwrap_or_else(|| vec![1.0; rows.len()]);
    let flat: Vec<f32> = rows.concat();
    Ok(core::greedy_maxmin(&flat, dim, &weights, k).map_err(err)?.order)
}

/// Budget plan as `(b, b_v, b_a)` lists.
#[pyfunction]
#[pyo3(signature = (s_v, s_a, r_v, r_a, n_v, n_a, totals = None))]
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
fn allocate(
    s_v: Vec<f64>,
    s_a: Vec<f64>,
    r_v: f64,
    r_a: f64,
    n_v: Vec<usize>,
    n_a: Vec<usize>,
    totals: Option<(usize, usize)>,
) -> PyResult<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let layout = WindowLayout::new(n_v, n_a).map_err(err)?;
    let totals = totals.unwrap_or((layout.total_v(), layout.total_a()));
    let rel = core::RelevanceScores::from_modality_weights(s_v, s_a, 0.1).map_err(err)?;
    let plan = core::allocate(&rel, r_v, r_a, totals, &layout).map_err(err)?;
    Ok((plan.b, plan.b_v, plan.b_a))
}

#[pyfunction]
#[pyo3(signature = (seed, windows, dim, n_v, n_a, n_q, planted_windows = vec![], planted_gain = 0.0))]
#[allow(clippy::too_many_arguments)]
fn synth_generate(
    seed: u64,
    windows: usize,
    dim: usize,
    n_v: usize,
    n_a: usize,
    n_q: usize,
    planted_windows: Vec<usize>,
    planted_gain: f64,
) -> PyResult<PyTokenStream> {
    let spec = core::SynthSpec::new(seed, windows, dim, n_v, n_a, n_q).with_planted(planted_windows, planted_gain);
    let (inner, oracle) = core::synth_generate(&spec).map_err(err)?;
    Ok(PyTokenStream { inner, oracle: Some(oracle) })
}

/// Three-stage run. Synthetic streams use their oracle; other streams
/// use embedding attention with the last text token as query.
#[pyfunction]
#[pyo3(signature = (stream, config, ratio_v, ratio_a, lam = 1.4, tau = 0.1))]
fn run_pipeline(
    stream: &PyTokenStream,
    config: &PyModelConfig,
    ratio_v: f64,
    ratio_a: f64,
    lam: f64,
    tau: f64,
) -> PyResult<PyPrefillTrace> {
    let spec = core::RetentionSpec::new(ratio_v, ratio_a, lam, tau);
    let run = match &stream.oracle {
        Some(o) => core::run_pipeline(&stream.inner, o, &config.inner, &spec),
        None => core::run_pipeline(&stream.inner, &core::pipeline::EmbeddingAttention::default(), &config.inner, &spec),
    }
    .map_err(err)?;
    Ok(PyPrefillTrace { run, config: config.inner.clone() })
}

#[pyfunction]
fn layer_flops(n: usize, config: &PyModelConfig) -> f64 {
    core::layer_flops(n, &config.inner)
}

#[pyfunction]
fn modality_code(name: &str) -> PyResult<String> {
    let m = match name {
        "visual" => Modality::Visual,
        "audio" => Modality::Audio,
        "text" => Modality::Text,
        _ => return Err(PyValueError::new_err(format!("unknown modality {name:?}"))),
    };
    Ok((m.code() as char).to_string())
}

#[pymodule]
pub fn omniprune_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PyTokenStream>()?;
    m.add_class::<PyPrefillTrace>()?;
    m.add_function(wrap_pyfunction!(solve_delta, m)?)?;
    m.add_function(wrap_pyfunction!(build_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(overall_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(audio_intact_rv, m)?)?;
    m.add_function(wrap_pyfunction!(greedy_maxmin, m)?)?;
    m.add_function(wrap_pyfunction!(allocate, m)?)?;
    m.add_function(wrap_pyfunction!(synth_generate, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(layer_flops, m)?)?;
    m.add_function(wrap_pyfunction!(modality_code, m)?)?;
    Ok(())
}
