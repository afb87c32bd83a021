//! Python bindings. Matrices cross the boundary as lists of rows of floats and
//! are computed in f64.

use blockprefill::criticality::CriticalityMatrix;
use blockprefill::pipeline::synthetic_input;
use blockprefill::{self as core, HeadGeometry, Matrix, Mode};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

type Rows = Vec<Vec<f64>>;

fn to_py(e: core::Error) -> PyErr {
    match e {
        core::Error::Internal(_) | core::Error::Io { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: &Rows) -> core::Result<Matrix<f64>> {
    Matrix::from_rows(rows)
}

fn rows(m: &Matrix<f64>) -> Rows {
    (0..m.shape().0).map(|i| m.row(i).to_vec()).collect()
}

fn parse_mode(mode: &str) -> PyResult<Mode> {
    match mode {
        "dense" => Ok(Mode::Dense),
        "pruned" => Ok(Mode::Pruned),
        other => Err(PyValueError::new_err(format!("unknown mode `{other}`"))),
    }
}

/// Budgeted pruning parameters.
#[pyclass(name = "PrunedAttnConfig", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: core::PrunedAttnConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (segment_size=512, block_size=32, budget=1024, alpha=0.25, scale_logits=false, force_diagonal=true))]
    fn new(
        segment_size: usize,
        block_size: usize,
        budget: usize,
        alpha: f64,
        scale_logits: bool,
        force_diagonal: bool,
    ) -> PyResult<Self> {
        let inner = core::PrunedAttnConfig {
            segment_size,
            block_size,
            budget,
            alpha,
            scale_logits,
            force_diagonal,
            causal_mask: true,
        };
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn segment_size(&self) -> usize {
        self.inner.segment_size
    }

    #[getter]
    fn block_size(&self) -> usize {
        self.inner.block_size
    }

    #[getter]
    fn budget(&self) -> usize {
        self.inner.budget
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }

    #[getter]
    fn scale_logits(&self) -> bool {
        self.inner.scale_logits
    }

    #[getter]
    fn force_diagonal(&self) -> bool {
        self.inner.force_diagonal
    }

    #[getter]
    fn budget_blocks(&self) -> usize {
        self.inner.budget_blocks()
    }

    /// True when a sequence of length `n` would run dense.
    fn uses_dense_fallback(&self, n: usize) -> bool {
        core::dense_fallback_policy(n, &self.inner)
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "PrunedAttnConfig(segment_size={}, block_size={}, budget={}, alpha={}, scale_logits={}, force_diagonal={})",
            c.segment_size,
            c.block_size,
            c.budget,
            c.alpha,
            if c.scale_logits { "True" } else { "False" },
            if c.force_diagonal { "True" } else { "False" },
        )
    }
}

/// Row-wise softmax, optionally with a causal mask.
#[pyfunction]
#[pyo3(signature = (m, causal=false))]
fn softmax_rows(m: Rows, causal: bool) -> PyResult<Rows> {
    let m = matrix(&m).map_err(to_py)?;
    let mask = if causal { core::Mask::Causal } else { core::Mask::None };
    core::softmax_rows(&m, mask).map(|r| rows(&r)).map_err(to_py)
}

/// Exact causal attention for one head. `scale` defaults to `1/sqrt(d)`.
#[pyfunction]
#[pyo3(signature = (q, k, v, scale=None))]
fn dense_causal_attention(q: Rows, k: Rows, v: Rows, scale: Option<f64>) -> PyResult<Rows> {
    let (q, k, v) = (matrix(&q).map_err(to_py)?, matrix(&k).map_err(to_py)?, matrix(&v).map_err(to_py)?);
    let scale = scale.unwrap_or_else(|| 1.0 / (q.shape().1 as f64).sqrt());
    core::dense_causal_attention(q.view(), k.view(), v.view(), scale, false)
        .map(|o| rows(&o.output))
        .map_err(to_py)
}

fn estimate(q: &Rows, k: &Rows, cfg: &core::PrunedAttnConfig, prev: Option<&Rows>) -> core::Result<CriticalityMatrix<f64>> {
    let (q, k) = (matrix(q)?, matrix(k)?);
    let reps = core::segment_representatives(q.view(), cfg.segment_size, k.view(), cfg.block_size)?;
    let prev = match prev {
        Some(p) => Some(CriticalityMatrix::new(matrix(p)?, reps.tiling)?),
        None => None,
    };
    core::estimate_criticality(&reps, prev.as_ref(), cfg.alpha, cfg.scale_logits)
}

/// Segment × block criticality scores, fused with `prev` when given.
#[pyfunction]
#[pyo3(signature = (q, k, config, prev=None))]
fn estimate_criticality(q: Rows, k: Rows, config: &PyConfig, prev: Option<Rows>) -> PyResult<Rows> {
    estimate(&q, &k, &config.inner, prev.as_ref())
        .map(|s| rows(s.scores()))
        .map_err(to_py)
}

/// Block indices chosen for `segment` from its score row, ascending.
#[pyfunction]
fn select_blocks(scores: Vec<f64>, segment: usize, n: usize, config: &PyConfig) -> PyResult<Vec<usize>> {
    let tiling = config.inner.tiling(n).map_err(to_py)?;
    if segment >= tiling.n_segments() {
        return Err(PyValueError::new_err(format!(
            "segment {segment} out of range for {} segments",
            tiling.n_segments()
        )));
    }
    if scores.len() != tiling.n_blocks() {
        return Err(PyValueError::new_err(format!(
            "expected {} scores, got {}",
            tiling.n_blocks(),
            scores.len()
        )));
    }
    Ok(core::select_blocks(&scores, segment, &tiling, &config.inner).blocks)
}

/// Block-sparse attention for one head, estimating scores from `q` and `k`.
#[pyfunction]
fn pruned_attention(q: Rows, k: Rows, v: Rows, config: &PyConfig) -> PyResult<Rows> {
    let scores = estimate(&q, &k, &config.inner, None).map_err(to_py)?;
    let (q, k, v) = (matrix(&q).map_err(to_py)?, matrix(&k).map_err(to_py)?, matrix(&v).map_err(to_py)?);
    core::pruned_attention(q.view(), k.view(), v.view(), &scores, &config.inner, false)
        .map(|o| rows(&o.output))
        .map_err(to_py)
}

/// Top-`k` key positions at or before `position`, ascending.
#[pyfunction]
fn exact_critical_set(query: Vec<f64>, position: usize, keys: Rows, k: usize) -> PyResult<Vec<usize>> {
    let keys = matrix(&keys).map_err(to_py)?;
    core::exact_critical_set(&query, position, keys.view(), k)
        .map(|s| s.indices)
        .map_err(to_py)
}

/// Overlap of two critical sets of equal size, in [0, 1].
#[pyfunction]
fn locality_overlap(a: Vec<usize>, b: Vec<usize>) -> PyResult<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(PyValueError::new_err("critical sets must be non-empty and of equal size"));
    }
    let set = |indices: Vec<usize>| core::CriticalSet {
        position: 0,
        k: indices.len(),
        indices,
    };
    core::locality_overlap(&set(a), &set(b)).map_err(to_py)
}

/// Analytic FLOP totals: `(dense, pruned, overhead, ratio)`.
#[pyfunction]
#[pyo3(signature = (n, layers, n_heads, head_dim, config, mode="pruned"))]
fn count_flops(
    n: usize,
    layers: usize,
    n_heads: usize,
    head_dim: usize,
    config: &PyConfig,
    mode: &str,
) -> PyResult<(u64, u64, u64, f64)> {
    let geometry = HeadGeometry::new(n_heads, head_dim).map_err(to_py)?;
    let r = core::count_flops(n, layers, geometry, &config.inner, parse_mode(mode)?);
    Ok((r.dense, r.pruned, r.overhead, r.ratio))
}

/// Seeded multi-layer attention model.
#[pyclass(name = "Model")]
struct PyModel {
    inner: core::ModelBundle<f64>,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (n_heads, head_dim, layers, seed=0))]
    fn synthetic(n_heads: usize, head_dim: usize, layers: usize, seed: u64) -> PyResult<Self> {
        let geometry = HeadGeometry::new(n_heads, head_dim).map_err(to_py)?;
        Ok(Self {
            inner: core::gen_synthetic_model(geometry, layers, core::RngSpec::new(seed)),
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        core::load_model(path).map(|inner| Self { inner }).map_err(to_py)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        core::save_model(&self.inner, path).map(|_| ()).map_err(to_py)
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.n_layers()
    }

    #[getter]
    fn model_dim(&self) -> usize {
        self.inner.geometry.model_dim()
    }

    /// Seeded `n × model_dim` input of standard normals.
    #[pyo3(signature = (n, seed=0))]
    fn synthetic_input(&self, n: usize, seed: u64) -> Rows {
        rows(&synthetic_input(n, self.model_dim(), core::RngSpec::new(seed)))
    }

    /// Runs every layer and returns the final hidden states.
    #[pyo3(signature = (x, config, mode="pruned", residual=false))]
    fn prefill(&self, x: Rows, config: &PyConfig, mode: &str, residual: bool) -> PyResult<Rows> {
        let x = matrix(&x).map_err(to_py)?;
        let mut opts = core::PrefillOptions::new(parse_mode(mode)?);
        opts.residual = residual;
        core::prefill(&self.inner, &x, &config.inner, &opts)
            .map(|r| rows(&r.hidden))
            .map_err(to_py)
    }
}

#[pymodule]
fn pyblockprefill(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(softmax_rows, m)?)?;
    m.add_function(wrap_pyfunction!(dense_causal_attention, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_criticality, m)?)?;
    m.add_function(wrap_pyfunction!(select_blocks, m)?)?;
    m.add_function(wrap_pyfunction!(pruned_attention, m)?)?;
    m.add_function(wrap_pyfunction!(exact_critical_set, m)?)?;
    m.add_function(wrap_pyfunction!(locality_overlap, m)?)?;
    m.add_function(wrap_pyfunction!(count_flops, m)?)?;
    Ok(())
}
