//! Python bindings: synthetic data, metrics, linear algebra helpers and a
//! one-seed pipeline run.

use ividr_core::datagen::{self, GenConfig, SyntheticDataset};
use ividr_core::eval;
use ividr_core::numerics::{self, DenseMatrix};
use ividr_core::pipeline::{PipelineConfig, SeedRun};
use ividr_core::recmodel::Variant;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DenseMatrix> {
    DenseMatrix::from_rows(&rows).map_err(py_err)
}

fn nested(m: &DenseMatrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn gen_config(preset: &str) -> PyResult<GenConfig> {
    match preset {
        "paper" => Ok(GenConfig::paper()),
        "desk" => Ok(GenConfig::desk()),
        "coat" => Ok(GenConfig::coat()),
        other => Err(py_err(format!("unknown preset {other:?}; expected paper, desk or coat"))),
    }
}

/// A generated dataset with its ground-truth confounders.
#[pyclass(name = "SyntheticData", module = "ividr")]
pub struct PySyntheticData {
    inner: SyntheticDataset,
}

#[pymethods]
impl PySyntheticData {
    #[getter]
    pub fn n_users(&self) -> usize {
        self.inner.dataset.n_users
    }

    #[getter]
    pub fn n_items(&self) -> usize {
        self.inner.dataset.n_items
    }

    #[getter]
    pub fn exposure_density(&self) -> f64 {
        self.inner.exposure.density()
    }

    /// `(user, item, rating, split)` tuples; split is "biased" or "unbiased".
    pub fn triples(&self) -> Vec<(usize, usize, u8, &'static str)> {
        self.inner.dataset.triples.iter().map(|t| (t.user, t.item, t.rating, t.split.as_str())).collect()
    }

    pub fn proxies(&self) -> Vec<usize> {
        self.inner.w.clone()
    }

    pub fn confounders(&self) -> Vec<Vec<f64>> {
        nested(&self.inner.c)
    }

    /// Write the on-disk bundle read by the `ividr` CLI.
    pub fn save(&self, dir: &str) -> PyResult<()> {
        datagen::write_bundle(&self.inner, std::path::Path::new(dir)).map_err(py_err)
    }

    pub fn __repr__(&self) -> String {
        format!("SyntheticData(n_users={}, n_items={}, triples={})", self.n_users(), self.n_items(), self.inner.dataset.triples.len())
    }
}

/// Generate synthetic data from a preset with optional overrides.
#[pyfunction]
#[pyo3(signature = (preset="desk", seed=0, gamma=None, n_users=None, n_items=None))]
pub fn generate(preset: &str, seed: u64, gamma: Option<f64>, n_users: Option<usize>, n_items: Option<usize>) -> PyResult<PySyntheticData> {
    let mut cfg = gen_config(preset)?.with_seed(seed);
    if let Some(g) = gamma {
        cfg.gamma = g;
    }
    if let Some(n) = n_users {
        cfg.n_users = n;
    }
    if let Some(n) = n_items {
        cfg.n_items = n;
    }
    let inner = datagen::generate(&cfg).map_err(py_err)?;
    Ok(PySyntheticData { inner })
}

/// Moore-Penrose pseudoinverse.
#[pyfunction]
#[pyo3(signature = (a, rcond=None))]
pub fn pinv(a: Vec<Vec<f64>>, rcond: Option<f64>) -> PyResult<Vec<Vec<f64>>> {
    let m = matrix(a)?;
    let tol = rcond.unwrap_or_else(|| numerics::default_rcond(m.rows(), m.cols()));
    Ok(nested(&numerics::pinv(&m, tol).map_err(py_err)?))
}

/// NDCG@k of binary labels listed in ranked order; `None` without positives.
#[pyfunction]
pub fn ndcg_at_k(ranked_labels: Vec<u8>, k: usize) -> Option<f64> {
    eval::ndcg_at_k(&ranked_labels, k)
}

#[pyfunction]
pub fn recall_at_k(ranked_labels: Vec<u8>, k: usize) -> Option<f64> {
    eval::recall_at_k(&ranked_labels, k)
}

/// Mean correlation coefficient under the best coordinate matching.
#[pyfunction]
pub fn mcc(estimate: Vec<Vec<f64>>, truth: Vec<Vec<f64>>) -> PyResult<f64> {
    eval::mcc(&matrix(estimate)?, &matrix(truth)?).map_err(py_err)
}

#[pyfunction]
pub fn paired_ttest(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    eval::paired_ttest(&a, &b).map_err(py_err)
}

/// Train and test `variants` on one seed. `config_json` overrides the
/// pipeline settings (same keys as the CLI's `[pipeline]` table).
#[pyfunction]
#[pyo3(signature = (data, variants, seed=0, config_json=None))]
pub fn run_seed<'py>(
    py: Python<'py>,
    data: &PySyntheticData,
    variants: Vec<String>,
    seed: u64,
    config_json: Option<&str>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg: PipelineConfig = match config_json {
        Some(s) => serde_json::from_str(s).map_err(py_err)?,
        None => PipelineConfig::default(),
    };
    let variants: Vec<Variant> = variants.iter().map(|v| Variant::parse(v)).collect::<Result<_, _>>().map_err(py_err)?;
    let ds = &data.inner;
    let results = py
        .detach(|| -> ividr_core::Result<Vec<_>> {
            let mut run = SeedRun::new(&ds.dataset, &cfg, seed, Some(&ds.c))?;
            variants.iter().map(|&v| run.run_variant(v)).collect()
        })
        .map_err(py_err)?;
    results
        .into_iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("variant", r.variant.name())?;
            d.set_item("seed", r.seed)?;
            d.set_item("ndcg", r.test.ndcg)?;
            d.set_item("recall", r.test.recall)?;
            d.set_item("mcc", r.mcc)?;
            d.set_item("best_epoch", r.fit.best_epoch)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn ividr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PySyntheticData>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(pinv, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(mcc, m)?)?;
    m.add_function(wrap_pyfunction!(paired_ttest, m)?)?;
    m.add_function(wrap_pyfunction!(run_seed, m)?)?;
    Ok(())
}
