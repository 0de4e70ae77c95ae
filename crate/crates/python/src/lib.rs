use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use czsl_core::error::Error;
use czsl_core::evaluation::{bias_sweep as sweep, CurveSummary, Truth, World};
use czsl_core::numeric::{GradCheckOptions, Tensor};
use czsl_core::workbench::config::RunConfig;
use czsl_core::workbench::{gradcheck as gc, run, splits, synthetic};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::Parameter(_) | Error::Dimension(_) => {
            PyValueError::new_err(e.to_string())
        }
        Error::Io(_) => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn summary(s: CurveSummary) -> HashMap<String, f64> {
    HashMap::from([("S".into(), s.seen), ("U".into(), s.unseen), ("HM".into(), s.hm), ("AUC".into(), s.auc)])
}

fn parse_world(world: Option<&str>) -> PyResult<Option<World>> {
    world.map(|w| w.parse().map_err(py_err)).transpose()
}

/// Run configuration parsed from TOML.
#[pyclass(name = "RunConfig", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (toml = ""))]
    fn new(toml: &str) -> PyResult<Self> {
        Ok(Self { inner: RunConfig::from_toml(toml).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: RunConfig::load(&path).map_err(py_err)? })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(hash={}, seed={})", self.inner.hash(), self.inner.seed)
    }
}

/// Writes the synthetic task for `config` as a split directory.
#[pyfunction]
fn gen_data(config: &PyRunConfig, out: PathBuf) -> PyResult<(usize, usize, usize)> {
    let ds = synthetic::gen_synthetic(&config.inner.synthetic_spec()).map_err(py_err)?;
    splits::write_dataset(&out, &ds).map_err(py_err)?;
    Ok((ds.train.len(), ds.val.len(), ds.test.len()))
}

/// Trains, writes the run directory under `root` and returns it with the
/// test summary.
#[pyfunction]
fn train(py: Python<'_>, config: &PyRunConfig, root: PathBuf) -> PyResult<(PathBuf, HashMap<String, f64>)> {
    let cfg = config.inner.clone();
    py.detach(move || {
        let dir = run::run_dir(&root, &cfg);
        let (ds, out) = run::train(&cfg)?;
        run::write_run(&dir, &cfg, &ds, &out)?;
        Ok((dir, summary(out.eval.test.curve.summary)))
    })
    .map_err(py_err)
}

/// Re-evaluates a run directory. Returns whether stored validation metrics
/// reproduce, and the test summary.
#[pyfunction]
#[pyo3(signature = (run_dir, world = None))]
fn evaluate(py: Python<'_>, run_dir: PathBuf, world: Option<&str>) -> PyResult<(bool, HashMap<String, f64>)> {
    let world = parse_world(world)?;
    py.detach(move || run::reevaluate(&run_dir, world))
        .map(|r| (r.reproduces(), summary(r.eval.test.curve.summary)))
        .map_err(py_err)
}

/// Exact calibration-bias sweep. `truth` holds the true column (or None)
/// and whether the true pair is seen; returns the curve points and summary.
#[pyfunction]
fn bias_sweep(
    scores: Vec<Vec<f64>>,
    truth: Vec<(Option<usize>, bool)>,
    seen_mask: Vec<bool>,
) -> PyResult<(Vec<(f64, f64, f64)>, HashMap<String, f64>)> {
    let width = scores.first().map_or(0, Vec::len);
    if scores.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("ragged score rows"));
    }
    let t = Tensor::new(vec![scores.len(), width], scores.concat()).map_err(py_err)?;
    let truth: Vec<Truth> = truth.into_iter().map(|(column, seen)| Truth { column, seen }).collect();
    let curve = sweep(&t, &truth, &seen_mask).map_err(py_err)?;
    let points = curve.points.iter().map(|p| (p.bias, p.seen_acc, p.unseen_acc)).collect();
    Ok((points, summary(curve.summary)))
}

/// Finite-difference checks: (name, passed, max relative error) per check.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn gradcheck(py: Python<'_>, seed: u64) -> PyResult<Vec<(String, bool, f64)>> {
    let opts = GradCheckOptions { seed, ..Default::default() };
    py.detach(move || gc::run_all(&opts))
        .map(|v| v.into_iter().map(|(n, r)| (n, r.passed(), r.max_rel_error)).collect())
        .map_err(py_err)
}

/// Counts of a split directory: train pairs and samples, then seen pairs,
/// unseen pairs and samples of validation and test.
#[pyfunction]
fn split_manifest(dir: PathBuf) -> PyResult<[usize; 8]> {
    Ok(splits::load_splits(&dir).map_err(py_err)?.manifest().row())
}

#[pymodule]
fn czsl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(bias_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(split_manifest, m)?)?;
    m.add("RUN_ROOT_ENV", run::RUN_ROOT_ENV)?;
    Ok(())
}
