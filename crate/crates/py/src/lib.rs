//! Python bindings. Results cross the boundary as JSON-compatible dicts.

use std::path::PathBuf;

use axtrain::checkpoint::{load_model, save_model};
use axtrain::config::RunConfig;
use axtrain::model::Model;
use axtrain::mult::{characterize, MultTable};
use axtrain::report::{self, CHECKPOINT_FILE};
use axtrain::trainer::{evaluate, train};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: axtrain::Error) -> PyErr {
    if e.is_user_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    let json = py.import("json")?;
    json.call_method1("loads", (v.to_string(),))
}

pub fn mult_stats_json(table: &str) -> axtrain::Result<serde_json::Value> {
    let t = MultTable::from_spec(table)?;
    let s = characterize(&t);
    Ok(serde_json::json!({
        "table": t.name,
        "mean_relative_error": s.mean_relative_error,
        "max_abs_error": s.max_abs_error,
        "mean_error": s.mean_error,
        "error_variance": s.error_variance,
    }))
}

/// Trains per the config and writes the usual artifacts; returns the summary.
pub fn train_json(config: &str, out: Option<PathBuf>) -> axtrain::Result<serde_json::Value> {
    let cfg = RunConfig::load(config)?;
    let dir = out.unwrap_or_else(|| cfg.run.output_dir.clone());
    let data = cfg.load_data()?;
    let hw = cfg.hardware()?;
    let mut model = cfg.build_model()?;
    let rep = train(&cfg.train, &mut model, &data.train, data.eval.as_ref(), &hw)?;
    report::write_report(&dir, &rep)?;
    save_model(dir.join(CHECKPOINT_FILE), &model)?;
    serde_json::to_value(&rep).map_err(|e| axtrain::Error::Invariant(e.to_string()))
}

pub fn eval_accuracy(checkpoint: &str, config: &str) -> axtrain::Result<f64> {
    let cfg = RunConfig::load(config)?;
    let data = cfg.load_data()?;
    let hw = cfg.hardware()?;
    let mut model = Model::tiny_conv(&cfg.model, cfg.train.method, cfg.train.seed)?;
    load_model(checkpoint, &mut model)?;
    model.set_mode(cfg.train.method);
    evaluate(&model, data.eval.as_ref().unwrap_or(&data.train), &hw)
}

#[pyfunction]
fn characterize_mult<'py>(py: Python<'py>, table: &str) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &mult_stats_json(table).map_err(py_err)?)
}

#[pyfunction]
#[pyo3(signature = (config, out_dir=None))]
fn train_config<'py>(py: Python<'py>, config: &str, out_dir: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let v = py.detach(|| train_json(config, out_dir)).map_err(py_err)?;
    to_py(py, &v)
}

#[pyfunction]
fn eval_checkpoint(py: Python<'_>, checkpoint: &str, config: &str) -> PyResult<f64> {
    py.detach(|| eval_accuracy(checkpoint, config)).map_err(py_err)
}

#[pyfunction]
fn expected_or(values: Vec<f32>) -> PyResult<f32> {
    axtrain::sc::expected_or(&values).map_err(py_err)
}

#[pymodule]
fn axtrain_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(characterize_mult, m)?)?;
    m.add_function(wrap_pyfunction!(train_config, m)?)?;
    m.add_function(wrap_pyfunction!(eval_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(expected_or, m)?)?;
    Ok(())
}
