//! Python bindings: configuration helpers, the metric functions and a
//! whole-pipeline entry point. Results come back as plain Python values or
//! JSON text.

use std::path::PathBuf;

use oslo_lab::harness::{attack_table, run_pipeline as run, ExperimentConfig, Summary};
use oslo_lab::metrics::{self, ScoredEntry, ScoredPanel};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: oslo_lab::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse(toml_text: &str) -> PyResult<ExperimentConfig> {
    let cfg = ExperimentConfig::parse(toml_text).map_err(value_err)?;
    cfg.validate().map_err(value_err)?;
    Ok(cfg)
}

fn panel(scores: Vec<f64>, members: Vec<bool>) -> PyResult<ScoredPanel> {
    if scores.len() != members.len() {
        return Err(PyValueError::new_err(format!(
            "{} scores but {} membership labels",
            scores.len(),
            members.len()
        )));
    }
    Ok(ScoredPanel::new(
        scores
            .into_iter()
            .zip(members)
            .enumerate()
            .map(|(sample_id, (score, is_member))| ScoredEntry {
                sample_id,
                score,
                is_member,
            })
            .collect(),
    ))
}

/// The default experiment configuration as TOML.
#[pyfunction]
fn default_config() -> String {
    ExperimentConfig::default().to_toml()
}

/// Parses and validates a TOML configuration; returns it normalized with
/// every default filled in.
#[pyfunction]
fn normalize_config(toml_text: &str) -> PyResult<String> {
    Ok(parse(toml_text)?.to_toml())
}

/// SHA-256 identity of a configuration (the output directory is excluded).
#[pyfunction]
fn config_hash(toml_text: &str) -> PyResult<String> {
    Ok(parse(toml_text)?.hash())
}

/// ROC over every distinct score: `(threshold, tpr, fpr, precision)` rows,
/// highest threshold first. A sample is flagged when its score is at least
/// the threshold.
#[pyfunction]
fn roc_points(scores: Vec<f64>, members: Vec<bool>) -> PyResult<Vec<(f64, Option<f64>, Option<f64>, Option<f64>)>> {
    let curve = metrics::roc_points(&panel(scores, members)?).map_err(value_err)?;
    Ok(curve.points.iter().map(|p| (p.parameter, p.tpr, p.fpr, p.precision)).collect())
}

/// Largest TPR over thresholds whose FPR does not exceed `cap`.
#[pyfunction]
fn tpr_at_fpr(scores: Vec<f64>, members: Vec<bool>, cap: f64) -> PyResult<f64> {
    metrics::tpr_at_fpr(&panel(scores, members)?, cap).map_err(value_err)
}

/// Runs every stage for `toml_text`, writing into `out_dir` (or the
/// configured directory), and returns summary.json as text. The GIL is
/// released while the pipeline runs.
#[pyfunction]
#[pyo3(signature = (toml_text, out_dir=None))]
fn run_pipeline(py: Python<'_>, toml_text: &str, out_dir: Option<PathBuf>) -> PyResult<String> {
    let mut cfg = parse(toml_text)?;
    if let Some(d) = out_dir {
        cfg.out_dir = d;
    }
    let root = cfg.out_dir.clone();
    py.detach(move || run(cfg).map_err(|e| PyRuntimeError::new_err(e.to_string())))?;
    std::fs::read_to_string(root.join("summary.json")).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Markdown table of the attacks in a summary.json text.
#[pyfunction]
fn summary_table(summary_json: &str) -> PyResult<String> {
    let s: Summary = serde_json::from_str(summary_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(attack_table(&s))
}

/// Adds every binding to `m`; shared by the extension module and embedded
/// interpreters.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_config, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(roc_points, m)?)?;
    m.add_function(wrap_pyfunction!(tpr_at_fpr, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(summary_table, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

#[pymodule]
fn oslo_lab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}
