//! Python bindings: corpus generation, the oracle suites and the evaluation
//! primitives, on plain Python lists.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use dualenc::clustering::{knee_point as knee, purity as purity_fn};
use dualenc::config::ExperimentConfig;
use dualenc::eval::dtw_cosine as dtw;
use dualenc::gradcheck::loss_gradient_suite;
use dualenc::miclub::{club_gaussian_oracle, OracleConfig};
use dualenc::synth::generate_utterance;
use dualenc::{Error, Tensor};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => PyFileNotFoundError::new_err(io.to_string()),
        Error::Config(_) | Error::Input(_) | Error::Shape { .. } => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(to_py)
}

fn parse_config(text: Option<&str>) -> PyResult<ExperimentConfig> {
    ExperimentConfig::parse(text.unwrap_or("")).map_err(to_py)
}

/// Hex SHA-256 of the canonical form of a TOML or JSON experiment config.
#[pyfunction]
#[pyo3(signature = (text=None))]
fn config_hash(text: Option<&str>) -> PyResult<String> {
    Ok(parse_config(text)?.config_hash())
}

/// One synthetic utterance: `(frames, phone_labels, speaker_id)`.
#[pyfunction]
#[pyo3(signature = (utt_id, config=None, seed=0))]
fn utterance(utt_id: u32, config: Option<&str>, seed: u64) -> PyResult<(Vec<Vec<f32>>, Vec<u32>, u32)> {
    let mut cfg = parse_config(config)?;
    cfg.synth.seed = seed;
    let u = generate_utterance(&cfg.synth, utt_id, cfg.synth.mean_frames).map_err(to_py)?;
    let frames = (0..u.num_frames()).map(|t| u.frame(t).to_vec()).collect();
    Ok((frames, u.phone_labels, u.speaker_id))
}

/// DTW-aligned mean cosine distance between two `T x D` sequences.
#[pyfunction]
fn dtw_cosine(a: Vec<Vec<f64>>, x: Vec<Vec<f64>>) -> PyResult<f64> {
    dtw(&tensor(a)?, &tensor(x)?).map_err(to_py)
}

#[pyfunction]
fn purity(labels: Vec<usize>, truth: Vec<usize>) -> PyResult<f64> {
    purity_fn(&labels, &truth).map_err(to_py)
}

/// `(x, confident)` at the knee of a decreasing curve.
#[pyfunction]
fn knee_point(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<(f64, bool)> {
    let k = knee(&xs, &ys).map_err(to_py)?;
    Ok((k.x, k.confident))
}

/// Worst finite-difference relative error per loss.
#[pyfunction]
#[pyo3(signature = (configs=20, seed=0))]
fn gradcheck(py: Python<'_>, configs: usize, seed: u64) -> PyResult<BTreeMap<String, f64>> {
    let reports = py.detach(|| loss_gradient_suite(configs, seed)).map_err(to_py)?;
    Ok(reports.into_iter().map(|r| (r.loss.to_string(), r.max_rel_error)).collect())
}

/// `(analytic_mi, club_estimate)` on correlated Gaussian pairs.
#[pyfunction]
#[pyo3(signature = (rho, dims=4, seed=0))]
fn mi_oracle(py: Python<'_>, rho: f64, dims: usize, seed: u64) -> PyResult<(f64, f64)> {
    let r = py
        .detach(|| club_gaussian_oracle(rho, dims, seed, &OracleConfig::default()))
        .map_err(to_py)?;
    Ok((r.analytic, r.estimate))
}

#[pymodule]
fn dualenc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(utterance, m)?)?;
    m.add_function(wrap_pyfunction!(dtw_cosine, m)?)?;
    m.add_function(wrap_pyfunction!(purity, m)?)?;
    m.add_function(wrap_pyfunction!(knee_point, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(mi_oracle, m)?)?;
    Ok(())
}
