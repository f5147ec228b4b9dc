use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use relcon_core::augment::rotation3d;
use relcon_core::clirun::{self, RunConfig};
use relcon_core::dataio::{Window, WindowId};
use relcon_core::distnet::{DistanceNet, DistanceNetConfig, FrozenDistance};
use relcon_core::encoder::{Encoder, EncoderConfig};
use relcon_core::evalkit::{self, MetricsReport};
use relcon_core::ndtensor;
use relcon_core::relconloss::{self, LossConfig, ScoredCandidate};
use relcon_core::sampler::{CandidateId, CandidateSource};
use relcon_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Json(_) | Error::Data(_) | Error::Shape { .. } | Error::Csv(_) | Error::Io(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn window(samples: Vec<[f64; 3]>) -> Window {
    Window::from_samples(samples)
}

fn config(json: Option<&str>, seed: Option<u64>) -> PyResult<RunConfig> {
    let mut cfg = match json {
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(format!("config: {e}")))?,
        None => RunConfig::desk(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn loss_config(temperature: f64, normalize: bool) -> LossConfig {
    LossConfig {
        temperature,
        normalize_embeddings: normalize,
        ..LossConfig::default()
    }
}

fn scalars(report: MetricsReport) -> BTreeMap<String, f64> {
    report.scalars
}

/// Frozen reconstruction distance network.
#[pyclass(name = "DistanceModel", frozen)]
struct PyDistance(FrozenDistance);

#[pymethods]
impl PyDistance {
    /// Untrained network from a JSON architecture (desk preset when omitted).
    #[new]
    #[pyo3(signature = (config_json=None, seed=0))]
    fn new(config_json: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg: DistanceNetConfig = match config_json {
            Some(t) => serde_json::from_str(t).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => DistanceNetConfig::desk(),
        };
        Ok(Self(FrozenDistance::new(DistanceNet::new(cfg, seed).map_err(py_err)?)))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        FrozenDistance::load(&path).map(Self).map_err(py_err)
    }

    /// Reconstruction error of `anchor` from `candidate`, each a list of (x, y, z).
    fn distance(&self, anchor: Vec<[f64; 3]>, candidate: Vec<[f64; 3]>) -> PyResult<f64> {
        self.0.distance(&window(anchor), &window(candidate)).map_err(py_err)
    }

    /// Returns `(attention rows, reconstruction, distance)`.
    fn reconstruct(&self, anchor: Vec<[f64; 3]>, candidate: Vec<[f64; 3]>) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>, f64)> {
        let r = self.0.net().reconstruct(&window(anchor), &window(candidate)).map_err(py_err)?;
        Ok((evalkit::tensor_rows(&r.attention), evalkit::tensor_rows(&r.recon), r.distance))
    }

    fn digest(&self) -> String {
        self.0.digest()
    }
}

/// Convolutional window encoder.
#[pyclass(name = "Encoder", frozen)]
struct PyEncoder(Encoder);

#[pymethods]
impl PyEncoder {
    #[new]
    #[pyo3(signature = (config_json=None, seed=0))]
    fn new(config_json: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg: EncoderConfig = match config_json {
            Some(t) => serde_json::from_str(t).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => EncoderConfig::desk(),
        };
        Encoder::new(cfg, seed).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Encoder::load(&path).map(Self).map_err(py_err)
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.0.embed_dim()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.0.num_params()
    }

    fn encode(&self, samples: Vec<[f64; 3]>) -> PyResult<Vec<f64>> {
        self.0.encode(&window(samples)).map_err(py_err)
    }

    fn encode_batch(&self, windows: Vec<Vec<[f64; 3]>>) -> PyResult<Vec<Vec<f64>>> {
        let ws: Vec<Window> = windows.into_iter().map(window).collect();
        Ok(evalkit::tensor_rows(&self.0.encode_batch(&ws).map_err(py_err)?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(py_err)
    }
}

/// Desk-preset run configuration as JSON.
#[pyfunction]
fn default_config() -> PyResult<String> {
    serde_json::to_string_pretty(&RunConfig::desk()).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Effective configuration after ablations and seed derivation, as JSON.
#[pyfunction]
#[pyo3(signature = (config_json=None, seed=None))]
fn effective_config(config_json: Option<&str>, seed: Option<u64>) -> PyResult<String> {
    let cfg = config(config_json, seed)?.effective();
    serde_json::to_string_pretty(&cfg).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pyfunction]
#[pyo3(signature = (out, config_json=None, seed=None))]
fn gen_synth(py: Python<'_>, out: PathBuf, config_json: Option<&str>, seed: Option<u64>) -> PyResult<()> {
    let mut cfg = config(config_json, None)?;
    if let Some(s) = seed {
        cfg.data.synthetic.seed = s;
    }
    py.detach(|| clirun::cmd_gen_synth(&cfg, &out)).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (out, config_json=None, seed=None))]
fn train_distance(py: Python<'_>, out: PathBuf, config_json: Option<&str>, seed: Option<u64>) -> PyResult<BTreeMap<String, f64>> {
    let cfg = config(config_json, seed)?;
    py.detach(|| clirun::cmd_train_distance(&cfg, &out)).map(scalars).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (out, distance, config_json=None, seed=None))]
fn train_encoder(
    py: Python<'_>,
    out: PathBuf,
    distance: PathBuf,
    config_json: Option<&str>,
    seed: Option<u64>,
) -> PyResult<BTreeMap<String, f64>> {
    let mut cfg = config(config_json, seed)?;
    cfg.checkpoints.distance = Some(distance);
    py.detach(|| clirun::cmd_train_encoder(&cfg, &out)).map(scalars).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (out, encoder, config_json=None, seed=None))]
fn probe(py: Python<'_>, out: PathBuf, encoder: PathBuf, config_json: Option<&str>, seed: Option<u64>) -> PyResult<BTreeMap<String, f64>> {
    let mut cfg = config(config_json, seed)?;
    cfg.checkpoints.encoder = Some(encoder);
    py.detach(|| clirun::cmd_probe(&cfg, &out)).map(scalars).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (out, encoder, config_json=None, seed=None))]
fn finetune(py: Python<'_>, out: PathBuf, encoder: PathBuf, config_json: Option<&str>, seed: Option<u64>) -> PyResult<BTreeMap<String, f64>> {
    let mut cfg = config(config_json, seed)?;
    cfg.checkpoints.encoder = Some(encoder);
    py.detach(|| clirun::cmd_finetune(&cfg, &out)).map(scalars).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (out, encoder, config_json=None))]
fn embed(py: Python<'_>, out: PathBuf, encoder: PathBuf, config_json: Option<&str>) -> PyResult<PathBuf> {
    let mut cfg = config(config_json, None)?;
    cfg.checkpoints.encoder = Some(encoder);
    py.detach(|| clirun::cmd_embed(&cfg, &out)).map_err(py_err)
}

/// Writes `report.csv` under `out`; returns the metric names in column order.
#[pyfunction]
#[pyo3(signature = (runs, out, baseline=None))]
fn report(runs: Vec<PathBuf>, out: PathBuf, baseline: Option<&str>) -> PyResult<Vec<String>> {
    clirun::cmd_report(&runs, baseline, &out).map(|t| t.metrics).map_err(py_err)
}

#[pyfunction]
fn sparsemax(logits: Vec<f64>) -> PyResult<Vec<f64>> {
    ndtensor::sparsemax(&logits).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (anchor, positive, negatives, temperature=1.0, normalize=false))]
fn nt_xent(anchor: Vec<f64>, positive: Vec<f64>, negatives: Vec<Vec<f64>>, temperature: f64, normalize: bool) -> PyResult<f64> {
    let negs: Vec<&[f64]> = negatives.iter().map(Vec::as_slice).collect();
    relconloss::nt_xent(&anchor, &positive, &negs, &loss_config(temperature, normalize)).map_err(py_err)
}

/// Contrastive loss of one anchor against scored candidates.
/// `variant` is `relcon`, `binary` or `log_ratio`.
#[pyfunction]
#[pyo3(signature = (anchor, candidates, distances, variant="relcon", temperature=1.0, normalize=false))]
fn contrastive_loss(
    anchor: Vec<f64>,
    candidates: Vec<Vec<f64>>,
    distances: Vec<f64>,
    variant: &str,
    temperature: f64,
    normalize: bool,
) -> PyResult<f64> {
    if candidates.len() != distances.len() {
        return Err(PyValueError::new_err("candidates and distances differ in length"));
    }
    let mut cfg = loss_config(temperature, normalize);
    cfg.variant = variant.parse().map_err(py_err)?;
    let scored: Vec<ScoredCandidate> = candidates
        .into_iter()
        .zip(distances)
        .enumerate()
        .map(|(i, (embedding, d))| ScoredCandidate {
            id: CandidateId {
                window: WindowId {
                    recording_id: format!("candidate{i}"),
                    offset: 0,
                },
                augmented: false,
            },
            embedding,
            dist_to_anchor: d,
            source: CandidateSource::WithinUser,
        })
        .collect();
    relconloss::loss(&anchor, &scored, &cfg).map_err(py_err)
}

#[pyfunction]
fn negative_set(distances: Vec<f64>, positive: usize) -> PyResult<Vec<usize>> {
    relconloss::negative_set(&distances, positive).map_err(py_err)
}

#[pyfunction]
fn rotate(samples: Vec<[f64; 3]>, axis: [f64; 3], angle: f64) -> PyResult<Vec<[f64; 3]>> {
    rotation3d(&window(samples), axis, angle).map(|w| w.samples).map_err(py_err)
}

#[pyfunction]
fn majority_vote(predictions: Vec<usize>) -> PyResult<usize> {
    evalkit::majority_vote(&predictions).map_err(py_err)
}

#[pyfunction]
fn classification_metrics(
    preds: Vec<usize>,
    scores: Vec<Vec<f64>>,
    labels: Vec<usize>,
    n_classes: usize,
) -> PyResult<BTreeMap<String, f64>> {
    evalkit::classification_metrics(&preds, &scores, &labels, n_classes)
        .map(scalars)
        .map_err(py_err)
}

#[pyfunction]
fn regression_metrics(preds: Vec<f64>, targets: Vec<f64>, user_ids: Vec<String>) -> PyResult<BTreeMap<String, f64>> {
    evalkit::regression_metrics(&preds, &targets, &user_ids)
        .map(scalars)
        .map_err(py_err)
}

#[pymodule]
fn relcon(m: &Bound<'_, PyModule>) -> PyResult<()> {
    relcon_core::tune_allocator();
    m.add_class::<PyDistance>()?;
    m.add_class::<PyEncoder>()?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(effective_config, m)?)?;
    m.add_function(wrap_pyfunction!(gen_synth, m)?)?;
    m.add_function(wrap_pyfunction!(train_distance, m)?)?;
    m.add_function(wrap_pyfunction!(train_encoder, m)?)?;
    m.add_function(wrap_pyfunction!(probe, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(embed, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(sparsemax, m)?)?;
    m.add_function(wrap_pyfunction!(nt_xent, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(negative_set, m)?)?;
    m.add_function(wrap_pyfunction!(rotate, m)?)?;
    m.add_function(wrap_pyfunction!(majority_vote, m)?)?;
    m.add_function(wrap_pyfunction!(classification_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(regression_metrics, m)?)?;
    Ok(())
}
