//! Python bindings for the `tstal` toolkit.
//!
//! Compiles to the `tstal_py` extension module. The surface mirrors the CLI
//! stages: dataset generation/loading, two-stream training with refinement,
//! checkpoint I/O, localization, evaluation, and gradient verification.
//! Configs are passed as JSON strings with the same schema as the CLI's
//! config files; omitted configs fall back to the library defaults.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use pyo3::IntoPyObjectExt;
use serde_json::Value as JsonValue;
use std::path::PathBuf;

use tstal::dataio::{generate_synthetic, load_dataset, save_dataset, SynthConfig};
use tstal::eval::default_iou_thresholds;
use tstal::grad::{grad_check_random, Mode};
use tstal::localize::{localize_dataset, LocalizeConfig};
use tstal::optim::{load_checkpoint, save_checkpoint, train_full, TrainConfig};

fn to_py_err(e: tstal::Error) -> PyErr {
    match &e {
        tstal::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Parses an optional JSON config string, falling back to `T::default()`.
fn parse_config<T>(json: Option<&str>, what: &str) -> PyResult<T>
where
    T: serde::de::DeserializeOwned + Default,
{
    match json {
        None => Ok(T::default()),
        Some(s) => serde_json::from_str(s)
            .map_err(|e| PyValueError::new_err(format!("invalid {what} config JSON: {e}"))),
    }
}

/// Recursively converts a JSON value into Python objects (dict/list/str/num).
fn json_to_py(py: Python<'_>, v: &JsonValue) -> PyResult<Py<PyAny>> {
    Ok(match v {
        JsonValue::Null => py.None(),
        JsonValue::Bool(b) => b.into_py_any(py)?,
        JsonValue::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_py_any(py)?
            } else if let Some(u) = n.as_u64() {
                u.into_py_any(py)?
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_py_any(py)?
            }
        }
        JsonValue::String(s) => s.into_py_any(py)?,
        JsonValue::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_py_any(py)?
        }
        JsonValue::Object(map) => {
            let dict = PyDict::new(py);
            for (k, val) in map {
                dict.set_item(k, json_to_py(py, val)?)?;
            }
            dict.into_py_any(py)?
        }
    })
}

/// Serializes any `Serialize` value into a Python dict/list tree.
fn serialize_to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let json = serde_json::to_value(value)
        .map_err(|e| PyValueError::new_err(format!("serialization failed: {e}")))?;
    json_to_py(py, &json)
}

/// A loaded two-stream dataset (manifest plus per-video feature matrices).
#[pyclass(module = "tstal_py", skip_from_py_object)]
#[derive(Clone)]
struct Dataset {
    inner: tstal::dataio::Dataset,
}

#[pymethods]
impl Dataset {
    /// Loads a dataset from a `manifest.json` path.
    #[staticmethod]
    fn load(manifest_path: PathBuf) -> PyResult<Dataset> {
        Ok(Dataset { inner: load_dataset(&manifest_path).map_err(to_py_err)? })
    }

    /// Writes the manifest and feature files into `dir`; returns the
    /// manifest path.
    fn save(&self, dir: PathBuf) -> PyResult<PathBuf> {
        save_dataset(&self.inner, &dir).map_err(to_py_err)?;
        Ok(dir.join("manifest.json"))
    }

    /// Splits off the first `n` videos: `(head, tail)`.
    fn split_at(&self, n: usize) -> PyResult<(Dataset, Dataset)> {
        if n > self.inner.len() {
            return Err(PyValueError::new_err(format!(
                "split point {n} past end of dataset ({} videos)",
                self.inner.len()
            )));
        }
        let (head, tail) = self.inner.clone().split_at(n);
        Ok((Dataset { inner: head }, Dataset { inner: tail }))
    }

    #[getter]
    fn num_videos(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.manifest.num_classes
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.manifest.feature_dim
    }

    fn video_ids(&self) -> Vec<String> {
        self.inner.manifest.videos.iter().map(|v| v.id.clone()).collect()
    }

    /// The manifest as a dict (video metadata, labels, segments).
    fn manifest(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        serialize_to_py(py, &self.inner.manifest)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(videos={}, classes={}, feature_dim={})",
            self.inner.len(),
            self.inner.manifest.num_classes,
            self.inner.manifest.feature_dim
        )
    }
}

/// Parameters of both streams after one refinement iteration, or their EMA.
#[pyclass(module = "tstal_py", skip_from_py_object)]
#[derive(Clone)]
struct Checkpoint {
    inner: tstal::optim::Checkpoint,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Checkpoint> {
        Ok(Checkpoint { inner: load_checkpoint(&path).map_err(to_py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).map_err(to_py_err)
    }

    #[getter]
    fn refinement_iteration(&self) -> usize {
        self.inner.refinement_iteration
    }

    #[getter]
    fn is_ensemble(&self) -> bool {
        self.inner.ensemble
    }

    fn __repr__(&self) -> String {
        if self.inner.ensemble {
            "Checkpoint(ensemble)".to_string()
        } else {
            format!("Checkpoint(iteration={})", self.inner.refinement_iteration)
        }
    }
}

/// One scored temporal detection, in seconds.
#[pyclass(module = "tstal_py", get_all, set_all, from_py_object)]
#[derive(Clone)]
struct Detection {
    video_id: String,
    class_index: usize,
    start: f64,
    end: f64,
    score: f64,
}

#[pymethods]
impl Detection {
    #[new]
    fn new(video_id: String, class_index: usize, start: f64, end: f64, score: f64) -> Detection {
        Detection { video_id, class_index, start, end, score }
    }

    fn __repr__(&self) -> String {
        format!(
            "Detection(video_id='{}', class_index={}, start={:.3}, end={:.3}, score={:.4})",
            self.video_id, self.class_index, self.start, self.end, self.score
        )
    }
}

impl Detection {
    fn to_core(&self) -> tstal::localize::Detection {
        tstal::localize::Detection {
            video_id: self.video_id.clone(),
            class: self.class_index,
            start: self.start,
            end: self.end,
            score: self.score,
        }
    }

    fn from_core(d: &tstal::localize::Detection) -> Detection {
        Detection {
            video_id: d.video_id.clone(),
            class_index: d.class,
            start: d.start,
            end: d.end,
            score: d.score,
        }
    }
}

/// Generates a synthetic dataset and returns `(train, val)`.
///
/// `config_json` uses the `synth` config schema; defaults apply per field.
#[pyfunction]
#[pyo3(signature = (config_json=None))]
fn generate_dataset(config_json: Option<&str>) -> PyResult<(Dataset, Dataset)> {
    let cfg: SynthConfig = parse_config(config_json, "synth")?;
    let full = generate_synthetic(&cfg).map_err(to_py_err)?;
    let (train, val) = full.split_at(cfg.num_train);
    Ok((Dataset { inner: train }, Dataset { inner: val }))
}

/// Trains the base model and runs the refinement schedule.
///
/// Returns `(checkpoints, ensemble)`: one checkpoint per refinement
/// iteration (iteration 0 is the base model) plus their EMA ensemble.
/// `config_json` uses the `train` config schema.
#[pyfunction]
#[pyo3(signature = (dataset, config_json=None))]
fn train(dataset: &Dataset, config_json: Option<&str>) -> PyResult<(Vec<Checkpoint>, Checkpoint)> {
    let cfg: TrainConfig = parse_config(config_json, "train")?;
    cfg.validate().map_err(to_py_err)?;
    let mut sink = |_: &tstal::optim::TrainLogEntry| {};
    let (ckpts, ensemble) = train_full(&dataset.inner, &cfg, &mut sink).map_err(to_py_err)?;
    let ckpts = ckpts.into_iter().map(|inner| Checkpoint { inner }).collect();
    Ok((ckpts, Checkpoint { inner: ensemble }))
}

/// Localizes every video in the dataset with one checkpoint.
///
/// `config_json` uses the `localize` config schema. Returns detections in
/// ranked order (score descending within each video sweep).
#[pyfunction]
#[pyo3(signature = (dataset, checkpoint, config_json=None))]
fn localize(
    dataset: &Dataset,
    checkpoint: &Checkpoint,
    config_json: Option<&str>,
) -> PyResult<Vec<Detection>> {
    let cfg: LocalizeConfig = parse_config(config_json, "localize")?;
    cfg.validate().map_err(to_py_err)?;
    let dets = localize_dataset(&dataset.inner, &checkpoint.inner, &cfg).map_err(to_py_err)?;
    Ok(dets.iter().map(Detection::from_core).collect())
}

/// Scores detections against the dataset's ground-truth segments.
///
/// Returns the evaluation report as a dict: `map_at_iou` keyed by threshold,
/// `average_map`, `per_class_ap`, and `counts`. `thresholds` defaults to
/// 0.50:0.05:0.95.
#[pyfunction]
#[pyo3(signature = (detections, dataset, thresholds=None))]
fn evaluate(
    py: Python<'_>,
    detections: Vec<Detection>,
    dataset: &Dataset,
    thresholds: Option<Vec<f64>>,
) -> PyResult<Py<PyAny>> {
    let dets: Vec<tstal::localize::Detection> = detections.iter().map(|d| d.to_core()).collect();
    let thresholds = thresholds.unwrap_or_else(default_iou_thresholds);
    let report =
        tstal::eval::evaluate(&dets, &dataset.inner.manifest, &thresholds).map_err(to_py_err)?;
    serialize_to_py(py, &report)
}

fn summary_dict(py: Python<'_>, s: &tstal::grad::GradCheckSummary) -> PyResult<Py<PyDict>> {
    let d = PyDict::new(py);
    d.set_item("max_rel_error", s.max_rel_error)?;
    d.set_item("instances", s.instances)?;
    d.set_item("resampled", s.resampled)?;
    d.set_item("min_kink_margin", s.min_kink_margin)?;
    Ok(d.unbind())
}

/// Finite-difference verification of the hand-derived gradients.
///
/// `mode` is `"base"`, `"refine"`, or `"both"`. Returns a dict keyed by
/// mode with `max_rel_error`, `instances`, `resampled`, `min_kink_margin`.
#[pyfunction]
#[pyo3(signature = (mode="both", trials=20, snippets=12, feature_dim=6, embed_dim=5,
                    classes=3, step=1e-5, seed=0))]
#[allow(clippy::too_many_arguments)]
fn grad_check(
    py: Python<'_>,
    mode: &str,
    trials: usize,
    snippets: usize,
    feature_dim: usize,
    embed_dim: usize,
    classes: usize,
    step: f64,
    seed: u64,
) -> PyResult<Py<PyDict>> {
    let modes: Vec<Mode> = match mode {
        "base" => vec![Mode::Base],
        "refine" => vec![Mode::Refine],
        "both" => vec![Mode::Base, Mode::Refine],
        other => {
            return Err(PyValueError::new_err(format!(
                "mode must be 'base', 'refine', or 'both', got '{other}'"
            )))
        }
    };
    let weights = tstal::losses::LossWeights::default();
    let out = PyDict::new(py);
    for m in modes {
        let summary =
            grad_check_random(trials, (snippets, feature_dim, embed_dim, classes), m, &weights, step, seed)
                .map_err(to_py_err)?;
        let key = match m {
            Mode::Base => "base",
            Mode::Refine => "refine",
        };
        out.set_item(key, summary_dict(py, &summary)?)?;
    }
    Ok(out.unbind())
}

/// The full default configuration (synth/train/localize) as a dict.
#[pyfunction]
fn default_config(py: Python<'_>) -> PyResult<Py<PyAny>> {
    serialize_to_py(py, &tstal::config::RunConfig::default())
}

#[pymodule]
fn tstal_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Dataset>()?;
    m.add_class::<Checkpoint>()?;
    m.add_class::<Detection>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(localize, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    Ok(())
}
