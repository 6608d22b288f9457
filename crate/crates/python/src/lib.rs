//! Python bindings (`import cpl_zsl`).
//!
//! Arrays cross the boundary as lists of floats; datasets here are small
//! enough that conversion cost does not matter.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use cpl_core::gradcheck::{self, GradcheckOptions};
use cpl_core::{
    AttributeEmbedder, Checkpoint, ClassId, CplError, Dims, HyperParams, LossVariant, SamplingMode, Setting,
    SyntheticSpec, TrainConfig,
};

fn to_py(e: CplError) -> PyErr {
    match e {
        CplError::Io { .. } | CplError::Format { .. } | CplError::NotCheckpoint { .. } | CplError::Version { .. } => {
            PyIOError::new_err(e.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

fn ids(v: &[ClassId]) -> Vec<usize> {
    v.iter().map(|c| c.0).collect()
}

pub fn parse_mode(mode: &str) -> Result<SamplingMode, String> {
    match mode {
        "task" => Ok(SamplingMode::TaskLevel),
        "sample" => Ok(SamplingMode::SampleLevel),
        other => Err(format!("mode must be 'task' or 'sample', got {other:?}")),
    }
}

pub fn parse_setting(setting: &str) -> Result<Setting, String> {
    match setting {
        "zsl" => Ok(Setting::Standard),
        "gzsl" => Ok(Setting::Generalized),
        other => Err(format!("setting must be 'zsl' or 'gzsl', got {other:?}")),
    }
}

/// Features, labels, splits and class attributes.
#[pyclass(module = "cpl_zsl", name = "Dataset", skip_from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    inner: cpl_core::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(manifest: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: cpl_core::load_dataset_from(manifest).map_err(to_py)?,
        })
    }

    /// Writes the dataset files and a manifest into `directory`; returns the manifest path.
    fn save(&self, directory: PathBuf) -> PyResult<PathBuf> {
        cpl_core::save_dataset_dir(&self.inner, directory).map_err(to_py)
    }

    #[getter]
    fn n_samples(&self) -> usize {
        self.inner.n_samples()
    }

    #[getter]
    fn d_feat(&self) -> usize {
        self.inner.d_feat()
    }

    #[getter]
    fn d_attr(&self) -> usize {
        self.inner.d_attr()
    }

    #[getter]
    fn seen_classes(&self) -> Vec<usize> {
        ids(&self.inner.seen_classes)
    }

    #[getter]
    fn unseen_classes(&self) -> Vec<usize> {
        ids(&self.inner.unseen_classes)
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        ids(&self.inner.labels)
    }

    #[getter]
    fn splits(&self) -> Vec<&'static str> {
        self.inner.split.iter().map(|s| s.as_str()).collect()
    }

    fn feature(&self, index: usize) -> PyResult<Vec<f64>> {
        if index >= self.inner.n_samples() {
            return Err(PyValueError::new_err(format!("sample {index} out of range")));
        }
        Ok(self.inner.feature(index).to_vec())
    }

    fn attribute(&self, class_id: usize) -> PyResult<Vec<f64>> {
        if class_id >= self.inner.attributes.rows() {
            return Err(PyValueError::new_err(format!("class {class_id} out of range")));
        }
        Ok(self.inner.attribute(ClassId(class_id)).to_vec())
    }

    fn __len__(&self) -> usize {
        self.inner.n_samples()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n_samples={}, d_feat={}, d_attr={}, seen={}, unseen={})",
            self.inner.n_samples(),
            self.inner.d_feat(),
            self.inner.d_attr(),
            self.inner.seen_classes.len(),
            self.inner.unseen_classes.len()
        )
    }
}

/// A trained (or freshly initialised) embedder with its optimiser state.
#[pyclass(module = "cpl_zsl", name = "Model", from_py_object)]
#[derive(Clone)]
pub struct PyModel {
    inner: Checkpoint,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: cpl_core::load_checkpoint(path).map_err(to_py)?,
        })
    }

    /// An untrained model with the default hyperparameters.
    #[staticmethod]
    #[pyo3(signature = (d_attr, d_feat, hidden=1024, seed=0))]
    fn init(d_attr: usize, d_feat: usize, hidden: usize, seed: u64) -> Self {
        let dims = Dims::new(d_attr, hidden, d_feat);
        Self {
            inner: Checkpoint {
                hyperparams: HyperParams {
                    epochs: 0,
                    hidden_size: hidden,
                    seed,
                    ..HyperParams::default()
                },
                options: Default::default(),
                embedder: AttributeEmbedder::init(dims, seed),
                adam: cpl_core::AdamState::new(dims),
            },
        }
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        cpl_core::save_checkpoint(&self.inner, path).map_err(to_py)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, pyo3::types::PyBytes> {
        pyo3::types::PyBytes::new(py, &self.inner.to_bytes())
    }

    /// The prototype an attribute vector maps to.
    fn prototype(&self, attributes: Vec<f64>) -> PyResult<Vec<f64>> {
        let (p, _) = self.inner.embedder.forward(&attributes).map_err(to_py)?;
        Ok(p.to_vec())
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.hyperparams.epochs
    }

    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        let d = self.inner.dims();
        (d.d_attr, d.hidden, d.d_feat)
    }
}

/// Returns `(dataset, oracle_accuracy)`, the latter from nearest-true-mean
/// recognition of the unseen test samples.
#[pyfunction]
#[pyo3(signature = (seen_classes=27, unseen_classes=10, train_per_class=50, test_per_class=30, d_attr=16, d_feat=64, noise_sigma=0.1, seed=0))]
#[allow(clippy::too_many_arguments)]
fn generate_synthetic(
    seen_classes: usize,
    unseen_classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    d_attr: usize,
    d_feat: usize,
    noise_sigma: f64,
    seed: u64,
) -> PyResult<(PyDataset, f64)> {
    let data = cpl_core::generate_synthetic(&SyntheticSpec {
        seen_classes,
        unseen_classes,
        train_per_class,
        test_per_class,
        d_attr,
        d_feat,
        noise_sigma,
        seed,
        class_budget: None,
    })
    .map_err(to_py)?;
    let oracle = data.oracle_accuracy().map_err(to_py)?;
    Ok((PyDataset { inner: data.dataset }, oracle))
}

/// Trains from scratch, or continues `resume_from` for `epochs` more epochs.
/// Returns the model and the mean combined loss of each epoch.
#[pyfunction]
#[pyo3(signature = (dataset, *, lambda_=0.1, gamma=0.9, classes=None, shots=10, epochs=40, lr=2e-4, weight_decay=1e-4, hidden=1024, seed=0, mode="task", cep_only=false, resume_from=None))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    dataset: &PyDataset,
    lambda_: f64,
    gamma: f64,
    classes: Option<usize>,
    shots: usize,
    epochs: usize,
    lr: f64,
    weight_decay: f64,
    hidden: usize,
    seed: u64,
    mode: &str,
    cep_only: bool,
    resume_from: Option<PyModel>,
) -> PyResult<(PyModel, Vec<f64>)> {
    let ds = &dataset.inner;
    let hyper = HyperParams {
        classes: classes.unwrap_or(ds.unseen_classes.len().max(1)),
        shots,
        lambda: lambda_,
        gamma,
        epochs,
        learning_rate: lr,
        weight_decay,
        hidden_size: hidden,
        seed,
    };
    let mut cfg = TrainConfig::new(hyper);
    cfg.options.mode = parse_mode(mode).map_err(PyValueError::new_err)?;
    if cep_only {
        cfg.options.variant = LossVariant::CepOnly;
    }
    let out = py
        .detach(|| match &resume_from {
            Some(m) => cpl_core::resume(ds, &cfg, &m.inner),
            None => cpl_core::train(ds, &cfg),
        })
        .map_err(to_py)?;
    let losses = out.epoch_means().into_iter().map(|(_, l)| l).collect();
    Ok((PyModel { inner: out.checkpoint }, losses))
}

/// Per-class and overall accuracies as a dict; `acc_seen` and
/// `harmonic_mean` are None in the standard setting.
#[pyfunction]
#[pyo3(signature = (dataset, model, setting="zsl"))]
fn evaluate<'py>(py: Python<'py>, dataset: &PyDataset, model: &PyModel, setting: &str) -> PyResult<Bound<'py, PyDict>> {
    let setting = parse_setting(setting).map_err(PyValueError::new_err)?;
    let ds = if model.inner.options.unit_attributes {
        dataset.inner.with_unit_attributes()
    } else {
        dataset.inner.clone()
    };
    let report = match setting {
        Setting::Standard => cpl_core::evaluate_standard(&ds, &model.inner.embedder),
        Setting::Generalized => cpl_core::evaluate_generalized(&ds, &model.inner.embedder),
    }
    .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("setting", report.setting.as_str())?;
    d.set_item("acc_unseen", report.acc_unseen)?;
    d.set_item("acc_seen", report.acc_seen)?;
    d.set_item("harmonic_mean", report.harmonic_mean)?;
    let per_class: Vec<(usize, f64)> = report.per_class_accuracy().into_iter().map(|(c, a)| (c.0, a)).collect();
    d.set_item("per_class", per_class.into_iter().collect::<std::collections::BTreeMap<_, _>>())?;
    d.set_item("csv", report.to_csv())?;
    Ok(d)
}

#[pyfunction]
fn harmonic_mean(acc_seen: f64, acc_unseen: f64) -> PyResult<f64> {
    cpl_core::harmonic_mean(acc_seen, acc_unseen).map_err(to_py)
}

/// Softmax over negative scaled distances.
#[pyfunction]
#[pyo3(signature = (distances, gamma=0.9))]
fn class_probabilities(distances: Vec<f64>, gamma: f64) -> PyResult<Vec<f64>> {
    cpl_core::class_probabilities(&distances, gamma).map_err(to_py)
}

/// Returns `(passed, max_relative_error, coordinates_checked)`.
#[pyfunction]
#[pyo3(signature = (trials=100, seed=0))]
fn gradient_check(py: Python<'_>, trials: usize, seed: u64) -> PyResult<(bool, f64, usize)> {
    let r = py
        .detach(|| {
            gradcheck::run(&GradcheckOptions {
                trials,
                seed,
                ..Default::default()
            })
        })
        .map_err(to_py)?;
    Ok((r.passed(), r.max_rel_error, r.coordinates))
}

#[pymodule]
fn cpl_zsl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(harmonic_mean, m)?)?;
    m.add_function(wrap_pyfunction!(class_probabilities, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
