//! Python bindings: build, train, score and checkpoint models from Python.

use std::path::PathBuf;

use dlf_core::data::{EncodedData, ExampleBatch, FeatureSchema, FieldDef, FieldKind, Splits};
use dlf_core::model::{DlfModel, ForwardMode, ModelConfig};
use dlf_core::trainer::{self, Checkpoint, TrainConfig};
use dlf_core::{metrics, DlfError};
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(err: DlfError) -> PyErr {
    match err {
        DlfError::Io(e) => PyIOError::new_err(e.to_string()),
        e @ (DlfError::NonFinite(_) | DlfError::Numeric(_)) => PyArithmeticError::new_err(e.to_string()),
        e @ DlfError::Contract(_) => PyRuntimeError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

/// Converts keyword arguments into a JSON object for serde.
fn kwargs_json(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<serde_json::Value> {
    let mut map = serde_json::Map::new();
    if let Some(kwargs) = kwargs {
        for (k, v) in kwargs.iter() {
            let key: String = k.extract()?;
            let value = if v.is_instance_of::<pyo3::types::PyBool>() {
                serde_json::Value::Bool(v.extract()?)
            } else if let Ok(i) = v.extract::<i64>() {
                serde_json::Value::from(i)
            } else if let Ok(f) = v.extract::<f64>() {
                serde_json::Value::from(f)
            } else if let Ok(s) = v.extract::<String>() {
                serde_json::Value::String(s)
            } else {
                return Err(PyValueError::new_err(format!("unsupported value for {key}")));
            };
            map.insert(key, value);
        }
    }
    Ok(serde_json::Value::Object(map))
}

fn from_kwargs<T: serde::de::DeserializeOwned>(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    serde_json::from_value(kwargs_json(kwargs)?).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn encoded(n_fields: usize, rows: Vec<Vec<u32>>, labels: Option<Vec<u8>>) -> PyResult<EncodedData> {
    if let Some(bad) = rows.iter().position(|r| r.len() != n_fields) {
        return Err(PyValueError::new_err(format!("row {bad} has {} ids, expected {n_fields}", rows[bad].len())));
    }
    let labels = labels.unwrap_or_else(|| vec![0; rows.len()]);
    EncodedData::new(n_fields, rows.into_iter().flatten().collect(), labels).map_err(to_py)
}

/// A model over categorical fields with the given vocabulary sizes (each
/// including the reserved out-of-vocabulary id 0).
#[pyclass(name = "Model", module = "dlf")]
struct PyModel {
    inner: DlfModel<f32>,
    schema_hash: u64,
}

#[pymethods]
impl PyModel {
    /// `Model(vocab_sizes, **config)`; keywords are model settings such as
    /// `d`, `layers`, `rank`, `eps`, `dropout`, `fusion`, `ablation`, `seed`.
    #[new]
    #[pyo3(signature = (vocab_sizes, **config))]
    fn new(vocab_sizes: Vec<usize>, config: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let cfg: ModelConfig = from_kwargs(config)?;
        let schema = FeatureSchema {
            label_column: "label".into(),
            fields: vocab_sizes
                .iter()
                .enumerate()
                .map(|(i, &v)| FieldDef { name: format!("f{i}"), kind: FieldKind::Categorical, vocab_size: v })
                .collect(),
        };
        let inner = DlfModel::init(&cfg, &schema).map_err(to_py)?;
        Ok(PyModel { inner, schema_hash: 0 })
    }

    /// Click probabilities for rows of per-field ids.
    fn predict(&self, py: Python<'_>, rows: Vec<Vec<u32>>) -> PyResult<Vec<f64>> {
        let data = encoded(self.inner.schema().n_fields(), rows, None)?;
        py.detach(|| trainer::predict_all(&self.inner, &data, 4096)).map_err(to_py)
    }

    /// Mean binary cross-entropy in evaluation mode.
    fn loss(&self, rows: Vec<Vec<u32>>, labels: Vec<u8>) -> PyResult<f64> {
        let n_fields = self.inner.schema().n_fields();
        let data = encoded(n_fields, rows, Some(labels))?;
        let batch = ExampleBatch { n_fields, ids: data.ids().to_vec(), labels: data.labels().to_vec() };
        self.inner.loss(&batch, ForwardMode::eval()).map_err(to_py)
    }

    /// AUC and LogLoss on labelled rows.
    fn evaluate(&self, rows: Vec<Vec<u32>>, labels: Vec<u8>) -> PyResult<(f64, f64)> {
        let data = encoded(self.inner.schema().n_fields(), rows, Some(labels))?;
        let r = trainer::evaluate(&self.inner, &data, 4096).map_err(to_py)?;
        Ok((r.auc, r.logloss))
    }

    /// Trains with Adam and early stopping on the validation rows; keeps the
    /// best parameters. Keywords are training settings (`lr`, `l2`,
    /// `batch_size`, `epochs`, `patience`, `seed`, ...). Returns one dict per
    /// epoch.
    #[pyo3(signature = (rows, labels, val_rows, val_labels, **config))]
    fn fit<'py>(
        &mut self,
        py: Python<'py>,
        rows: Vec<Vec<u32>>,
        labels: Vec<u8>,
        val_rows: Vec<Vec<u32>>,
        val_labels: Vec<u8>,
        config: Option<&Bound<'py, PyDict>>,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let cfg: TrainConfig = from_kwargs(config)?;
        let n = self.inner.schema().n_fields();
        let train = encoded(n, rows, Some(labels))?;
        let validation = encoded(n, val_rows, Some(val_labels))?;
        let splits = Splits { train, test: validation.clone(), validation };
        let hash = self.schema_hash;
        let inner = &mut self.inner;
        let outcome = py.detach(|| trainer::train(inner, &splits, &cfg, hash, |_| {})).map_err(to_py)?;
        outcome
            .history
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("epoch", r.epoch)?;
                d.set_item("loss", r.loss)?;
                d.set_item("val_auc", r.val_auc)?;
                d.set_item("val_logloss", r.val_logloss)?;
                d.set_item("seconds", r.seconds)?;
                Ok(d)
            })
            .collect()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn n_fields(&self) -> usize {
        self.inner.schema().n_fields()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.params().iter().map(|(_, n, _)| n.to_string()).collect()
    }

    /// Flat values and shape of a named parameter.
    fn param(&self, name: &str) -> PyResult<(Vec<f32>, Vec<usize>)> {
        let t = self.inner.params().by_name(name).ok_or_else(|| PyValueError::new_err(format!("no parameter {name}")))?;
        Ok((t.data().to_vec(), t.shape().to_vec()))
    }

    fn set_param(&mut self, name: &str, values: Vec<f32>) -> PyResult<()> {
        let id = self.inner.params().id(name).ok_or_else(|| PyValueError::new_err(format!("no parameter {name}")))?;
        let t = self.inner.params_mut().get_mut(id);
        if values.len() != t.numel() {
            return Err(PyValueError::new_err(format!("{name} holds {} values, got {}", t.numel(), values.len())));
        }
        t.data_mut().copy_from_slice(&values);
        Ok(())
    }

    /// Model settings as a JSON string.
    fn config_json(&self) -> String {
        serde_json::to_string(self.inner.config()).expect("config serializes")
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let ckpt = Checkpoint::from_model(&self.inner, self.schema_hash, f64::NAN, 0);
        trainer::save_checkpoint(&path, &ckpt).map_err(to_py)
    }

    /// Loads a checkpoint written by `save` or by the `dlf` command.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = trainer::load_checkpoint(&path).map_err(to_py)?;
        Ok(PyModel { inner: ckpt.model().map_err(to_py)?, schema_hash: ckpt.schema_hash })
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "Model(fields={}, d={}, layers={}, rank={}, fusion={}, ablation={}, params={})",
            self.inner.schema().n_fields(),
            c.d,
            c.layers,
            c.rank,
            c.fusion.name(),
            c.ablation.name(),
            self.inner.param_count()
        )
    }
}

/// Area under the ROC curve; tied scores share their average rank.
#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<f64>) -> PyResult<f64> {
    metrics::auc(&scores, &labels).map_err(to_py)
}

/// Mean binary cross-entropy with probabilities clipped away from 0 and 1.
#[pyfunction]
fn logloss(probs: Vec<f64>, labels: Vec<f64>) -> PyResult<f64> {
    metrics::logloss(&probs, &labels).map_err(to_py)
}

#[pymodule]
fn dlf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(logloss, m)?)?;
    m.add("FUSION_MODES", dlf_core::naf::FusionMode::ALL.iter().map(|f| f.name()).collect::<Vec<_>>())?;
    m.add("ABLATIONS", dlf_core::model::Ablation::ALL.iter().map(|a| a.name()).collect::<Vec<_>>())?;
    Ok(())
}
