//! Python bindings. Matrices cross the boundary as lists of rows (any
//! sequence of float sequences, so `ndarray.tolist()` or a 2D numpy array
//! both work).

use ipf::error::Error;
use ipf::feature_io::{self, FeatureMatrix};
use ipf::ipf as field;
use ipf::metrics;
use ipf::net::{self, TrainConfig};
use ipf::synth::{self, LabeledDataset2D};
use ndarray::Array2;
use pyo3::exceptions::{PyFloatingPointError, PyIOError, PyValueError};
use pyo3::prelude::*;

type Rows = Vec<Vec<f64>>;
type SweepTable = (f64, f64, Vec<(f64, f64)>);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Diverged { .. } | Error::NonFinite(_) => PyFloatingPointError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_array(rows: Rows) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_rows(a: &Array2<f64>) -> Rows {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn dataset_tuple(d: LabeledDataset2D) -> (Rows, Vec<usize>) {
    (to_rows(&d.points), d.labels)
}

#[pyfunction]
#[pyo3(signature = (n_per_class, noise = 0.1, seed = 0))]
fn make_two_moons(n_per_class: usize, noise: f64, seed: u64) -> PyResult<(Rows, Vec<usize>)> {
    synth::make_two_moons(n_per_class, noise, seed).map(dataset_tuple).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (n_per_class, noise = 0.08, seed = 0))]
fn make_three_spirals(n_per_class: usize, noise: f64, seed: u64) -> PyResult<(Rows, Vec<usize>)> {
    synth::make_three_spirals(n_per_class, noise, seed).map(dataset_tuple).map_err(to_py)
}

#[pyfunction]
fn silverman_bandwidth(features: Rows) -> PyResult<f64> {
    field::silverman_bandwidth(to_array(features)?.view()).map_err(to_py)
}

#[pyfunction]
fn auroc(scores_id: Vec<f64>, scores_ood: Vec<f64>) -> PyResult<f64> {
    metrics::auroc(&scores_id, &scores_ood).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (confidences, correct, num_bins = metrics::DEFAULT_ECE_BINS))]
fn ece(confidences: Vec<f64>, correct: Vec<bool>, num_bins: usize) -> PyResult<f64> {
    metrics::ece(&confidences, &correct, num_bins).map_err(to_py)
}

#[pyfunction]
fn accuracy(predictions: Vec<i64>, truth: Vec<i64>) -> PyResult<f64> {
    metrics::accuracy(&predictions, &truth).map_err(to_py)
}

#[pyfunction]
fn softmax_entropy(logits: Rows) -> PyResult<Vec<f64>> {
    metrics::softmax_entropy(to_array(logits)?.view()).map_err(to_py)
}

/// Returns `(best_bandwidth, best_auroc, [(bandwidth, auroc), ...])`.
#[pyfunction]
fn sweep_bandwidth(reference: Rows, id_val: Rows, ood_val: Rows, grid: Vec<f64>) -> PyResult<SweepTable> {
    let r = field::sweep_bandwidth(to_array(reference)?.view(), to_array(id_val)?.view(), to_array(ood_val)?.view(), &grid)
        .map_err(to_py)?;
    Ok((r.best_bandwidth, r.best_auroc, r.table.iter().map(|row| (row.bandwidth, row.auroc)).collect()))
}

/// Reads an IPFF or CSV feature file; returns `(rows, labels or None)`.
#[pyfunction]
fn read_features(path: std::path::PathBuf) -> PyResult<(Rows, Option<Vec<i32>>)> {
    let m = feature_io::read_any(&path).map_err(to_py)?;
    Ok((to_rows(&m.data), m.labels))
}

/// Writes rows (and optional labels) as IPFF. Values are stored as f32.
#[pyfunction]
#[pyo3(signature = (path, rows, labels = None))]
fn write_features(path: std::path::PathBuf, rows: Rows, labels: Option<Vec<i32>>) -> PyResult<()> {
    let m = FeatureMatrix::new(to_array(rows)?, labels, path.display().to_string()).map_err(to_py)?;
    feature_io::write_features(&m, &path).map_err(to_py)
}

#[pyclass(name = "IpfField", module = "ipf_field")]
struct PyIpfField {
    inner: field::IpfField,
}

#[pymethods]
impl PyIpfField {
    #[new]
    fn new(reference: Rows, bandwidth: f64) -> PyResult<Self> {
        Ok(Self { inner: field::IpfField::new(to_array(reference)?, bandwidth).map_err(to_py)? })
    }

    #[getter]
    fn bandwidth(&self) -> f64 {
        self.inner.bandwidth()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn evaluate(&self, py: Python<'_>, queries: Rows) -> PyResult<Vec<f64>> {
        let q = to_array(queries)?;
        py.detach(|| self.inner.evaluate(q.view())).map_err(to_py)
    }

    fn evaluate_log(&self, py: Python<'_>, queries: Rows) -> PyResult<Vec<f64>> {
        let q = to_array(queries)?;
        py.detach(|| self.inner.evaluate_log(q.view())).map_err(to_py)
    }

    #[pyo3(signature = (percentile = field::DEFAULT_THRESHOLD_PERCENTILE))]
    fn calibrate_threshold(&self, py: Python<'_>, percentile: f64) -> PyResult<f64> {
        py.detach(|| self.inner.calibrate_threshold(percentile)).map_err(to_py)
    }

    /// Returns `(score, is_ood)`.
    fn decide(&self, query: Vec<f64>, threshold: f64) -> PyResult<(f64, bool)> {
        let d = self.inner.decide(&query, threshold).map_err(to_py)?;
        Ok((d.score, d.is_ood))
    }

    fn __repr__(&self) -> String {
        format!("IpfField(n={}, d={}, bandwidth={})", self.inner.len(), self.inner.dim(), self.inner.bandwidth())
    }
}

#[pyclass(name = "SnMlp", module = "ipf_field")]
struct PySnMlp {
    inner: net::SnMlp,
}

#[pymethods]
impl PySnMlp {
    /// Trains on 2D points; returns `(model, per_epoch_losses)`.
    #[staticmethod]
    #[pyo3(signature = (points, labels, epochs = 300, lr = 0.05, momentum = 0.9, batch_size = 128, seed = 0, sn = true, sn_coeff = 1.0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        py: Python<'_>,
        points: Rows,
        labels: Vec<usize>,
        epochs: usize,
        lr: f64,
        momentum: f64,
        batch_size: usize,
        seed: u64,
        sn: bool,
        sn_coeff: f64,
    ) -> PyResult<(Self, Vec<f64>)> {
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        let data = LabeledDataset2D::new(to_array(points)?, labels, num_classes).map_err(to_py)?;
        let config = TrainConfig {
            epochs,
            learning_rate: lr,
            momentum,
            batch_size,
            seed,
            sn_enabled: sn,
            sn_coeff,
            ..TrainConfig::default()
        };
        let (model, curve) = py.detach(|| net::train(&data, &config)).map_err(to_py)?;
        Ok((Self { inner: model }, curve))
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        Ok(Self { inner: net::SnMlp::load(path).map_err(to_py)? })
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    #[getter]
    fn hidden_dim(&self) -> usize {
        self.inner.hidden_dim
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    fn features(&self, x: Rows) -> PyResult<Rows> {
        Ok(to_rows(&self.inner.features(to_array(x)?.view()).map_err(to_py)?))
    }

    /// Returns `(features, logits)`.
    fn forward(&self, x: Rows) -> PyResult<(Rows, Rows)> {
        let (f, l) = self.inner.forward(to_array(x)?.view()).map_err(to_py)?;
        Ok((to_rows(&f), to_rows(&l)))
    }

    fn predict(&self, x: Rows) -> PyResult<Vec<usize>> {
        self.inner.predict(to_array(x)?.view()).map_err(to_py)
    }

    #[pyo3(signature = (iters = 50))]
    fn spectral_estimates(&self, iters: usize) -> Vec<f64> {
        self.inner.spectral_estimates(iters)
    }
}

#[pymodule]
pub fn ipf_field(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyIpfField>()?;
    m.add_class::<PySnMlp>()?;
    m.add_function(wrap_pyfunction!(make_two_moons, m)?)?;
    m.add_function(wrap_pyfunction!(make_three_spirals, m)?)?;
    m.add_function(wrap_pyfunction!(silverman_bandwidth, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(ece, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(sweep_bandwidth, m)?)?;
    m.add_function(wrap_pyfunction!(read_features, m)?)?;
    m.add_function(wrap_pyfunction!(write_features, m)?)?;
    m.add("DEFAULT_BANDWIDTH_2D", 0.3)?;
    m.add("DEFAULT_BANDWIDTH_CIFAR", 0.35)?;
    Ok(())
}
