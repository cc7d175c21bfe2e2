//! Python bindings: cohort generation, segmentor inference, checkpoints,
//! losses, the signed-rank test and the command-line entry point.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use advseg::autodiff::{Tape, Tensor};
use advseg::data::{self, CohortSpec};
use advseg::eval;
use advseg::gradsuite::{run_suite, SuiteScope};
use advseg::losses;
use advseg::models::{self, ModelConfig};
use advseg::trainer::{self, TrainConfig};
use advseg::Error;

fn py_err(e: Error) -> PyErr {
    match e.root() {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Divergence(_) | Error::Numeric(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn from_json<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        None => Ok(T::default()),
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string())),
    }
}

fn tensor(shape: &[usize], data: Vec<f32>) -> PyResult<Tensor<f32>> {
    Tensor::from_vec(shape, data).map_err(py_err)
}

/// A generated or loaded set of phantom slices.
#[pyclass(module = "advseg_py")]
struct Cohort {
    inner: data::Cohort,
}

#[pymethods]
impl Cohort {
    /// Generate a cohort from a JSON cohort specification (desk scale when omitted).
    #[new]
    #[pyo3(signature = (spec_json=None))]
    fn new(spec_json: Option<&str>) -> PyResult<Self> {
        let spec = match spec_json {
            None => CohortSpec::desk(),
            Some(_) => from_json(spec_json)?,
        };
        let inner = data::generate_cohort(&spec).map_err(py_err)?;
        Ok(Cohort { inner })
    }

    #[staticmethod]
    fn read(dir: PathBuf) -> PyResult<Self> {
        Ok(Cohort {
            inner: data::read_dataset(&dir).map_err(py_err)?,
        })
    }

    fn write(&self, dir: PathBuf) -> PyResult<usize> {
        let manifest = data::write_dataset(&dir, &self.inner).map_err(py_err)?;
        Ok(manifest.slices.len())
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.image_size
    }

    #[getter]
    fn n_pos(&self) -> usize {
        self.inner.pos.len()
    }

    #[getter]
    fn n_neg(&self) -> usize {
        self.inner.neg.len()
    }

    fn pos_subjects(&self) -> Vec<u32> {
        self.inner.pos_subjects()
    }

    fn __len__(&self) -> usize {
        self.inner.pos.len() + self.inner.neg.len()
    }

    /// Slice `i` (positives first) as a dict of flat image and label lists.
    fn sample<'py>(&self, py: Python<'py>, i: usize) -> PyResult<Bound<'py, PyDict>> {
        let s = self
            .inner
            .pos
            .iter()
            .chain(&self.inner.neg)
            .nth(i)
            .ok_or_else(|| PyValueError::new_err(format!("slice index {i} out of range")))?;
        let d = PyDict::new(py);
        d.set_item("image", s.image.data().to_vec())?;
        d.set_item("label", s.label.data().to_vec())?;
        d.set_item("subject_id", s.subject_id)?;
        d.set_item("slice_id", s.slice_id)?;
        d.set_item("has_lesion", s.has_lesion)?;
        Ok(d)
    }
}

/// The U-Net style segmentor in inference mode.
#[pyclass(module = "advseg_py")]
struct Segmentor {
    inner: models::Segmentor,
}

#[pymethods]
impl Segmentor {
    #[new]
    #[pyo3(signature = (model_json=None))]
    fn new(model_json: Option<&str>) -> PyResult<Self> {
        let cfg: ModelConfig = from_json(model_json)?;
        Ok(Segmentor {
            inner: models::Segmentor::new(&cfg).map_err(py_err)?,
        })
    }

    /// Restore the segmentor stored in a checkpoint file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = models::Checkpoint::load(&path).map_err(py_err)?;
        let (inner, _) = ckpt.restore().map_err(py_err)?;
        Ok(Segmentor { inner })
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.config().image_size
    }

    fn num_params(&self) -> usize {
        self.inner.params().num_scalars()
    }

    /// Class probabilities for a flat `[batch, 3, H, W]` image buffer.
    fn predict(&self, images: Vec<f32>, batch: usize) -> PyResult<Vec<f32>> {
        let n = self.inner.config().image_size;
        let x = tensor(&[batch, data::N_CHANNELS, n, n], images)?;
        Ok(self.inner.predict(&x).map_err(py_err)?.into_data())
    }

    /// Per-slice tumor metrics on the cohort's lesion-bearing slices.
    fn evaluate<'py>(&self, py: Python<'py>, cohort: &Cohort) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let samples: Vec<_> = cohort.inner.pos.iter().collect();
        let metrics = eval::evaluate(&self.inner, &samples).map_err(py_err)?;
        metrics
            .iter()
            .map(|m| {
                let d = PyDict::new(py);
                d.set_item("subject_id", m.subject_id)?;
                d.set_item("slice_id", m.slice_id)?;
                d.set_item("dice", m.dice)?;
                d.set_item("sensitivity", m.sensitivity)?;
                d.set_item("specificity", m.specificity)?;
                Ok(d)
            })
            .collect()
    }
}

fn loss_with<F>(shape_a: &[usize], a: Vec<f64>, shape_b: &[usize], b: Vec<f64>, f: F) -> PyResult<f64>
where
    F: FnOnce(&mut Tape<f64>, advseg::autodiff::Var, advseg::autodiff::Var) -> advseg::Result<losses::LossValue>,
{
    let mut tape = Tape::new();
    let va = tape.constant(Tensor::from_vec(shape_a, a).map_err(py_err)?);
    let vb = tape.constant(Tensor::from_vec(shape_b, b).map_err(py_err)?);
    Ok(f(&mut tape, va, vb).map_err(py_err)?.value)
}

/// Multi-class cross-entropy of flat `[N, 4, H, W]` probabilities against one-hot labels.
#[pyfunction]
fn mce_loss(probs: Vec<f64>, onehot: Vec<f64>, shape: Vec<usize>) -> PyResult<f64> {
    loss_with(&shape, probs, &shape, onehot, losses::mce_loss)
}

#[pyfunction]
fn discriminator_loss(d_real: Vec<f64>, d_fake: Vec<f64>) -> PyResult<f64> {
    let (nr, nf) = (d_real.len(), d_fake.len());
    loss_with(&[nr, 1], d_real, &[nf, 1], d_fake, losses::discriminator_loss)
}

#[pyfunction]
fn adversarial_seg_loss(d_fake: Vec<f64>) -> PyResult<f64> {
    let n = d_fake.len();
    loss_with(&[n, 1], d_fake.clone(), &[n, 1], d_fake, |t, f, _| losses::adversarial_seg_loss(t, f))
}

/// Two-sided paired signed-rank test; returns `None` with fewer than five non-zero differences.
#[pyfunction]
fn wilcoxon<'py>(py: Python<'py>, a: Vec<f64>, b: Vec<f64>) -> PyResult<Option<Bound<'py, PyDict>>> {
    match eval::wilcoxon_signed_rank(&a, &b) {
        Ok(r) => {
            let d = PyDict::new(py);
            d.set_item("statistic", r.statistic)?;
            d.set_item("n_effective", r.n_effective)?;
            d.set_item("p_value", r.p_value)?;
            d.set_item("method", r.method.name())?;
            Ok(Some(d))
        }
        Err(Error::InsufficientData(_)) => Ok(None),
        Err(e) => Err(py_err(e)),
    }
}

/// Segmentor learning rate at `epoch` under a JSON training configuration.
#[pyfunction]
#[pyo3(signature = (epoch, train_json=None))]
fn lr_at(epoch: usize, train_json: Option<&str>) -> PyResult<f64> {
    let cfg: TrainConfig = from_json(train_json)?;
    trainer::lr_at(epoch, &cfg).map_err(py_err)
}

/// Gradient checks as `(group, name, max_rel_error, passed)` tuples.
#[pyfunction]
#[pyo3(signature = (primitives_only=true, seed=1))]
fn gradcheck(py: Python<'_>, primitives_only: bool, seed: u64) -> PyResult<Vec<(String, String, f64, bool)>> {
    let scope = if primitives_only { SuiteScope::PrimitivesOnly } else { SuiteScope::All };
    let entries = py.detach(|| run_suite(scope, None, seed)).map_err(py_err)?;
    Ok(entries
        .into_iter()
        .map(|e| {
            let ok = e.passed();
            (format!("{:?}", e.group).to_lowercase(), e.name, e.report.max_rel_error, ok)
        })
        .collect())
}

/// Run the command-line interface in-process and return its exit status.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("advseg".to_string()).chain(args).collect();
    py.detach(|| advseg::cli::run(argv))
}

#[pymodule]
fn advseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Cohort>()?;
    m.add_class::<Segmentor>()?;
    m.add_function(wrap_pyfunction!(mce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(discriminator_loss, m)?)?;
    m.add_function(wrap_pyfunction!(adversarial_seg_loss, m)?)?;
    m.add_function(wrap_pyfunction!(wilcoxon, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("N_CHANNELS", data::N_CHANNELS)?;
    m.add("N_CLASSES", data::N_CLASSES)?;
    Ok(())
}
