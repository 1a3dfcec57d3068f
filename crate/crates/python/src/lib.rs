//! Python bindings for `dacs_core`.
//!
//! Tensors cross the boundary as flat lists (row-major `N x C x H x W`) or
//! `bytes` for label maps, plus explicit shapes; structured results come back
//! as plain dicts.

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use dacs_core::Error;

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Io { .. } => PyIOError::new_err(err.to_string()),
        Error::Numerical(_) => PyArithmeticError::new_err(err.to_string()),
        _ => PyValueError::new_err(err.to_string()),
    }
}

fn json_err(err: serde_json::Error) -> PyErr {
    PyValueError::new_err(err.to_string())
}

/// Round-trips a serializable value through Python's `json` module.
fn to_dict<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(json_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pymodule]
mod dacs {
    use std::path::PathBuf;

    use pyo3::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use dacs_core::config::{config_hash, ExperimentConfig};
    use dacs_core::grid::{argmax_labels, ImageBatch, LabelMap, ProbMap};
    use dacs_core::metrics::{conflation_count as count_conflated, ConfusionMatrix};
    use dacs_core::mix;
    use dacs_core::model::{Architecture, PixelWeights, SegModel as CoreModel};
    use dacs_core::storage::{write_benchmark, DataDir};
    use dacs_core::synthgen::{self, DomainSpec, Split};
    use dacs_core::trainer::{self, DistAlignState, RunOptions};

    use super::{json_err, to_dict, to_py};

    #[pymodule_export]
    const IGNORE: u8 = dacs_core::IGNORE;

    fn parse_config(config_json: Option<&str>) -> PyResult<ExperimentConfig> {
        let cfg = match config_json {
            Some(text) => ExperimentConfig::from_json(text).map_err(json_err)?,
            None => ExperimentConfig::default(),
        };
        cfg.validate().map_err(to_py)?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the effective (defaulted) experiment config.
    #[pyfunction]
    #[pyo3(signature = (config_json=None))]
    fn config_digest(config_json: Option<&str>) -> PyResult<String> {
        Ok(config_hash(&parse_config(config_json)?))
    }

    /// Renders the benchmark into `out_dir` and returns the manifest.
    #[pyfunction]
    #[pyo3(signature = (out_dir, config_json=None))]
    fn generate_benchmark<'py>(
        py: Python<'py>,
        out_dir: PathBuf,
        config_json: Option<&str>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let cfg = parse_config(config_json)?;
        let bench = synthgen::generate_benchmark(&cfg.benchmark).map_err(to_py)?;
        let manifest = write_benchmark(&out_dir, &cfg.benchmark, &bench).map_err(to_py)?;
        to_dict(py, &manifest)
    }

    /// One scene of the default `"source"` or `"target"` domain:
    /// `(image, labels)` as a flat `3*h*w` list and `h*w` bytes.
    #[pyfunction]
    #[pyo3(signature = (domain, seed, h=64, w=64))]
    fn generate_scene(domain: &str, seed: u64, h: usize, w: usize) -> PyResult<(Vec<f64>, Vec<u8>)> {
        let spec = match domain {
            "source" => DomainSpec::default_source(),
            "target" => DomainSpec::default_target(),
            other => {
                return Err(pyo3::exceptions::PyValueError::new_err(format!(
                    "domain must be 'source' or 'target', got {other:?}"
                )))
            }
        };
        let k = spec.num_classes();
        let (x, y) = synthgen::generate_scene(&spec, seed, h, w, k).map_err(to_py)?;
        Ok((x.into_data(), y.data().to_vec()))
    }

    /// Trains one variant and returns the run summary.
    #[pyfunction]
    #[pyo3(signature = (data_dir, out_dir, config_json=None))]
    fn train<'py>(
        py: Python<'py>,
        data_dir: PathBuf,
        out_dir: PathBuf,
        config_json: Option<&str>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let cfg = parse_config(config_json)?;
        let data = DataDir::open(&data_dir).map_err(to_py)?;
        let report = py
            .detach(|| trainer::run(&cfg.train, &data, &out_dir, &RunOptions::default()))
            .map_err(to_py)?;
        to_dict(py, &report)
    }

    /// Scores a checkpoint on the target evaluation split.
    #[pyfunction]
    #[pyo3(signature = (checkpoint, data_dir, conflation_threshold=0.01))]
    fn evaluate<'py>(
        py: Python<'py>,
        checkpoint: PathBuf,
        data_dir: PathBuf,
        conflation_threshold: f64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let (model, _) = CoreModel::load_checkpoint(&checkpoint).map_err(to_py)?;
        let data = DataDir::open(&data_dir).map_err(to_py)?;
        let eval = data.load_dataset(Split::TargetEval).map_err(to_py)?;
        let metrics = trainer::evaluate(&model, &eval, conflation_threshold).map_err(to_py)?;
        to_dict(py, &metrics)
    }

    /// `(per_class_iou, miou)`; undefined classes are `None`.
    #[pyfunction]
    fn iou(
        y_true: Vec<u8>,
        y_pred: Vec<u8>,
        num_classes: usize,
        shape: (usize, usize, usize),
    ) -> PyResult<(Vec<Option<f64>>, Option<f64>)> {
        let (n, h, w) = shape;
        let t = LabelMap::new(n, h, w, num_classes, y_true).map_err(to_py)?;
        let p = LabelMap::new(n, h, w, num_classes, y_pred).map_err(to_py)?;
        let mut cm = ConfusionMatrix::new(num_classes);
        cm.accumulate(&t, &p).map_err(to_py)?;
        let r = cm.iou();
        Ok((r.per_class, r.miou))
    }

    #[pyfunction]
    #[pyo3(signature = (per_class_iou, threshold=0.01))]
    fn conflation_count(per_class_iou: Vec<Option<f64>>, threshold: f64) -> usize {
        count_conflated(&per_class_iou, threshold)
    }

    /// Fraction of pixels per image with max probability `>= tau`.
    #[pyfunction]
    fn adaptive_lambda(probs: Vec<f64>, shape: (usize, usize, usize, usize), tau: f64) -> PyResult<Vec<f64>> {
        let (n, k, h, w) = shape;
        let p = ProbMap::new(n, k, h, w, probs).map_err(to_py)?;
        Ok(trainer::adaptive_lambda(&p, tau))
    }

    /// Aligns `probs` to `prior` given the running mean; returns the aligned
    /// map and the updated running mean.
    #[pyfunction]
    #[pyo3(signature = (probs, shape, prior, running, ema_decay=0.999))]
    fn distribution_align(
        probs: Vec<f64>,
        shape: (usize, usize, usize, usize),
        prior: Vec<f64>,
        running: Vec<f64>,
        ema_decay: f64,
    ) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let (n, k, h, w) = shape;
        let q = ProbMap::new(n, k, h, w, probs).map_err(to_py)?;
        let mut state = DistAlignState::with_running(prior, running, ema_decay).map_err(to_py)?;
        let aligned = trainer::distribution_align(&q, &mut state).map_err(to_py)?;
        Ok((aligned.data().to_vec(), state.running))
    }

    /// ClassMix mask for one `h x w` label map (true = take from the labelled image).
    #[pyfunction]
    fn classmix_mask(labels: Vec<u8>, h: usize, w: usize, num_classes: usize, seed: u64) -> PyResult<Vec<bool>> {
        let y = LabelMap::new(1, h, w, num_classes, labels).map_err(to_py)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(mix::classmix_mask(&y, &mut rng).map_err(to_py)?.data().to_vec())
    }

    #[pyfunction]
    #[pyo3(signature = (h, w, seed, area_fraction=0.5))]
    fn cutmix_mask(h: usize, w: usize, seed: u64, area_fraction: f64) -> PyResult<Vec<bool>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(mix::cutmix_mask(h, w, area_fraction, &mut rng).map_err(to_py)?.data().to_vec())
    }

    #[pyfunction]
    #[pyo3(signature = (h, w, seed, sigma=4.0, proportion=0.5))]
    fn cowmix_mask(h: usize, w: usize, seed: u64, sigma: f64, proportion: f64) -> PyResult<Vec<bool>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(mix::cowmix_mask(h, w, sigma, proportion, &mut rng).map_err(to_py)?.data().to_vec())
    }

    /// The segmentation network.
    #[pyclass]
    struct SegModel {
        inner: CoreModel,
    }

    #[pymethods]
    impl SegModel {
        #[new]
        #[pyo3(signature = (in_channels=3, features=16, num_classes=6, seed=0))]
        fn new(in_channels: usize, features: usize, num_classes: usize, seed: u64) -> PyResult<Self> {
            let arch = Architecture {
                in_channels,
                features,
                num_classes,
            };
            Ok(Self {
                inner: CoreModel::new(arch, seed).map_err(to_py)?,
            })
        }

        /// `(model, iteration)` from a checkpoint file.
        #[staticmethod]
        fn load(path: PathBuf) -> PyResult<(Self, usize)> {
            let (inner, iteration) = CoreModel::load_checkpoint(&path).map_err(to_py)?;
            Ok((Self { inner }, iteration))
        }

        #[pyo3(signature = (path, iteration=0))]
        fn save(&self, path: PathBuf, iteration: usize) -> PyResult<()> {
            self.inner.save_checkpoint(&path, iteration).map_err(to_py)
        }

        #[getter]
        fn num_classes(&self) -> usize {
            self.inner.architecture().num_classes
        }

        #[getter]
        fn num_params(&self) -> usize {
            self.inner.params.num_values()
        }

        /// Softmax probabilities, flat `N x K x H x W`.
        fn predict(&self, images: Vec<f64>, shape: (usize, usize, usize, usize)) -> PyResult<Vec<f64>> {
            let (n, c, h, w) = shape;
            let x = ImageBatch::new(n, c, h, w, images).map_err(to_py)?;
            Ok(self.inner.forward(&x).map_err(to_py)?.data().to_vec())
        }

        /// Argmax class map as bytes.
        fn segment(&self, images: Vec<f64>, shape: (usize, usize, usize, usize)) -> PyResult<Vec<u8>> {
            let (n, c, h, w) = shape;
            let x = ImageBatch::new(n, c, h, w, images).map_err(to_py)?;
            let p = self.inner.forward(&x).map_err(to_py)?;
            Ok(argmax_labels(&p).data().to_vec())
        }

        /// Mean cross-entropy over non-ignored pixels.
        fn loss(&self, images: Vec<f64>, shape: (usize, usize, usize, usize), labels: Vec<u8>) -> PyResult<f64> {
            let (n, c, h, w) = shape;
            let x = ImageBatch::new(n, c, h, w, images).map_err(to_py)?;
            let y = LabelMap::new(n, h, w, self.num_classes(), labels).map_err(to_py)?;
            self.inner.loss(&x, &y, &PixelWeights::Uniform(1.0)).map_err(to_py)
        }
    }
}
