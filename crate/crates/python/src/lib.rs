//! Python bindings. Slices travel as flat row-major lists of `height * width`
//! values; batches as lists of such slices.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ::tumorseg::augment::{augment, AugmentationSpec};
use ::tumorseg::checkpoint::Checkpoint;
use ::tumorseg::data::{
    generate_phantom as phantom, kfold_split as kfold, Cohort, PhantomOptions, SliceSample,
};
use ::tumorseg::gradcheck::Primitive;
use ::tumorseg::metrics::{
    confusion, dsc as dsc_of, region_mask as mask_of, sensitivity as sens_of,
};
use ::tumorseg::optimize::{train, TrainConfig};
use ::tumorseg::{LabelPlane, Plane, RegionKind, Tensor, UNetConfig, UNetModel};

/// Labels as a Python list rather than `bytes`.
fn widen(labels: &[u8]) -> Vec<u32> {
    labels.iter().map(|&l| u32::from(l)).collect()
}

fn err(e: ::tumorseg::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn region(name: &str) -> PyResult<RegionKind> {
    name.parse().map_err(err)
}

fn cohort(name: &str) -> PyResult<Cohort> {
    match name.to_ascii_uppercase().as_str() {
        "HGG" => Ok(Cohort::Hgg),
        "LGG" => Ok(Cohort::Lgg),
        other => Err(PyValueError::new_err(format!(
            "unknown cohort {other:?}; expected HGG or LGG"
        ))),
    }
}

fn batch(slices: &[Vec<f64>], h: usize, w: usize) -> PyResult<Tensor> {
    let mut data = Vec::with_capacity(slices.len() * h * w);
    for (i, s) in slices.iter().enumerate() {
        if s.len() != h * w {
            return Err(PyValueError::new_err(format!(
                "slice {i} has {} values, expected {h}x{w}",
                s.len()
            )));
        }
        data.extend_from_slice(s);
    }
    Tensor::new(vec![slices.len(), 1, h, w], data).map_err(err)
}

/// Network hyper-parameters.
#[pyclass(name = "UNetConfig", from_py_object)]
#[derive(Clone)]
struct PyUNetConfig {
    inner: UNetConfig,
}

#[pymethods]
impl PyUNetConfig {
    #[new]
    #[pyo3(signature = (num_blocks=5, base_filters=64, size=240, dropout_rate=0.0))]
    fn new(num_blocks: usize, base_filters: usize, size: usize, dropout_rate: f64) -> Self {
        let mut inner = UNetConfig::new(num_blocks, base_filters, size);
        inner.dropout_rate = dropout_rate;
        Self { inner }
    }

    #[getter]
    fn num_blocks(&self) -> usize {
        self.inner.num_blocks
    }

    #[getter]
    fn base_filters(&self) -> usize {
        self.inner.base_filters
    }

    #[getter]
    fn input_size(&self) -> (usize, usize) {
        (self.inner.input_height, self.inner.input_width)
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// `(channels, height, width)` of every encoder level.
    fn encoder_levels(&self) -> Vec<(usize, usize, usize)> {
        self.inner
            .encoder_levels()
            .iter()
            .map(|l| (l.channels, l.height, l.width))
            .collect()
    }

    fn violations(&self) -> Vec<String> {
        self.inner.violations()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!(
            "UNetConfig(num_blocks={}, base_filters={}, size={}x{})",
            self.inner.num_blocks,
            self.inner.base_filters,
            self.inner.input_height,
            self.inner.input_width
        )
    }
}

/// A U-Net with its parameters.
#[pyclass(name = "UNet")]
struct PyUNet {
    inner: UNetModel,
}

#[pymethods]
impl PyUNet {
    #[new]
    #[pyo3(signature = (config, seed=0))]
    fn new(config: &PyUNetConfig, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: UNetModel::build(config.inner.clone(), seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::load(path).map_err(err)?.model,
        })
    }

    #[pyo3(signature = (path, task=None, epochs=0))]
    fn save(&self, path: &str, task: Option<&str>, epochs: usize) -> PyResult<()> {
        let task = task.map(region).transpose()?;
        Checkpoint::new(self.inner.clone(), task, epochs)
            .save(path)
            .map_err(err)
    }

    #[getter]
    fn config(&self) -> PyUNetConfig {
        PyUNetConfig {
            inner: self.inner.config().clone(),
        }
    }

    fn param_count(&self) -> usize {
        self.inner.config().param_count()
    }

    /// Foreground probability per pixel for each slice.
    fn probabilities(&self, slices: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let c = self.inner.config();
        let (h, w) = (c.input_height, c.input_width);
        let probs = self
            .inner
            .forward(&batch(&slices, h, w)?, false, 0)
            .map_err(err)?;
        Ok(probs
            .data()
            .chunks(2 * h * w)
            .map(|s| s[h * w..].to_vec())
            .collect())
    }

    /// Binary mask per slice.
    fn predict(&self, slices: Vec<Vec<f64>>) -> PyResult<Vec<Vec<u32>>> {
        let c = self.inner.config();
        let (h, w) = (c.input_height, c.input_width);
        let mask = self
            .inner
            .predict_mask(&batch(&slices, h, w)?)
            .map_err(err)?;
        Ok(mask.chunks(h * w).map(widen).collect())
    }

    /// Soft Dice + Adam on `(slices, masks)`; returns the mean loss per epoch.
    #[pyo3(signature = (slices, masks, epochs=10, learning_rate=1e-4, batch_size=4, seed=0, augment_seed=None))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        &mut self,
        py: Python<'_>,
        slices: Vec<Vec<f64>>,
        masks: Vec<Vec<u8>>,
        epochs: usize,
        learning_rate: f64,
        batch_size: usize,
        seed: u64,
        augment_seed: Option<u64>,
    ) -> PyResult<Vec<f64>> {
        if slices.len() != masks.len() {
            return Err(PyValueError::new_err(format!(
                "{} slices but {} masks",
                slices.len(),
                masks.len()
            )));
        }
        let c = self.inner.config();
        let (h, w) = (c.input_height, c.input_width);
        let data = slices
            .into_iter()
            .zip(masks)
            .enumerate()
            .map(|(i, (img, m))| {
                Ok(SliceSample {
                    image: Plane::new(h, w, img).map_err(err)?,
                    target: LabelPlane::new(h, w, m).map_err(err)?,
                    case_id: "python".into(),
                    slice_index: i,
                    task: RegionKind::Complete,
                })
            })
            .collect::<PyResult<Vec<_>>>()?;
        let cfg = TrainConfig {
            learning_rate,
            max_epochs: epochs,
            batch_size,
            seed,
            ..TrainConfig::default()
        };
        let spec = augment_seed.map(|s| AugmentationSpec {
            seed: s,
            ..AugmentationSpec::default()
        });
        let model = &mut self.inner;
        let log = py
            .detach(|| train(model, &data, spec.as_ref(), &cfg, |_| {}))
            .map_err(err)?;
        Ok(log.losses())
    }
}

/// Dice similarity coefficient of two binary masks.
#[pyfunction]
fn dsc(pred: Vec<u8>, truth: Vec<u8>) -> PyResult<f64> {
    Ok(dsc_of(&confusion(&pred, &truth).map_err(err)?))
}

/// Sensitivity (recall) of `pred` against `truth`.
#[pyfunction]
fn sensitivity(pred: Vec<u8>, truth: Vec<u8>) -> PyResult<f64> {
    Ok(sens_of(&confusion(&pred, &truth).map_err(err)?))
}

/// Binary mask of a region (`complete`, `core`, `enhancing`) of a label map.
#[pyfunction]
fn region_mask(labels: Vec<u8>, region_name: &str) -> PyResult<Vec<u32>> {
    Ok(widen(&mask_of(&labels, region(region_name)?).map_err(err)?))
}

/// Soft Dice loss of foreground probabilities against a binary target.
#[pyfunction]
fn soft_dice_loss(foreground: Vec<f64>, target: Vec<u8>) -> PyResult<f64> {
    let n = foreground.len();
    let mut probs: Vec<f64> = foreground.iter().map(|p| 1.0 - p).collect();
    probs.extend_from_slice(&foreground);
    let probs = Tensor::new(vec![1, 2, n, 1], probs).map_err(err)?;
    let target = Tensor::new(
        vec![1, n, 1],
        target.iter().map(|&t| f64::from(t)).collect(),
    )
    .map_err(err)?;
    ::tumorseg::loss::soft_dice_loss(&probs, &target).map_err(err)
}

/// `k` `(train, test)` partitions of `case_ids`.
#[pyfunction]
#[pyo3(signature = (case_ids, k=5, seed=0))]
fn kfold_split(
    case_ids: Vec<String>,
    k: usize,
    seed: u64,
) -> PyResult<Vec<(Vec<String>, Vec<String>)>> {
    Ok(kfold(&case_ids, k, seed)
        .map_err(err)?
        .into_iter()
        .map(|f| (f.train, f.test))
        .collect())
}

/// Synthetic phantom as a dict with `dims`, `flair`, `t1c` and `labels`
/// (flat, index `(x * Y + y) * Z + z`).
#[pyfunction]
#[pyo3(signature = (size=64, depth=12, seed=0, cohort_name="HGG"))]
fn generate_phantom<'py>(
    py: Python<'py>,
    size: usize,
    depth: usize,
    seed: u64,
    cohort_name: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let opts = PhantomOptions {
        cohort: cohort(cohort_name)?,
        ..PhantomOptions::new(size, depth)
    };
    let p = phantom(&opts, seed).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("dims", p.labels.dims.to_vec())?;
    d.set_item("flair", p.flair.data)?;
    d.set_item("t1c", p.t1c.data)?;
    d.set_item("labels", widen(&p.labels.data))?;
    Ok(d)
}

/// Randomly augments an image/label slice pair. `spec_json` overrides the
/// default augmentation ranges.
#[pyfunction]
#[pyo3(signature = (image, labels, height, width, seed=0, spec_json=None))]
fn augment_slice(
    image: Vec<f64>,
    labels: Vec<u8>,
    height: usize,
    width: usize,
    seed: u64,
    spec_json: Option<&str>,
) -> PyResult<(Vec<f64>, Vec<u32>)> {
    let spec: AugmentationSpec = match spec_json {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => AugmentationSpec::default(),
    };
    let sample = SliceSample {
        image: Plane::new(height, width, image).map_err(err)?,
        target: LabelPlane::new(height, width, labels).map_err(err)?,
        case_id: "python".into(),
        slice_index: 0,
        task: RegionKind::Complete,
    };
    let out = augment(&sample, &spec, seed).map_err(err)?;
    Ok((out.image.into_data(), widen(out.target.data())))
}

/// Worst relative error between analytic and finite-difference gradients of
/// one primitive (`conv2d`, `conv_transpose2d`, `maxpool2d`, `relu`,
/// `concat`, `softmax2`, `soft_dice`, `dropout`).
#[pyfunction]
#[pyo3(signature = (primitive, shapes, seed=0))]
fn grad_check(primitive: &str, shapes: Vec<Vec<usize>>, seed: u64) -> PyResult<f64> {
    let op = match primitive {
        "conv2d" => Primitive::Conv2d,
        "conv_transpose2d" => Primitive::ConvTranspose2d,
        "maxpool2d" => Primitive::MaxPool2d,
        "relu" => Primitive::Relu,
        "concat" => Primitive::ConcatChannels,
        "softmax2" => Primitive::Softmax2,
        "soft_dice" => Primitive::SoftDice,
        "dropout" => Primitive::Dropout,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown primitive {other:?}"
            )))
        }
    };
    ::tumorseg::gradcheck::grad_check(op, &shapes, seed).map_err(err)
}

#[pymodule]
fn tumorseg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyUNetConfig>()?;
    m.add_class::<PyUNet>()?;
    m.add_function(wrap_pyfunction!(dsc, m)?)?;
    m.add_function(wrap_pyfunction!(sensitivity, m)?)?;
    m.add_function(wrap_pyfunction!(region_mask, m)?)?;
    m.add_function(wrap_pyfunction!(soft_dice_loss, m)?)?;
    m.add_function(wrap_pyfunction!(kfold_split, m)?)?;
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(augment_slice, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    Ok(())
}
