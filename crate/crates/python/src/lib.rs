//! Python bindings: images and preprocessing, the classifier, ROC metrics,
//! occlusion maps, phantom generation and cohort labelling.

use std::path::PathBuf;

use octnet::cohort::{classify_all, ClinicalTables, CohortRules};
use octnet::evaluation::{confusion_metrics, optimal_cutoff, roc_and_auroc, ScoredSample};
use octnet::image;
use octnet::occlusion;
use octnet::synth::{self, PhantomClass, PhantomParams};
use octnet::{weights, ArchName, InputDims};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

/// `(threshold, sensitivity, specificity)`
type RocTuple = (f64, f64, f64);
/// `(x0, y0, x1, y1)`, half-open.
type BoxTuple = (usize, usize, usize, usize);

fn to_py(e: octnet::Error) -> PyErr {
    match e {
        octnet::Error::Io { .. } | octnet::Error::MissingFile(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// 8-bit grayscale image.
#[pyclass(name = "GrayImage", module = "octnet_py", frozen)]
struct PyGrayImage {
    inner: image::GrayImage,
}

#[pymethods]
impl PyGrayImage {
    #[new]
    fn new(width: usize, height: usize, pixels: Vec<u8>) -> PyResult<Self> {
        image::GrayImage::new(width, height, pixels).map(|inner| Self { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        image::load_pgm(&path).map(|inner| Self { inner }).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        image::save_pgm(&self.inner, &path).map_err(to_py)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    /// Row-major pixel values as `bytes`.
    #[getter]
    fn pixels(&self) -> Vec<u8> {
        self.inner.pixels().to_vec()
    }

    fn get(&self, x: usize, y: usize) -> PyResult<u8> {
        if x >= self.inner.width() || y >= self.inner.height() {
            return Err(PyValueError::new_err(format!("pixel ({x}, {y}) outside image")));
        }
        Ok(self.inner.get(x, y))
    }

    fn mean(&self) -> f64 {
        self.inner.mean()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("GrayImage({}x{})", self.inner.width(), self.inner.height())
    }
}

#[pyfunction]
fn histogram_equalize(img: &PyGrayImage) -> PyGrayImage {
    PyGrayImage { inner: image::histogram_equalize(&img.inner) }
}

#[pyfunction]
#[pyo3(signature = (img, width=image::FULL_WIDTH, height=image::FULL_HEIGHT))]
fn downsample(img: &PyGrayImage, width: usize, height: usize) -> PyResult<PyGrayImage> {
    image::downsample(&img.inner, width, height).map(|inner| PyGrayImage { inner }).map_err(to_py)
}

/// Equalize, then downsample.
#[pyfunction]
#[pyo3(signature = (img, width=image::FULL_WIDTH, height=image::FULL_HEIGHT))]
fn preprocess(img: &PyGrayImage, width: usize, height: usize) -> PyResult<PyGrayImage> {
    image::preprocess(&img.inner, width, height).map(|inner| PyGrayImage { inner }).map_err(to_py)
}

fn parse_arch(arch: &str) -> PyResult<ArchName> {
    arch.parse().map_err(to_py)
}

/// Two-class classifier; `forward` returns P(AMD).
#[pyclass(name = "Network", module = "octnet_py", frozen)]
struct PyNetwork {
    inner: octnet::Network,
    arch: ArchName,
}

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (arch="desk", width=48, height=32, seed=0))]
    fn new(arch: &str, width: usize, height: usize, seed: u64) -> PyResult<Self> {
        let arch = parse_arch(arch)?;
        let input = InputDims::gray(width, height);
        let inner = octnet::Network::build(arch.specs(input), input, seed).map_err(to_py)?;
        Ok(Self { inner, arch })
    }

    #[staticmethod]
    #[pyo3(signature = (path, arch="desk", width=48, height=32))]
    fn load(path: PathBuf, arch: &str, width: usize, height: usize) -> PyResult<Self> {
        let arch = parse_arch(arch)?;
        let input = InputDims::gray(width, height);
        let inner = weights::load(&path, arch.specs(input), input).map_err(to_py)?;
        Ok(Self { inner, arch })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        weights::save(&self.inner, &path).map_err(to_py)
    }

    /// Same architecture with every weight zero (a constant 0.5 classifier).
    fn zeroed(&self) -> Self {
        Self { inner: self.inner.zeroed(), arch: self.arch }
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn arch(&self) -> String {
        self.arch.to_string()
    }

    /// P(AMD) for an image of the network's input size.
    fn forward(&self, img: &PyGrayImage) -> PyResult<f32> {
        self.inner.forward(&img.inner.to_tensor()).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        let d = self.inner.input_dims();
        format!(
            "Network(arch={:?}, width={}, height={}, params={})",
            self.arch.to_string(),
            d.width,
            d.height,
            self.inner.param_count()
        )
    }
}

fn scored(scores: &[f64], labels: &[u8]) -> PyResult<Vec<ScoredSample>> {
    if scores.len() != labels.len() {
        return Err(PyValueError::new_err(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    Ok(scores
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (&s, &l))| ScoredSample::image(&i.to_string(), &i.to_string(), 0, l, s))
        .collect())
}

/// `(auroc, [(threshold, sensitivity, specificity), ...])`
#[pyfunction]
fn roc_auroc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<(f64, Vec<RocTuple>)> {
    let roc = roc_and_auroc(&scored(&scores, &labels)?).map_err(to_py)?;
    let points = roc.points.iter().map(|p| (p.threshold, p.sensitivity, p.specificity)).collect();
    Ok((roc.auroc, points))
}

/// Youden-optimal `(threshold, sensitivity, specificity)`.
#[pyfunction]
fn youden_cutoff(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<(f64, f64, f64)> {
    let roc = roc_and_auroc(&scored(&scores, &labels)?).map_err(to_py)?;
    let c = optimal_cutoff(&roc);
    Ok((c.threshold, c.sensitivity, c.specificity))
}

/// `(accuracy, sensitivity, specificity)` predicting AMD when score >= threshold.
#[pyfunction]
#[pyo3(signature = (scores, labels, threshold=0.5))]
fn confusion(scores: Vec<f64>, labels: Vec<u8>, threshold: f64) -> PyResult<(f64, f64, f64)> {
    let m = confusion_metrics(&scored(&scores, &labels)?, threshold).map_err(to_py)?;
    Ok((m.accuracy, m.sensitivity, m.specificity))
}

/// Occlusion sensitivity of one image.
#[pyclass(name = "Heatmap", module = "octnet_py", frozen)]
struct PyHeatmap {
    inner: occlusion::Heatmap,
}

#[pymethods]
impl PyHeatmap {
    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    /// Row-major per-pixel maximum drop.
    #[getter]
    fn values(&self) -> Vec<f32> {
        self.inner.values.clone()
    }

    #[getter]
    fn base_prob(&self) -> f32 {
        self.inner.base_prob
    }

    #[getter]
    fn positions(&self) -> usize {
        self.inner.positions()
    }

    fn max_value(&self) -> f32 {
        self.inner.max_value()
    }

    fn argmax(&self) -> (usize, usize) {
        self.inner.argmax()
    }

    /// Centre of the plateau of maximal pixels.
    fn peak(&self) -> (usize, usize) {
        self.inner.peak()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }
}

/// `fill` is an 8-bit intensity, like the pixels.
#[pyfunction]
#[pyo3(signature = (network, img, box_size=occlusion::DEFAULT_BOX, fill=0))]
fn occlusion_map(
    py: Python<'_>,
    network: &PyNetwork,
    img: &PyGrayImage,
    box_size: usize,
    fill: u8,
) -> PyResult<PyHeatmap> {
    let tensor = img.inner.to_tensor();
    py.detach(|| occlusion::occlusion_map(&network.inner, &tensor, box_size, fill as f32 / 255.0))
        .map(|inner| PyHeatmap { inner })
        .map_err(to_py)
}

fn parse_class(class: &str) -> PyResult<PhantomClass> {
    class.parse().map_err(to_py)
}

/// One synthetic B-scan: `(image, [(x0, y0, x1, y1), ...])` lesion boxes.
#[pyfunction]
#[pyo3(signature = (class_name, seed, width=synth::DESK_WIDTH, height=synth::DESK_HEIGHT))]
fn generate_phantom(
    class_name: &str,
    seed: u64,
    width: usize,
    height: usize,
) -> PyResult<(PyGrayImage, Vec<BoxTuple>)> {
    let params = PhantomParams::with_dims(width, height);
    let p = synth::generate_phantom(parse_class(class_name)?, &params, seed).map_err(to_py)?;
    let boxes = p.lesions.iter().map(|b| (b.x0, b.y0, b.x1, b.y1)).collect();
    Ok((PyGrayImage { inner: p.image }, boxes))
}

/// Writes a phantom dataset and returns the number of slice images.
#[pyfunction]
#[pyo3(signature = (out_dir, patients_per_class=60, slices_per_scan=61, seed=0))]
fn generate_dataset(
    py: Python<'_>,
    out_dir: PathBuf,
    patients_per_class: usize,
    slices_per_scan: usize,
    seed: u64,
) -> PyResult<usize> {
    let spec = synth::DatasetSpec {
        patients_per_class,
        scans_per_patient: 1,
        slices_per_scan,
        params: PhantomParams::default(),
        seed,
    };
    py.detach(|| synth::generate_dataset(&spec, &out_dir)).map(|d| d.n_images).map_err(to_py)
}

/// Labels every patient in the clinical CSVs under `data_dir`:
/// `[(patient_id, label, reason), ...]`.
#[pyfunction]
fn classify_cohort(data_dir: PathBuf) -> PyResult<Vec<(String, String, String)>> {
    let tables = ClinicalTables::load(&data_dir).map_err(to_py)?;
    Ok(classify_all(&tables, &CohortRules::default())
        .into_iter()
        .map(|l| {
            let label = match l.label {
                octnet::cohort::Label::Normal => "Normal",
                octnet::cohort::Label::Amd => "AMD",
                octnet::cohort::Label::Excluded => "Excluded",
            };
            (l.patient_id, label.to_string(), l.reason.to_string())
        })
        .collect())
}

#[pymodule]
fn octnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyGrayImage>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyHeatmap>()?;
    m.add_function(wrap_pyfunction!(histogram_equalize, m)?)?;
    m.add_function(wrap_pyfunction!(downsample, m)?)?;
    m.add_function(wrap_pyfunction!(preprocess, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auroc, m)?)?;
    m.add_function(wrap_pyfunction!(youden_cutoff, m)?)?;
    m.add_function(wrap_pyfunction!(confusion, m)?)?;
    m.add_function(wrap_pyfunction!(occlusion_map, m)?)?;
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(classify_cohort, m)?)?;
    Ok(())
}
