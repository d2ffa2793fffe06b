//! Python bindings for the `vistanet` core library.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use vistanet::checkpoint;
use vistanet::data::{self, BoundingBox, ClassLabel, Detection, ImageFrame, SegmentationMask};
use vistanet::detection::{self, SuppressionConfig};
use vistanet::encoder::{self, ProbVector};
use vistanet::evaluation;
use vistanet::segmentation;
use vistanet::tensor::Tensor;

type Box4 = (f64, f64, f64, f64);
/// `(class_id, score, x_min, y_min, x_max, y_max)`
type DetTuple = (u32, f64, f64, f64, f64, f64);

fn err(e: vistanet::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_box(b: Box4) -> PyResult<BoundingBox> {
    BoundingBox::new(b.0, b.1, b.2, b.3).map_err(err)
}

fn from_box(b: &BoundingBox) -> Box4 {
    (b.x_min, b.y_min, b.x_max, b.y_max)
}

fn label(i: usize) -> PyResult<ClassLabel> {
    ClassLabel::from_index(i).map_err(err)
}

fn image_from(pixels: Vec<Vec<Vec<f64>>>) -> PyResult<ImageFrame> {
    let c = pixels.len();
    let h = pixels.first().map_or(0, Vec::len);
    let w = pixels.first().and_then(|r| r.first()).map_or(0, Vec::len);
    if pixels.iter().any(|p| p.len() != h || p.iter().any(|r| r.len() != w)) {
        return Err(PyValueError::new_err("pixels must be a rectangular [3][H][W] array"));
    }
    let data = pixels.into_iter().flatten().flatten().collect();
    ImageFrame::new("py", Tensor::from_vec(&[c, h, w], data).map_err(err)?).map_err(err)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let w = t.shape()[1];
    t.data().chunks(w).map(<[f64]>::to_vec).collect()
}

/// Intersection over union of two `(x_min, y_min, x_max, y_max)` boxes.
#[pyfunction]
fn iou(a: Box4, b: Box4) -> PyResult<f64> {
    Ok(detection::iou(&to_box(a)?, &to_box(b)?))
}

#[pyfunction]
#[pyo3(signature = (detections, method = "gaussian", sigma = 0.5, overlap_threshold = 0.3, score_floor = 0.001))]
fn soft_nms(
    detections: Vec<DetTuple>,
    method: &str,
    sigma: f64,
    overlap_threshold: f64,
    score_floor: f64,
) -> PyResult<Vec<DetTuple>> {
    let cfg = SuppressionConfig { method: method.parse().map_err(err)?, sigma, overlap_threshold, score_floor };
    let dets = detections
        .into_iter()
        .map(|(c, s, x0, y0, x1, y1)| Detection::new(to_box((x0, y0, x1, y1))?, s, c).map_err(err))
        .collect::<PyResult<Vec<_>>>()?;
    Ok(detection::soft_nms(&dets, &cfg)
        .map_err(err)?
        .iter()
        .map(|d| (d.class_id, d.score, d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max))
        .collect())
}

/// Pixel boxes `(class_id, (x_min, y_min, x_max, y_max))` from YOLO text.
#[pyfunction]
fn parse_yolo_boxes(text: &str, width: usize, height: usize) -> PyResult<Vec<(u32, Box4)>> {
    Ok(data::parse_yolo_boxes(text, width, height)
        .map_err(err)?
        .iter()
        .map(|(c, b)| (*c, from_box(b)))
        .collect())
}

#[pyfunction]
fn classification_metrics<'py>(py: Python<'py>, preds: Vec<usize>, truths: Vec<usize>) -> PyResult<Bound<'py, PyDict>> {
    let p = preds.into_iter().map(label).collect::<PyResult<Vec<_>>>()?;
    let t = truths.into_iter().map(label).collect::<PyResult<Vec<_>>>()?;
    let m = evaluation::classification_metrics(&p, &t).map_err(err)?;
    let d = PyDict::new(py);
    for (k, v) in [
        ("accuracy", m.accuracy),
        ("precision", m.precision),
        ("recall", m.recall),
        ("f1", m.f1),
        ("macro_precision", m.macro_precision),
        ("macro_recall", m.macro_recall),
        ("macro_f1", m.macro_f1),
    ] {
        d.set_item(k, v)?;
    }
    Ok(d)
}

/// Mean of `(p_non_bleeding, p_bleeding)` pairs.
#[pyfunction]
fn ensemble_average(members: Vec<(f64, f64)>) -> PyResult<(f64, f64)> {
    let probs = members
        .into_iter()
        .map(|(a, b)| ProbVector::new(a, b).map_err(err))
        .collect::<PyResult<Vec<_>>>()?;
    let avg = encoder::ensemble_average(&probs).map_err(err)?;
    Ok((avg.non_bleeding(), avg.bleeding()))
}

#[pyfunction]
#[pyo3(signature = (mask, threshold = 0.5))]
fn mask_to_boxes(mask: Vec<Vec<f64>>, threshold: f64) -> PyResult<Vec<Box4>> {
    let h = mask.len();
    let w = mask.first().map_or(0, Vec::len);
    if mask.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("mask must be rectangular"));
    }
    let t = Tensor::from_vec(&[h, w], mask.into_iter().flatten().collect()).map_err(err)?;
    let m = SegmentationMask::predicted(t).map_err(err)?;
    Ok(data::mask_to_boxes(&m, threshold).map_err(err)?.iter().map(from_box).collect())
}

/// Synthetic frame as a dict with `pixels` ([3][H][W]), `label`, `mask` and `boxes`.
#[pyfunction]
#[pyo3(signature = (seed, bleeding, size = 64))]
fn synthetic_frame<'py>(py: Python<'py>, seed: u64, bleeding: bool, size: usize) -> PyResult<Bound<'py, PyDict>> {
    let f = data::generate_synthetic_frame(seed, bleeding, size).map_err(err)?;
    let px = f.image.pixels();
    let plane = size * size;
    let pixels: Vec<Vec<Vec<f64>>> = (0..3)
        .map(|c| px.data()[c * plane..(c + 1) * plane].chunks(size).map(<[f64]>::to_vec).collect())
        .collect();
    let mask = f.mask.as_ref().map_or_else(|| vec![vec![0.0; size]; size], |m| rows(m.values()));
    let d = PyDict::new(py);
    d.set_item("id", f.image.id())?;
    d.set_item("label", f.label.index())?;
    d.set_item("pixels", pixels)?;
    d.set_item("mask", mask)?;
    d.set_item("boxes", f.gt_boxes.iter().map(from_box).collect::<Vec<_>>())?;
    Ok(d)
}

/// A trained ensemble member loaded from a checkpoint file.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: encoder::Model,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: checkpoint::load_checkpoint(&path).map_err(err)? })
    }

    /// Untrained model of the given architecture, with a decoder.
    #[staticmethod]
    #[pyo3(signature = (arch = "tiny_test", stage_count = 3, width_mult = 1.0, seed = 42))]
    fn init(arch: &str, stage_count: usize, width_mult: f64, seed: u64) -> PyResult<Self> {
        let spec = encoder::BackboneSpec {
            arch: arch.parse().map_err(err)?,
            width_mult,
            stage_count,
            activation: Default::default(),
        };
        let dec = segmentation::DecoderSpec::for_backbone(&spec);
        let inner = encoder::Model::init(spec, Some(dec), &vistanet::rng::Seeder::new(seed), 0).map_err(err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save_checkpoint(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn arch(&self) -> String {
        self.inner.spec().arch.to_string()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params().num_scalars()
    }

    /// `(p_non_bleeding, p_bleeding)` from the standard classification path.
    fn classify(&self, pixels: Vec<Vec<Vec<f64>>>) -> PyResult<(f64, f64)> {
        let p = self.inner.classify(&image_from(pixels)?).map_err(err)?;
        Ok((p.non_bleeding(), p.bleeding()))
    }

    /// Predicted bleeding-probability mask, `[H][W]`.
    fn segment(&self, pixels: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
        let m = segmentation::segment(&image_from(pixels)?, &self.inner).map_err(err)?;
        Ok(rows(m.values()))
    }
}

/// Ensemble label (0 or 1) and averaged probabilities.
#[pyfunction]
fn predict(models: Vec<PyRef<'_, PyModel>>, pixels: Vec<Vec<Vec<f64>>>) -> PyResult<(usize, (f64, f64))> {
    let ms: Vec<encoder::Model> = models.iter().map(|m| m.inner.clone()).collect();
    let (l, p) = encoder::predict(&image_from(pixels)?, &ms).map_err(err)?;
    Ok((l.index(), (p.non_bleeding(), p.bleeding())))
}

#[pymodule]
#[pyo3(name = "vistanet")]
fn vistanet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(soft_nms, m)?)?;
    m.add_function(wrap_pyfunction!(parse_yolo_boxes, m)?)?;
    m.add_function(wrap_pyfunction!(classification_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble_average, m)?)?;
    m.add_function(wrap_pyfunction!(mask_to_boxes, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_frame, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    Ok(())
}
