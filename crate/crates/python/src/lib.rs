//! Python bindings.
//!
//! Structured values cross the boundary as plain dicts and lists with the
//! same field names as the JSON files the CLI reads and writes: FaceParams
//! as `{w_id, w_exp, quat, t, f}`, boxes as `{x0, y0, x1, y1, score}`,
//! landmarks as a list of 68 `[x, y]` pairs and grids as flat lists of
//! 9*9*5*109 floats.

use fg::detection_eval::{iou as box_iou, nms_indices, summarize, EvalBox};
use fg::fitting::{default_init, fit_params, FitConfig};
use fg::grid_codec::{CodecConfig, GridCodec, GridTensor};
use fg::landmark_metrics::{ced_auc as auc, expression_metric as expr_metric, nme as nme_metric};
use fg::loss::{sfn_loss as single_face_loss, tau as tau_of, FaceSample, LossSchedule};
use fg::morphable_model::{generate_synthetic_tensor, project_landmarks, ExpressionWeights, FaceParams, Landmarks2D};
use fg::retarget::{map_to_rig as rig_map, track_next_bbox as next_bbox, RigMapping};
use fg::scene::{synth_scene as make_scene, weak_gt_generate};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn py_err(e: fg::Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyIOError::new_err(e.to_string())
    }
}

/// Converts a dict/list through JSON into a core type.
fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Converts a core type into plain Python dicts and lists.
fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn landmarks(points: Vec<[f64; 2]>) -> PyResult<Landmarks2D> {
    Landmarks2D::new(points).map_err(py_err)
}

fn grid(values: Vec<f64>) -> PyResult<GridTensor> {
    GridTensor::from_values(values).map_err(py_err)
}

fn codec_config(image_size: f64) -> PyResult<CodecConfig> {
    let cfg = CodecConfig { image_size, ..CodecConfig::default() };
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

/// Multilinear face tensor (68 landmarks x 50 identity x 47 expression).
#[pyclass(name = "FaceTensor", frozen)]
struct PyFaceTensor {
    inner: fg::morphable_model::FaceTensor,
}

#[pymethods]
impl PyFaceTensor {
    /// Deterministic synthetic tensor for `seed`.
    #[staticmethod]
    fn synthetic(seed: u64) -> Self {
        Self { inner: generate_synthetic_tensor(seed) }
    }

    /// Reads an FT3D blob.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: fg::io::load_face_tensor(path).map_err(py_err)? })
    }

    /// Writes an FT3D blob.
    fn save(&self, path: &str) -> PyResult<()> {
        fg::io::save_face_tensor(path, &self.inner).map_err(py_err)
    }

    /// Raw values in `(row * 50 + i) * 47 + j` order.
    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    /// Weak-perspective projection of the 68 landmarks.
    fn project(&self, params: &Bound<'_, PyAny>) -> PyResult<Vec<[f64; 2]>> {
        let params: FaceParams = from_py(params)?;
        Ok(project_landmarks(&self.inner, &params).points().to_vec())
    }

    /// Mean face placed over the landmark bounding box.
    fn default_init<'py>(&self, py: Python<'py>, landmarks: Vec<[f64; 2]>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &default_init(&self.inner, &self::landmarks(landmarks)?))
    }

    /// Fits face parameters to `landmarks`; returns
    /// `{params, final_rmse, iterations, converged}`.
    #[pyo3(signature = (landmarks, init=None, config=None))]
    fn fit<'py>(
        &self,
        py: Python<'py>,
        landmarks: Vec<[f64; 2]>,
        init: Option<&Bound<'_, PyAny>>,
        config: Option<&Bound<'_, PyAny>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let observed = self::landmarks(landmarks)?;
        let init = match init {
            Some(p) => from_py(p)?,
            None => default_init(&self.inner, &observed),
        };
        let cfg: FitConfig = match config {
            Some(c) => from_py(c)?,
            None => FitConfig::default(),
        };
        to_py(py, &fit_params(&self.inner, &observed, &init, &cfg).map_err(py_err)?)
    }

    /// Random scene of `n_faces` faces: `{image_size, faces, grid}` where each
    /// face is `{params, landmarks, bbox}` and `grid` is the encoded target.
    #[pyo3(signature = (n_faces, seed, image_size=288.0))]
    fn synth_scene<'py>(&self, py: Python<'py>, n_faces: usize, seed: u64, image_size: f64) -> PyResult<Bound<'py, PyAny>> {
        let scene = make_scene(&self.inner, n_faces, seed, image_size).map_err(py_err)?;
        let faces: Vec<serde_json::Value> = scene
            .faces
            .iter()
            .map(|f| {
                serde_json::json!({
                    "params": f.params,
                    "landmarks": f.landmarks.points(),
                    "bbox": f.bbox,
                })
            })
            .collect();
        let value = serde_json::json!({
            "image_size": scene.image_size,
            "faces": faces,
            "grid": scene.grid.values(),
        });
        to_py(py, &value)
    }

    /// Fits every face and encodes the fits: `{grid, fits}`.
    #[pyo3(signature = (faces, image_size=288.0))]
    fn weak_gt<'py>(&self, py: Python<'py>, faces: Vec<Vec<[f64; 2]>>, image_size: f64) -> PyResult<Bound<'py, PyAny>> {
        let faces = faces.into_iter().map(landmarks).collect::<PyResult<Vec<_>>>()?;
        let weak = weak_gt_generate(&faces, &self.inner, &FitConfig::default(), &codec_config(image_size)?).map_err(py_err)?;
        to_py(py, &serde_json::json!({ "grid": weak.grid.values(), "fits": weak.fits }))
    }

    /// Decodes every slot whose objectness exceeds `threshold`.
    #[pyo3(signature = (grid, threshold=0.5, image_size=288.0))]
    fn decode_grid<'py>(&self, py: Python<'py>, grid: Vec<f64>, threshold: f64, image_size: f64) -> PyResult<Bound<'py, PyAny>> {
        let codec = GridCodec::new(&self.inner, codec_config(image_size)?).map_err(py_err)?;
        to_py(py, &codec.decode_grid(&self::grid(grid)?, threshold))
    }
}

/// Intersection over union of two boxes.
#[pyfunction]
fn iou(a: &Bound<'_, PyAny>, b: &Bound<'_, PyAny>) -> PyResult<f64> {
    let (a, b): (EvalBox, EvalBox) = (from_py(a)?, from_py(b)?);
    Ok(box_iou(&a, &b))
}

/// Indices kept by greedy non-maximum suppression, highest score first.
#[pyfunction]
#[pyo3(signature = (boxes, iou_threshold=0.45))]
fn nms(boxes: &Bound<'_, PyAny>, iou_threshold: f64) -> PyResult<Vec<usize>> {
    let boxes: Vec<EvalBox> = from_py(boxes)?;
    Ok(nms_indices(&boxes, iou_threshold))
}

/// `{AP, AP50, AP75}` of predicted boxes against ground truth boxes.
#[pyfunction]
fn evaluate_detections<'py>(py: Python<'py>, preds: &Bound<'_, PyAny>, gts: &Bound<'_, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    let (preds, gts): (Vec<EvalBox>, Vec<EvalBox>) = (from_py(preds)?, from_py(gts)?);
    to_py(py, &summarize(&preds, &gts))
}

/// Mean landmark error normalized by the box size.
#[pyfunction]
fn nme(pred: Vec<[f64; 2]>, gt: Vec<[f64; 2]>, bbox: &Bound<'_, PyAny>) -> PyResult<f64> {
    let bbox: EvalBox = from_py(bbox)?;
    nme_metric(&landmarks(pred)?, &landmarks(gt)?, &bbox).map_err(py_err)
}

/// Area under the cumulative error curve up to `cutoff`, normalized to [0, 1].
#[pyfunction]
#[pyo3(signature = (errors, cutoff=0.08))]
fn ced_auc(errors: Vec<f64>, cutoff: f64) -> PyResult<f64> {
    auc(&errors, cutoff).map_err(py_err)
}

/// Expression metric of 46 weights against 1-based active indices.
#[pyfunction]
fn expression_metric(w_exp: Vec<f64>, active: Vec<usize>) -> PyResult<f64> {
    let w = ExpressionWeights::new(w_exp).map_err(py_err)?;
    expr_metric(&w, &active).map_err(py_err)
}

/// Weight of the parameter terms at a 1-based epoch.
#[pyfunction]
fn tau(epoch: i64) -> PyResult<f64> {
    Ok(tau_of(&LossSchedule::new(epoch).map_err(py_err)?))
}

/// Single-face loss between two dicts holding FaceParams fields plus `landmarks`.
#[pyfunction]
fn sfn_loss<'py>(py: Python<'py>, pred: &Bound<'_, PyAny>, gt: &Bound<'_, PyAny>, epoch: i64) -> PyResult<Bound<'py, PyAny>> {
    let (pred, gt): (FaceSample, FaceSample) = (from_py(pred)?, from_py(gt)?);
    let schedule = LossSchedule::new(epoch).map_err(py_err)?;
    to_py(py, &single_face_loss(&pred, &gt, &schedule))
}

/// Rig weights and rotation for one face; `mapping` defaults to one-to-one.
#[pyfunction]
#[pyo3(signature = (params, mapping=None))]
fn map_to_rig<'py>(py: Python<'py>, params: &Bound<'_, PyAny>, mapping: Option<&Bound<'_, PyAny>>) -> PyResult<Bound<'py, PyAny>> {
    let params: FaceParams = from_py(params)?;
    let mapping = match mapping {
        Some(m) => from_py(m)?,
        None => RigMapping::identity(),
    };
    to_py(py, &rig_map(&params, &mapping).map_err(py_err)?)
}

/// Search box for the next frame from the previous frame's landmarks.
#[pyfunction]
#[pyo3(signature = (landmarks, margin=0.1))]
fn track_next_bbox<'py>(py: Python<'py>, landmarks: Vec<[f64; 2]>, margin: f64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &next_bbox(&self::landmarks(landmarks)?, margin).map_err(py_err)?)
}

/// Reads a GRD1 grid as a flat list.
#[pyfunction]
fn load_grid(path: &str) -> PyResult<Vec<f64>> {
    Ok(fg::io::load_grid_tensor(path).map_err(py_err)?.values().to_vec())
}

/// Writes a flat list as a GRD1 grid.
#[pyfunction]
fn save_grid(path: &str, values: Vec<f64>) -> PyResult<()> {
    fg::io::save_grid_tensor(path, &grid(values)?).map_err(py_err)
}

#[pymodule]
#[pyo3(name = "facegrid")]
fn facegrid_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFaceTensor>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_detections, m)?)?;
    m.add_function(wrap_pyfunction!(nme, m)?)?;
    m.add_function(wrap_pyfunction!(ced_auc, m)?)?;
    m.add_function(wrap_pyfunction!(expression_metric, m)?)?;
    m.add_function(wrap_pyfunction!(tau, m)?)?;
    m.add_function(wrap_pyfunction!(sfn_loss, m)?)?;
    m.add_function(wrap_pyfunction!(map_to_rig, m)?)?;
    m.add_function(wrap_pyfunction!(track_next_bbox, m)?)?;
    m.add_function(wrap_pyfunction!(load_grid, m)?)?;
    m.add_function(wrap_pyfunction!(save_grid, m)?)?;
    Ok(())
}
