//! Python bindings: occupancy grids and sequences, the synthetic world, the
//! tokenizer and world model (training, loading, rollout) and the metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use occworld::config::ConfigMap;
use occworld::evalkit::{self, CollisionParams, L2Mode};
use occworld::numerics::{Checkpoint, DType};
use occworld::occgrid::{self as og, EgoPose};
use occworld::tokenizer::{self as tk, TokenizerConfig};
use occworld::worldmodel::{self as wm, TokenizedSequence, WorldConfig};

fn to_py(e: occworld::Error) -> PyErr {
    match e {
        occworld::Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn config_map(settings: Option<Vec<(String, String)>>) -> ConfigMap {
    settings.unwrap_or_default().into_iter().collect()
}

/// Semantic voxel grid indexed `[h, w, d]`.
#[pyclass(name = "OccGrid", module = "pyoccworld", from_py_object)]
#[derive(Clone)]
pub struct PyOccGrid {
    inner: og::OccGrid,
}

#[pymethods]
impl PyOccGrid {
    #[new]
    #[pyo3(signature = (dims, num_classes=6, labels=None, voxel_size=og::DEFAULT_VOXEL_SIZE))]
    fn new(dims: [usize; 3], num_classes: u8, labels: Option<Vec<u8>>, voxel_size: f64) -> PyResult<Self> {
        let grid = match labels {
            Some(l) => og::OccGrid::new(dims, num_classes, l),
            None => og::OccGrid::empty(dims, num_classes),
        }
        .map_err(to_py)?;
        Ok(PyOccGrid {
            inner: grid.with_voxel_size(voxel_size),
        })
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.dims()
    }

    #[getter]
    fn num_classes(&self) -> u8 {
        self.inner.num_classes()
    }

    #[getter]
    fn voxel_size(&self) -> f64 {
        self.inner.voxel_size()
    }

    /// Row-major labels as `bytes`.
    fn labels<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, self.inner.labels())
    }

    fn get(&self, h: usize, w: usize, d: usize) -> PyResult<u8> {
        self.check(h, w, d)?;
        Ok(self.inner.get(h, w, d))
    }

    fn set(&mut self, h: usize, w: usize, d: usize, label: u8) -> PyResult<()> {
        self.check(h, w, d)?;
        if label >= self.inner.num_classes() {
            return Err(PyValueError::new_err(format!("label {label} out of range")));
        }
        self.inner.set(h, w, d, label);
        Ok(())
    }

    fn occupancy_fraction(&self) -> f64 {
        self.inner.occupancy_fraction()
    }

    fn __eq__(&self, other: &PyOccGrid) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        let [h, w, d] = self.inner.dims();
        format!("OccGrid({h}x{w}x{d}, classes={})", self.inner.num_classes())
    }
}

impl PyOccGrid {
    fn check(&self, h: usize, w: usize, d: usize) -> PyResult<()> {
        let [hh, ww, dd] = self.inner.dims();
        if h >= hh || w >= ww || d >= dd {
            return Err(PyIndexError::new_err(format!("voxel ({h}, {w}, {d}) outside {hh}x{ww}x{dd}")));
        }
        Ok(())
    }
}

/// Time-ordered grids with ego poses `(x, y, yaw)`.
#[pyclass(name = "OccSequence", module = "pyoccworld", from_py_object)]
#[derive(Clone)]
pub struct PyOccSequence {
    inner: og::OccSequence,
}

#[pymethods]
impl PyOccSequence {
    #[new]
    #[pyo3(signature = (grids, poses, frame_dt_ms=og::DEFAULT_FRAME_DT_MS))]
    fn new(grids: Vec<PyOccGrid>, poses: Vec<(f32, f32, f32)>, frame_dt_ms: u32) -> PyResult<Self> {
        if grids.len() != poses.len() {
            return Err(PyValueError::new_err("grids and poses differ in length"));
        }
        let frames = grids
            .into_iter()
            .zip(poses)
            .map(|(g, (x, y, yaw))| (g.inner, EgoPose { x, y, yaw }))
            .collect();
        Ok(PyOccSequence {
            inner: og::OccSequence::new(frames, frame_dt_ms).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyOccSequence {
            inner: og::read_sequence_file(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        og::write_sequence_file(&self.inner, &path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn grid(&self, k: usize) -> PyResult<PyOccGrid> {
        self.index(k)?;
        Ok(PyOccGrid {
            inner: self.inner.grid(k).clone(),
        })
    }

    fn pose(&self, k: usize) -> PyResult<(f32, f32, f32)> {
        self.index(k)?;
        let p = self.inner.pose(k);
        Ok((p.x, p.y, p.yaw))
    }

    fn window(&self, start: usize, len: usize) -> PyResult<Self> {
        Ok(PyOccSequence {
            inner: self.inner.window(start, len).map_err(to_py)?,
        })
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.dims()
    }

    #[getter]
    fn frame_dt_ms(&self) -> u32 {
        self.inner.frame_dt_ms()
    }

    fn __repr__(&self) -> String {
        format!("OccSequence(frames={}, dims={:?})", self.inner.len(), self.inner.dims())
    }
}

impl PyOccSequence {
    fn index(&self, k: usize) -> PyResult<()> {
        if k >= self.inner.len() {
            return Err(PyIndexError::new_err(format!("frame {k} of {}", self.inner.len())));
        }
        Ok(())
    }
}

/// Generates a random synthetic driving scene.
#[pyfunction]
#[pyo3(signature = (dims, seed, frames))]
fn generate_world(dims: [usize; 3], seed: u64, frames: usize) -> PyResult<PyOccSequence> {
    let seq = og::generate_synthetic_world(&og::SceneConfig::random(dims, seed), frames).map_err(to_py)?;
    Ok(PyOccSequence { inner: seq })
}

/// Scene tokenizer (VQ autoencoder over BEV occupancy).
#[pyclass(name = "Tokenizer", module = "pyoccworld")]
pub struct PyTokenizer {
    inner: tk::Tokenizer,
}

#[pymethods]
impl PyTokenizer {
    /// Untrained tokenizer; `settings` are `("tokenizer.key", "value")` pairs.
    #[new]
    #[pyo3(signature = (settings=None))]
    fn new(settings: Option<Vec<(String, String)>>) -> PyResult<Self> {
        let cfg = TokenizerConfig::from_map(&config_map(settings)).map_err(to_py)?;
        Ok(PyTokenizer {
            inner: tk::Tokenizer::new(cfg).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(checkpoint_dir: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&checkpoint_dir).map_err(to_py)?;
        Ok(PyTokenizer {
            inner: tk::Tokenizer::from_checkpoint(&ck).map_err(to_py)?,
        })
    }

    fn save(&self, checkpoint_dir: PathBuf) -> PyResult<()> {
        self.inner.to_checkpoint(0, DType::F64).save(&checkpoint_dir).map_err(to_py)
    }

    /// Code indices, row-major over the token grid.
    fn tokenize(&self, grid: &PyOccGrid) -> PyResult<Vec<usize>> {
        Ok(self.inner.tokenize(&grid.inner).map_err(to_py)?.indices)
    }

    fn decode(&self, indices: Vec<usize>) -> PyResult<PyOccGrid> {
        let hw = self.inner.config.token_hw();
        Ok(PyOccGrid {
            inner: self.inner.decode_indices(&indices, hw).map_err(to_py)?,
        })
    }

    fn reconstruct(&self, grid: &PyOccGrid) -> PyResult<PyOccGrid> {
        Ok(PyOccGrid {
            inner: self.inner.reconstruct(&grid.inner).map_err(to_py)?,
        })
    }

    /// `(mIoU, IoU, codes used)` of reconstructing `grids`.
    fn evaluate(&self, grids: Vec<PyOccGrid>) -> PyResult<(f64, f64, usize)> {
        let frames: Vec<og::OccGrid> = grids.into_iter().map(|g| g.inner).collect();
        tk::evaluate_reconstruction(&self.inner, &frames).map_err(to_py)
    }

    #[getter]
    fn token_hw(&self) -> [usize; 2] {
        self.inner.config.token_hw()
    }

    /// The resolved configuration as `(key, value)` pairs.
    fn config(&self) -> Vec<(String, String)> {
        self.inner.config.to_map().into_iter().collect()
    }
}

/// Trains a tokenizer on every frame of `train`; `heldout` frames are scored
/// at each evaluation. Returns the tokenizer and the evaluation log lines.
#[pyfunction]
#[pyo3(signature = (train, heldout, settings=None))]
fn train_tokenizer(
    py: Python<'_>,
    train: Vec<PyOccSequence>,
    heldout: Vec<PyOccSequence>,
    settings: Option<Vec<(String, String)>>,
) -> PyResult<(PyTokenizer, Vec<String>)> {
    let cfg = TokenizerConfig::from_map(&config_map(settings)).map_err(to_py)?;
    let frames = |s: Vec<PyOccSequence>| -> Vec<og::OccGrid> { s.iter().flat_map(|q| q.inner.grids().cloned()).collect() };
    let (tr, he) = (frames(train), frames(heldout));
    let out = py
        .detach(|| tk::train_tokenizer(&tr, &he, &cfg, &mut |_| {}))
        .map_err(to_py)?;
    let log = out.history.iter().map(|r| r.log_line()).collect();
    Ok((PyTokenizer { inner: out.tokenizer }, log))
}

/// Spatial-temporal world model over token grids.
#[pyclass(name = "WorldModel", module = "pyoccworld")]
pub struct PyWorldModel {
    inner: wm::WorldModel,
}

#[pymethods]
impl PyWorldModel {
    #[staticmethod]
    fn load(checkpoint_dir: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&checkpoint_dir).map_err(to_py)?;
        Ok(PyWorldModel {
            inner: wm::WorldModel::from_checkpoint(&ck).map_err(to_py)?,
        })
    }

    fn save(&self, checkpoint_dir: PathBuf) -> PyResult<()> {
        self.inner.to_checkpoint(0, DType::F64).save(&checkpoint_dir).map_err(to_py)
    }

    /// History frames the model conditions on.
    #[getter]
    fn window(&self) -> usize {
        self.inner.config.window()
    }

    /// Forecasts `steps` frames from the last `window` frames of `history`.
    /// Returns the predicted grids and ego waypoints `(x, y)` in meters,
    /// relative to the last history pose.
    fn rollout(
        &self,
        py: Python<'_>,
        tokenizer: &PyTokenizer,
        history: &PyOccSequence,
        steps: usize,
    ) -> PyResult<(Vec<PyOccGrid>, Vec<(f64, f64)>)> {
        let r = py
            .detach(|| wm::rollout(&self.inner, &tokenizer.inner, &history.inner, steps))
            .map_err(to_py)?;
        let grids = r.grids.into_iter().map(|g| PyOccGrid { inner: g }).collect();
        let waypoints = r.trajectory.waypoints().into_iter().map(|[x, y]| (x, y)).collect();
        Ok((grids, waypoints))
    }

    fn config(&self) -> Vec<(String, String)> {
        self.inner.config.to_map().into_iter().collect()
    }
}

/// Trains a world model on tokenized `train` sequences.
#[pyfunction]
#[pyo3(signature = (tokenizer, train, heldout, settings=None))]
fn train_world(
    py: Python<'_>,
    tokenizer: &PyTokenizer,
    train: Vec<PyOccSequence>,
    heldout: Vec<PyOccSequence>,
    settings: Option<Vec<(String, String)>>,
) -> PyResult<(PyWorldModel, Vec<String>)> {
    let cfg = WorldConfig::from_map(&config_map(settings)).map_err(to_py)?;
    let tok = &tokenizer.inner;
    let tokenized = |s: Vec<PyOccSequence>| -> PyResult<Vec<TokenizedSequence>> {
        s.iter().map(|q| TokenizedSequence::new(tok, &q.inner).map_err(to_py)).collect()
    };
    let (tr, he) = (tokenized(train)?, tokenized(heldout)?);
    let out = py.detach(|| wm::train_world(&tr, &he, tok, &cfg, &mut |_| {})).map_err(to_py)?;
    let log = out.history.iter().map(|r| r.log_line()).collect();
    Ok((PyWorldModel { inner: out.model }, log))
}

/// Semantic mIoU over non-free classes present in `gt`, as a fraction.
#[pyfunction]
fn miou(pred: &PyOccGrid, gt: &PyOccGrid) -> PyResult<f64> {
    let classes = evalkit::non_free_classes(gt.inner.num_classes());
    Ok(evalkit::miou_semantic(&pred.inner, &gt.inner, &classes).map_err(to_py)?.miou)
}

/// Binary occupancy IoU, as a fraction.
#[pyfunction]
fn iou(pred: &PyOccGrid, gt: &PyOccGrid) -> PyResult<f64> {
    evalkit::iou_binary(&pred.inner, &gt.inner).map_err(to_py)
}

fn trajectory(points: &[(f64, f64)]) -> PyResult<evalkit::Trajectory> {
    let mut prev = (0.0, 0.0);
    let steps: Vec<[f64; 2]> = points
        .iter()
        .map(|&(x, y)| {
            let d = [x - prev.0, y - prev.1];
            prev = (x, y);
            d
        })
        .collect();
    evalkit::Trajectory::from_displacements(&steps).map_err(to_py)
}

/// L2 error between waypoint lists at 1-based `horizons`; `mode` is
/// `at-horizon` or `averaged`.
#[pyfunction]
#[pyo3(signature = (pred, gt, horizons, mode="at-horizon"))]
fn l2_error(pred: Vec<(f64, f64)>, gt: Vec<(f64, f64)>, horizons: Vec<usize>, mode: &str) -> PyResult<Vec<f64>> {
    let mode = match mode {
        "at-horizon" => L2Mode::AtHorizon,
        "averaged" => L2Mode::Averaged,
        other => return Err(PyValueError::new_err(format!("unknown L2 mode {other}"))),
    };
    evalkit::l2_error(&trajectory(&pred)?, &trajectory(&gt)?, &horizons, mode).map_err(to_py)
}

/// Per-frame collision flags of waypoints against `gt` frames 1.. (frame 0
/// is the current frame).
#[pyfunction]
fn collisions(waypoints: Vec<(f64, f64)>, gt: &PyOccSequence) -> PyResult<Vec<bool>> {
    evalkit::collision_frames(&trajectory(&waypoints)?, &gt.inner, &CollisionParams::default()).map_err(to_py)
}

/// The last history frame repeated `steps` times.
#[pyfunction]
fn copy_paste(history: &PyOccSequence, steps: usize) -> PyResult<Vec<PyOccGrid>> {
    Ok(evalkit::copy_paste_baseline(&history.inner, steps)
        .map_err(to_py)?
        .into_iter()
        .map(|g| PyOccGrid { inner: g })
        .collect())
}

#[pymodule]
fn pyoccworld(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyOccGrid>()?;
    m.add_class::<PyOccSequence>()?;
    m.add_class::<PyTokenizer>()?;
    m.add_class::<PyWorldModel>()?;
    m.add_function(wrap_pyfunction!(generate_world, m)?)?;
    m.add_function(wrap_pyfunction!(train_tokenizer, m)?)?;
    m.add_function(wrap_pyfunction!(train_world, m)?)?;
    m.add_function(wrap_pyfunction!(miou, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(l2_error, m)?)?;
    m.add_function(wrap_pyfunction!(collisions, m)?)?;
    m.add_function(wrap_pyfunction!(copy_paste, m)?)?;
    m.add("CLASS_NAMES", og::CLASS_NAMES.to_vec())?;
    Ok(())
}
