//! Semantic occupancy grids, ego poses, sequences, the `.occseq` file format
//! and a procedural driving world.
//!
//! Grid frame: `h` points forward from the ego, `w` to its left, `d` up. The
//! ego sits at cell `(H/2, W/2)`. Every frame of a sequence is expressed in
//! the ego frame of its own timestamp.

mod format;
pub mod synth;

pub use format::{load_sequence, read_sequence_file, save_sequence, write_sequence_file, HEADER_BYTES, MAGIC, POSE_BYTES};
pub use synth::{generate_synthetic_world, AgentKind, AgentSpec, EgoProfile, SceneConfig};

use crate::error::{Error, Result};

pub const FREE: u8 = 0;
pub const DRIVABLE: u8 = 1;
pub const SIDEWALK: u8 = 2;
pub const BUILDING: u8 = 3;
pub const VEHICLE: u8 = 4;
pub const PEDESTRIAN: u8 = 5;

pub const CLASS_NAMES: [&str; 6] = ["free", "drivable", "sidewalk", "building", "vehicle", "pedestrian"];

pub const DEFAULT_VOXEL_SIZE: f64 = 0.4;
pub const DEFAULT_FRAME_DT_MS: u32 = 500;

/// Dense `H × W × D` grid of class labels, index `(h·W + w)·D + d`.
#[derive(Clone, Debug, PartialEq)]
pub struct OccGrid {
    dims: [usize; 3],
    num_classes: u8,
    voxel_size: f64,
    labels: Vec<u8>,
}

impl OccGrid {
    pub fn new(dims: [usize; 3], num_classes: u8, labels: Vec<u8>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::config(format!("grid dims must be >= 1, got {dims:?}")));
        }
        if num_classes == 0 {
            return Err(Error::config("num_classes must be >= 1"));
        }
        let n = dims[0] * dims[1] * dims[2];
        if labels.len() != n {
            return Err(Error::shape("occgrid", &dims, &[labels.len()]));
        }
        if let Some(pos) = labels.iter().position(|&l| l >= num_classes) {
            return Err(Error::Validation(format!(
                "label {} at voxel {pos} >= num_classes {num_classes}",
                labels[pos]
            )));
        }
        Ok(OccGrid {
            dims,
            num_classes,
            voxel_size: DEFAULT_VOXEL_SIZE,
            labels,
        })
    }

    /// All-free grid.
    pub fn empty(dims: [usize; 3], num_classes: u8) -> Result<Self> {
        Self::new(dims, num_classes, vec![FREE; dims.iter().product()])
    }

    pub fn with_voxel_size(mut self, voxel_size: f64) -> Self {
        self.voxel_size = voxel_size;
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn num_classes(&self) -> u8 {
        self.num_classes
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, d: usize) -> usize {
        (h * self.dims[1] + w) * self.dims[2] + d
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, d: usize) -> u8 {
        self.labels[self.index(h, w, d)]
    }

    /// Sets one voxel; panics on an out-of-range label.
    pub fn set(&mut self, h: usize, w: usize, d: usize, label: u8) {
        assert!(label < self.num_classes, "label {label} out of range");
        let i = self.index(h, w, d);
        self.labels[i] = label;
    }

    /// Fraction of voxels with a non-free label.
    pub fn occupancy_fraction(&self) -> f64 {
        let occ = self.labels.iter().filter(|&&l| l != FREE).count();
        occ as f64 / self.labels.len() as f64
    }

    pub fn same_layout(&self, other: &OccGrid) -> bool {
        self.dims == other.dims && self.num_classes == other.num_classes
    }
}

/// Ego pose in meters/radians, expressed in the grid frame of the first frame
/// of its sequence. Stored as `f32` to match the file format exactly.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EgoPose {
    pub x: f32,
    pub y: f32,
    pub yaw: f32,
}

impl EgoPose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        EgoPose {
            x: x as f32,
            y: y as f32,
            yaw: wrap_angle(yaw) as f32,
        }
    }

    pub fn is_valid(&self) -> bool {
        let pi = std::f32::consts::PI;
        self.x.is_finite() && self.y.is_finite() && self.yaw >= -pi && self.yaw < pi
    }

    /// Displacement `(Δx, Δy, Δyaw)` of `next` expressed in this pose's frame.
    pub fn relative(&self, next: &EgoPose) -> (f64, f64, f64) {
        let (dx, dy) = (next.x as f64 - self.x as f64, next.y as f64 - self.y as f64);
        let yaw = self.yaw as f64;
        let (s, c) = yaw.sin_cos();
        (c * dx + s * dy, -s * dx + c * dy, wrap_angle(next.yaw as f64 - yaw))
    }
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r >= PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Descriptive data kept alongside a sequence (not part of the file format;
/// datasets record it in their manifest).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SequenceMeta {
    pub scene_id: String,
    pub seed: u64,
}

/// Ordered frames sharing one grid layout.
#[derive(Clone, Debug, PartialEq)]
pub struct OccSequence {
    frames: Vec<(OccGrid, EgoPose)>,
    frame_dt_ms: u32,
    pub meta: SequenceMeta,
}

impl OccSequence {
    pub fn new(frames: Vec<(OccGrid, EgoPose)>, frame_dt_ms: u32) -> Result<Self> {
        let Some((first, _)) = frames.first() else {
            return Err(Error::Validation("a sequence needs at least one frame".into()));
        };
        if frame_dt_ms == 0 {
            return Err(Error::Validation("frame_dt must be > 0".into()));
        }
        if let Some(k) = frames.iter().position(|(g, _)| !g.same_layout(first)) {
            return Err(Error::Validation(format!("frame {k} has a different grid layout")));
        }
        if let Some(k) = frames.iter().position(|(_, p)| !p.is_valid()) {
            return Err(Error::Validation(format!("frame {k} has an invalid pose")));
        }
        Ok(OccSequence {
            frames,
            frame_dt_ms,
            meta: SequenceMeta::default(),
        })
    }

    pub fn with_meta(mut self, meta: SequenceMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn frames(&self) -> &[(OccGrid, EgoPose)] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn grid(&self, k: usize) -> &OccGrid {
        &self.frames[k].0
    }

    pub fn pose(&self, k: usize) -> EgoPose {
        self.frames[k].1
    }

    pub fn grids(&self) -> impl Iterator<Item = &OccGrid> {
        self.frames.iter().map(|(g, _)| g)
    }

    pub fn poses(&self) -> Vec<EgoPose> {
        self.frames.iter().map(|(_, p)| *p).collect()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.frames[0].0.dims()
    }

    pub fn num_classes(&self) -> u8 {
        self.frames[0].0.num_classes()
    }

    pub fn frame_dt_ms(&self) -> u32 {
        self.frame_dt_ms
    }

    pub fn frame_dt(&self) -> f64 {
        self.frame_dt_ms as f64 / 1000.0
    }

    /// Frames `start..start+len` as a new sequence.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames.len() {
            return Err(Error::Length(format!(
                "window {start}+{len} exceeds sequence of {} frames",
                self.frames.len()
            )));
        }
        Ok(OccSequence {
            frames: self.frames[start..start + len].to_vec(),
            frame_dt_ms: self.frame_dt_ms,
            meta: self.meta.clone(),
        })
    }
}
