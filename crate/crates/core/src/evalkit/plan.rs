//! Ego trajectories, L2 error and footprint collision checks.

use crate::error::{Error, Result};
use crate::occgrid::{EgoPose, OccSequence, BUILDING, PEDESTRIAN, VEHICLE};

/// Per-step ego motion; step `k` is expressed in the frame of step `k − 1`
/// (step 0 in the frame of the reference timestamp `T`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    steps: Vec<[f64; 3]>,
}

impl Trajectory {
    /// Steps `(Δx, Δy, Δyaw)`.
    pub fn from_steps(steps: Vec<[f64; 3]>) -> Result<Self> {
        if steps.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("trajectory step".into()));
        }
        Ok(Trajectory { steps })
    }

    /// Planar displacements with no heading change.
    pub fn from_displacements(d: &[[f64; 2]]) -> Result<Self> {
        Self::from_steps(d.iter().map(|p| [p[0], p[1], 0.0]).collect())
    }

    /// Ground-truth motion from `origin` through `future`.
    pub fn from_poses(origin: &EgoPose, future: &[EgoPose]) -> Self {
        let mut prev = origin;
        let mut steps = Vec::with_capacity(future.len());
        for p in future {
            let (dx, dy, dyaw) = prev.relative(p);
            steps.push([dx, dy, dyaw]);
            prev = p;
        }
        Trajectory { steps }
    }

    /// Zero motion for `n` steps.
    pub fn stationary(n: usize) -> Self {
        Trajectory {
            steps: vec![[0.0; 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[[f64; 3]] {
        &self.steps
    }

    /// Poses `(x, y, yaw)` after each step, in the frame of `T`.
    pub fn poses(&self) -> Vec<[f64; 3]> {
        let (mut x, mut y, mut yaw) = (0.0, 0.0, 0.0f64);
        self.steps
            .iter()
            .map(|s| {
                let (sn, cs) = yaw.sin_cos();
                x += cs * s[0] - sn * s[1];
                y += sn * s[0] + cs * s[1];
                yaw += s[2];
                [x, y, yaw]
            })
            .collect()
    }

    pub fn waypoints(&self) -> Vec<[f64; 2]> {
        self.poses().iter().map(|p| [p[0], p[1]]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum L2Mode {
    /// Distance between waypoints at the horizon frame.
    AtHorizon,
    /// Mean of the at-horizon distances over frames `1..=horizon`.
    Averaged,
}

impl L2Mode {
    pub fn tag(&self) -> &'static str {
        match self {
            L2Mode::AtHorizon => "at-horizon",
            L2Mode::Averaged => "averaged",
        }
    }
}

/// L2 waypoint error at each horizon (1-based frame indices).
pub fn l2_error(pred: &Trajectory, gt: &Trajectory, horizons: &[usize], mode: L2Mode) -> Result<Vec<f64>> {
    let need = horizons.iter().copied().max().unwrap_or(0);
    if horizons.contains(&0) || pred.len() < need || gt.len() < need {
        return Err(Error::Length(format!(
            "horizons up to frame {need} need trajectories that long (pred {}, gt {})",
            pred.len(),
            gt.len()
        )));
    }
    let (a, b) = (pred.waypoints(), gt.waypoints());
    let dist: Vec<f64> = (0..need)
        .map(|k| ((a[k][0] - b[k][0]).powi(2) + (a[k][1] - b[k][1]).powi(2)).sqrt())
        .collect();
    Ok(horizons
        .iter()
        .map(|&h| match mode {
            L2Mode::AtHorizon => dist[h - 1],
            L2Mode::Averaged => dist[..h].iter().sum::<f64>() / h as f64,
        })
        .collect())
}

/// Ego footprint and what counts as an obstacle.
#[derive(Clone, Debug, PartialEq)]
pub struct CollisionParams {
    /// Footprint along the heading, meters.
    pub length: f64,
    pub width: f64,
    /// Layers whose bottom lies below this height (meters) are checked.
    pub max_height: f64,
    pub obstacle_classes: Vec<u8>,
}

impl Default for CollisionParams {
    fn default() -> Self {
        CollisionParams {
            length: 4.0,
            width: 2.0,
            max_height: 2.0,
            obstacle_classes: vec![BUILDING, VEHICLE, PEDESTRIAN],
        }
    }
}

/// Closed rectangle (center, heading, half extents) against the closed
/// axis-aligned box `[x0, x1] × [y0, y1]`: separating-axis test where
/// touching counts as overlap.
fn rect_overlaps_cell(c: [f64; 2], yaw: f64, half: [f64; 2], x: [f64; 2], y: [f64; 2]) -> bool {
    const EPS: f64 = 1e-9;
    let (s, co) = yaw.sin_cos();
    let axes = [[co, s], [-s, co]];
    let corners = [[x[0], y[0]], [x[1], y[0]], [x[0], y[1]], [x[1], y[1]]];
    // Cell axes.
    let ex = half[0] * co.abs() + half[1] * s.abs();
    let ey = half[0] * s.abs() + half[1] * co.abs();
    if c[0] + ex < x[0] - EPS || c[0] - ex > x[1] + EPS || c[1] + ey < y[0] - EPS || c[1] - ey > y[1] + EPS {
        return false;
    }
    // Rectangle axes.
    for (a, h) in axes.iter().zip(half) {
        let proj = |p: &[f64; 2]| (p[0] - c[0]) * a[0] + (p[1] - c[1]) * a[1];
        let lo = corners.iter().map(proj).fold(f64::INFINITY, f64::min);
        let hi = corners.iter().map(proj).fold(f64::NEG_INFINITY, f64::max);
        if hi < -h - EPS || lo > h + EPS {
            return false;
        }
    }
    true
}

/// Whether the footprint at each predicted waypoint hits an obstacle in the
/// ground-truth frame of the same timestamp.
///
/// `gt` holds the reference frame `T` followed by the future frames; each
/// grid is in its own ego frame, so waypoints are carried through the
/// ground-truth poses. The footprint is oriented along the segment to the
/// next waypoint; the last one (and zero-length segments) uses the heading
/// of the grid's own axes.
pub fn collision_frames(pred: &Trajectory, gt: &OccSequence, params: &CollisionParams) -> Result<Vec<bool>> {
    if gt.len() < pred.len() + 1 {
        return Err(Error::Length(format!(
            "{} predicted steps need {} ground-truth frames, got {}",
            pred.len(),
            pred.len() + 1,
            gt.len()
        )));
    }
    let origin = gt.pose(0);
    let wps = pred.waypoints();
    let half = [params.length / 2.0, params.width / 2.0];
    let mut out = Vec::with_capacity(wps.len());
    for (k, wp) in wps.iter().enumerate() {
        let grid = gt.grid(k + 1);
        let frame = gt.pose(k + 1);
        // Reference-frame point → world → frame k+1.
        let to_frame = |p: [f64; 2]| {
            let (s, c) = (origin.yaw as f64).sin_cos();
            let wx = origin.x as f64 + c * p[0] - s * p[1];
            let wy = origin.y as f64 + s * p[0] + c * p[1];
            let (dx, dy) = (wx - frame.x as f64, wy - frame.y as f64);
            let (s, c) = (frame.yaw as f64).sin_cos();
            [c * dx + s * dy, -s * dx + c * dy]
        };
        let center = to_frame(*wp);
        let yaw = match wps.get(k + 1) {
            Some(next) if (next[0] - wp[0]).hypot(next[1] - wp[1]) > 1e-9 => {
                let n = to_frame(*next);
                (n[1] - center[1]).atan2(n[0] - center[0])
            }
            _ => 0.0,
        };
        let [gh, gw, gd] = grid.dims();
        let vs = grid.voxel_size();
        let layers = (0..gd).filter(|&d| (d as f64) * vs < params.max_height).count();
        let reach = half[0].hypot(half[1]);
        let cell_of = |v: f64, n: usize| v / vs + n as f64 / 2.0;
        let h_lo = (cell_of(center[0] - reach, gh).floor() as i64 - 1).max(0);
        let h_hi = (cell_of(center[0] + reach, gh).ceil() as i64 + 1).min(gh as i64);
        let w_lo = (cell_of(center[1] - reach, gw).floor() as i64 - 1).max(0);
        let w_hi = (cell_of(center[1] + reach, gw).ceil() as i64 + 1).min(gw as i64);
        let mut hit = false;
        'cells: for h in h_lo..h_hi {
            for w in w_lo..w_hi {
                let x = [(h as f64 - gh as f64 / 2.0) * vs, (h as f64 + 1.0 - gh as f64 / 2.0) * vs];
                let y = [(w as f64 - gw as f64 / 2.0) * vs, (w as f64 + 1.0 - gw as f64 / 2.0) * vs];
                let occupied = (0..layers).any(|d| params.obstacle_classes.contains(&grid.get(h as usize, w as usize, d)));
                if occupied && rect_overlaps_cell(center, yaw, half, x, y) {
                    hit = true;
                    break 'cells;
                }
            }
        }
        out.push(hit);
    }
    Ok(out)
}

/// Per-sample collision flags → percent of samples colliding at any frame
/// up to each horizon (1-based).
pub fn collision_rate(samples: &[Vec<bool>], horizons: &[usize]) -> Result<Vec<f64>> {
    let need = horizons.iter().copied().max().unwrap_or(0);
    if horizons.contains(&0) || samples.iter().any(|s| s.len() < need) {
        return Err(Error::Length(format!("collision flags must cover frame {need}")));
    }
    if samples.is_empty() {
        return Ok(vec![0.0; horizons.len()]);
    }
    Ok(horizons
        .iter()
        .map(|&h| {
            let hits = samples.iter().filter(|s| s[..h].iter().any(|&b| b)).count();
            100.0 * hits as f64 / samples.len() as f64
        })
        .collect())
}
