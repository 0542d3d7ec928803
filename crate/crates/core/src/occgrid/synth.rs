//! Procedural driving scenes: a straight main road with sidewalks, building
//! blocks and cross streets, plus vehicles and pedestrians moving at constant
//! velocity. Every frame is rendered in the ego frame of its own timestamp.
//!
//! "World cells" are grid cells of frame 0: `u` along the initial heading,
//! `v` to the initial left, with the ego starting at `(H/2, W/2)`.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use super::{EgoPose, OccGrid, OccSequence, SequenceMeta, BUILDING, DRIVABLE, FREE, PEDESTRIAN, SIDEWALK, VEHICLE};
use crate::error::{Error, Result};

const LANE_WIDTH: i64 = 8;
const SIDEWALK_WIDTH: i64 = 6;
const CROSS_STREET_WIDTH: i64 = 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AgentKind {
    Vehicle,
    Pedestrian,
}

impl AgentKind {
    /// Footprint `(along u, along v, height)` in voxels.
    pub fn footprint(self) -> (i64, i64, usize) {
        match self {
            AgentKind::Vehicle => (10, 5, 3),
            AgentKind::Pedestrian => (1, 1, 4),
        }
    }

    pub fn label(self) -> u8 {
        match self {
            AgentKind::Vehicle => VEHICLE,
            AgentKind::Pedestrian => PEDESTRIAN,
        }
    }
}

/// An agent anchored at world cell `cell` at frame 0, moving `velocity`
/// cells per frame. Its footprint covers `[round(a) − ⌊L/2⌋, round(a) − ⌊L/2⌋ + L)`
/// on each axis.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentSpec {
    pub kind: AgentKind,
    pub cell: [f64; 2],
    pub velocity: [f64; 2],
}

/// Ego motion; speeds in m/s, yaw rates in rad/s.
#[derive(Clone, Debug, PartialEq)]
pub enum EgoProfile {
    ConstantVelocity { speed: f64 },
    /// Constant forward speed with a smooth lateral shift of `offset` meters
    /// between `start_frame` and `start_frame + duration_frames`.
    LaneChange {
        speed: f64,
        offset: f64,
        start_frame: usize,
        duration_frames: usize,
    },
    Turn { speed: f64, yaw_rate: f64 },
}

impl Default for EgoProfile {
    fn default() -> Self {
        EgoProfile::ConstantVelocity { speed: 0.0 }
    }
}

impl EgoProfile {
    fn position(&self, t: f64, frame: f64) -> (f64, f64) {
        match *self {
            EgoProfile::ConstantVelocity { speed } => (speed * t, 0.0),
            EgoProfile::LaneChange {
                speed,
                offset,
                start_frame,
                duration_frames,
            } => {
                let s = if duration_frames == 0 {
                    if frame >= start_frame as f64 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    let r = ((frame - start_frame as f64) / duration_frames as f64).clamp(0.0, 1.0);
                    r * r * (3.0 - 2.0 * r)
                };
                (speed * t, offset * s)
            }
            EgoProfile::Turn { speed, yaw_rate } => {
                if yaw_rate.abs() < 1e-12 {
                    (speed * t, 0.0)
                } else {
                    let r = speed / yaw_rate;
                    let th = yaw_rate * t;
                    (r * th.sin(), r * (1.0 - th.cos()))
                }
            }
        }
    }

    /// Pose at frame `k` with frame spacing `dt` seconds.
    pub fn pose(&self, k: usize, dt: f64) -> EgoPose {
        let t = k as f64 * dt;
        let (x, y) = self.position(t, k as f64);
        let yaw = match *self {
            EgoProfile::ConstantVelocity { .. } => 0.0,
            EgoProfile::Turn { yaw_rate, .. } => yaw_rate * t,
            EgoProfile::LaneChange { speed, .. } => {
                if speed == 0.0 {
                    0.0
                } else {
                    // Heading along the local path tangent (central difference).
                    let h = 0.5;
                    let (x0, y0) = self.position(t - h * dt, k as f64 - h);
                    let (x1, y1) = self.position(t + h * dt, k as f64 + h);
                    (y1 - y0).atan2(x1 - x0)
                }
            }
        };
        EgoPose::new(x, y, yaw)
    }

    fn is_finite(&self) -> bool {
        match *self {
            EgoProfile::ConstantVelocity { speed } => speed.is_finite(),
            EgoProfile::LaneChange { speed, offset, .. } => speed.is_finite() && offset.is_finite(),
            EgoProfile::Turn { speed, yaw_rate } => speed.is_finite() && yaw_rate.is_finite(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub dims: [usize; 3],
    pub num_classes: u8,
    pub voxel_size: f64,
    pub frame_dt_ms: u32,
    /// Randomly placed agents (in addition to `agents`).
    pub num_vehicles: usize,
    pub num_pedestrians: usize,
    pub agents: Vec<AgentSpec>,
    pub ego: EgoProfile,
    pub seed: u64,
    pub scene_id: String,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            dims: [64, 64, 8],
            num_classes: 6,
            voxel_size: super::DEFAULT_VOXEL_SIZE,
            frame_dt_ms: super::DEFAULT_FRAME_DT_MS,
            num_vehicles: 4,
            num_pedestrians: 4,
            agents: Vec::new(),
            ego: EgoProfile::default(),
            seed: 0,
            scene_id: String::new(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::config(format!("scene dims must be >= 1, got {:?}", self.dims)));
        }
        if self.num_classes != 6 {
            return Err(Error::config(format!(
                "the synthetic world uses 6 classes, got {}",
                self.num_classes
            )));
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(Error::config("voxel_size must be positive"));
        }
        if self.frame_dt_ms == 0 {
            return Err(Error::config("frame_dt_ms must be > 0"));
        }
        if !self.ego.is_finite() {
            return Err(Error::config("ego profile parameters must be finite"));
        }
        if self
            .agents
            .iter()
            .any(|a| a.cell.iter().chain(a.velocity.iter()).any(|v| !v.is_finite()))
        {
            return Err(Error::config("agent parameters must be finite"));
        }
        Ok(())
    }

    /// A randomized scene for dataset generation: agent counts and the ego
    /// profile are drawn from `seed`.
    pub fn random(dims: [usize; 3], seed: u64) -> Self {
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed ^ 0x5CE4_E5EE_D000_0001);
        let ego = match rng.random_range(0..20) {
            0..=3 => EgoProfile::ConstantVelocity { speed: 0.0 },
            4..=12 => EgoProfile::ConstantVelocity {
                speed: [1.6, 3.2, 4.8, 6.4][rng.random_range(0..4)],
            },
            13..=16 => EgoProfile::LaneChange {
                speed: [3.2, 4.8][rng.random_range(0..2)],
                offset: 3.2,
                start_frame: rng.random_range(0..6),
                duration_frames: 4,
            },
            _ => EgoProfile::Turn {
                speed: 3.2,
                yaw_rate: if rng.random_bool(0.5) { 0.1 } else { -0.1 },
            },
        };
        SceneConfig {
            dims,
            num_vehicles: rng.random_range(3..=7),
            num_pedestrians: rng.random_range(4..=10),
            ego,
            seed,
            scene_id: format!("scene-{seed:016x}"),
            ..Default::default()
        }
    }
}

/// Static scenery as a function of world cell.
struct Layout {
    road_lo: i64,
    road_hi: i64,
    cross: Vec<(i64, i64)>,
    /// `(start, end, height)` building runs along `u`, for the right (`v <
    /// road`) and left side.
    blocks: [Vec<(i64, i64, usize)>; 2],
}

impl Layout {
    fn generate(rng: &mut Xoshiro256StarStar, w: usize, d: usize, u_lo: i64, u_hi: i64) -> Self {
        // Ego drives in the right lane, centered on v = W/2.
        let road_lo = w as i64 / 2 - LANE_WIDTH / 2;
        let road_hi = road_lo + 2 * LANE_WIDTH;
        let mut cross = Vec::new();
        let mut u = u_lo + rng.random_range(20..80);
        while u < u_hi {
            cross.push((u, u + CROSS_STREET_WIDTH));
            u += CROSS_STREET_WIDTH + rng.random_range(60..120);
        }
        let mut blocks: [Vec<(i64, i64, usize)>; 2] = [Vec::new(), Vec::new()];
        for side in &mut blocks {
            let mut u = u_lo - rng.random_range(0..20);
            while u < u_hi {
                let len = rng.random_range(15..40);
                let height = rng.random_range(4.min(d)..=d).max(1);
                side.push((u, u + len, height));
                u += len + rng.random_range(4..12);
            }
        }
        Layout {
            road_lo,
            road_hi,
            cross,
            blocks,
        }
    }

    /// `(ground label at d = 0, building height)` for a world column.
    fn column(&self, u: i64, v: i64) -> (u8, usize) {
        if v >= self.road_lo && v < self.road_hi {
            return (DRIVABLE, 0);
        }
        if self.cross.iter().any(|&(a, b)| u >= a && u < b) {
            return (DRIVABLE, 0);
        }
        let sidewalk_band = (v >= self.road_lo - SIDEWALK_WIDTH && v < self.road_lo)
            || (v >= self.road_hi && v < self.road_hi + SIDEWALK_WIDTH);
        let near_cross = self
            .cross
            .iter()
            .any(|&(a, b)| u >= a - SIDEWALK_WIDTH / 2 && u < b + SIDEWALK_WIDTH / 2);
        if sidewalk_band || near_cross {
            return (SIDEWALK, 0);
        }
        let side = usize::from(v >= self.road_hi);
        for &(a, b, height) in &self.blocks[side] {
            if u >= a && u < b {
                return (FREE, height);
            }
        }
        (FREE, 0)
    }
}

struct Agent {
    kind: AgentKind,
    pos: [f64; 2],
    vel: [f64; 2],
}

impl Agent {
    fn rect(&self) -> [i64; 4] {
        let (lu, lv, _) = self.kind.footprint();
        let au = self.pos[0].round() as i64 - lu / 2;
        let av = self.pos[1].round() as i64 - lv / 2;
        [au, au + lu, av, av + lv]
    }

    /// Advances one frame; an agent that would leave `bounds` is clamped and
    /// stops.
    fn step(&mut self, bounds: [[f64; 2]; 2]) {
        let (lu, lv, _) = self.kind.footprint();
        let half = [(lu / 2) as f64, (lv / 2) as f64];
        let len = [lu as f64, lv as f64];
        for a in 0..2 {
            let lo = bounds[a][0] + half[a];
            let hi = bounds[a][1] - len[a] + half[a];
            let next = self.pos[a] + self.vel[a];
            if next < lo || next > hi {
                self.pos[a] = next.clamp(lo, hi.max(lo));
                self.vel = [0.0, 0.0];
            } else {
                self.pos[a] = next;
            }
        }
    }
}

/// Deterministic synthetic sequence of `num_frames` frames.
pub fn generate_synthetic_world(config: &SceneConfig, num_frames: usize) -> Result<OccSequence> {
    config.validate()?;
    if num_frames == 0 {
        return Err(Error::config("num_frames must be >= 1"));
    }
    let [gh, gw, gd] = config.dims;
    let vs = config.voxel_size;
    let dt = config.frame_dt_ms as f64 / 1000.0;
    let mut rng = Xoshiro256StarStar::seed_from_u64(config.seed);

    let poses: Vec<EgoPose> = (0..num_frames).map(|k| config.ego.pose(k, dt)).collect();
    let ego_cells: Vec<[f64; 2]> = poses
        .iter()
        .map(|p| [gh as f64 / 2.0 + p.x as f64 / vs, gw as f64 / 2.0 + p.y as f64 / vs])
        .collect();

    // Region visible from any ego position (conservative square around the
    // rotated grid); agents are kept inside it.
    let reach = ((gh * gh + gw * gw) as f64).sqrt() / 2.0;
    let mut bounds = [[f64::INFINITY, f64::NEG_INFINITY]; 2];
    for c in &ego_cells {
        let static_ego = poses.iter().all(|p| *p == poses[0]) && poses[0] == EgoPose::default();
        let (ru, rv) = if static_ego {
            (gh as f64 / 2.0, gw as f64 / 2.0)
        } else {
            (reach, reach)
        };
        bounds[0][0] = bounds[0][0].min(c[0] - ru);
        bounds[0][1] = bounds[0][1].max(c[0] + ru);
        bounds[1][0] = bounds[1][0].min(c[1] - rv);
        bounds[1][1] = bounds[1][1].max(c[1] + rv);
    }
    let bounds = bounds.map(|[lo, hi]| [lo.floor(), hi.ceil()]);

    let layout = Layout::generate(&mut rng, gw, gd, bounds[0][0] as i64 - 8, bounds[0][1] as i64 + 8);

    let mut agents: Vec<Agent> = config
        .agents
        .iter()
        .map(|a| Agent {
            kind: a.kind,
            pos: a.cell,
            vel: a.velocity,
        })
        .collect();
    // Random agents start around the ego's mid-sequence position so that
    // most of them are visible.
    let mid = ego_cells[num_frames / 2][0];
    let span_u = (
        (mid - gh as f64 / 2.0).max(bounds[0][0] + 6.0),
        (mid + gh as f64 / 2.0).min(bounds[0][1] - 6.0),
    );
    let span_u = (span_u.0, span_u.1.max(span_u.0 + 1.0));
    for _ in 0..config.num_vehicles {
        let left_lane = rng.random_bool(0.5);
        let lane_center = if left_lane {
            layout.road_lo + LANE_WIDTH + LANE_WIDTH / 2
        } else {
            layout.road_lo + LANE_WIDTH / 2
        };
        let speed = rng.random_range(0..=3) as f64;
        agents.push(Agent {
            kind: AgentKind::Vehicle,
            pos: [rng.random_range(span_u.0..span_u.1).round(), lane_center as f64],
            vel: [if left_lane { -speed } else { speed }, 0.0],
        });
    }
    for _ in 0..config.num_pedestrians {
        let v = if rng.random_bool(0.5) {
            rng.random_range(layout.road_lo - SIDEWALK_WIDTH..layout.road_lo)
        } else {
            rng.random_range(layout.road_hi..layout.road_hi + SIDEWALK_WIDTH)
        };
        agents.push(Agent {
            kind: AgentKind::Pedestrian,
            pos: [rng.random_range(span_u.0..span_u.1).round(), v as f64],
            vel: [rng.random_range(-1..=1) as f64, 0.0],
        });
    }
    for a in &mut agents {
        // Keep initial placements inside the region too.
        let v = a.vel;
        a.vel = [0.0, 0.0];
        a.step(bounds);
        a.vel = v;
    }

    let mut frames = Vec::with_capacity(num_frames);
    for k in 0..num_frames {
        if k > 0 {
            for a in &mut agents {
                a.step(bounds);
            }
        }
        let rects: Vec<([i64; 4], usize, u8)> = agents
            .iter()
            .map(|a| (a.rect(), a.kind.footprint().2, a.kind.label()))
            .collect();
        let pose = poses[k];
        let (s, c) = (pose.yaw as f64).sin_cos();
        let [eu, ev] = ego_cells[k];
        let mut labels = vec![FREE; gh * gw * gd];
        for h in 0..gh {
            let a = h as f64 + 0.5 - gh as f64 / 2.0;
            for w in 0..gw {
                let b = w as f64 + 0.5 - gw as f64 / 2.0;
                let u = (eu + c * a - s * b).floor() as i64;
                let v = (ev + s * a + c * b).floor() as i64;
                let (ground, building) = layout.column(u, v);
                let col = &mut labels[(h * gw + w) * gd..(h * gw + w + 1) * gd];
                col[0] = ground;
                for cell in col.iter_mut().take(building.min(gd)) {
                    *cell = BUILDING;
                }
                for &(r, height, label) in &rects {
                    if u >= r[0] && u < r[1] && v >= r[2] && v < r[3] {
                        for cell in col.iter_mut().take(height.min(gd)) {
                            *cell = label;
                        }
                    }
                }
            }
        }
        let grid = OccGrid::new(config.dims, config.num_classes, labels)?.with_voxel_size(vs);
        frames.push((grid, pose));
    }
    Ok(OccSequence::new(frames, config.frame_dt_ms)?.with_meta(SequenceMeta {
        scene_id: config.scene_id.clone(),
        seed: config.seed,
    }))
}
