//! Copy&Paste baseline and per-horizon report tables.

use std::fmt::Write as _;

use super::metrics::IouAccumulator;
use super::plan::{collision_frames, l2_error, CollisionParams, L2Mode, Trajectory};
use crate::error::{Error, Result};
use crate::occgrid::{OccGrid, OccSequence, CLASS_NAMES};

/// Report horizons at 2 Hz: 1 s, 2 s and 3 s ahead.
pub const HORIZONS: [(&str, usize); 3] = [("1s", 2), ("2s", 4), ("3s", 6)];

pub fn horizon_frames() -> Vec<usize> {
    HORIZONS.iter().map(|h| h.1).collect()
}

/// The last history frame repeated `steps` times.
pub fn copy_paste_baseline(history: &OccSequence, steps: usize) -> Result<Vec<OccGrid>> {
    if history.is_empty() {
        return Err(Error::Length("copy&paste needs at least one history frame".into()));
    }
    Ok(vec![history.grid(history.len() - 1).clone(); steps])
}

/// Dataset-level IoU accumulation per horizon.
#[derive(Clone, Debug)]
pub struct ForecastEvaluator {
    accs: Vec<IouAccumulator>,
    num_classes: u8,
}

impl ForecastEvaluator {
    pub fn new(num_classes: u8) -> Self {
        ForecastEvaluator {
            accs: vec![IouAccumulator::new(num_classes); HORIZONS.len()],
            num_classes,
        }
    }

    /// `pred[k]` and `gt[k]` are the frames `k + 1` steps ahead.
    pub fn add(&mut self, pred: &[OccGrid], gt: &[OccGrid]) -> Result<()> {
        let need = HORIZONS[HORIZONS.len() - 1].1;
        if pred.len() < need || gt.len() < need {
            return Err(Error::Length(format!(
                "forecast evaluation needs {need} frames, got {} predicted and {} ground truth",
                pred.len(),
                gt.len()
            )));
        }
        for (acc, &(_, f)) in self.accs.iter_mut().zip(&HORIZONS) {
            acc.add(&pred[f - 1], &gt[f - 1])?;
        }
        Ok(())
    }

    pub fn report(&self, name: &str, classes: &[u8]) -> ForecastReport {
        let horizons: Vec<HorizonScores> = self
            .accs
            .iter()
            .zip(&HORIZONS)
            .map(|(acc, &(label, _))| {
                let r = acc.miou(classes);
                HorizonScores {
                    label: label.to_string(),
                    miou: 100.0 * r.miou,
                    iou: 100.0 * acc.iou(),
                    per_class: r.per_class.iter().map(|v| v.map(|x| 100.0 * x)).collect(),
                }
            })
            .collect();
        let n = horizons.len() as f64;
        ForecastReport {
            name: name.to_string(),
            avg_miou: horizons.iter().map(|h| h.miou).sum::<f64>() / n,
            avg_iou: horizons.iter().map(|h| h.iou).sum::<f64>() / n,
            horizons,
            num_classes: self.num_classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HorizonScores {
    pub label: String,
    /// Percentages.
    pub miou: f64,
    pub iou: f64,
    pub per_class: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastReport {
    pub name: String,
    pub horizons: Vec<HorizonScores>,
    pub avg_miou: f64,
    pub avg_iou: f64,
    pub num_classes: u8,
}

fn class_name(c: usize) -> String {
    CLASS_NAMES.get(c).map_or_else(|| format!("class{c}"), |s| s.to_string())
}

impl ForecastReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "forecast: {}", self.name);
        let _ = write!(s, "{:<12}", "metric");
        for h in &self.horizons {
            let _ = write!(s, "{:>10}", h.label);
        }
        let _ = writeln!(s, "{:>10}", "Avg");
        let _ = write!(s, "{:<12}", "mIoU(%)");
        for h in &self.horizons {
            let _ = write!(s, "{:>10.2}", h.miou);
        }
        let _ = writeln!(s, "{:>10.2}", self.avg_miou);
        let _ = write!(s, "{:<12}", "IoU(%)");
        for h in &self.horizons {
            let _ = write!(s, "{:>10.2}", h.iou);
        }
        let _ = writeln!(s, "{:>10.2}", self.avg_iou);
        for c in 0..self.num_classes as usize {
            if self.horizons.iter().all(|h| h.per_class.get(c).copied().flatten().is_none()) {
                continue;
            }
            let _ = write!(s, "{:<12}", class_name(c));
            for h in &self.horizons {
                match h.per_class.get(c).copied().flatten() {
                    Some(v) => {
                        let _ = write!(s, "{v:>10.2}");
                    }
                    None => {
                        let _ = write!(s, "{:>10}", "-");
                    }
                }
            }
            let _ = writeln!(s);
        }
        s
    }

    /// `name.metric.horizon=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for h in &self.horizons {
            let _ = writeln!(s, "{}.miou.{}={:.6}", self.name, h.label, h.miou);
            let _ = writeln!(s, "{}.iou.{}={:.6}", self.name, h.label, h.iou);
        }
        let _ = writeln!(s, "{}.miou.avg={:.6}", self.name, self.avg_miou);
        let _ = writeln!(s, "{}.iou.avg={:.6}", self.name, self.avg_iou);
        s
    }
}

/// Dataset-level planning metrics.
#[derive(Clone, Debug)]
pub struct PlanEvaluator {
    pub params: CollisionParams,
    l2: [Vec<Vec<f64>>; 2],
    collisions: Vec<Vec<bool>>,
}

impl PlanEvaluator {
    pub fn new(params: CollisionParams) -> Self {
        PlanEvaluator {
            params,
            l2: [Vec::new(), Vec::new()],
            collisions: Vec::new(),
        }
    }

    /// `gt` holds the reference frame followed by the future frames.
    pub fn add(&mut self, pred: &Trajectory, gt: &OccSequence) -> Result<()> {
        let hs = horizon_frames();
        let truth = Trajectory::from_poses(&gt.pose(0), &gt.poses()[1..]);
        self.l2[0].push(l2_error(pred, &truth, &hs, L2Mode::AtHorizon)?);
        self.l2[1].push(l2_error(pred, &truth, &hs, L2Mode::Averaged)?);
        self.collisions.push(collision_frames(pred, gt, &self.params)?);
        Ok(())
    }

    pub fn samples(&self) -> usize {
        self.collisions.len()
    }

    pub fn report(&self, name: &str, mode: L2Mode) -> Result<PlanReport> {
        let rows = &self.l2[(mode == L2Mode::Averaged) as usize];
        let n = rows.len().max(1) as f64;
        let l2: Vec<f64> = (0..HORIZONS.len())
            .map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / n)
            .collect();
        let collision = super::plan::collision_rate(&self.collisions, &horizon_frames())?;
        let k = HORIZONS.len() as f64;
        Ok(PlanReport {
            name: name.to_string(),
            mode,
            labels: HORIZONS.iter().map(|h| h.0.to_string()).collect(),
            avg_l2: l2.iter().sum::<f64>() / k,
            avg_collision: collision.iter().sum::<f64>() / k,
            l2,
            collision,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanReport {
    pub name: String,
    pub mode: L2Mode,
    pub labels: Vec<String>,
    /// Meters.
    pub l2: Vec<f64>,
    /// Percent.
    pub collision: Vec<f64>,
    pub avg_l2: f64,
    pub avg_collision: f64,
}

impl PlanReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "planning: {} (L2 {})", self.name, self.mode.tag());
        let _ = write!(s, "{:<14}", "metric");
        for l in &self.labels {
            let _ = write!(s, "{l:>10}");
        }
        let _ = writeln!(s, "{:>10}", "Avg");
        let _ = write!(s, "{:<14}", "L2(m)");
        for v in &self.l2 {
            let _ = write!(s, "{v:>10.3}");
        }
        let _ = writeln!(s, "{:>10.3}", self.avg_l2);
        let _ = write!(s, "{:<14}", "Collision(%)");
        for v in &self.collision {
            let _ = write!(s, "{v:>10.2}");
        }
        let _ = writeln!(s, "{:>10.2}", self.avg_collision);
        s
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let tag = self.mode.tag();
        for (i, l) in self.labels.iter().enumerate() {
            let _ = writeln!(s, "{}.l2_{tag}.{l}={:.6}", self.name, self.l2[i]);
        }
        let _ = writeln!(s, "{}.l2_{tag}.avg={:.6}", self.name, self.avg_l2);
        for (i, l) in self.labels.iter().enumerate() {
            let _ = writeln!(s, "{}.collision.{l}={:.6}", self.name, self.collision[i]);
        }
        let _ = writeln!(s, "{}.collision.avg={:.6}", self.name, self.avg_collision);
        s
    }
}
