//! Occupancy IoU and semantic mIoU. Functions return fractions in `[0, 1]`;
//! reports convert to percentages.

use crate::error::{Error, Result};
use crate::occgrid::{OccGrid, FREE};

fn check_same(pred: &OccGrid, gt: &OccGrid) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape("iou", &pred.dims(), &gt.dims()));
    }
    Ok(())
}

/// IoU of the occupied (non-free) voxel sets; 1.0 when both are empty.
pub fn iou_binary(pred: &OccGrid, gt: &OccGrid) -> Result<f64> {
    check_same(pred, gt)?;
    let mut acc = IouAccumulator::new(gt.num_classes().max(pred.num_classes()));
    acc.add(pred, gt)?;
    Ok(acc.iou())
}

/// Classes that enter the semantic mean.
pub fn non_free_classes(num_classes: u8) -> Vec<u8> {
    (0..num_classes).filter(|&c| c != FREE).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouResult {
    pub miou: f64,
    /// IoU per class id; `None` for classes outside the filter or absent
    /// from the ground truth.
    pub per_class: Vec<Option<f64>>,
}

/// Mean IoU over the classes in `classes` that occur in `gt`.
pub fn miou_semantic(pred: &OccGrid, gt: &OccGrid, classes: &[u8]) -> Result<MiouResult> {
    check_same(pred, gt)?;
    if pred.num_classes() != gt.num_classes() {
        return Err(Error::shape(
            "miou_semantic",
            &[pred.num_classes() as usize],
            &[gt.num_classes() as usize],
        ));
    }
    let mut acc = IouAccumulator::new(gt.num_classes());
    acc.add(pred, gt)?;
    Ok(acc.miou(classes))
}

/// Intersection/union counts accumulated over many grid pairs, so that
/// dataset-level scores are ratios of totals.
#[derive(Clone, Debug, PartialEq)]
pub struct IouAccumulator {
    inter: Vec<u64>,
    union: Vec<u64>,
    gt_count: Vec<u64>,
    occ_inter: u64,
    occ_union: u64,
}

impl IouAccumulator {
    pub fn new(num_classes: u8) -> Self {
        let n = num_classes as usize;
        IouAccumulator {
            inter: vec![0; n],
            union: vec![0; n],
            gt_count: vec![0; n],
            occ_inter: 0,
            occ_union: 0,
        }
    }

    pub fn add(&mut self, pred: &OccGrid, gt: &OccGrid) -> Result<()> {
        check_same(pred, gt)?;
        let n = self.inter.len();
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            let (p, g) = (p as usize, g as usize);
            if p >= n || g >= n {
                return Err(Error::Validation(format!("label {} outside {n} classes", p.max(g))));
            }
            self.gt_count[g] += 1;
            if p == g {
                self.inter[g] += 1;
                self.union[g] += 1;
            } else {
                self.union[g] += 1;
                self.union[p] += 1;
            }
            let (po, go) = (p != FREE as usize, g != FREE as usize);
            self.occ_inter += u64::from(po && go);
            self.occ_union += u64::from(po || go);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &IouAccumulator) {
        for (a, b) in self.inter.iter_mut().zip(&other.inter) {
            *a += b;
        }
        for (a, b) in self.union.iter_mut().zip(&other.union) {
            *a += b;
        }
        for (a, b) in self.gt_count.iter_mut().zip(&other.gt_count) {
            *a += b;
        }
        self.occ_inter += other.occ_inter;
        self.occ_union += other.occ_union;
    }

    pub fn iou(&self) -> f64 {
        if self.occ_union == 0 {
            1.0
        } else {
            self.occ_inter as f64 / self.occ_union as f64
        }
    }

    /// Mean over filtered classes present in the ground truth; 1.0 when none
    /// is present.
    pub fn miou(&self, classes: &[u8]) -> MiouResult {
        let mut per_class = vec![None; self.inter.len()];
        let mut sum = 0.0;
        let mut count = 0usize;
        for &c in classes {
            let c = c as usize;
            if c < self.inter.len() && self.gt_count[c] > 0 {
                let v = self.inter[c] as f64 / self.union[c] as f64;
                per_class[c] = Some(v);
                sum += v;
                count += 1;
            }
        }
        MiouResult {
            miou: if count == 0 { 1.0 } else { sum / count as f64 },
            per_class,
        }
    }
}
