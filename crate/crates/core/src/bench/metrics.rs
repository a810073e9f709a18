use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ensure_same_shape, LabelMap};

/// Intersection-over-union over background (id 0) and every foreground id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IoUReport {
    /// IoU of every id whose union is nonempty.
    pub per_class_iou: BTreeMap<usize, f64>,
    pub miou: f64,
    /// `confusion[gt][pred]` pixel counts.
    pub confusion: Vec<Vec<u64>>,
}

impl IoUReport {
    pub fn class_iou(&self, id: usize) -> Option<f64> {
        self.per_class_iou.get(&id).copied()
    }
}

/// Pools pixels of all pairs into one confusion matrix over ids
/// `0..=class_count`; ids with an empty union do not enter the mean.
pub fn miou(pred: &[LabelMap], gt: &[LabelMap], class_count: usize) -> Result<IoUReport> {
    if pred.len() != gt.len() {
        return Err(Error::DimMismatch {
            expected: gt.len(),
            actual: pred.len(),
        });
    }
    let k = class_count + 1;
    let mut confusion = vec![vec![0u64; k]; k];
    for (p, g) in pred.iter().zip(gt) {
        ensure_same_shape(p.shape(), g.shape())?;
        for (&pv, &gv) in p.data().iter().zip(g.data()) {
            let (pv, gv) = (pv as usize, gv as usize);
            if pv >= k || gv >= k {
                return Err(Error::InvalidShape(format!("label {} outside 0..{k}", pv.max(gv))));
            }
            confusion[gv][pv] += 1;
        }
    }
    let mut per_class_iou = BTreeMap::new();
    for id in 0..k {
        let tp = confusion[id][id];
        let gt_total: u64 = confusion[id].iter().sum();
        let pred_total: u64 = confusion.iter().map(|row| row[id]).sum();
        let union = gt_total + pred_total - tp;
        if union > 0 {
            per_class_iou.insert(id, tp as f64 / union as f64);
        }
    }
    let miou = if per_class_iou.is_empty() {
        0.0
    } else {
        per_class_iou.values().sum::<f64>() / per_class_iou.len() as f64
    };
    Ok(IoUReport {
        per_class_iou,
        miou,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(h: usize, w: usize, d: Vec<u16>) -> LabelMap {
        LabelMap::new(h, w, d).unwrap()
    }

    #[test]
    fn identical_and_disjoint() {
        let a = lm(2, 2, vec![0, 1, 1, 2]);
        assert_eq!(miou(std::slice::from_ref(&a), std::slice::from_ref(&a), 2).unwrap().miou, 1.0);
        let b = lm(2, 2, vec![1, 2, 2, 0]);
        let r = miou(&[b], &[a], 2).unwrap();
        assert!(r.per_class_iou.values().all(|&v| v == 0.0));
    }

    #[test]
    fn half_overlap() {
        let gt = lm(1, 4, vec![1, 1, 0, 0]);
        let pred = lm(1, 4, vec![1, 1, 1, 1]);
        let r = miou(&[pred], &[gt], 1).unwrap();
        assert_eq!(r.class_iou(1), Some(0.5));
        assert_eq!(r.class_iou(0), Some(0.0));
    }

    #[test]
    fn confusion_marginals() {
        let gt = lm(1, 3, vec![0, 1, 2]);
        let pred = lm(1, 3, vec![0, 2, 2]);
        let r = miou(&[pred], &[gt], 3).unwrap();
        let total: u64 = r.confusion.iter().flatten().sum();
        assert_eq!(total, 3);
        assert!(r.class_iou(3).is_none());
        assert!(miou(&[lm(1, 2, vec![0, 0])], &[lm(2, 1, vec![0, 0])], 1).is_err());
    }
}
