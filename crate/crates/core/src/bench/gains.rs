use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthworld::{count_terciles, ClassSet};

use super::metrics::IoUReport;

/// Mean IoU change per count tercile between two runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSetGains {
    /// Set of each class, indexed by class id minus one.
    pub sets: Vec<ClassSet>,
    pub many: f64,
    pub medium: f64,
    pub few: f64,
    /// Partition rule, kept with the numbers.
    pub rule: String,
}

impl ClassSetGains {
    pub fn gain(&self, set: ClassSet) -> f64 {
        match set {
            ClassSet::Many => self.many,
            ClassSet::Medium => self.medium,
            ClassSet::Few => self.few,
        }
    }
}

/// Gains of `run_b` over `run_a` on foreground classes. A class without
/// an IoU in one run counts as 0 there. Empty sets report 0.
pub fn class_set_gains(run_a: &IoUReport, run_b: &IoUReport, counts: &[usize]) -> Result<ClassSetGains> {
    let k = counts.len() + 1;
    if run_a.confusion.len() != k || run_b.confusion.len() != k {
        return Err(Error::MismatchedClasses(format!(
            "reports cover {} and {} ids, counts imply {k}",
            run_a.confusion.len(),
            run_b.confusion.len()
        )));
    }
    let sets = count_terciles(counts);
    let mut sums = [0.0; 3];
    let mut ns = [0usize; 3];
    for (i, set) in sets.iter().enumerate() {
        let id = i + 1;
        let gain = run_b.class_iou(id).unwrap_or(0.0) - run_a.class_iou(id).unwrap_or(0.0);
        let slot = *set as usize;
        sums[slot] += gain;
        ns[slot] += 1;
    }
    let mean = |s: usize| if ns[s] > 0 { sums[s] / ns[s] as f64 } else { 0.0 };
    Ok(ClassSetGains {
        sets,
        many: mean(ClassSet::Many as usize),
        medium: mean(ClassSet::Medium as usize),
        few: mean(ClassSet::Few as usize),
        rule: "count terciles: rank = classes with a strictly larger count, set = floor(3 rank / |C|)".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn report(ious: &[f64]) -> IoUReport {
        let k = ious.len() + 1;
        let per_class_iou: BTreeMap<usize, f64> = ious.iter().enumerate().map(|(i, &v)| (i + 1, v)).collect();
        IoUReport {
            per_class_iou,
            miou: 0.0,
            confusion: vec![vec![0; k]; k],
        }
    }

    #[test]
    fn tercile_gains() {
        let a = report(&[0.5, 0.5, 0.5]);
        let b = report(&[3.5, 0.5, -2.5]);
        let g = class_set_gains(&a, &b, &[30, 20, 10]).unwrap();
        assert_eq!((g.many, g.medium, g.few), (3.0, 0.0, -3.0));
        let g = class_set_gains(&a, &b, &[10, 20, 30]).unwrap();
        assert_eq!((g.many, g.few), (-3.0, 3.0));
        let same = class_set_gains(&a, &a, &[30, 20, 10]).unwrap();
        assert_eq!((same.many, same.medium, same.few), (0.0, 0.0, 0.0));
        assert!(class_set_gains(&a, &report(&[0.1]), &[30, 20, 10]).is_err());
    }
}
