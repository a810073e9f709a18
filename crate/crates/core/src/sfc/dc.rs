use serde::{Deserialize, Serialize};

use crate::synthworld::ClassId;

/// Expected number of extra appearances of each class contributed by bank
/// re-sampling over one epoch.
pub fn estimate_n(n_ibr: usize, c_ibr: f64, n_iter: usize, class_count: usize) -> f64 {
    n_ibr as f64 * c_ibr * n_iter as f64 / class_count as f64
}

/// Per-class consistency weights derived from pairwise count gaps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DCVector {
    pub counts: Vec<usize>,
    pub n_est: f64,
    pub demands: Vec<f64>,
    pub scaling: f64,
    pub dc: Vec<f64>,
}

impl DCVector {
    /// Unit weight for every class (consistency without distribution weighting).
    pub fn plain(class_count: usize) -> Self {
        Self {
            counts: Vec::new(),
            n_est: 0.0,
            demands: vec![1.0; class_count],
            scaling: 1.0,
            dc: vec![1.0; class_count],
        }
    }

    pub fn get(&self, class: ClassId) -> f64 {
        self.dc[class - 1]
    }

    pub fn len(&self) -> usize {
        self.dc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dc.is_empty()
    }
}

/// Demand of class `c` is `sum_i |n_c - n_i| / (n_c + N)`; the weights are
/// the demands rescaled to sum to the class count. Equal counts give all
/// zeros.
pub fn dc_coefficients(counts: &[usize], n_est: f64) -> DCVector {
    let demands: Vec<f64> = counts
        .iter()
        .map(|&nc| {
            let gap: f64 = counts.iter().map(|&ni| (nc as f64 - ni as f64).abs()).sum();
            gap / (nc as f64 + n_est)
        })
        .collect();
    let total: f64 = demands.iter().sum();
    let scaling = if total > 0.0 {
        counts.len() as f64 / total
    } else {
        0.0
    };
    let dc = demands.iter().map(|d| scaling * d).collect();
    DCVector {
        counts: counts.to_vec(),
        n_est,
        demands,
        scaling,
        dc,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn estimate_examples() {
        assert_eq!(estimate_n(0, 1.5, 10, 2), 0.0);
        assert_eq!(estimate_n(4, 1.5, 10, 2), 30.0);
        assert_eq!(estimate_n(4, 1.5, 20, 2), 2.0 * estimate_n(4, 1.5, 10, 2));
    }

    #[test]
    fn two_class_cases() {
        let v = dc_coefficients(&[90, 10], 0.0);
        assert!((v.demands[0] - 80.0 / 90.0).abs() < 1e-15);
        assert_eq!(v.demands[1], 8.0);
        assert!((v.scaling - 0.225).abs() < 1e-15);
        assert!((v.dc[0] - 0.2).abs() < 1e-15);
        assert!((v.dc[1] - 1.8).abs() < 1e-15);

        let v = dc_coefficients(&[90, 10], 10.0);
        assert!((v.dc[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((v.dc[1] - 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_counts_are_zero() {
        let v = dc_coefficients(&[50, 50], 7.0);
        assert_eq!(v.dc, vec![0.0, 0.0]);
        assert_eq!(v.scaling, 0.0);
    }
}
