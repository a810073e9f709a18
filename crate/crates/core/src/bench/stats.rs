use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Pearson chi-square test of observed counts against a uniform
/// distribution. Returns the statistic and its upper-tail p-value.
pub fn chi_square_uniform(observed: &[u64]) -> (f64, f64) {
    let k = observed.len();
    let total: u64 = observed.iter().sum();
    if k < 2 || total == 0 {
        return (0.0, 1.0);
    }
    let expected = total as f64 / k as f64;
    let stat: f64 = observed
        .iter()
        .map(|&o| (o as f64 - expected).powi(2) / expected)
        .sum();
    let dist = ChiSquared::new((k - 1) as f64).expect("positive degrees of freedom");
    (stat, 1.0 - dist.cdf(stat))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_uniform_has_p_one() {
        let (s, p) = chi_square_uniform(&[10, 10, 10]);
        assert_eq!(s, 0.0);
        assert!((p - 1.0).abs() < 1e-12);
        let (_, p) = chi_square_uniform(&[100, 0, 0]);
        assert!(p < 1e-10);
    }
}
