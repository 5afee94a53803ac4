//! Monte-Carlo summaries: moments, covariance, KS distance and Q-Q pairs.

use nalgebra::{DMatrix, DVector};

use crate::inference::{normal_cdf, normal_quantile};

/// Running mean and covariance of vectors (Welford updates, fixed order).
#[derive(Debug, Clone, PartialEq)]
pub struct MomentAccumulator {
    n: usize,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
}

impl MomentAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: DVector::zeros(dim),
            m2: DMatrix::zeros(dim, dim),
        }
    }

    pub fn push(&mut self, x: &DVector<f64>) {
        self.n += 1;
        let delta = x - &self.mean;
        self.mean += &delta / self.n as f64;
        let delta2 = x - &self.mean;
        self.m2 += &delta * delta2.transpose();
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Unbiased sample covariance.
    pub fn covariance(&self) -> DMatrix<f64> {
        let c = &self.m2 / (self.n.max(2) - 1) as f64;
        (&c + c.transpose()) * 0.5
    }

    /// Standard errors of the component means.
    pub fn mean_standard_errors(&self) -> DVector<f64> {
        let c = self.covariance();
        DVector::from_fn(self.mean.len(), |i, _| (c[(i, i)] / self.n as f64).sqrt())
    }
}

/// `sup_x |F_n(x) - Φ(x)|`.
pub fn ks_statistic_normal(samples: &[f64]) -> f64 {
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let mut worst = 0.0f64;
    for (i, v) in x.iter().enumerate() {
        let f = normal_cdf(*v);
        worst = worst.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    worst
}

/// `(Φ⁻¹((i - ½)/n), x_(i))` for the sorted samples.
pub fn qq_pairs(samples: &[f64]) -> Vec<(f64, f64)> {
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    x.into_iter()
        .enumerate()
        .map(|(i, v)| {
            let q = normal_quantile((i as f64 + 0.5) / n).expect("level inside (0, 1)");
            (q, v)
        })
        .collect()
}

/// Sample skewness `m₃ / m₂^{3/2}`.
pub fn skewness(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let m2 = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m3 = samples.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
    m3 / m2.powf(1.5)
}

/// Fraction of samples strictly above `threshold`.
pub fn fraction_above(samples: &[f64], threshold: f64) -> f64 {
    samples.iter().filter(|&&x| x > threshold).count() as f64 / samples.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::direct::standard_normal_matrix;
    use crate::simulator::rng::replication_rng;

    #[test]
    fn accumulator_matches_two_pass() {
        let mut rng = replication_rng(1, 0, 0);
        let data = standard_normal_matrix(&mut rng, 200, 3);
        let mut acc = MomentAccumulator::new(3);
        for r in 0..200 {
            acc.push(&data.row(r).transpose());
        }
        let mean = data.row_mean().transpose();
        let centered = DMatrix::from_fn(200, 3, |r, c| data[(r, c)] - mean[c]);
        let cov = centered.transpose() * &centered / 199.0;
        assert!((acc.mean() - &mean).amax() < 1e-14);
        assert!((acc.covariance() - cov).amax() < 1e-13);
        assert_eq!(acc.count(), 200);
    }

    #[test]
    fn ks_examples() {
        assert!((ks_statistic_normal(&[0.0]) - 0.5).abs() < 1e-15);
        let mut rng = replication_rng(2, 0, 0);
        let z = standard_normal_matrix(&mut rng, 20_000, 1);
        assert!(ks_statistic_normal(z.as_slice()) < 0.015);
        let shifted: Vec<f64> = z.iter().map(|x| x + 0.5).collect();
        assert!(ks_statistic_normal(&shifted) > 0.15);
    }

    #[test]
    fn qq_and_moments() {
        let qq = qq_pairs(&[3.0, 1.0, 2.0]);
        assert_eq!(qq[0].1, 1.0);
        assert!(qq[1].0.abs() < 1e-15);
        assert!(skewness(&[1.0, 2.0, 3.0]).abs() < 1e-15);
        assert!(skewness(&[0.0, 0.0, 0.0, 10.0]) > 0.0);
        assert_eq!(fraction_above(&[1.0, 2.0, 3.0, 4.0], 2.0), 0.5);
    }
}
