//! Direct simulation of prewhitened pattern estimates from a matrix-variate
//! normal distribution.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::crossnobis::PartitionedPatterns;
use crate::error::{LdcError, Result};
use crate::linalg::{cholesky_lower_jittered, ensure_square, sym_eigen};
use crate::model::{ContrastMatrix, RdMatrix};

/// Relative tolerance for negative eigenvalues of `-½JDJ`.
pub const REALIZABLE_TOL: f64 = 1e-10;

/// Matrix of i.i.d. standard normal draws.
pub fn standard_normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Lower factor `A` with `AAᵀ = Σ`; the zero matrix maps to the zero factor.
fn covariance_factor(sigma: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    ensure_square(sigma, "covariance factor input")?;
    if sigma.iter().all(|v| *v == 0.0) {
        return Ok(sigma.clone());
    }
    cholesky_lower_jittered(sigma, what)
}

/// Sampler for `MN(mean, Σ_K, Σ_R)`: `mean + A Z Bᵀ` with `AAᵀ = Σ_K`,
/// `BBᵀ = Σ_R` and `Σ_R = I` handled without a factor.
#[derive(Debug, Clone)]
pub struct MatrixNormal {
    mean: DMatrix<f64>,
    row_factor: DMatrix<f64>,
    col_factor: Option<DMatrix<f64>>,
}

impl MatrixNormal {
    pub fn new(mean: DMatrix<f64>, sigma_k: &DMatrix<f64>, sigma_r: Option<&DMatrix<f64>>) -> Result<Self> {
        let (k, p) = mean.shape();
        if sigma_k.nrows() != k {
            return Err(LdcError::DimensionMismatch {
                what: "row covariance vs mean rows",
                expected: k,
                got: sigma_k.nrows(),
            });
        }
        if let Some(s) = sigma_r {
            if s.nrows() != p {
                return Err(LdcError::DimensionMismatch {
                    what: "column covariance vs mean columns",
                    expected: p,
                    got: s.nrows(),
                });
            }
        }
        Ok(Self {
            row_factor: covariance_factor(sigma_k, "condition covariance")?,
            col_factor: sigma_r
                .map(|s| covariance_factor(s, "voxel covariance"))
                .transpose()?,
            mean,
        })
    }

    pub fn mean(&self) -> &DMatrix<f64> {
        &self.mean
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<f64> {
        let (k, p) = self.mean.shape();
        let z = standard_normal_matrix(rng, k, p);
        let mut noise = &self.row_factor * z;
        if let Some(b) = &self.col_factor {
            noise = noise * b.transpose();
        }
        noise + &self.mean
    }
}

/// One draw from `MN(mean, Σ_K, Σ_R)`.
pub fn sample_matrix_normal<R: Rng + ?Sized>(
    mean: &DMatrix<f64>,
    sigma_k: &DMatrix<f64>,
    sigma_r: Option<&DMatrix<f64>>,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    Ok(MatrixNormal::new(mean.clone(), sigma_k, sigma_r)?.sample(rng))
}

/// `K x P` patterns whose squared distances divided by `P` equal the target
/// RDM: factor the centred second moment `-½JDJ = QΛQᵀ`, then rotate
/// `√P·Q√Λ` into `P` random orthonormal directions.
pub fn true_patterns_from_rdm<R: Rng + ?Sized>(target: &RdMatrix, voxels: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    let k = target.conditions();
    if voxels < k {
        return Err(LdcError::InvalidDimension(format!(
            "need P >= K to realize an RDM (P={voxels}, K={k})"
        )));
    }
    let j = DMatrix::identity(k, k) - DMatrix::from_element(k, k, 1.0 / k as f64);
    let g = &j * target.matrix() * &j * -0.5;
    let eig = sym_eigen(&g);
    let largest = eig.eigenvalues.amax().max(1.0);
    let smallest = eig.eigenvalues.min();
    if smallest < -REALIZABLE_TOL * largest {
        return Err(LdcError::NotRealizable(smallest));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let x = &eig.eigenvectors * DMatrix::from_diagonal(&roots);
    let gaussian = standard_normal_matrix(rng, voxels, k);
    let rotation = gaussian.qr().q();
    Ok(x * rotation.transpose() * (voxels as f64).sqrt())
}

/// Ground truth and noise model for direct simulation of partitioned
/// pattern estimates.
#[derive(Debug, Clone)]
pub struct DirectSimSpec {
    pub partitions: usize,
    pub noise: MatrixNormal,
}

impl DirectSimSpec {
    pub fn new(
        true_u: DMatrix<f64>,
        sigma_k: &DMatrix<f64>,
        sigma_r: Option<&DMatrix<f64>>,
        partitions: usize,
    ) -> Result<Self> {
        if partitions < 2 {
            return Err(LdcError::InvalidDimension(format!(
                "need M >= 2 partitions, got {partitions}"
            )));
        }
        Ok(Self {
            partitions,
            noise: MatrixNormal::new(true_u, sigma_k, sigma_r)?,
        })
    }

    pub fn true_patterns(&self) -> &DMatrix<f64> {
        self.noise.mean()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> PartitionedPatterns {
        let parts = (0..self.partitions).map(|_| self.noise.sample(rng)).collect();
        PartitionedPatterns::new(parts).expect("shapes fixed at construction")
    }
}

/// Distances `(1.5, 1, 1, 1, 0.5, 0.5, 0.5, c, c, c)·σ²_a` for five conditions:
/// condition 1 vs 2 at 1.5, 1 vs 3–5 at 1, 2 vs 3–5 at 0.5, and conditions
/// 3–5 mutually at `c = 2/3`, the value for orthogonal offsets from their
/// common projection onto the 1–2 axis.
pub fn five_condition_pattern(signal: f64) -> Vec<f64> {
    let c = 2.0 / 3.0;
    [1.5, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5, c, c, c]
        .iter()
        .map(|d| d * signal)
        .collect()
}

/// `Δ` is PSD exactly when the RDM is realizable; used for validation.
pub fn is_realizable(target: &RdMatrix) -> Result<bool> {
    let c = ContrastMatrix::new(target.conditions())?;
    let delta = crate::model::delta_from_rdm(target, &c)?;
    let eig = sym_eigen(&delta);
    Ok(eig.eigenvalues.min() >= -REALIZABLE_TOL * eig.eigenvalues.amax().max(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{pattern_distances, DistanceVector};
    use crate::simulator::rng::replication_rng;

    #[test]
    fn zero_covariance_returns_mean() {
        let mean = DMatrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64);
        let mut rng = replication_rng(1, 0, 0);
        let s = sample_matrix_normal(&mean, &DMatrix::zeros(3, 3), Some(&DMatrix::zeros(4, 4)), &mut rng).unwrap();
        assert_eq!(s, mean);
    }

    #[test]
    fn mc_mean_and_row_covariance() {
        let (k, p, n) = (3, 6, 10_000);
        let mean = DMatrix::from_fn(k, p, |i, j| i as f64 - 0.3 * j as f64);
        let sk = DMatrix::from_row_slice(3, 3, &[1.0, 0.4, 0.0, 0.4, 0.8, -0.2, 0.0, -0.2, 0.5]);
        let mn = MatrixNormal::new(mean.clone(), &sk, None).unwrap();
        let mut rng = replication_rng(2, 0, 0);
        let mut sum = DMatrix::zeros(k, p);
        let mut sumsq = DMatrix::zeros(k, p);
        let mut cov = vec![DMatrix::<f64>::zeros(k, k); n];
        for c in cov.iter_mut() {
            let x = mn.sample(&mut rng);
            sumsq += x.component_mul(&x);
            let centered = &x - &mean;
            *c = &centered * centered.transpose() / p as f64;
            sum += x;
        }
        let avg = &sum / n as f64;
        for i in 0..k {
            for j in 0..p {
                let var = sumsq[(i, j)] / n as f64 - avg[(i, j)].powi(2);
                let se = (var / n as f64).sqrt();
                assert!((avg[(i, j)] - mean[(i, j)]).abs() < 3.0 * se + 1e-12);
            }
        }
        for a in 0..k {
            for b in 0..k {
                let vals: Vec<f64> = cov.iter().map(|c| c[(a, b)]).collect();
                let m = vals.iter().sum::<f64>() / n as f64;
                let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
                assert!((m - sk[(a, b)]).abs() < 3.0 * (v / n as f64).sqrt(), "({a},{b})");
            }
        }
    }

    #[test]
    fn rdm_realized_exactly() {
        let mut rng = replication_rng(3, 0, 0);
        let target = RdMatrix::from_distances(&DistanceVector::from_slice(&[2.6, 1.4, 2.0]).unwrap());
        let u = true_patterns_from_rdm(&target, 50, &mut rng).unwrap();
        let got = pattern_distances(&u).unwrap();
        for (a, b) in got.as_slice().iter().zip([2.6, 1.4, 2.0]) {
            assert!((a - b).abs() < 1e-10);
        }

        let five = five_condition_pattern(0.2);
        let target = RdMatrix::from_distances(&DistanceVector::from_slice(&five).unwrap());
        assert!(is_realizable(&target).unwrap());
        let u = true_patterns_from_rdm(&target, 30, &mut rng).unwrap();
        let got = pattern_distances(&u).unwrap();
        for (a, b) in got.as_slice().iter().zip(&five) {
            assert!((a - b).abs() < 1e-10);
        }

        let zero = RdMatrix::from_distances(&DistanceVector::zeros(4).unwrap());
        let u = true_patterns_from_rdm(&zero, 8, &mut rng).unwrap();
        for i in 1..4 {
            assert!((u.row(i) - u.row(0)).amax() < 1e-12);
        }
    }

    #[test]
    fn triangle_violation_not_realizable() {
        let mut rng = replication_rng(4, 0, 0);
        // √9 > √1 + √1 violates the metric on square roots
        let target = RdMatrix::from_distances(&DistanceVector::from_slice(&[1.0, 9.0, 1.0]).unwrap());
        assert!(!is_realizable(&target).unwrap());
        assert!(matches!(
            true_patterns_from_rdm(&target, 10, &mut rng),
            Err(LdcError::NotRealizable(_))
        ));
    }

    #[test]
    fn sample_shapes() {
        let spec = DirectSimSpec::new(DMatrix::zeros(3, 5), &DMatrix::identity(3, 3), None, 4).unwrap();
        let mut rng = replication_rng(5, 0, 0);
        let parts = spec.sample(&mut rng);
        assert_eq!(parts.dims().partitions(), 4);
        assert_eq!(parts.dims().voxels(), 5);
        assert!(DirectSimSpec::new(DMatrix::zeros(3, 5), &DMatrix::identity(3, 3), None, 1).is_err());
    }
}
