//! Spatial noise covariance estimation, shrinkage, prewhitening, and the
//! residual spatial covariance left over after imperfect prewhitening.

use nalgebra::DMatrix;

use crate::error::{LdcError, Result};
use crate::glm::GlmFit;
use crate::linalg::{ensure_square, sym_eigen, trace_of_square};

/// Smallest admissible eigenvalue ratio for [`inv_sqrt`].
pub const NEAR_SINGULAR_RATIO: f64 = 1e-10;

/// Shrinkage value that works well for typical fMRI data.
pub const DEFAULT_SHRINKAGE: f64 = 0.4;

/// `Σ̂_P = Σ_m R_mᵀR_m / (M (T_m - K - Q))` for equally sized runs.
pub fn estimate_sigma_p(residuals: &[DMatrix<f64>], k: usize, q: usize) -> Result<DMatrix<f64>> {
    let first = residuals
        .first()
        .ok_or_else(|| LdcError::InvalidArgument("no residual matrices".into()))?;
    let p = first.ncols();
    let mut total_dof = 0usize;
    let mut acc = DMatrix::zeros(p, p);
    for r in residuals {
        if r.ncols() != p {
            return Err(LdcError::DimensionMismatch {
                what: "residual voxel count",
                expected: p,
                got: r.ncols(),
            });
        }
        let dof = r.nrows() as isize - (k + q) as isize;
        if dof <= 0 {
            return Err(LdcError::InvalidDimension(format!(
                "non-positive residual dof T - K - Q = {dof}"
            )));
        }
        total_dof += dof as usize;
        acc += r.transpose() * r;
    }
    Ok(acc / total_dof as f64)
}

/// Same estimate, taking each run's degrees of freedom from its fit.
pub fn estimate_sigma_p_from_fits<'a, I>(fits: I) -> Result<DMatrix<f64>>
where
    I: IntoIterator<Item = &'a GlmFit>,
{
    let mut acc: Option<DMatrix<f64>> = None;
    let mut total_dof = 0usize;
    for fit in fits {
        if fit.dof == 0 {
            return Err(LdcError::InvalidDimension("run with zero residual dof".into()));
        }
        let rtr = fit.residuals.transpose() * &fit.residuals;
        acc = Some(match acc {
            None => rtr,
            Some(a) if a.shape() == rtr.shape() => a + rtr,
            Some(a) => {
                return Err(LdcError::DimensionMismatch {
                    what: "residual voxel count",
                    expected: a.nrows(),
                    got: rtr.nrows(),
                })
            }
        });
        total_dof += fit.dof;
    }
    acc.map(|a| a / total_dof as f64)
        .ok_or_else(|| LdcError::InvalidArgument("no fits".into()))
}

/// `h·diag(Σ̂) + (1-h)·Σ̂`.
pub fn shrink(sigma_hat: &DMatrix<f64>, h: f64) -> Result<DMatrix<f64>> {
    ensure_square(sigma_hat, "covariance to shrink")?;
    if !(0.0..=1.0).contains(&h) {
        return Err(LdcError::InvalidArgument(format!("shrinkage h = {h} outside [0, 1]")));
    }
    let mut out = sigma_hat * (1.0 - h);
    for i in 0..out.nrows() {
        out[(i, i)] = sigma_hat[(i, i)];
    }
    Ok(out)
}

/// Symmetric inverse square root via eigendecomposition.
pub fn inv_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    ensure_square(a, "matrix for inverse square root")?;
    let eig = sym_eigen(a);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(max > 0.0) || !(min > NEAR_SINGULAR_RATIO * max) {
        return Err(LdcError::NearSingular {
            ratio: if max > 0.0 { min / max } else { f64::NAN },
        });
    }
    let q = &eig.eigenvectors;
    let scaled = DMatrix::from_fn(q.nrows(), q.ncols(), |i, j| {
        q[(i, j)] / eig.eigenvalues[j].sqrt()
    });
    Ok(crate::linalg::symmetrize(&(scaled * q.transpose())))
}

/// `Û = B̂ · W`.
pub fn prewhiten_patterns(b_hat: &DMatrix<f64>, whitener: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if b_hat.ncols() != whitener.nrows() {
        return Err(LdcError::DimensionMismatch {
            what: "pattern voxels vs whitener size",
            expected: whitener.nrows(),
            got: b_hat.ncols(),
        });
    }
    Ok(b_hat * whitener)
}

/// Sample spatial covariance, its shrunk version and the symmetric whitener.
#[derive(Debug, Clone)]
pub struct SpatialCov {
    pub sigma_hat: DMatrix<f64>,
    pub sigma_reg: DMatrix<f64>,
    pub h: f64,
    pub whitener: DMatrix<f64>,
}

impl SpatialCov {
    /// Rejects voxels with zero residual variance.
    pub fn new(sigma_hat: DMatrix<f64>, h: f64) -> Result<Self> {
        ensure_square(&sigma_hat, "spatial covariance")?;
        if let Some(i) = (0..sigma_hat.nrows()).find(|&i| !(sigma_hat[(i, i)] > 0.0)) {
            return Err(LdcError::InvalidArgument(format!(
                "voxel {i} has non-positive residual variance {}",
                sigma_hat[(i, i)]
            )));
        }
        let sigma_reg = shrink(&sigma_hat, h)?;
        let whitener = inv_sqrt(&sigma_reg)?;
        Ok(Self {
            sigma_hat,
            sigma_reg,
            h,
            whitener,
        })
    }

    pub fn voxels(&self) -> usize {
        self.sigma_hat.nrows()
    }
}

/// Residual voxel covariance `Σ_R = W Σ_P W` after prewhitening with `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSpatialCov {
    pub sigma_r: DMatrix<f64>,
    pub trace_rr: f64,
}

impl ResidualSpatialCov {
    /// Perfectly whitened voxels.
    pub fn identity(p: usize) -> Self {
        Self {
            sigma_r: DMatrix::identity(p, p),
            trace_rr: p as f64,
        }
    }

    pub fn from_matrix(sigma_r: DMatrix<f64>) -> Self {
        let trace_rr = trace_of_square(&sigma_r);
        Self { sigma_r, trace_rr }
    }

    pub fn voxels(&self) -> usize {
        self.sigma_r.nrows()
    }

    /// Rescaled to `tr(Σ_R) = P`.
    ///
    /// The condition covariance estimated from whitened patterns already
    /// absorbs the mean voxel variance `tr(Σ_R)/P`; pairing it with an
    /// unnormalised `Σ_R` would count that factor twice.
    pub fn normalized(&self) -> Self {
        let p = self.voxels() as f64;
        let tr = self.sigma_r.trace();
        let f = p / tr;
        Self {
            sigma_r: &self.sigma_r * f,
            trace_rr: self.trace_rr * f * f,
        }
    }

    /// Voxel-dependence factor `tr(Σ_R Σ_R) / P` (1 for independent voxels).
    pub fn dependence_factor(&self) -> f64 {
        self.trace_rr / self.voxels() as f64
    }
}

/// `Σ_R = Σ̃_P^{-1/2} Σ_P Σ̃_P^{-1/2}`.
pub fn estimate_sigma_r(sigma_p: &DMatrix<f64>, sigma_reg: &DMatrix<f64>) -> Result<ResidualSpatialCov> {
    let p = ensure_square(sigma_p, "noise covariance")?;
    let q = ensure_square(sigma_reg, "regularised covariance")?;
    if p != q {
        return Err(LdcError::DimensionMismatch {
            what: "noise vs regularised covariance size",
            expected: q,
            got: p,
        });
    }
    let w = inv_sqrt(sigma_reg)?;
    Ok(residual_cov_with_whitener(sigma_p, &w))
}

/// `Σ_R = W Σ_P W` for an already computed whitener.
pub fn residual_cov_with_whitener(sigma_p: &DMatrix<f64>, whitener: &DMatrix<f64>) -> ResidualSpatialCov {
    let sigma_r = crate::linalg::symmetrize(&(whitener * sigma_p * whitener));
    ResidualSpatialCov::from_matrix(sigma_r)
}

/// Data-driven surrogate for `Σ_R`: the noise covariance estimated from the
/// odd-numbered runs (1st, 3rd, ...) whitened by the regularised estimate
/// from all runs.
pub fn estimate_sigma_r_split(fits: &[GlmFit], spatial: &SpatialCov) -> Result<ResidualSpatialCov> {
    if fits.len() < 2 {
        return Err(LdcError::InvalidDimension(format!(
            "split estimate needs >= 2 runs, got {}",
            fits.len()
        )));
    }
    let odd = estimate_sigma_p_from_fits(fits.iter().step_by(2))?;
    Ok(residual_cov_with_whitener(&odd, &spatial.whitener))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_spd(rng: &mut ChaCha8Rng, p: usize) -> DMatrix<f64> {
        let a = DMatrix::<f64>::from_fn(p, p, |_, _| StandardNormal.sample(rng));
        &a * a.transpose() / p as f64 + DMatrix::identity(p, p) * 0.1
    }

    #[test]
    fn sigma_p_trivial_cases() {
        let zeros = vec![DMatrix::zeros(6, 3), DMatrix::zeros(6, 3)];
        assert_eq!(estimate_sigma_p(&zeros, 2, 1).unwrap(), DMatrix::zeros(3, 3));

        // T - K - Q = 1 with orthonormal columns
        let r = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(estimate_sigma_p(&[r], 2, 1).unwrap(), DMatrix::identity(2, 2));

        assert!(matches!(
            estimate_sigma_p(&[DMatrix::zeros(3, 2)], 2, 1),
            Err(LdcError::InvalidDimension(_))
        ));
    }

    #[test]
    fn sigma_p_unbiased_for_white_noise() {
        // Oracle: E[Σ̂_P] = σ² I. Mean over 1000 draws within 3 SE entrywise.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (t, k, q, p, m, sigma2) = (12usize, 2usize, 1usize, 3usize, 2usize, 2.5f64);
        let dof = (t - k - q) as f64;
        let n = 1000;
        let mut sum = DMatrix::zeros(p, p);
        let mut sumsq = DMatrix::zeros(p, p);
        for _ in 0..n {
            // residuals with exactly `dof` effective rows: draw dof rows, pad with zeros
            let runs: Vec<DMatrix<f64>> = (0..m)
                .map(|_| {
                    DMatrix::from_fn(t, p, |i, _| {
                        if (i as f64) < dof {
                            sigma2.sqrt() * Distribution::<f64>::sample(&StandardNormal, &mut rng)
                        } else {
                            0.0
                        }
                    })
                })
                .collect();
            let s = estimate_sigma_p(&runs, k, q).unwrap();
            sumsq += s.component_mul(&s);
            sum += s;
        }
        let mean = &sum / n as f64;
        for i in 0..p {
            for j in 0..p {
                let var = sumsq[(i, j)] / n as f64 - mean[(i, j)].powi(2);
                let se = (var / n as f64).sqrt();
                let target = if i == j { sigma2 } else { 0.0 };
                assert!((mean[(i, j)] - target).abs() < 3.0 * se, "({i},{j}) {} vs {target}", mean[(i, j)]);
            }
        }
    }

    #[test]
    fn shrink_extremes_and_range() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.7, 0.7, 1.0]);
        assert_eq!(shrink(&a, 1.0).unwrap(), DMatrix::from_diagonal(&a.diagonal()));
        assert_eq!(shrink(&a, 0.0).unwrap(), a);
        let s = shrink(&a, DEFAULT_SHRINKAGE).unwrap();
        assert!((s[(0, 1)] - 0.42).abs() < 1e-15);
        assert!(shrink(&a, 1.2).is_err());
        assert!(shrink(&a, -0.1).is_err());
    }

    #[test]
    fn inv_sqrt_examples() {
        assert_eq!(inv_sqrt(&DMatrix::identity(3, 3)).unwrap(), DMatrix::identity(3, 3));
        let b = inv_sqrt(&DMatrix::from_diagonal(&nalgebra::dvector![4.0, 9.0])).unwrap();
        assert!((b[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((b[(1, 1)] - 1.0 / 3.0).abs() < 1e-15);
        assert!(b[(0, 1)].abs() < 1e-15);
        let singular = DMatrix::from_element(2, 2, 1.0);
        assert!(matches!(inv_sqrt(&singular), Err(LdcError::NearSingular { .. })));
    }

    #[test]
    fn inv_sqrt_whitens_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = random_spd(&mut rng, 20);
        let b = inv_sqrt(&a).unwrap();
        let ident = &b * &a * &b;
        assert!((ident - DMatrix::identity(20, 20)).amax() < 1e-8);
        assert!(crate::linalg::asymmetry(&b) < 1e-12);
    }

    #[test]
    fn prewhitening_turns_mahalanobis_into_euclidean() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = 6;
        let sigma = random_spd(&mut rng, p);
        let b_hat = DMatrix::from_fn(3, p, |_, _| StandardNormal.sample(&mut rng));
        let w = inv_sqrt(&sigma).unwrap();
        let u = prewhiten_patterns(&b_hat, &w).unwrap();
        let sinv = sigma.clone().try_inverse().unwrap();
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            let diff = (b_hat.row(a) - b_hat.row(b)).transpose();
            let maha = (diff.transpose() * &sinv * &diff)[(0, 0)];
            let eucl = (u.row(a) - u.row(b)).norm_squared();
            assert!((maha - eucl).abs() < 1e-10 * maha.abs());
        }
        assert_eq!(prewhiten_patterns(&b_hat, &DMatrix::identity(p, p)).unwrap(), b_hat);
        assert_eq!(prewhiten_patterns(&DMatrix::zeros(3, p), &w).unwrap(), DMatrix::zeros(3, p));
        assert!(prewhiten_patterns(&b_hat, &DMatrix::identity(p + 1, p + 1)).is_err());
    }

    #[test]
    fn sigma_r_exact_whitening_gives_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let sigma = random_spd(&mut rng, 8);
        let r = estimate_sigma_r(&sigma, &sigma).unwrap();
        assert!((&r.sigma_r - DMatrix::identity(8, 8)).amax() < 1e-9);
        assert!((r.trace_rr - 8.0).abs() < 1e-8);
    }

    #[test]
    fn sigma_r_residual_correlation_inflates_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let sigma = random_spd(&mut rng, 8);
        let diag = shrink(&sigma, 1.0).unwrap();
        let r = estimate_sigma_r(&sigma, &diag).unwrap().normalized();
        assert!(r.trace_rr > 8.0);
    }

    #[test]
    fn trace_rr_matches_eigenvalue_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let sp = random_spd(&mut rng, 5);
        let sreg = random_spd(&mut rng, 5);
        let r = estimate_sigma_r(&sp, &sreg).unwrap();
        let eig = nalgebra::SymmetricEigen::new(r.sigma_r.clone());
        let oracle: f64 = eig.eigenvalues.iter().map(|l| l * l).sum();
        assert!((r.trace_rr - oracle).abs() < 1e-9 * oracle);
    }

    #[test]
    fn degenerate_voxel_is_an_error() {
        let mut s = DMatrix::identity(3, 3);
        s[(1, 1)] = 0.0;
        assert!(matches!(SpatialCov::new(s, 0.4), Err(LdcError::InvalidArgument(_))));
    }

    proptest! {
        #[test]
        fn shrink_is_affine(vals in prop::collection::vec(-2.0f64..2.0, 9), h in 0.0f64..1.0) {
            let a = DMatrix::from_row_slice(3, 3, &vals);
            let a = &a + a.transpose();
            let lhs = shrink(&a, h).unwrap();
            let rhs = shrink(&a, 1.0).unwrap() * h + &a * (1.0 - h);
            prop_assert!((lhs - rhs).amax() <= 1e-14 * a.amax().max(1.0));
        }

        #[test]
        fn trace_rr_cauchy_schwarz(seed in 0u64..500, p in 2usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = estimate_sigma_r(&random_spd(&mut rng, p), &random_spd(&mut rng, p)).unwrap();
            let tr = r.sigma_r.trace();
            prop_assert!(r.trace_rr >= tr * tr / p as f64 * (1.0 - 1e-12));
        }
    }
}
