//! z-tests of linear contrasts of distance estimates, with the covariance
//! predicted under a null hypothesis.

use nalgebra::DVector;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::crossnobis::{CovPrediction, VarianceModel};
use crate::error::{LdcError, Result};
use crate::model::DistanceVector;

/// `Φ(x)` via the complementary error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Upper tail `1 - Φ(x)`, accurate for large `x`.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

/// `Φ⁻¹(p)` for `p ∈ (0, 1)`.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(LdcError::InvalidArgument(format!("quantile level {p} outside (0, 1)")));
    }
    Ok(Normal::standard().inverse_cdf(p))
}

/// Hypothesis under which `V` is predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NullSpec {
    /// All true distances zero, so `Δ = 0`.
    ZeroDistances,
    /// Pairs `j` and `l` share a common true distance; the other true
    /// distances are taken from the (non-negative part of the) estimates.
    Equalized(usize, usize),
}

/// Covariance of the distance estimates predicted under `null`.
pub fn null_v(d_hat: &DistanceVector, null: NullSpec, model: &VarianceModel) -> Result<CovPrediction> {
    match null {
        NullSpec::ZeroDistances => {
            if d_hat.len() != model.pairs() {
                return Err(LdcError::DimensionMismatch {
                    what: "distance count vs Xi size",
                    expected: model.pairs(),
                    got: d_hat.len(),
                });
            }
            model.predict_null()
        }
        NullSpec::Equalized(j, l) => {
            let d = d_hat.len();
            if j >= d || l >= d {
                return Err(LdcError::InvalidArgument(format!(
                    "pair index out of range: ({j}, {l}) with D = {d}"
                )));
            }
            let mut values = d_hat.clamped_nonnegative().into_values();
            let shared = (0.5 * (d_hat.as_slice()[j] + d_hat.as_slice()[l])).max(0.0);
            values[j] = shared;
            values[l] = shared;
            model.predict(&DistanceVector::new(values)?)
        }
    }
}

/// Outcome of a z-test of `cᵀd`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastTest {
    pub contrast: DVector<f64>,
    pub estimate: f64,
    pub variance: f64,
    pub z: f64,
    pub p_value: f64,
    pub two_sided: bool,
}

/// `z = cᵀd̂ / √(cᵀVc)`; one-sided `p = 1 - Φ(z)` or two-sided `2(1 - Φ(|z|))`.
pub fn z_test(
    d_hat: &DistanceVector,
    contrast: &DVector<f64>,
    v: &CovPrediction,
    two_sided: bool,
) -> Result<ContrastTest> {
    let d = d_hat.len();
    if contrast.len() != d {
        return Err(LdcError::DimensionMismatch {
            what: "contrast length",
            expected: d,
            got: contrast.len(),
        });
    }
    if v.v.nrows() != d {
        return Err(LdcError::DimensionMismatch {
            what: "covariance size",
            expected: d,
            got: v.v.nrows(),
        });
    }
    let variance = contrast.dot(&(&v.v * contrast));
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(LdcError::DegenerateContrast(variance));
    }
    let estimate = contrast.dot(d_hat.values());
    let z = estimate / variance.sqrt();
    let p_value = if two_sided {
        (2.0 * normal_sf(z.abs())).min(1.0)
    } else {
        normal_sf(z)
    };
    Ok(ContrastTest {
        contrast: contrast.clone(),
        estimate,
        variance,
        z,
        p_value,
        two_sided,
    })
}

/// Unit vector selecting pair `j`.
pub fn single_contrast(d: usize, j: usize) -> Result<DVector<f64>> {
    if j >= d {
        return Err(LdcError::InvalidArgument(format!("pair {j} out of range for D = {d}")));
    }
    let mut c = DVector::zeros(d);
    c[j] = 1.0;
    Ok(c)
}

/// `e_j - e_l`.
pub fn difference_contrast(d: usize, j: usize, l: usize) -> Result<DVector<f64>> {
    if j == l {
        return Err(LdcError::InvalidArgument("difference of a pair with itself".into()));
    }
    let mut c = single_contrast(d, j)?;
    c -= single_contrast(d, l)?;
    Ok(c)
}
