//! Cross-validated squared Mahalanobis distances (LDC / crossnobis) computed
//! from prewhitened partition patterns, and the balanced-design prediction of
//! their covariance matrix.

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{LdcError, Result};
use crate::model::{delta_from_distances, ContrastMatrix, Dimensions, DistanceVector};

/// Floor applied to the diagonal of `Ξ` before predicting variances.
pub const XI_DIAGONAL_FLOOR: f64 = 1e-12;

/// Prewhitened `K x P` pattern estimates, one per partition.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedPatterns {
    partitions: Vec<DMatrix<f64>>,
    dims: Dimensions,
}

impl PartitionedPatterns {
    pub fn new(partitions: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = partitions
            .first()
            .ok_or_else(|| LdcError::InvalidDimension("no partitions".into()))?;
        let (k, p) = first.shape();
        for u in &partitions {
            if u.nrows() != k {
                return Err(LdcError::DimensionMismatch {
                    what: "partition condition count",
                    expected: k,
                    got: u.nrows(),
                });
            }
            if u.ncols() != p {
                return Err(LdcError::DimensionMismatch {
                    what: "partition voxel count",
                    expected: p,
                    got: u.ncols(),
                });
            }
        }
        let dims = Dimensions::new(k, p, partitions.len())?;
        Ok(Self { partitions, dims })
    }

    pub fn dims(&self) -> Dimensions {
        self.dims
    }

    pub fn partitions(&self) -> &[DMatrix<f64>] {
        &self.partitions
    }

    /// Mean pattern over partitions.
    pub fn mean(&self) -> DMatrix<f64> {
        let mut acc = DMatrix::zeros(self.dims.conditions(), self.dims.voxels());
        for u in &self.partitions {
            acc += u;
        }
        acc / self.partitions.len() as f64
    }
}

/// `D x P` matrix of pattern differences `û_i - û_k`, one row per pair.
pub fn pattern_differences(u: &DMatrix<f64>, c: &ContrastMatrix) -> Result<DMatrix<f64>> {
    if u.nrows() != c.conditions() {
        return Err(LdcError::DimensionMismatch {
            what: "pattern rows vs contrast columns",
            expected: c.conditions(),
            got: u.nrows(),
        });
    }
    let mut out = DMatrix::zeros(c.pairs(), u.ncols());
    for (j, &(a, b)) in c.pair_list().iter().enumerate() {
        out.row_mut(j).copy_from(&(u.row(a) - u.row(b)));
    }
    Ok(out)
}

/// `d̂_j = 1/(MP) Σ_m δ̂_{j,m} δ̂_{j,∼m}ᵀ` with `δ̂_{j,∼m}` the mean of the other
/// `M-1` partitions.
pub fn crossnobis_distances(patterns: &PartitionedPatterns) -> Result<DistanceVector> {
    let dims = patterns.dims();
    let c = ContrastMatrix::new(dims.conditions())?;
    let m = dims.partitions();
    let p = dims.voxels();
    let diffs: Vec<DMatrix<f64>> = patterns
        .partitions()
        .iter()
        .map(|u| pattern_differences(u, &c))
        .collect::<Result<_>>()?;
    let mut total = DMatrix::zeros(c.pairs(), p);
    for d in &diffs {
        total += d;
    }
    let mut values = DVector::zeros(c.pairs());
    for j in 0..c.pairs() {
        let mut acc = 0.0;
        for d in &diffs {
            let own = d.row(j);
            let rest = (total.row(j) - own) / (m - 1) as f64;
            acc += own.dot(&rest);
        }
        values[j] = acc / (m * p) as f64;
    }
    DistanceVector::new(values)
}

/// Condition covariance `Σ_K` and its projection `Ξ = C Σ_K Cᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionCov {
    pub sigma_k: DMatrix<f64>,
    pub xi: DMatrix<f64>,
}

impl ConditionCov {
    pub fn new(sigma_k: DMatrix<f64>) -> Result<Self> {
        let k = crate::linalg::ensure_square(&sigma_k, "condition covariance")?;
        let c = ContrastMatrix::new(k)?;
        let xi = c.matrix() * &sigma_k * c.matrix().transpose();
        Ok(Self { sigma_k, xi })
    }

    /// `σ² I`.
    pub fn isotropic(k: usize, variance: f64) -> Result<Self> {
        Self::new(DMatrix::identity(k, k) * variance)
    }
}

/// `Σ̂_K = Σ_m (Û_m - Ū)(Û_m - Ū)ᵀ / ((M-1)P)`.
pub fn estimate_sigma_k(patterns: &PartitionedPatterns) -> Result<ConditionCov> {
    let dims = patterns.dims();
    let mean = patterns.mean();
    let k = dims.conditions();
    let mut acc = DMatrix::zeros(k, k);
    for u in patterns.partitions() {
        let centered = u - &mean;
        acc += &centered * centered.transpose();
    }
    let sigma_k = acc / ((dims.partitions() - 1) * dims.voxels()) as f64;
    ConditionCov::new(crate::linalg::symmetrize(&sigma_k))
}

/// Predicted covariance `V` of the distance estimates with its ingredients.
#[derive(Debug, Clone, PartialEq)]
pub struct CovPrediction {
    pub v: DMatrix<f64>,
    pub delta: DMatrix<f64>,
    pub xi: DMatrix<f64>,
    pub trace_rr: f64,
    pub partitions: usize,
    pub voxels: usize,
}

fn floored_xi(xi: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = xi.clone();
    let mut clamped = 0usize;
    for j in 0..out.nrows() {
        if !(out[(j, j)] >= XI_DIAGONAL_FLOOR) {
            out[(j, j)] = XI_DIAGONAL_FLOOR;
            clamped += 1;
        }
    }
    if clamped > 0 {
        warn!("clamped {clamped} diagonal entries of Xi to {XI_DIAGONAL_FLOOR:e}");
    }
    out
}

fn check_square(a: &DMatrix<f64>, d: usize, what: &'static str) -> Result<()> {
    if a.nrows() != d || a.ncols() != d {
        return Err(LdcError::DimensionMismatch {
            what,
            expected: d,
            got: if a.nrows() != d { a.nrows() } else { a.ncols() },
        });
    }
    Ok(())
}

/// `V = [4 (Δ∘Ξ)/M + 2 (Ξ∘Ξ)/(M(M-1))] · tr(Σ_RΣ_R)/P²`.
pub fn predict_v_balanced(
    delta: &DMatrix<f64>,
    xi: &DMatrix<f64>,
    trace_rr: f64,
    partitions: usize,
    voxels: usize,
) -> Result<CovPrediction> {
    if partitions < 2 {
        return Err(LdcError::InvalidDimension(format!(
            "need M >= 2 partitions, got {partitions}"
        )));
    }
    if voxels == 0 {
        return Err(LdcError::InvalidDimension("need P >= 1".into()));
    }
    let d = delta.nrows();
    check_square(delta, d, "delta")?;
    check_square(xi, d, "xi vs delta")?;
    let xi_used = floored_xi(xi);
    let m = partitions as f64;
    let scale = trace_rr / (voxels as f64 * voxels as f64);
    let signal = delta.component_mul(&xi_used) * (4.0 / m);
    let noise = xi_used.component_mul(&xi_used) * (2.0 / (m * (m - 1.0)));
    let v = crate::linalg::symmetrize(&((signal + noise) * scale));
    Ok(CovPrediction {
        v,
        delta: delta.clone(),
        xi: xi_used,
        trace_rr,
        partitions,
        voxels,
    })
}

/// Everything except the true distances needed to predict `V` for a balanced
/// design: `Ξ`, `tr(Σ_RΣ_R)`, `M` and `P`.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceModel {
    pub xi: DMatrix<f64>,
    pub trace_rr: f64,
    pub partitions: usize,
    pub voxels: usize,
}

impl VarianceModel {
    pub fn new(condition_cov: &ConditionCov, trace_rr: f64, partitions: usize, voxels: usize) -> Self {
        Self {
            xi: condition_cov.xi.clone(),
            trace_rr,
            partitions,
            voxels,
        }
    }

    pub fn pairs(&self) -> usize {
        self.xi.nrows()
    }

    /// `V` with `Δ` built from the given (true or assumed) distances.
    pub fn predict(&self, distances: &DistanceVector) -> Result<CovPrediction> {
        if distances.len() != self.pairs() {
            return Err(LdcError::DimensionMismatch {
                what: "distance count vs Xi size",
                expected: self.pairs(),
                got: distances.len(),
            });
        }
        let delta = delta_from_distances(distances);
        predict_v_balanced(&delta, &self.xi, self.trace_rr, self.partitions, self.voxels)
    }

    /// `V` for all-zero true distances.
    pub fn predict_null(&self) -> Result<CovPrediction> {
        let d = self.pairs();
        predict_v_balanced(&DMatrix::zeros(d, d), &self.xi, self.trace_rr, self.partitions, self.voxels)
    }
}
