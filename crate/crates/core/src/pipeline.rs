//! End-to-end analysis: per-run GLS, spatial prewhitening, crossnobis
//! distances, and the predicted covariance of the distances.

use nalgebra::DMatrix;

use crate::crossnobis::{
    crossnobis_distances, estimate_sigma_k, ConditionCov, CovPrediction, PartitionedPatterns,
    VarianceModel,
};
use crate::error::{LdcError, Result};
use crate::glm::{temporal_cov, DesignMatrix, GlmFit, GlsProjector, TemporalCovSpec};
use crate::model::DistanceVector;
use crate::prewhiten::{
    estimate_sigma_p_from_fits, estimate_sigma_r_split, prewhiten_patterns,
    residual_cov_with_whitener, ResidualSpatialCov, SpatialCov,
};

/// Distances with everything needed to test them.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub distances: DistanceVector,
    pub condition_cov: ConditionCov,
    /// Residual voxel covariance as used in the prediction (`tr Σ_R = P`).
    pub residual: ResidualSpatialCov,
    pub variance_model: VarianceModel,
    /// `V` with `Δ` built from the non-negative part of the estimates.
    pub prediction: CovPrediction,
}

/// Distances and predicted covariance from prewhitened partition patterns.
/// `residual = None` assumes independent voxels after prewhitening.
pub fn analyze_patterns(patterns: &PartitionedPatterns, residual: Option<&ResidualSpatialCov>) -> Result<Analysis> {
    let dims = patterns.dims();
    let residual = match residual {
        Some(r) => {
            if r.voxels() != dims.voxels() {
                return Err(LdcError::DimensionMismatch {
                    what: "residual covariance vs pattern voxels",
                    expected: dims.voxels(),
                    got: r.voxels(),
                });
            }
            r.normalized()
        }
        None => ResidualSpatialCov::identity(dims.voxels()),
    };
    let distances = crossnobis_distances(patterns)?;
    let condition_cov = estimate_sigma_k(patterns)?;
    let variance_model = VarianceModel::new(&condition_cov, residual.trace_rr, dims.partitions(), dims.voxels());
    let prediction = variance_model.predict(&distances.clamped_nonnegative())?;
    Ok(Analysis {
        distances,
        condition_cov,
        residual,
        variance_model,
        prediction,
    })
}

/// GLS estimators for a fixed set of runs, reusable across data sets.
#[derive(Debug, Clone)]
pub struct RunModels {
    conditions: usize,
    projectors: Vec<GlsProjector>,
}

impl RunModels {
    /// All runs must contain conditions `0..K` in order.
    pub fn new(designs: &[DesignMatrix], temporal: &TemporalCovSpec) -> Result<Self> {
        let first = designs
            .first()
            .ok_or_else(|| LdcError::InvalidArgument("no runs".into()))?;
        let k = first.conditions();
        let mut projectors = Vec::with_capacity(designs.len());
        for (r, d) in designs.iter().enumerate() {
            if d.condition_ids() != (0..k).collect::<Vec<_>>().as_slice() {
                return Err(LdcError::InvalidArgument(format!(
                    "run {r} does not contain conditions 0..{k}; use the general fold design"
                )));
            }
            let sigma_t = temporal_cov(temporal, d.time_points())?;
            projectors.push(GlsProjector::new(d, &sigma_t)?);
        }
        Ok(Self {
            conditions: k,
            projectors,
        })
    }

    pub fn conditions(&self) -> usize {
        self.conditions
    }

    pub fn runs(&self) -> usize {
        self.projectors.len()
    }

    pub fn fit(&self, data: &[DMatrix<f64>]) -> Result<Vec<GlmFit>> {
        if data.len() != self.projectors.len() {
            return Err(LdcError::DimensionMismatch {
                what: "data runs vs design runs",
                expected: self.projectors.len(),
                got: data.len(),
            });
        }
        self.projectors.iter().zip(data).map(|(g, y)| g.fit(y)).collect()
    }
}

/// Where the residual voxel covariance `Σ_R` comes from.
#[derive(Debug, Clone)]
pub enum ResidualSource {
    /// `Σ_R = I`.
    Independent,
    /// `Σ_R = W Σ_P W` with the known noise covariance.
    Known(DMatrix<f64>),
    /// Odd-run noise covariance whitened by the all-run whitener.
    SplitRuns,
}

/// Result of analysing time-series data.
#[derive(Debug, Clone)]
pub struct TimeseriesAnalysis {
    pub analysis: Analysis,
    pub spatial: SpatialCov,
    /// `Σ_R` before normalisation to `tr Σ_R = P`.
    pub raw_residual: ResidualSpatialCov,
}

/// Prewhitens fitted runs with shrinkage `h` and computes distances and `V`.
pub fn analyze_fits(fits: &[GlmFit], conditions: usize, h: f64, source: &ResidualSource) -> Result<TimeseriesAnalysis> {
    let sigma_hat = estimate_sigma_p_from_fits(fits)?;
    let spatial = SpatialCov::new(sigma_hat, h)?;
    let parts = fits
        .iter()
        .map(|f| prewhiten_patterns(&f.condition_betas(conditions), &spatial.whitener))
        .collect::<Result<Vec<_>>>()?;
    let patterns = PartitionedPatterns::new(parts)?;
    let raw_residual = match source {
        ResidualSource::Independent => ResidualSpatialCov::identity(spatial.voxels()),
        ResidualSource::Known(sigma_p) => residual_cov_with_whitener(sigma_p, &spatial.whitener),
        ResidualSource::SplitRuns => estimate_sigma_r_split(fits, &spatial)?,
    };
    let analysis = analyze_patterns(&patterns, Some(&raw_residual))?;
    Ok(TimeseriesAnalysis {
        analysis,
        spatial,
        raw_residual,
    })
}

/// Full pipeline from per-run data and designs.
pub fn analyze_timeseries(
    data: &[DMatrix<f64>],
    designs: &[DesignMatrix],
    temporal: &TemporalCovSpec,
    h: f64,
    source: &ResidualSource,
) -> Result<TimeseriesAnalysis> {
    let models = RunModels::new(designs, temporal)?;
    let fits = models.fit(data)?;
    analyze_fits(&fits, models.conditions(), h, source)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glm::{build_design, Hrf, Trial};
    use crate::model::pattern_distances;

    #[test]
    fn noiseless_patterns_give_exact_distances() {
        let u = DMatrix::from_fn(3, 6, |i, j| ((i + 1) * (j + 2)) as f64 * 0.1);
        let parts = PartitionedPatterns::new(vec![u.clone(), u.clone()]).unwrap();
        let a = analyze_patterns(&parts, None).unwrap();
        let exact = pattern_distances(&u).unwrap();
        for (x, y) in a.distances.as_slice().iter().zip(exact.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(a.residual.trace_rr, 6.0);
    }

    #[test]
    fn residual_normalized_before_use() {
        let u = DMatrix::from_fn(3, 4, |i, j| (i * j) as f64);
        let parts = PartitionedPatterns::new(vec![u.clone(), u * 1.1]).unwrap();
        let r = ResidualSpatialCov::from_matrix(DMatrix::identity(4, 4) * 3.0);
        let a = analyze_patterns(&parts, Some(&r)).unwrap();
        assert!((a.residual.trace_rr - 4.0).abs() < 1e-12);
        assert!(analyze_patterns(&parts, Some(&ResidualSpatialCov::identity(5))).is_err());
    }

    #[test]
    fn timeseries_noiseless_recovers_patterns() {
        let trials = vec![
            vec![Trial::new(2.0, 4.0), Trial::new(40.0, 4.0)],
            vec![Trial::new(14.0, 4.0), Trial::new(52.0, 4.0)],
            vec![Trial::new(26.0, 4.0), Trial::new(64.0, 4.0)],
        ];
        let design = build_design(&trials, 50, 2.0, &Hrf::default()).unwrap();
        let b = DMatrix::from_fn(3, 5, |i, j| (i as f64 - 1.0) * (j as f64 + 1.0));
        let y = design.matrix().columns(0, 3) * &b;
        // Small deterministic perturbation so residuals are non-degenerate.
        let y2 = DMatrix::from_fn(50, 5, |t, v| y[(t, v)] + 1e-3 * ((t * 7 + v * 3) % 11) as f64);
        let data = vec![y2.clone(), y2.clone(), y2];
        let designs = vec![design.clone(), design.clone(), design];
        let out = analyze_timeseries(&data, &designs, &TemporalCovSpec::Identity, 0.4, &ResidualSource::SplitRuns).unwrap();
        assert_eq!(out.analysis.distances.len(), 3);
        assert_eq!(out.spatial.h, 0.4);
        assert!((out.analysis.residual.sigma_r.trace() - 5.0).abs() < 1e-9);
    }
}
