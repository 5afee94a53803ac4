//! Simulation of fMRI-like time series with separable temporal x spatial
//! noise: `Y_m = X_m B + σ L_T Z L_Pᵀ`, runs independent.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{LdcError, Result};
use crate::glm::{temporal_cov, DesignMatrix, TemporalCovSpec};
use crate::linalg::{cholesky_lower_jittered, ensure_square};
use crate::simulator::direct::standard_normal_matrix;
use crate::simulator::rng::replication_rng;

/// Ingredients of a time-series simulation.
#[derive(Debug, Clone)]
pub struct TimeseriesSimSpec {
    /// One design per run; condition columns carry global ids.
    pub designs: Vec<DesignMatrix>,
    pub temporal: TemporalCovSpec,
    /// Spatial noise correlation `Σ_P` (`P x P`).
    pub spatial: DMatrix<f64>,
    pub noise_variance: f64,
    /// True condition patterns `K x P`, rows indexed by global condition id.
    pub signal: DMatrix<f64>,
    /// Pass the signal through the spatial noise factor as well, which leaves
    /// its Mahalanobis geometry under `Σ_P` equal to the Euclidean geometry of
    /// `signal`.
    pub smooth_signal: bool,
}

/// Precomputed factors for repeated draws from a [`TimeseriesSimSpec`].
#[derive(Debug, Clone)]
pub struct TimeseriesSimulator {
    means: Vec<DMatrix<f64>>,
    temporal_factors: Vec<DMatrix<f64>>,
    spatial_factor: Option<DMatrix<f64>>,
    noise_sd: f64,
}

impl TimeseriesSimulator {
    pub fn new(spec: &TimeseriesSimSpec) -> Result<Self> {
        if spec.designs.is_empty() {
            return Err(LdcError::InvalidArgument("no runs to simulate".into()));
        }
        if !(spec.noise_variance >= 0.0) {
            return Err(LdcError::InvalidArgument(format!(
                "noise variance {} must be >= 0",
                spec.noise_variance
            )));
        }
        let p = ensure_square(&spec.spatial, "spatial covariance")?;
        if spec.signal.ncols() != p {
            return Err(LdcError::DimensionMismatch {
                what: "signal voxels vs spatial covariance",
                expected: p,
                got: spec.signal.ncols(),
            });
        }
        let spatial_factor = if spec.spatial == DMatrix::identity(p, p) {
            None
        } else {
            Some(cholesky_lower_jittered(&spec.spatial, "spatial covariance")?)
        };
        let signal = match (&spatial_factor, spec.smooth_signal) {
            (Some(l), true) => &spec.signal * l.transpose(),
            _ => spec.signal.clone(),
        };
        let mut means = Vec::with_capacity(spec.designs.len());
        let mut temporal_factors: Vec<DMatrix<f64>> = Vec::with_capacity(spec.designs.len());
        for design in &spec.designs {
            let t = design.time_points();
            let x = design.matrix();
            let mut mean = DMatrix::zeros(t, p);
            for (col, &id) in design.condition_ids().iter().enumerate() {
                if id >= signal.nrows() {
                    return Err(LdcError::InvalidArgument(format!(
                        "design uses condition {id} but the signal has {} rows",
                        signal.nrows()
                    )));
                }
                mean += x.column(col) * signal.row(id);
            }
            means.push(mean);
            let reuse = temporal_factors.iter().find(|f| f.nrows() == t).cloned();
            let factor = match reuse {
                Some(f) => f,
                None => cholesky_lower_jittered(&temporal_cov(&spec.temporal, t)?, "temporal covariance")?,
            };
            temporal_factors.push(factor);
        }
        Ok(Self {
            means,
            temporal_factors,
            spatial_factor,
            noise_sd: spec.noise_variance.sqrt(),
        })
    }

    pub fn runs(&self) -> usize {
        self.means.len()
    }

    /// Noise-free data `X_m B` for every run.
    pub fn means(&self) -> &[DMatrix<f64>] {
        &self.means
    }

    /// One data set: `T_m x P` matrices for all runs.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<DMatrix<f64>> {
        self.means
            .iter()
            .zip(&self.temporal_factors)
            .map(|(mean, lt)| {
                if self.noise_sd == 0.0 {
                    return mean.clone();
                }
                let z = standard_normal_matrix(rng, mean.nrows(), mean.ncols());
                let mut e = lt * z;
                if let Some(lp) = &self.spatial_factor {
                    e = e * lp.transpose();
                }
                e * self.noise_sd + mean
            })
            .collect()
    }
}

/// Data set for replication `replication` of the seeded stream.
pub fn simulate_timeseries(sim: &TimeseriesSimulator, base_seed: u64, replication: u64) -> Vec<DMatrix<f64>> {
    let mut rng = replication_rng(base_seed, 0, replication);
    sim.sample(&mut rng)
}
