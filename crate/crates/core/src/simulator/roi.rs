//! Spherical regions of interest on a cubic voxel lattice and their spatial
//! noise correlation.

use nalgebra::DMatrix;

use crate::error::{LdcError, Result};

/// Voxel centres (mm) of a spherical ROI centred on a voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiGrid {
    centers: Vec<[f64; 3]>,
    distances: DMatrix<f64>,
}

impl RoiGrid {
    pub fn centers(&self) -> &[[f64; 3]] {
        &self.centers
    }

    pub fn voxels(&self) -> usize {
        self.centers.len()
    }

    /// Euclidean distances (mm) between voxel centres.
    pub fn distances(&self) -> &DMatrix<f64> {
        &self.distances
    }
}

/// Keeps lattice points `voxel_mm·(i, j, k)` within `radius_mm` of the origin.
pub fn build_roi(radius_mm: f64, voxel_mm: f64) -> Result<RoiGrid> {
    if !(radius_mm > 0.0) || !(voxel_mm > 0.0) {
        return Err(LdcError::InvalidArgument(format!(
            "radius and voxel size must be positive (got {radius_mm}, {voxel_mm})"
        )));
    }
    let n = (radius_mm / voxel_mm).floor() as i64;
    let r2 = radius_mm * radius_mm * (1.0 + 1e-12);
    let mut centers = Vec::new();
    for i in -n..=n {
        for j in -n..=n {
            for k in -n..=n {
                let p = [i as f64 * voxel_mm, j as f64 * voxel_mm, k as f64 * voxel_mm];
                if p.iter().map(|x| x * x).sum::<f64>() <= r2 {
                    centers.push(p);
                }
            }
        }
    }
    if centers.is_empty() {
        return Err(LdcError::InvalidArgument("ROI contains no voxels".into()));
    }
    let p = centers.len();
    let distances = DMatrix::from_fn(p, p, |a, b| {
        let (x, y) = (centers[a], centers[b]);
        ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2)).sqrt()
    });
    Ok(RoiGrid { centers, distances })
}

/// `r(i, j) = exp(-‖p_i - p_j‖² / s_ε²)`; `s_ε = 0` gives the identity.
pub fn spatial_cov_from_grid(grid: &RoiGrid, s_eps: f64) -> Result<DMatrix<f64>> {
    if !(s_eps >= 0.0) {
        return Err(LdcError::InvalidArgument(format!("kernel width {s_eps} must be >= 0")));
    }
    let p = grid.voxels();
    if s_eps == 0.0 {
        return Ok(DMatrix::identity(p, p));
    }
    let s2 = s_eps * s_eps;
    Ok(grid.distances.map(|d| (-d * d / s2).exp()))
}
