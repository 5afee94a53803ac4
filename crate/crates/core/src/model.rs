//! Shared data types: problem dimensions, the pairwise contrast matrix,
//! distance vectors and their square RDM form.
//!
//! Pairs are always enumerated lexicographically, `(0,1), (0,2), ..., (0,K-1),
//! (1,2), ...`, and every module relies on that order.

use nalgebra::{DMatrix, DVector};

use crate::error::{LdcError, Result};

/// Number of unordered condition pairs for `k` conditions.
pub fn pair_count(k: usize) -> usize {
    k * k.saturating_sub(1) / 2
}

/// Recovers `K` from a pair count `D = K(K-1)/2`.
pub fn conditions_for_pair_count(d: usize) -> Result<usize> {
    // K = (1 + sqrt(1 + 8D)) / 2, checked exactly in integers.
    let k = ((1.0 + (1.0 + 8.0 * d as f64).sqrt()) / 2.0).round() as usize;
    if k >= 2 && pair_count(k) == d {
        Ok(k)
    } else {
        Err(LdcError::InvalidDimension(format!(
            "{d} is not a pair count K(K-1)/2 for any K >= 2"
        )))
    }
}

/// Condition, voxel and partition counts of an analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dimensions {
    k: usize,
    p: usize,
    m: usize,
}

impl Dimensions {
    pub fn new(k: usize, p: usize, m: usize) -> Result<Self> {
        if k < 2 {
            return Err(LdcError::InvalidDimension(format!("need K >= 2 conditions, got {k}")));
        }
        if p < 1 {
            return Err(LdcError::InvalidDimension("need P >= 1 voxels".into()));
        }
        if m < 2 {
            return Err(LdcError::InvalidDimension(format!(
                "cross-validation needs M >= 2 partitions, got {m}"
            )));
        }
        Ok(Self { k, p, m })
    }

    pub fn conditions(&self) -> usize {
        self.k
    }

    pub fn voxels(&self) -> usize {
        self.p
    }

    pub fn partitions(&self) -> usize {
        self.m
    }

    pub fn pairs(&self) -> usize {
        pair_count(self.k)
    }
}

/// `D x K` matrix whose row `j` holds `+1` and `-1` at the two conditions of pair `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastMatrix {
    entries: DMatrix<f64>,
    pairs: Vec<(usize, usize)>,
}

impl ContrastMatrix {
    pub fn new(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(LdcError::InvalidDimension(format!("need K >= 2 conditions, got {k}")));
        }
        let pairs: Vec<(usize, usize)> = (0..k)
            .flat_map(|i| ((i + 1)..k).map(move |j| (i, j)))
            .collect();
        let mut entries = DMatrix::zeros(pairs.len(), k);
        for (row, &(i, j)) in pairs.iter().enumerate() {
            entries[(row, i)] = 1.0;
            entries[(row, j)] = -1.0;
        }
        Ok(Self { entries, pairs })
    }

    pub fn conditions(&self) -> usize {
        self.entries.ncols()
    }

    pub fn pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// Ordered condition pair `(i, k)`, `i < k`, of row `j`.
    pub fn pair(&self, j: usize) -> (usize, usize) {
        self.pairs[j]
    }

    pub fn pair_list(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Row index of the unordered pair `{a, b}`.
    pub fn index_of(&self, a: usize, b: usize) -> Option<usize> {
        let k = self.conditions();
        if a == b || a >= k || b >= k {
            return None;
        }
        let (i, j) = if a < b { (a, b) } else { (b, a) };
        // Rows before block i: sum_{r<i} (k-1-r).
        Some(i * (2 * k - i - 1) / 2 + (j - i - 1))
    }

    /// Row `j` as a dense `K`-vector.
    pub fn row_vector(&self, j: usize) -> DVector<f64> {
        self.entries.row(j).transpose()
    }
}

/// Vector of `D` pairwise squared distances in canonical pair order.
///
/// Estimates may be negative; only true or model-predicted vectors are
/// required to be non-negative (see [`DistanceVector::is_valid_true`]).
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceVector {
    values: DVector<f64>,
    k: usize,
}

impl DistanceVector {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        let k = conditions_for_pair_count(values.len())?;
        Ok(Self { values, k })
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(values))
    }

    pub fn zeros(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(LdcError::InvalidDimension(format!("need K >= 2 conditions, got {k}")));
        }
        Ok(Self { values: DVector::zeros(pair_count(k)), k })
    }

    pub fn conditions(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn into_values(self) -> DVector<f64> {
        self.values
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice()
    }

    /// Elementwise `max(d, 0)`.
    pub fn clamped_nonnegative(&self) -> Self {
        Self {
            values: self.values.map(|x| x.max(0.0)),
            k: self.k,
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            values: &self.values * s,
            k: self.k,
        }
    }

    /// True distances must be finite and non-negative.
    pub fn is_valid_true(&self) -> bool {
        self.values.iter().all(|x| x.is_finite() && *x >= 0.0)
    }

    pub fn to_rdm(&self) -> RdMatrix {
        RdMatrix::from_distances(self)
    }
}

/// Symmetric `K x K` dissimilarity matrix with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct RdMatrix {
    entries: DMatrix<f64>,
}

impl RdMatrix {
    /// Validates symmetry (exact) and a zero diagonal.
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        let k = entries.nrows();
        if entries.ncols() != k {
            return Err(LdcError::DimensionMismatch {
                what: "RDM columns",
                expected: k,
                got: entries.ncols(),
            });
        }
        if k < 2 {
            return Err(LdcError::InvalidDimension(format!("need K >= 2 conditions, got {k}")));
        }
        for i in 0..k {
            if entries[(i, i)] != 0.0 {
                return Err(LdcError::InvalidArgument(format!(
                    "RDM diagonal entry {i} is {}",
                    entries[(i, i)]
                )));
            }
            for j in (i + 1)..k {
                if entries[(i, j)] != entries[(j, i)] {
                    return Err(LdcError::InvalidArgument(format!(
                        "RDM is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn from_distances(d: &DistanceVector) -> Self {
        let k = d.conditions();
        let mut entries = DMatrix::zeros(k, k);
        let mut j = 0;
        for a in 0..k {
            for b in (a + 1)..k {
                entries[(a, b)] = d.values[j];
                entries[(b, a)] = d.values[j];
                j += 1;
            }
        }
        Self { entries }
    }

    pub fn to_distances(&self) -> DistanceVector {
        let k = self.conditions();
        let mut values = Vec::with_capacity(pair_count(k));
        for a in 0..k {
            for b in (a + 1)..k {
                values.push(self.entries[(a, b)]);
            }
        }
        DistanceVector {
            values: DVector::from_vec(values),
            k,
        }
    }

    pub fn conditions(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }
}

/// Second-moment matrix of the true pattern differences, `Δ = -½ C D Cᵀ`.
pub fn delta_from_rdm(rdm: &RdMatrix, c: &ContrastMatrix) -> Result<DMatrix<f64>> {
    if rdm.conditions() != c.conditions() {
        return Err(LdcError::DimensionMismatch {
            what: "RDM size vs contrast columns",
            expected: c.conditions(),
            got: rdm.conditions(),
        });
    }
    let cm = c.matrix();
    Ok(cm * rdm.matrix() * cm.transpose() * -0.5)
}

/// `Δ` for a distance vector, building the contrast matrix internally.
pub fn delta_from_distances(d: &DistanceVector) -> DMatrix<f64> {
    let c = ContrastMatrix::new(d.conditions()).expect("DistanceVector always has K >= 2");
    delta_from_rdm(&d.to_rdm(), &c).expect("dimensions agree by construction")
}

/// `Δ = C U Uᵀ Cᵀ / P` computed directly from a `K x P` pattern matrix.
pub fn delta_from_patterns(u: &DMatrix<f64>, c: &ContrastMatrix) -> Result<DMatrix<f64>> {
    if u.nrows() != c.conditions() {
        return Err(LdcError::DimensionMismatch {
            what: "pattern rows vs contrast columns",
            expected: c.conditions(),
            got: u.nrows(),
        });
    }
    let diffs = c.matrix() * u;
    Ok(&diffs * diffs.transpose() / u.ncols() as f64)
}

/// Exact squared Euclidean distances between pattern rows, divided by `P`.
pub fn pattern_distances(u: &DMatrix<f64>) -> Result<DistanceVector> {
    let k = u.nrows();
    if k < 2 {
        return Err(LdcError::InvalidDimension(format!("need K >= 2 rows, got {k}")));
    }
    let p = u.ncols() as f64;
    let mut values = Vec::with_capacity(pair_count(k));
    for a in 0..k {
        for b in (a + 1)..k {
            let diff = u.row(a) - u.row(b);
            values.push(diff.norm_squared() / p);
        }
    }
    DistanceVector::new(DVector::from_vec(values))
}
