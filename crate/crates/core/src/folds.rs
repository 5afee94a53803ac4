//! Covariances between difference estimates from different partition sets,
//! their fold sums, and the general (possibly unbalanced) prediction of `V`.
//!
//! Folds are leave-one-partition-out: fold `m` pairs partition `m` with the
//! set `∼m` of all other partitions.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::crossnobis::CovPrediction;
use crate::error::{LdcError, Result};
use crate::glm::DesignMatrix;
use crate::linalg::{cholesky_lower, ensure_square, symmetrize};
use crate::model::{ContrastMatrix, DistanceVector};
use crate::prewhiten::prewhiten_patterns;

/// Pairing of partition sets inside the covariance of two fold products.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FoldCase {
    /// `(m, m)`
    Same,
    /// `(m, ∼m)`
    SameComplement,
    /// `(∼m, ∼m)`
    ComplementComplement,
    /// `(m, n)`, `m ≠ n`
    Other,
    /// `(m, ∼n)`
    OtherComplement,
    /// `(∼m, n)`
    ComplementOther,
    /// `(∼m, ∼n)`
    ComplementOtherComplement,
}

impl FoldCase {
    pub const ALL: [FoldCase; 7] = [
        FoldCase::Same,
        FoldCase::SameComplement,
        FoldCase::ComplementComplement,
        FoldCase::Other,
        FoldCase::OtherComplement,
        FoldCase::ComplementOther,
        FoldCase::ComplementOtherComplement,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            FoldCase::Same => "mm",
            FoldCase::SameComplement => "m~m",
            FoldCase::ComplementComplement => "~m~m",
            FoldCase::Other => "mn",
            FoldCase::OtherComplement => "m~n",
            FoldCase::ComplementOther => "~mn",
            FoldCase::ComplementOtherComplement => "~m~n",
        }
    }
}

impl fmt::Display for FoldCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for FoldCase {
    type Err = LdcError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().replace('∼', "~");
        FoldCase::ALL
            .iter()
            .copied()
            .find(|c| c.tag() == norm)
            .ok_or_else(|| LdcError::InvalidArgument(format!("unknown fold case tag {s:?}")))
    }
}

/// Per-voxel covariance of two balanced-design difference estimates, as a
/// multiple of the corresponding `Ξ` entry.
///
/// The mean over `M-2` partitions shared by `∼m` and `∼n` gives the factor
/// `(M-2)/(M-1)²` for the `(∼m, ∼n)` case.
pub fn fold_cov_balanced(xi_entry: f64, partitions: usize, case: FoldCase) -> Result<f64> {
    if partitions < 2 {
        return Err(LdcError::InvalidDimension(format!(
            "need M >= 2 partitions, got {partitions}"
        )));
    }
    let m1 = (partitions - 1) as f64;
    Ok(match case {
        FoldCase::Same => xi_entry,
        FoldCase::SameComplement | FoldCase::Other => 0.0,
        FoldCase::ComplementComplement | FoldCase::OtherComplement | FoldCase::ComplementOther => {
            xi_entry / m1
        }
        FoldCase::ComplementOtherComplement => (partitions as f64 - 2.0) * xi_entry / (m1 * m1),
    })
}

/// `Ξ^{A,B}` blocks for every ordered fold pair `(m, n)` together with the
/// folds in which each distance is defined.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldCovTable {
    folds: usize,
    pairs: usize,
    /// `valid[j][m]`: pair `j` is estimable in fold `m`.
    valid: Vec<Vec<bool>>,
    /// Index `m * folds + n` holds `[Ξ^{mn}, Ξ^{m∼n}, Ξ^{∼mn}, Ξ^{∼m∼n}]`.
    blocks: Vec<Option<[DMatrix<f64>; 4]>>,
}

impl FoldCovTable {
    /// Empty table; every block must be set before use.
    pub fn new(folds: usize, pairs: usize) -> Result<Self> {
        if folds < 2 {
            return Err(LdcError::InvalidDimension(format!(
                "need M >= 2 folds, got {folds}"
            )));
        }
        if pairs == 0 {
            return Err(LdcError::InvalidDimension("need D >= 1 pairs".into()));
        }
        Ok(Self {
            folds,
            pairs,
            valid: vec![vec![true; folds]; pairs],
            blocks: vec![None; folds * folds],
        })
    }

    /// Table of a balanced design with condition covariance projection `Ξ`.
    pub fn balanced(xi: &DMatrix<f64>, partitions: usize) -> Result<Self> {
        let d = ensure_square(xi, "xi")?;
        let mut table = Self::new(partitions, d)?;
        let f = |case| -> Result<DMatrix<f64>> {
            let factor = fold_cov_balanced(1.0, partitions, case)?;
            Ok(xi * factor)
        };
        let diag = [
            f(FoldCase::Same)?,
            f(FoldCase::SameComplement)?,
            f(FoldCase::SameComplement)?,
            f(FoldCase::ComplementComplement)?,
        ];
        let off = [
            f(FoldCase::Other)?,
            f(FoldCase::OtherComplement)?,
            f(FoldCase::ComplementOther)?,
            f(FoldCase::ComplementOtherComplement)?,
        ];
        for m in 0..partitions {
            for n in 0..partitions {
                let b = if m == n { diag.clone() } else { off.clone() };
                table.set(m, n, b)?;
            }
        }
        Ok(table)
    }

    pub fn folds(&self) -> usize {
        self.folds
    }

    pub fn pairs(&self) -> usize {
        self.pairs
    }

    pub fn is_valid(&self, pair: usize, fold: usize) -> bool {
        self.valid[pair][fold]
    }

    /// Folds in which pair `j` is estimable.
    pub fn valid_folds(&self, pair: usize) -> Vec<usize> {
        (0..self.folds).filter(|&m| self.valid[pair][m]).collect()
    }

    pub fn set_valid(&mut self, pair: usize, fold: usize, valid: bool) {
        self.valid[pair][fold] = valid;
    }

    /// Stores `[Ξ^{mn}, Ξ^{m∼n}, Ξ^{∼mn}, Ξ^{∼m∼n}]` for fold pair `(m, n)`.
    pub fn set(&mut self, m: usize, n: usize, blocks: [DMatrix<f64>; 4]) -> Result<()> {
        if m >= self.folds || n >= self.folds {
            return Err(LdcError::InvalidArgument(format!(
                "fold pair ({m}, {n}) outside 0..{}",
                self.folds
            )));
        }
        for b in &blocks {
            if b.nrows() != self.pairs || b.ncols() != self.pairs {
                return Err(LdcError::DimensionMismatch {
                    what: "fold covariance block",
                    expected: self.pairs,
                    got: if b.nrows() != self.pairs { b.nrows() } else { b.ncols() },
                });
            }
        }
        self.blocks[m * self.folds + n] = Some(blocks);
        Ok(())
    }

    pub fn get(&self, m: usize, n: usize) -> Option<&[DMatrix<f64>; 4]> {
        self.blocks.get(m * self.folds + n).and_then(|b| b.as_ref())
    }

    /// Single entry `Ξ^{A,B}_{i,j}` for the given case and folds.
    pub fn entry(&self, case: FoldCase, m: usize, n: usize, i: usize, j: usize) -> Result<f64> {
        let same = matches!(
            case,
            FoldCase::Same | FoldCase::SameComplement | FoldCase::ComplementComplement
        );
        if same != (m == n) {
            return Err(LdcError::InvalidArgument(format!(
                "case {case} requires {} folds",
                if same { "equal" } else { "distinct" }
            )));
        }
        let b = self
            .get(m, n)
            .ok_or_else(|| LdcError::IncompleteTable(format!("fold pair ({m}, {n}) missing")))?;
        let slot = match case {
            FoldCase::Same | FoldCase::Other => 0,
            FoldCase::SameComplement | FoldCase::OtherComplement => 1,
            FoldCase::ComplementOther => 2,
            FoldCase::ComplementComplement | FoldCase::ComplementOtherComplement => 3,
        };
        Ok(b[slot][(i, j)])
    }

    fn check_complete(&self) -> Result<()> {
        for m in 0..self.folds {
            for n in 0..self.folds {
                if self.get(m, n).is_none() {
                    return Err(LdcError::IncompleteTable(format!(
                        "fold pair ({m}, {n}) missing"
                    )));
                }
            }
        }
        for j in 0..self.pairs {
            if !self.valid[j].iter().any(|&v| v) {
                return Err(LdcError::IncompleteTable(format!("pair {j} has no valid fold")));
            }
        }
        Ok(())
    }
}

/// `S_ij = Σ_{m∈F_i} Σ_{n∈F_j} (Ξ^{mn} + Ξ^{m∼n} + Ξ^{∼mn} + Ξ^{∼m∼n})_{ij} / (|F_i||F_j|)`
/// and `N_ij = Σ Σ (Ξ^{mn}Ξ^{∼m∼n} + Ξ^{m∼n}Ξ^{∼mn})_{ij} / (|F_i||F_j|)`.
pub fn fold_sums(table: &FoldCovTable) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    table.check_complete()?;
    let d = table.pairs();
    let folds: Vec<Vec<usize>> = (0..d).map(|j| table.valid_folds(j)).collect();
    let mut s = DMatrix::zeros(d, d);
    let mut nn = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let mut s_acc = 0.0;
            let mut n_acc = 0.0;
            for &m in &folds[i] {
                for &n in &folds[j] {
                    let [a, b, c, e] = table.get(m, n).expect("checked complete");
                    let (a, b, c, e) = (a[(i, j)], b[(i, j)], c[(i, j)], e[(i, j)]);
                    s_acc += a + b + c + e;
                    n_acc += a * e + b * c;
                }
            }
            let norm = (folds[i].len() * folds[j].len()) as f64;
            s[(i, j)] = s_acc / norm;
            nn[(i, j)] = n_acc / norm;
        }
    }
    Ok((s, nn))
}

/// `V_ij = tr(Σ_RΣ_R)/P² · (Δ_ij S_ij + N_ij)`.
pub fn predict_v_general(
    delta: &DMatrix<f64>,
    table: &FoldCovTable,
    trace_rr: f64,
    voxels: usize,
) -> Result<CovPrediction> {
    let d = table.pairs();
    if delta.nrows() != d || delta.ncols() != d {
        return Err(LdcError::DimensionMismatch {
            what: "delta vs fold table",
            expected: d,
            got: delta.nrows(),
        });
    }
    if voxels == 0 {
        return Err(LdcError::InvalidDimension("need P >= 1".into()));
    }
    let (s, n) = fold_sums(table)?;
    let scale = trace_rr / (voxels as f64 * voxels as f64);
    let v = symmetrize(&((delta.component_mul(&s) + n) * scale));
    let xi = match table.get(0, 0) {
        Some(b) => b[0].clone(),
        None => DMatrix::zeros(d, d),
    };
    Ok(CovPrediction {
        v,
        delta: delta.clone(),
        xi,
        trace_rr,
        partitions: table.folds(),
        voxels,
    })
}

/// One run (partition) of a general design: its design matrix with global
/// condition ids and temporal covariance.
#[derive(Debug, Clone)]
pub struct RunBlock {
    design: DesignMatrix,
    chol: DMatrix<f64>,
    whitened: DMatrix<f64>,
}

impl RunBlock {
    pub fn new(design: DesignMatrix, sigma_t: &DMatrix<f64>) -> Result<Self> {
        let t = ensure_square(sigma_t, "temporal covariance")?;
        if t != design.time_points() {
            return Err(LdcError::DimensionMismatch {
                what: "temporal covariance vs design rows",
                expected: design.time_points(),
                got: t,
            });
        }
        let chol = cholesky_lower(sigma_t, "temporal covariance")?;
        let whitened = chol
            .solve_lower_triangular(design.matrix())
            .ok_or_else(|| LdcError::NotPositiveDefinite("temporal covariance".into()))?;
        Ok(Self {
            design,
            chol,
            whitened,
        })
    }

    pub fn design(&self) -> &DesignMatrix {
        &self.design
    }

    pub fn has_condition(&self, id: usize) -> bool {
        self.design.condition_ids().contains(&id)
    }

    fn whiten_data(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if y.nrows() != self.design.time_points() {
            return Err(LdcError::DimensionMismatch {
                what: "data rows vs design rows",
                expected: self.design.time_points(),
                got: y.nrows(),
            });
        }
        self.chol
            .solve_lower_triangular(y)
            .ok_or_else(|| LdcError::NotPositiveDefinite("temporal covariance".into()))
    }
}

/// Joint GLS model of a set of runs: condition regressors shared across runs,
/// nuisance regressors separate per run, runs independent.
#[derive(Debug, Clone)]
pub struct RunSet {
    runs: Vec<usize>,
    conditions: Vec<usize>,
    nuisance_offsets: Vec<usize>,
    params: usize,
    h_inv: DMatrix<f64>,
}

impl RunSet {
    pub fn new(blocks: &[RunBlock], runs: &[usize]) -> Result<Self> {
        if runs.is_empty() {
            return Err(LdcError::InvalidArgument("empty run set".into()));
        }
        let mut runs = runs.to_vec();
        runs.sort_unstable();
        runs.dedup();
        if let Some(&r) = runs.iter().find(|&&r| r >= blocks.len()) {
            return Err(LdcError::InvalidArgument(format!("run {r} does not exist")));
        }
        let mut conditions: Vec<usize> = runs
            .iter()
            .flat_map(|&r| blocks[r].design.condition_ids().iter().copied())
            .collect();
        conditions.sort_unstable();
        conditions.dedup();
        let mut nuisance_offsets = Vec::with_capacity(runs.len());
        let mut params = conditions.len();
        for &r in &runs {
            nuisance_offsets.push(params);
            params += blocks[r].design.nuisance();
        }
        let mut set = Self {
            runs,
            conditions,
            nuisance_offsets,
            params,
            h_inv: DMatrix::zeros(0, 0),
        };
        let mut h = DMatrix::zeros(params, params);
        for (slot, &r) in set.runs.iter().enumerate() {
            let e = set.embed(&blocks[r], slot);
            h += e.transpose() * &e;
        }
        let chol = symmetrize(&h).cholesky().ok_or_else(|| {
            LdcError::RankDeficient(format!("joint design of runs {:?} is singular", set.runs))
        })?;
        set.h_inv = chol.inverse();
        Ok(set)
    }

    pub fn runs(&self) -> &[usize] {
        &self.runs
    }

    /// Global ids of the conditions estimable from this set.
    pub fn conditions(&self) -> &[usize] {
        &self.conditions
    }

    /// Whitened design of run `runs[slot]` laid out in this set's parameters.
    fn embed(&self, block: &RunBlock, slot: usize) -> DMatrix<f64> {
        let w = &block.whitened;
        let mut out = DMatrix::zeros(w.nrows(), self.params);
        for (col, id) in block.design.condition_ids().iter().enumerate() {
            let target = self.conditions.binary_search(id).expect("condition in set");
            out.column_mut(target).copy_from(&w.column(col));
        }
        let k = block.design.conditions();
        for q in 0..block.design.nuisance() {
            out.column_mut(self.nuisance_offsets[slot] + q)
                .copy_from(&w.column(k + q));
        }
        out
    }

    /// `K x P` condition estimates from the runs in this set; rows of
    /// conditions absent from the set are zero.
    pub fn estimate(&self, blocks: &[RunBlock], data: &[DMatrix<f64>], k: usize) -> Result<DMatrix<f64>> {
        let p = data.first().map(|y| y.ncols()).unwrap_or(0);
        let mut rhs = DMatrix::zeros(self.params, p);
        for (slot, &r) in self.runs.iter().enumerate() {
            let y = data
                .get(r)
                .ok_or_else(|| LdcError::InvalidArgument(format!("no data for run {r}")))?;
            if y.ncols() != p {
                return Err(LdcError::DimensionMismatch {
                    what: "voxels per run",
                    expected: p,
                    got: y.ncols(),
                });
            }
            rhs += self.embed(&blocks[r], slot).transpose() * blocks[r].whiten_data(y)?;
        }
        let beta = &self.h_inv * rhs;
        let mut out = DMatrix::zeros(k, p);
        for (row, &id) in self.conditions.iter().enumerate() {
            out.row_mut(id).copy_from(&beta.row(row));
        }
        Ok(out)
    }
}

/// Per-voxel `K x K` covariance between the condition estimates of two run
/// sets: `H_A⁻¹ (Σ_{r∈A∩B} X_{A,r}ᵀ Σ_r⁻¹ X_{B,r}) H_B⁻¹`, restricted to
/// condition rows and placed at global ids (zero where absent).
pub fn between_set_cov(blocks: &[RunBlock], a: &RunSet, b: &RunSet, k: usize) -> DMatrix<f64> {
    let mut cross = DMatrix::zeros(a.params, b.params);
    for (sa, &r) in a.runs.iter().enumerate() {
        if let Ok(sb) = b.runs.binary_search(&r) {
            cross += a.embed(&blocks[r], sa).transpose() * b.embed(&blocks[r], sb);
        }
    }
    let full = &a.h_inv * cross * &b.h_inv;
    let mut out = DMatrix::zeros(k, k);
    for (ra, &ia) in a.conditions.iter().enumerate() {
        for (rb, &ib) in b.conditions.iter().enumerate() {
            out[(ia, ib)] = full[(ra, rb)];
        }
    }
    out
}

/// `Ξ^{AB}_{ij} = c_i Cov(B̂_A, B̂_B) c_jᵀ` for contrast rows over all `K`
/// conditions and run sets `A`, `B`.
pub fn xi_from_design(
    blocks: &[RunBlock],
    set_a: &[usize],
    set_b: &[usize],
    c_i: &DVector<f64>,
    c_j: &DVector<f64>,
) -> Result<f64> {
    let k = c_i.len();
    if c_j.len() != k {
        return Err(LdcError::DimensionMismatch {
            what: "contrast lengths",
            expected: k,
            got: c_j.len(),
        });
    }
    let a = RunSet::new(blocks, set_a)?;
    let b = RunSet::new(blocks, set_b)?;
    for (set, c) in [(&a, c_i), (&b, c_j)] {
        for (id, w) in c.iter().enumerate() {
            if *w != 0.0 && set.conditions.binary_search(&id).is_err() {
                return Err(LdcError::RankDeficient(format!(
                    "condition {id} not estimable from runs {:?}",
                    set.runs
                )));
            }
        }
    }
    let cov = between_set_cov(blocks, &a, &b, k);
    Ok(c_i.dot(&(cov * c_j)))
}

/// Leave-one-run-out fold structure of a general design.
#[derive(Debug, Clone)]
pub struct FoldDesign {
    conditions: usize,
    blocks: Vec<RunBlock>,
    singles: Vec<RunSet>,
    complements: Vec<RunSet>,
}

impl FoldDesign {
    pub fn new(blocks: Vec<RunBlock>, conditions: usize) -> Result<Self> {
        let m = blocks.len();
        if m < 2 {
            return Err(LdcError::InvalidDimension(format!(
                "need M >= 2 runs, got {m}"
            )));
        }
        for (r, b) in blocks.iter().enumerate() {
            if let Some(&id) = b.design.condition_ids().iter().find(|&&id| id >= conditions) {
                return Err(LdcError::InvalidArgument(format!(
                    "run {r} has condition id {id} but K = {conditions}"
                )));
            }
        }
        let mut singles = Vec::with_capacity(m);
        let mut complements = Vec::with_capacity(m);
        for r in 0..m {
            singles.push(RunSet::new(&blocks, &[r])?);
            let rest: Vec<usize> = (0..m).filter(|&x| x != r).collect();
            let comp = RunSet::new(&blocks, &rest)?;
            if comp.conditions.len() != conditions {
                return Err(LdcError::IncompleteTable(format!(
                    "some condition is only present in run {r}"
                )));
            }
            complements.push(comp);
        }
        Ok(Self {
            conditions,
            blocks,
            singles,
            complements,
        })
    }

    pub fn runs(&self) -> usize {
        self.blocks.len()
    }

    pub fn conditions(&self) -> usize {
        self.conditions
    }

    pub fn blocks(&self) -> &[RunBlock] {
        &self.blocks
    }

    /// Pair `(a, b)` is estimable in fold `m` when run `m` contains both.
    pub fn pair_valid(&self, fold: usize, a: usize, b: usize) -> bool {
        self.blocks[fold].has_condition(a) && self.blocks[fold].has_condition(b)
    }

    /// Estimates `(B̂_m, B̂_∼m)` for fold `m`.
    pub fn fold_estimates(&self, data: &[DMatrix<f64>], fold: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        Ok((
            self.singles[fold].estimate(&self.blocks, data, self.conditions)?,
            self.complements[fold].estimate(&self.blocks, data, self.conditions)?,
        ))
    }

    /// `d̂_j = Σ_{m∈F_j} δ̂_{j,m} δ̂_{j,∼m}ᵀ / (|F_j| P)`, with `δ̂_{j,∼m}` the
    /// joint GLS estimate from all runs except `m`. The optional whitener
    /// right-multiplies all estimates.
    pub fn distances(
        &self,
        data: &[DMatrix<f64>],
        whitener: Option<&DMatrix<f64>>,
    ) -> Result<DistanceVector> {
        if data.len() != self.runs() {
            return Err(LdcError::DimensionMismatch {
                what: "data runs vs design runs",
                expected: self.runs(),
                got: data.len(),
            });
        }
        let c = ContrastMatrix::new(self.conditions)?;
        let p = data[0].ncols();
        let mut sums = vec![0.0; c.pairs()];
        let mut counts = vec![0usize; c.pairs()];
        for fold in 0..self.runs() {
            let (mut own, mut rest) = self.fold_estimates(data, fold)?;
            if let Some(w) = whitener {
                own = prewhiten_patterns(&own, w)?;
                rest = prewhiten_patterns(&rest, w)?;
            }
            for (j, &(a, b)) in c.pair_list().iter().enumerate() {
                if self.pair_valid(fold, a, b) {
                    let da = own.row(a) - own.row(b);
                    let db = rest.row(a) - rest.row(b);
                    sums[j] += da.dot(&db);
                    counts[j] += 1;
                }
            }
        }
        let values = sums
            .iter()
            .zip(&counts)
            .map(|(s, &n)| s / (n * p) as f64)
            .collect::<Vec<_>>();
        DistanceVector::from_slice(&values)
    }

    /// Fold covariance table with `Ξ^{A,B} = C Cov(B̂_A, B̂_B) Cᵀ`.
    pub fn fold_table(&self) -> Result<FoldCovTable> {
        let k = self.conditions;
        let c = ContrastMatrix::new(k)?;
        let cm = c.matrix();
        let m = self.runs();
        let mut table = FoldCovTable::new(m, c.pairs())?;
        for (j, &(a, b)) in c.pair_list().iter().enumerate() {
            for fold in 0..m {
                table.set_valid(j, fold, self.pair_valid(fold, a, b));
            }
        }
        let project = |x: &RunSet, y: &RunSet| cm * between_set_cov(&self.blocks, x, y, k) * cm.transpose();
        for f in 0..m {
            for g in 0..m {
                let blocks = [
                    project(&self.singles[f], &self.singles[g]),
                    project(&self.singles[f], &self.complements[g]),
                    project(&self.complements[f], &self.singles[g]),
                    project(&self.complements[f], &self.complements[g]),
                ];
                table.set(f, g, blocks)?;
            }
        }
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crossnobis::predict_v_balanced;
    use crate::crossnobis::ConditionCov;

    fn random_xi(k: usize, seed: u64) -> DMatrix<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
        ConditionCov::new(&a * a.transpose() + DMatrix::identity(k, k) * 0.1)
            .unwrap()
            .xi
    }

    #[test]
    fn balanced_case_values() {
        assert_eq!(fold_cov_balanced(2.0, 3, FoldCase::ComplementComplement).unwrap(), 1.0);
        for m in 2..9 {
            assert_eq!(fold_cov_balanced(1.7, m, FoldCase::SameComplement).unwrap(), 0.0);
        }
        assert_eq!(fold_cov_balanced(16.0, 5, FoldCase::ComplementOtherComplement).unwrap(), 3.0);
        assert_eq!(fold_cov_balanced(1.0, 2, FoldCase::ComplementOtherComplement).unwrap(), 0.0);
        assert!(fold_cov_balanced(1.0, 1, FoldCase::Same).is_err());
    }

    #[test]
    fn case_tags_round_trip() {
        for c in FoldCase::ALL {
            assert_eq!(c.tag().parse::<FoldCase>().unwrap(), c);
        }
        assert_eq!("∼m∼n".parse::<FoldCase>().unwrap(), FoldCase::ComplementOtherComplement);
        assert!("mm~".parse::<FoldCase>().is_err());
    }

    #[test]
    fn balanced_sums_match_closed_form() {
        for m in 2..=8 {
            let xi = random_xi(4, m as u64);
            let (s, n) = fold_sums(&FoldCovTable::balanced(&xi, m).unwrap()).unwrap();
            let mf = m as f64;
            let s_ref = &xi * (4.0 / mf);
            let n_ref = xi.component_mul(&xi) * (2.0 / (mf * (mf - 1.0)));
            assert!((s - s_ref).amax() < 1e-12, "M={m}");
            assert!((n - n_ref).amax() < 1e-12, "M={m}");
        }
    }

    #[test]
    fn two_partitions() {
        let xi = random_xi(3, 9);
        let (s, n) = fold_sums(&FoldCovTable::balanced(&xi, 2).unwrap()).unwrap();
        assert!((s - &xi * 2.0).amax() < 1e-12);
        assert!((n - xi.component_mul(&xi)).amax() < 1e-12);
    }

    #[test]
    fn general_equals_balanced() {
        let xi = random_xi(4, 3);
        let delta = random_xi(4, 4);
        let table = FoldCovTable::balanced(&xi, 5).unwrap();
        let g = predict_v_general(&delta, &table, 12.5, 20).unwrap();
        let b = predict_v_balanced(&delta, &xi, 12.5, 5, 20).unwrap();
        assert!((g.v - b.v).amax() < 1e-10);
        let zero = predict_v_general(&DMatrix::zeros(6, 6), &table, 12.5, 20).unwrap();
        let (_, n) = fold_sums(&table).unwrap();
        assert!((zero.v - n * (12.5 / 400.0)).amax() < 1e-15);
    }

    #[test]
    fn incomplete_table_rejected() {
        let mut t = FoldCovTable::new(3, 1).unwrap();
        assert!(matches!(fold_sums(&t), Err(LdcError::IncompleteTable(_))));
        let z = DMatrix::zeros(1, 1);
        for m in 0..3 {
            for n in 0..3 {
                t.set(m, n, [z.clone(), z.clone(), z.clone(), z.clone()]).unwrap();
            }
        }
        assert!(fold_sums(&t).is_ok());
        for m in 0..3 {
            t.set_valid(0, m, false);
        }
        assert!(matches!(fold_sums(&t), Err(LdcError::IncompleteTable(_))));
    }

    fn identity_block(x: DMatrix<f64>, k: usize) -> RunBlock {
        let t = x.nrows();
        RunBlock::new(DesignMatrix::new(x, k, 1.0).unwrap(), &DMatrix::identity(t, t)).unwrap()
    }

    #[test]
    fn orthonormal_design_gives_contrast_product() {
        // X with orthonormal columns (no nuisance), Σ_T = I: Ξ = c_i c_jᵀ.
        let t = 6;
        let mut x = DMatrix::zeros(t, 3);
        x[(0, 0)] = 1.0;
        x[(1, 1)] = 1.0;
        x[(2, 2)] = 1.0;
        let blocks = vec![identity_block(x, 3)];
        let ci = DVector::from_vec(vec![1.0, -1.0, 0.0]);
        let cj = DVector::from_vec(vec![0.0, 1.0, -1.0]);
        let v = xi_from_design(&blocks, &[0], &[0], &ci, &cj).unwrap();
        assert!((v - ci.dot(&cj)).abs() < 1e-14);
    }

    #[test]
    fn disjoint_runs_uncorrelated() {
        let x = DMatrix::from_fn(8, 2, |t, c| if t % 2 == c { 1.0 } else { 0.0 });
        let blocks = vec![identity_block(x.clone(), 2), identity_block(x, 2)];
        let c = DVector::from_vec(vec![1.0, -1.0]);
        assert_eq!(xi_from_design(&blocks, &[0], &[1], &c, &c).unwrap(), 0.0);
        assert!(xi_from_design(&blocks, &[0], &[0, 1], &c, &c).unwrap() > 0.0);
    }

    #[test]
    fn identical_runs_reduce_to_balanced_table() {
        // Equal designs and noise per run: joint GLS of the complement equals
        // the mean of single-run estimates, so the table is the balanced one.
        let t = 20;
        let m = 4;
        let x = DMatrix::from_fn(t, 4, |r, c| match c {
            3 => 1.0,
            _ => ((r * (c + 2)) % 7) as f64 / 7.0,
        });
        let blocks: Vec<_> = (0..m)
            .map(|_| {
                RunBlock::new(
                    DesignMatrix::new(x.clone(), 3, 2.0).unwrap(),
                    &crate::glm::temporal_cov(&crate::glm::TemporalCovSpec::fmri_default(), t).unwrap(),
                )
                .unwrap()
            })
            .collect();
        let fd = FoldDesign::new(blocks, 3).unwrap();
        let table = fd.fold_table().unwrap();
        let xi = table.get(0, 0).unwrap()[0].clone();
        let balanced = FoldCovTable::balanced(&xi, m).unwrap();
        for f in 0..m {
            for g in 0..m {
                let (a, b) = (table.get(f, g).unwrap(), balanced.get(f, g).unwrap());
                for s in 0..4 {
                    assert!((&a[s] - &b[s]).amax() < 1e-10 * xi.amax(), "({f},{g}) slot {s}");
                }
            }
        }
    }

    #[test]
    fn missing_condition_marks_fold_invalid() {
        let t = 12;
        let x = DMatrix::from_fn(t, 4, |r, c| if c == 3 { 1.0 } else { ((r * (c + 1) + c) as f64).sin() });
        let full = DesignMatrix::new(x, 3, 1.0).unwrap();
        let eye = DMatrix::identity(t, t);
        let blocks = vec![
            RunBlock::new(full.drop_condition(2).unwrap(), &eye).unwrap(),
            RunBlock::new(full.clone(), &eye).unwrap(),
            RunBlock::new(full, &eye).unwrap(),
        ];
        let fd = FoldDesign::new(blocks, 3).unwrap();
        let table = fd.fold_table().unwrap();
        let c = ContrastMatrix::new(3).unwrap();
        assert!(table.is_valid(c.index_of(0, 1).unwrap(), 0));
        assert!(!table.is_valid(c.index_of(0, 2).unwrap(), 0));
        assert!(!table.is_valid(c.index_of(1, 2).unwrap(), 0));
        assert_eq!(table.valid_folds(c.index_of(1, 2).unwrap()), vec![1, 2]);
        assert!(fold_sums(&table).is_ok());
    }

    #[test]
    fn condition_only_in_one_run_rejected() {
        let t = 12;
        let x = DMatrix::from_fn(t, 3, |r, c| if c == 2 { 1.0 } else { ((r * (c + 1) + c) as f64).sin() });
        let full = DesignMatrix::new(x, 2, 1.0).unwrap();
        let eye = DMatrix::identity(t, t);
        let blocks = vec![
            RunBlock::new(full.clone(), &eye).unwrap(),
            RunBlock::new(full.drop_condition(1).unwrap(), &eye).unwrap(),
        ];
        assert!(matches!(FoldDesign::new(blocks, 2), Err(LdcError::IncompleteTable(_))));
    }
}
