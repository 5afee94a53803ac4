//! First-level design matrices and generalized-least-squares activity
//! estimates for a single partition (imaging run).

use nalgebra::DMatrix;
use statrs::function::gamma::ln_gamma;

use crate::error::{LdcError, Result};
use crate::linalg::{cholesky_lower, ensure_square};

/// Fine-grid oversampling factor used when convolving boxcars with the HRF.
pub const OVERSAMPLING: usize = 16;

/// Difference-of-gammas hemodynamic response.
///
/// Each gamma density has shape `delay / dispersion` and scale `dispersion`,
/// the usual canonical parametrisation. The response is normalised to a peak
/// of one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HrfParams {
    pub response_delay: f64,
    pub undershoot_delay: f64,
    pub response_dispersion: f64,
    pub undershoot_dispersion: f64,
    pub undershoot_ratio: f64,
    pub length: f64,
}

impl Default for HrfParams {
    fn default() -> Self {
        Self {
            response_delay: 6.0,
            undershoot_delay: 16.0,
            response_dispersion: 1.0,
            undershoot_dispersion: 1.0,
            undershoot_ratio: 1.0 / 6.0,
            length: 32.0,
        }
    }
}

fn gamma_pdf(t: f64, shape: f64, scale: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    ((shape - 1.0) * t.ln() - t / scale - ln_gamma(shape) - shape * scale.ln()).exp()
}

impl HrfParams {
    fn raw(&self, t: f64) -> f64 {
        gamma_pdf(
            t,
            self.response_delay / self.response_dispersion,
            self.response_dispersion,
        ) - self.undershoot_ratio
            * gamma_pdf(
                t,
                self.undershoot_delay / self.undershoot_dispersion,
                self.undershoot_dispersion,
            )
    }

    /// Kernel sampled every `step` seconds over `[0, length)`, peak-normalised.
    pub fn sample(&self, step: f64) -> Vec<f64> {
        let n = (self.length / step).ceil().max(1.0) as usize;
        let mut h: Vec<f64> = (0..n).map(|i| self.raw(i as f64 * step)).collect();
        let peak = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if peak > 0.0 {
            for v in &mut h {
                *v /= peak;
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Hrf {
    Canonical(HrfParams),
    /// Delta response: columns are the boxcars themselves.
    Identity,
}

impl Default for Hrf {
    fn default() -> Self {
        Hrf::Canonical(HrfParams::default())
    }
}

/// One presentation of a condition, in seconds from run start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trial {
    pub onset: f64,
    pub duration: f64,
}

impl Trial {
    pub fn new(onset: f64, duration: f64) -> Self {
        Self { onset, duration }
    }
}

/// `T x (K + Q)` design: condition regressors first, nuisance columns last.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    entries: DMatrix<f64>,
    condition_ids: Vec<usize>,
    nuisance: usize,
    sampling_interval: f64,
}

impl DesignMatrix {
    /// Wraps an existing matrix whose first `conditions` columns are regressors
    /// of interest (global ids `0..conditions`).
    pub fn new(entries: DMatrix<f64>, conditions: usize, sampling_interval: f64) -> Result<Self> {
        if conditions == 0 || conditions > entries.ncols() {
            return Err(LdcError::InvalidDimension(format!(
                "{conditions} condition columns in a design with {} columns",
                entries.ncols()
            )));
        }
        let nuisance = entries.ncols() - conditions;
        Ok(Self {
            entries,
            condition_ids: (0..conditions).collect(),
            nuisance,
            sampling_interval,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn time_points(&self) -> usize {
        self.entries.nrows()
    }

    /// Number of condition columns present in this design.
    pub fn conditions(&self) -> usize {
        self.condition_ids.len()
    }

    /// Global condition index of each condition column.
    pub fn condition_ids(&self) -> &[usize] {
        &self.condition_ids
    }

    pub fn nuisance(&self) -> usize {
        self.nuisance
    }

    pub fn sampling_interval(&self) -> f64 {
        self.sampling_interval
    }

    /// Residual degrees of freedom `T - K - Q`.
    pub fn dof(&self) -> isize {
        self.entries.nrows() as isize - self.entries.ncols() as isize
    }

    /// Copy with the regressor for global condition `id` removed, as happens
    /// when a condition is absent from a run.
    pub fn drop_condition(&self, id: usize) -> Result<Self> {
        let col = self
            .condition_ids
            .iter()
            .position(|&c| c == id)
            .ok_or_else(|| LdcError::InvalidArgument(format!("condition {id} not in design")))?;
        if self.condition_ids.len() == 1 {
            return Err(LdcError::InvalidArgument("cannot drop the last condition".into()));
        }
        let mut condition_ids = self.condition_ids.clone();
        condition_ids.remove(col);
        Ok(Self {
            entries: self.entries.clone().remove_column(col),
            condition_ids,
            nuisance: self.nuisance,
            sampling_interval: self.sampling_interval,
        })
    }
}

/// Builds one boxcar-convolved regressor per condition plus an intercept.
pub fn build_design(
    conditions: &[Vec<Trial>],
    time_points: usize,
    dt: f64,
    hrf: &Hrf,
) -> Result<DesignMatrix> {
    if conditions.is_empty() {
        return Err(LdcError::InvalidArgument("no conditions".into()));
    }
    if time_points == 0 || !(dt > 0.0) {
        return Err(LdcError::InvalidArgument(format!(
            "need T > 0 and dt > 0 (got T={time_points}, dt={dt})"
        )));
    }
    let run_end = time_points as f64 * dt;
    let fine_step = dt / OVERSAMPLING as f64;
    let n_fine = time_points * OVERSAMPLING;
    let kernel = match hrf {
        Hrf::Canonical(params) => Some(params.sample(fine_step)),
        Hrf::Identity => None,
    };

    let k = conditions.len();
    let mut x = DMatrix::zeros(time_points, k + 1);
    for (c, trials) in conditions.iter().enumerate() {
        if trials.is_empty() {
            return Err(LdcError::InvalidArgument(format!("condition {c} has no trials")));
        }
        let mut boxcar = vec![0.0; n_fine];
        for trial in trials {
            if !(trial.onset >= 0.0 && trial.onset < run_end) {
                return Err(LdcError::InvalidArgument(format!(
                    "onset {} s of condition {c} outside run [0, {run_end})",
                    trial.onset
                )));
            }
            if !(trial.duration >= 0.0) {
                return Err(LdcError::InvalidArgument(format!(
                    "negative duration {} for condition {c}",
                    trial.duration
                )));
            }
            let start = (trial.onset / fine_step).ceil() as usize;
            let stop = (((trial.onset + trial.duration) / fine_step).ceil() as usize).min(n_fine);
            for v in &mut boxcar[start.min(n_fine)..stop] {
                *v = 1.0;
            }
        }
        let signal = match &kernel {
            Some(h) => convolve_causal(&boxcar, h, fine_step),
            None => boxcar,
        };
        for t in 0..time_points {
            x[(t, c)] = signal[t * OVERSAMPLING];
        }
        if x.column(c).iter().all(|v| *v == 0.0) {
            return Err(LdcError::RankDeficient(format!(
                "regressor for condition {c} is identically zero"
            )));
        }
    }
    x.column_mut(k).fill(1.0);
    let mut design = DesignMatrix::new(x, k, dt)?;
    design.nuisance = 1;
    Ok(design)
}

fn convolve_causal(signal: &[f64], kernel: &[f64], step: f64) -> Vec<f64> {
    let n = signal.len();
    let mut out = vec![0.0; n];
    for (i, &s) in signal.iter().enumerate() {
        if s == 0.0 {
            continue;
        }
        for (lag, &h) in kernel.iter().enumerate() {
            if i + lag >= n {
                break;
            }
            out[i + lag] += s * h * step;
        }
    }
    out
}

/// Temporal noise covariance model for one run.
#[derive(Debug, Clone, PartialEq)]
pub enum TemporalCovSpec {
    Identity,
    /// `r(τ) = a·exp(-τ/w1) + (1-a)·exp(-τ/w2)`, τ in samples.
    DoubleExponential { w1: f64, w2: f64, a: f64 },
    Explicit(DMatrix<f64>),
}

impl TemporalCovSpec {
    /// Kernel fitted to typical fMRI autocorrelation: `0.5 e^{-τ} + 0.5 e^{-τ/40}`.
    pub fn fmri_default() -> Self {
        TemporalCovSpec::DoubleExponential { w1: 1.0, w2: 40.0, a: 0.5 }
    }
}

/// Autocorrelation at lag `tau` (in samples) for a double-exponential kernel.
pub fn double_exponential(tau: f64, w1: f64, w2: f64, a: f64) -> f64 {
    a * (-tau / w1).exp() + (1.0 - a) * (-tau / w2).exp()
}

pub fn temporal_cov(spec: &TemporalCovSpec, time_points: usize) -> Result<DMatrix<f64>> {
    if time_points == 0 {
        return Err(LdcError::InvalidDimension("temporal covariance needs T >= 1".into()));
    }
    match spec {
        TemporalCovSpec::Identity => Ok(DMatrix::identity(time_points, time_points)),
        TemporalCovSpec::DoubleExponential { w1, w2, a } => {
            if !(*w1 > 0.0 && *w2 > 0.0 && (0.0..=1.0).contains(a)) {
                return Err(LdcError::InvalidArgument(format!(
                    "double exponential needs w1, w2 > 0 and a in [0,1] (got {w1}, {w2}, {a})"
                )));
            }
            Ok(DMatrix::from_fn(time_points, time_points, |i, j| {
                double_exponential(i.abs_diff(j) as f64, *w1, *w2, *a)
            }))
        }
        TemporalCovSpec::Explicit(m) => {
            let n = ensure_square(m, "explicit temporal covariance")?;
            if n != time_points {
                return Err(LdcError::DimensionMismatch {
                    what: "explicit temporal covariance size",
                    expected: time_points,
                    got: n,
                });
            }
            if crate::linalg::asymmetry(m) > 1e-12 * m.amax().max(1.0) {
                return Err(LdcError::NotPositiveDefinite(
                    "explicit temporal covariance is not symmetric".into(),
                ));
            }
            cholesky_lower(m, "explicit temporal covariance")?;
            Ok(m.clone())
        }
    }
}

/// GLS estimates and residuals for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct GlmFit {
    /// `(K+Q) x P`; condition rows first.
    pub betas: DMatrix<f64>,
    /// `T x P`, `Y - X·betas`.
    pub residuals: DMatrix<f64>,
    pub dof: usize,
}

impl GlmFit {
    /// Rows of `betas` belonging to condition regressors.
    pub fn condition_betas(&self, conditions: usize) -> DMatrix<f64> {
        self.betas.rows(0, conditions).into_owned()
    }
}

/// Precomputed GLS estimator `(XᵀΣ⁻¹X)⁻¹XᵀΣ⁻¹` for a fixed design and
/// temporal covariance, so many data sets can be fitted cheaply.
#[derive(Debug, Clone)]
pub struct GlsProjector {
    design: DMatrix<f64>,
    projector: DMatrix<f64>,
    dof: usize,
}

impl GlsProjector {
    pub fn new(design: &DesignMatrix, sigma_t: &DMatrix<f64>) -> Result<Self> {
        let x = design.matrix();
        let t = x.nrows();
        let n = ensure_square(sigma_t, "temporal covariance")?;
        if n != t {
            return Err(LdcError::DimensionMismatch {
                what: "temporal covariance vs design rows",
                expected: t,
                got: n,
            });
        }
        if design.dof() <= 0 {
            return Err(LdcError::RankDeficient(format!(
                "design has {} columns for {t} time points",
                x.ncols()
            )));
        }
        let l = cholesky_lower(sigma_t, "temporal covariance")?;
        let xw = l
            .solve_lower_triangular(x)
            .ok_or_else(|| LdcError::NotPositiveDefinite("temporal covariance".into()))?;
        let qr = xw.qr();
        let r = qr.r();
        let rmax = r.diagonal().amax();
        for i in 0..r.nrows() {
            if !(r[(i, i)].abs() > 1e-10 * rmax) {
                return Err(LdcError::RankDeficient(format!(
                    "column {i} is (nearly) collinear with the others"
                )));
            }
        }
        let q = qr.q();
        // G = R⁻¹ Qᵀ L⁻¹
        let lt_inv_q = l
            .transpose()
            .solve_upper_triangular(&q)
            .ok_or_else(|| LdcError::NotPositiveDefinite("temporal covariance".into()))?;
        let projector = r
            .solve_upper_triangular(&lt_inv_q.transpose())
            .ok_or_else(|| LdcError::RankDeficient("singular R factor".into()))?;
        Ok(Self {
            design: x.clone(),
            projector,
            dof: design.dof() as usize,
        })
    }

    /// `(K+Q) x T` matrix mapping data to coefficient estimates.
    pub fn projector(&self) -> &DMatrix<f64> {
        &self.projector
    }

    pub fn fit(&self, y: &DMatrix<f64>) -> Result<GlmFit> {
        if y.nrows() != self.design.nrows() {
            return Err(LdcError::DimensionMismatch {
                what: "data rows vs design rows",
                expected: self.design.nrows(),
                got: y.nrows(),
            });
        }
        let betas = &self.projector * y;
        let residuals = y - &self.design * &betas;
        Ok(GlmFit {
            betas,
            residuals,
            dof: self.dof,
        })
    }
}

/// `B̂ = (XᵀΣ_T⁻¹X)⁻¹XᵀΣ_T⁻¹Y` with residuals and degrees of freedom.
pub fn gls_fit(y: &DMatrix<f64>, design: &DesignMatrix, sigma_t: &DMatrix<f64>) -> Result<GlmFit> {
    GlsProjector::new(design, sigma_t)?.fit(y)
}
