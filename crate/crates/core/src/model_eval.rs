//! Comparison of representational models with estimated distances by rank
//! correlation, cosine angle, or the normal-approximation likelihood.

use std::fmt;
use std::str::FromStr;

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::crossnobis::VarianceModel;
use crate::error::{LdcError, Result};
use crate::model::DistanceVector;

pub const IRLS_TOL: f64 = 1e-8;
pub const IRLS_MAX_ITER: usize = 100;
pub const IRLS_MIN_START: f64 = 1e-6;

/// Predicted distances of a model, up to an unknown positive scale.
#[derive(Debug, Clone, PartialEq)]
pub struct RepModel {
    name: String,
    m: DVector<f64>,
}

impl RepModel {
    pub fn new(name: impl Into<String>, m: DVector<f64>) -> Result<Self> {
        if m.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(LdcError::InvalidArgument(
                "model distances must be finite and non-negative".into(),
            ));
        }
        if m.norm() == 0.0 {
            return Err(LdcError::InvalidArgument("model distances are all zero".into()));
        }
        Ok(Self { name: name.into(), m })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.m
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Spearman,
    Cosine,
    LogLik,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Spearman => "spearman",
            Method::Cosine => "cosine",
            Method::LogLik => "loglik",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = LdcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "spearman" => Ok(Method::Spearman),
            "cosine" => Ok(Method::Cosine),
            "loglik" => Ok(Method::LogLik),
            other => Err(LdcError::InvalidArgument(format!("unknown method {other:?}"))),
        }
    }
}

/// Score of one model. For `LogLik`, `value` is the maximized log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelScore {
    pub method: Method,
    pub value: f64,
    /// Maximum-likelihood scale.
    pub s_hat: Option<f64>,
    /// Fixed point of the reweighting iteration alone.
    pub s_irls: Option<f64>,
    /// Reweighting iterations used.
    pub iterations: usize,
    /// Scoring steps used to refine `s_irls` to `s_hat`.
    pub refinement_steps: usize,
    pub converged: bool,
}

impl ModelScore {
    fn plain(method: Method, value: f64) -> Self {
        Self {
            method,
            value,
            s_hat: None,
            s_irls: None,
            iterations: 0,
            refinement_steps: 0,
            converged: true,
        }
    }
}

fn check_lengths(m: &DVector<f64>, d: &DVector<f64>) -> Result<()> {
    if m.len() != d.len() {
        return Err(LdcError::DimensionMismatch {
            what: "model length vs distance count",
            expected: d.len(),
            got: m.len(),
        });
    }
    Ok(())
}

/// `mᵀd̂ / √(mᵀm · d̂ᵀd̂)`.
pub fn cosine_score(m: &DVector<f64>, d_hat: &DVector<f64>) -> Result<f64> {
    check_lengths(m, d_hat)?;
    let nm = m.norm_squared();
    let nd = d_hat.norm_squared();
    if nm == 0.0 || nd == 0.0 {
        return Err(LdcError::UndefinedCorrelation("zero-norm vector".into()));
    }
    Ok((m.dot(d_hat) / (nm * nd).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(LdcError::UndefinedCorrelation("constant input".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation of average ranks.
pub fn spearman_score(m: &DVector<f64>, d_hat: &DVector<f64>) -> Result<f64> {
    check_lengths(m, d_hat)?;
    if m.len() < 2 {
        return Err(LdcError::UndefinedCorrelation("need at least two distances".into()));
    }
    pearson(&average_ranks(m.as_slice()), &average_ranks(d_hat.as_slice()))
}

/// Cholesky factor of `v`, retried once with `1e-10·tr(V)/D` on the diagonal.
fn chol_with_jitter(v: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if let Some(c) = v.clone().cholesky() {
        return Ok(c);
    }
    let d = v.nrows();
    let jitter = 1e-10 * v.trace() / d as f64;
    let mut vj = v.clone();
    for i in 0..d {
        vj[(i, i)] += jitter;
    }
    vj.cholesky()
        .ok_or_else(|| LdcError::NotPositiveDefinite("distance covariance V".into()))
}

/// `log N(d̂; μ, V)`.
pub fn gaussian_log_density(d_hat: &DVector<f64>, mean: &DVector<f64>, v: &DMatrix<f64>) -> Result<f64> {
    let d = d_hat.len();
    let chol = chol_with_jitter(v)?;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let r = d_hat - mean;
    let quad = r.dot(&chol.solve(&r));
    Ok(-0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * logdet - 0.5 * quad)
}

/// Log-likelihood of `d̂` under distances `s·m` with `V` rebuilt from `s·m`.
pub fn log_likelihood(d_hat: &DistanceVector, model: &RepModel, s: f64, var: &VarianceModel) -> Result<f64> {
    check_lengths(model.values(), d_hat.values())?;
    let mean = model.values() * s;
    let v = var.predict(&DistanceVector::new(mean.clone())?)?;
    gaussian_log_density(d_hat.values(), &mean, &v.v)
}

/// `V(s) = s·A + B`, linear in the scale.
struct LinearV {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl LinearV {
    fn new(model: &RepModel, var: &VarianceModel) -> Result<Self> {
        let b = var.predict_null()?.v;
        let a = var.predict(&DistanceVector::new(model.values().clone())?)?.v - &b;
        Ok(Self { a, b })
    }

    fn at(&self, s: f64) -> DMatrix<f64> {
        &self.a * s + &self.b
    }
}

/// Fits the model scale by alternating the GLS update
/// `s = (mᵀV⁻¹m)⁻¹ mᵀV⁻¹d̂` with rebuilding `V(s)`, then refines the fixed
/// point to the likelihood maximum by Fisher scoring (the reweighting fixed
/// point ignores the dependence of `log|V|` on `s`). Scales are kept ≥ 0.
pub fn fit_scale_irls(
    d_hat: &DistanceVector,
    model: &RepModel,
    var: &VarianceModel,
    tol: f64,
    max_iter: usize,
) -> Result<ModelScore> {
    check_lengths(model.values(), d_hat.values())?;
    let lin = LinearV::new(model, var)?;
    fit_linear(d_hat.values(), model.values(), &lin, tol, max_iter, model.name())
}

fn fit_linear(
    d: &DVector<f64>,
    m: &DVector<f64>,
    lin: &LinearV,
    tol: f64,
    max_iter: usize,
    name: &str,
) -> Result<ModelScore> {
    let mut s = (m.dot(d) / m.norm_squared()).max(IRLS_MIN_START);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        let chol = chol_with_jitter(&lin.at(s))?;
        let vm = chol.solve(m);
        let next = (vm.dot(d) / vm.dot(m)).max(0.0);
        let done = (next - s).abs() < tol * s.abs().max(1.0);
        s = next;
        if done {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("reweighting did not converge in {max_iter} iterations for model {name}");
    }
    let s_irls = s;

    let loglik = |s: f64| gaussian_log_density(d, &(m * s), &lin.at(s));
    let mut current = loglik(s)?;
    let mut steps = 0;
    let mut refined = false;
    while steps < max_iter {
        steps += 1;
        let chol = chol_with_jitter(&lin.at(s))?;
        let r = d - m * s;
        let vi_r = chol.solve(&r);
        let vi_m = chol.solve(m);
        let vi_a = chol.solve(&lin.a);
        let score = m.dot(&vi_r) + 0.5 * (vi_r.dot(&(&lin.a * &vi_r)) - vi_a.trace());
        let info = m.dot(&vi_m) + 0.5 * (&vi_a * &vi_a).trace();
        if !(info > 0.0) || score == 0.0 || (s == 0.0 && score < 0.0) {
            refined = true;
            break;
        }
        let mut step = score / info;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = (s + step).max(0.0);
            let value = loglik(cand)?;
            if value >= current {
                let moved = (cand - s).abs();
                s = cand;
                current = value;
                accepted = true;
                if moved < tol * s.abs().max(1.0) {
                    refined = true;
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted || refined {
            refined = true;
            break;
        }
    }
    if !refined {
        converged = false;
        warn!("likelihood refinement did not converge for model {name}");
    }
    Ok(ModelScore {
        method: Method::LogLik,
        value: current,
        s_hat: Some(s),
        s_irls: Some(s_irls),
        iterations,
        refinement_steps: steps,
        converged,
    })
}

/// Scores of all models and the winner (lowest index among ties).
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub winner: usize,
    pub tie: bool,
    pub scores: Vec<ModelScore>,
}

/// Scores one model. `var` is required for `LogLik`.
pub fn score_model(
    d_hat: &DistanceVector,
    model: &RepModel,
    method: Method,
    var: Option<&VarianceModel>,
) -> Result<ModelScore> {
    match method {
        Method::Cosine => Ok(ModelScore::plain(method, cosine_score(model.values(), d_hat.values())?)),
        Method::Spearman => Ok(ModelScore::plain(method, spearman_score(model.values(), d_hat.values())?)),
        Method::LogLik => {
            let var = var.ok_or_else(|| {
                LdcError::InvalidArgument("likelihood scoring needs a variance model".into())
            })?;
            fit_scale_irls(d_hat, model, var, IRLS_TOL, IRLS_MAX_ITER)
        }
    }
}

/// Picks the model with the highest score.
pub fn select_model(
    d_hat: &DistanceVector,
    models: &[RepModel],
    method: Method,
    var: Option<&VarianceModel>,
) -> Result<Selection> {
    if models.is_empty() {
        return Err(LdcError::InvalidArgument("no models to compare".into()));
    }
    let scores: Vec<ModelScore> = models
        .iter()
        .map(|m| score_model(d_hat, m, method, var))
        .collect::<Result<_>>()?;
    let mut winner = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if s.value > scores[winner].value {
            winner = i;
        }
    }
    let best = scores[winner].value;
    let tie = scores
        .iter()
        .enumerate()
        .any(|(i, s)| i != winner && (s.value - best).abs() <= 1e-12 * best.abs().max(1.0));
    Ok(Selection { winner, tie, scores })
}
