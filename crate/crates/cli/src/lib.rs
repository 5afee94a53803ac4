//! Command-line front end: simulation experiments, distance estimation,
//! contrast tests and model comparison over `LDCM` matrix files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crossnobis::crossnobis::{ConditionCov, PartitionedPatterns, VarianceModel};
use crossnobis::glm::{DesignMatrix, TemporalCovSpec};
use crossnobis::inference::{difference_contrast, null_v, single_contrast, z_test, ContrastTest, NullSpec};
use crossnobis::io::{fmt_f64, read_matrix, read_vector, write_labeled, write_matrix, write_vector};
use crossnobis::model::DistanceVector;
use crossnobis::model_eval::{select_model, Method, RepModel, Selection};
use crossnobis::pipeline::{analyze_patterns, analyze_timeseries, Analysis, ResidualSource};
use crossnobis::simulator::experiments::{run_experiment, ConfigFile, ExperimentConfig, ExperimentKind, ExperimentResult};
use crossnobis::LdcError;

/// Failure with its process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Failed(_) => 1,
        }
    }
}

impl From<LdcError> for CliError {
    fn from(e: LdcError) -> Self {
        CliError::Failed(e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "crossnobis", version, about = "Cross-validated Mahalanobis distances and their sampling covariance")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a Monte-Carlo experiment and write its tables.
    Simulate(SimulateArgs),
    /// Estimate distances and their predicted covariance.
    Distances(DistancesArgs),
    /// z-test of a contrast of distances.
    Ztest(ZtestArgs),
    /// Compare representational models on estimated distances.
    ModelCompare(ModelCompareArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// fig1, fig2, fig3, fpr, modelsel or unbalanced.
    #[arg(long)]
    pub kind: String,
    /// TOML file with a section named after the kind; built-in settings
    /// are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ResidualArg {
    /// Voxels independent after prewhitening.
    Independent,
    /// Noise covariance of odd runs whitened with the all-run whitener.
    Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TemporalArg {
    Identity,
    /// `0.5 e^{-τ} + 0.5 e^{-τ/40}`.
    Fmri,
}

#[derive(Debug, Args)]
pub struct DistancesArgs {
    /// Prewhitened `K x P` pattern files, one per partition.
    #[arg(long, num_args = 1.., conflicts_with_all = ["timeseries", "design"])]
    pub patterns: Vec<PathBuf>,
    /// `T x P` data files, one per run.
    #[arg(long, num_args = 1.., requires = "design")]
    pub timeseries: Vec<PathBuf>,
    /// `T x (K + Q)` design files, one per run; conditions first.
    #[arg(long, num_args = 1.., requires = "timeseries")]
    pub design: Vec<PathBuf>,
    /// Number of condition columns in each design.
    #[arg(long)]
    pub conditions: Option<usize>,
    /// Shrinkage of the noise covariance towards its diagonal.
    #[arg(long, default_value_t = 0.4)]
    pub h: f64,
    #[arg(long, value_enum, default_value_t = TemporalArg::Fmri)]
    pub temporal: TemporalArg,
    #[arg(long, value_enum, default_value_t = ResidualArg::Split)]
    pub residual: ResidualArg,
    /// Output prefix: writes `.dist`, `.v`, `.sigmak` and `.meta`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NullArg {
    Zero,
    Equalized,
}

#[derive(Debug, Args)]
pub struct ZtestArgs {
    #[arg(long)]
    pub distances: PathBuf,
    /// Prefix written by `distances` (reads `.sigmak` and `.meta`).
    #[arg(long)]
    pub cov: PathBuf,
    /// 1-based pair index `j`, or `j-l` for the difference of two pairs.
    #[arg(long)]
    pub contrast: String,
    #[arg(long, value_enum, default_value_t = NullArg::Zero)]
    pub null: NullArg,
    #[arg(long)]
    pub two_sided: bool,
}

#[derive(Debug, Args)]
pub struct ModelCompareArgs {
    #[arg(long)]
    pub distances: PathBuf,
    /// Prefix written by `distances`; required for `loglik`.
    #[arg(long)]
    pub cov_inputs: Option<PathBuf>,
    /// Model distance vectors, one file per model.
    #[arg(long, num_args = 1.., required = true)]
    pub models: Vec<PathBuf>,
    #[arg(long, default_value = "loglik")]
    pub method: String,
}

/// Runs a parsed command and returns its standard output.
pub fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Simulate(a) => simulate(&a),
        Command::Distances(a) => distances(&a),
        Command::Ztest(a) => ztest(&a),
        Command::ModelCompare(a) => model_compare(&a),
    }
}

/// Experiment settings for `kind` from a TOML file (or the defaults).
pub fn load_config(kind: ExperimentKind, path: Option<&Path>) -> Result<ExperimentConfig, CliError> {
    let config = match path {
        None => ExperimentConfig::default_for(kind),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            let file: ConfigFile = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            file.section(kind).ok_or_else(|| {
                CliError::Config(format!("{}: no [{}] section", p.display(), kind.tag()))
            })?
        }
    };
    config.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(config)
}

/// `key = value` lines with 17 significant digits.
pub fn summary_text(result: &ExperimentResult) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "kind = {}", result.kind);
    let _ = writeln!(s, "seed = {}", result.seed);
    for (k, v) in &result.summary {
        let _ = writeln!(s, "{k} = {}", fmt_f64(*v));
    }
    s
}

/// Writes every table as `<name>.ldcm` plus `summary.txt`.
pub fn write_result(result: &ExperimentResult, dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for t in &result.tables {
        let path = dir.join(format!("{}.ldcm", t.name));
        write_labeled(&path, &t.data, t.labels.as_deref()).map_err(|e| io_err(&path, e))?;
    }
    let path = dir.join("summary.txt");
    fs::write(&path, summary_text(result)).map_err(|e| io_err(&path, e))
}

fn simulate(a: &SimulateArgs) -> Result<String, CliError> {
    let kind: ExperimentKind = a.kind.parse().map_err(|e: LdcError| CliError::Config(e.to_string()))?;
    let config = load_config(kind, a.config.as_deref())?;
    if a.out_dir.exists() && !a.out_dir.is_dir() {
        return Err(CliError::Io(format!("{} is not a directory", a.out_dir.display())));
    }
    let result = run_experiment(&config, a.seed)?;
    write_result(&result, &a.out_dir)?;
    Ok(summary_text(&result))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn read(path: &Path) -> Result<DMatrix<f64>, CliError> {
    read_matrix(path).map_err(|e| io_err(path, e))
}

fn read_vec(path: &Path) -> Result<DVector<f64>, CliError> {
    read_vector(path).map_err(|e| io_err(path, e))
}

/// Writes `.dist` (`D x 1`), `.v` (`D x D`), `.sigmak` (`K x K`) and
/// `.meta` (`[M, P, tr(Σ_RΣ_R)]`).
pub fn write_analysis(prefix: &Path, a: &Analysis) -> Result<(), CliError> {
    let out = |suffix: &str, m: &DMatrix<f64>| {
        let p = with_suffix(prefix, suffix);
        write_matrix(&p, m).map_err(|e| io_err(&p, e))
    };
    let dist = with_suffix(prefix, ".dist");
    write_vector(&dist, a.distances.values()).map_err(|e| io_err(&dist, e))?;
    out(".v", &a.prediction.v)?;
    out(".sigmak", &a.condition_cov.sigma_k)?;
    let vm = &a.variance_model;
    out(
        ".meta",
        &DMatrix::from_row_slice(1, 3, &[vm.partitions as f64, vm.voxels as f64, vm.trace_rr]),
    )
}

/// Reads the variance ingredients written by [`write_analysis`].
pub fn read_variance_model(prefix: &Path) -> Result<VarianceModel, CliError> {
    let sigma_k = read(&with_suffix(prefix, ".sigmak"))?;
    let meta = read(&with_suffix(prefix, ".meta"))?;
    if meta.len() != 3 {
        return Err(CliError::Failed(format!("{}.meta must hold 3 values", prefix.display())));
    }
    let cc = ConditionCov::new(sigma_k)?;
    Ok(VarianceModel::new(&cc, meta[2], meta[0] as usize, meta[1] as usize))
}

fn distances(a: &DistancesArgs) -> Result<String, CliError> {
    let analysis = if !a.patterns.is_empty() {
        let parts = a.patterns.iter().map(|p| read(p)).collect::<Result<Vec<_>, _>>()?;
        analyze_patterns(&PartitionedPatterns::new(parts)?, None)?
    } else if !a.timeseries.is_empty() {
        if a.design.len() != a.timeseries.len() {
            return Err(CliError::Failed(format!(
                "{} data files but {} design files",
                a.timeseries.len(),
                a.design.len()
            )));
        }
        let k = a
            .conditions
            .ok_or_else(|| CliError::Failed("--conditions is required with --design".into()))?;
        let data = a.timeseries.iter().map(|p| read(p)).collect::<Result<Vec<_>, _>>()?;
        let designs = a
            .design
            .iter()
            .map(|p| Ok(DesignMatrix::new(read(p)?, k, 1.0)?))
            .collect::<Result<Vec<_>, CliError>>()?;
        let temporal = match a.temporal {
            TemporalArg::Identity => TemporalCovSpec::Identity,
            TemporalArg::Fmri => TemporalCovSpec::fmri_default(),
        };
        let source = match a.residual {
            ResidualArg::Independent => ResidualSource::Independent,
            ResidualArg::Split => ResidualSource::SplitRuns,
        };
        analyze_timeseries(&data, &designs, &temporal, a.h, &source)?.analysis
    } else {
        return Err(CliError::Failed("give --patterns or --timeseries with --design".into()));
    };
    write_analysis(&a.out, &analysis)?;
    let mut s = String::new();
    for (j, d) in analysis.distances.as_slice().iter().enumerate() {
        let _ = writeln!(s, "d[{}] = {}", j + 1, fmt_f64(*d));
    }
    Ok(s)
}

/// Parses `"j"` or `"j-l"` (1-based) into 0-based pair indices.
pub fn parse_contrast(spec: &str) -> Result<(usize, Option<usize>), CliError> {
    let bad = || CliError::Failed(format!("malformed contrast '{spec}' (expected \"j\" or \"j-l\")"));
    let index = |s: &str| -> Result<usize, CliError> {
        let v: usize = s.trim().parse().map_err(|_| bad())?;
        v.checked_sub(1).ok_or_else(bad)
    };
    match spec.split_once('-') {
        None => Ok((index(spec)?, None)),
        Some((a, b)) => Ok((index(a)?, Some(index(b)?))),
    }
}

/// `%g`-style formatting with `digits` significant digits.
pub fn fmt_sig(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.*e}", digits - 1, x);
    let exp: i32 = sci.split('e').nth(1).and_then(|e| e.parse().ok()).unwrap_or(0);
    if exp < -4 || exp >= digits as i32 {
        sci
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        format!("{x:.decimals$}")
    }
}

/// Runs the contrast test described by the CLI arguments.
pub fn contrast_test(
    d_hat: &DistanceVector,
    var: &VarianceModel,
    contrast: &str,
    null: NullArg,
    two_sided: bool,
) -> Result<ContrastTest, CliError> {
    let d = d_hat.len();
    let (j, l) = parse_contrast(contrast)?;
    let c = match l {
        None => single_contrast(d, j)?,
        Some(l) => difference_contrast(d, j, l)?,
    };
    let spec = match (null, l) {
        (NullArg::Zero, _) => NullSpec::ZeroDistances,
        (NullArg::Equalized, Some(l)) => NullSpec::Equalized(j, l),
        (NullArg::Equalized, None) => {
            return Err(CliError::Failed("the equalized null needs a contrast \"j-l\"".into()))
        }
    };
    let v = null_v(d_hat, spec, var)?;
    Ok(z_test(d_hat, &c, &v, two_sided)?)
}

fn ztest(a: &ZtestArgs) -> Result<String, CliError> {
    let d_hat = DistanceVector::new(read_vec(&a.distances)?)?;
    let var = read_variance_model(&a.cov)?;
    let t = contrast_test(&d_hat, &var, &a.contrast, a.null, a.two_sided)?;
    let mut s = String::new();
    let _ = writeln!(s, "estimate = {}", fmt_f64(t.estimate));
    let _ = writeln!(s, "variance = {}", fmt_f64(t.variance));
    let _ = writeln!(s, "z = {}", fmt_sig(t.z, 6));
    let _ = writeln!(s, "p = {}", fmt_sig(t.p_value, 6));
    let _ = writeln!(s, "sided = {}", if t.two_sided { "two" } else { "one" });
    Ok(s)
}

fn model_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Loads models and runs the selection.
pub fn compare_models(
    d_hat: &DistanceVector,
    model_files: &[PathBuf],
    method: Method,
    var: Option<&VarianceModel>,
) -> Result<(Vec<RepModel>, Selection), CliError> {
    let models = model_files
        .iter()
        .map(|p| Ok(RepModel::new(model_name(p), read_vec(p)?)?))
        .collect::<Result<Vec<_>, CliError>>()?;
    let sel = select_model(d_hat, &models, method, var)?;
    Ok((models, sel))
}

fn model_compare(a: &ModelCompareArgs) -> Result<String, CliError> {
    let method: Method = a.method.parse().map_err(|e: LdcError| CliError::Failed(e.to_string()))?;
    let d_hat = DistanceVector::new(read_vec(&a.distances)?)?;
    let var = match &a.cov_inputs {
        Some(p) => Some(read_variance_model(p)?),
        None if method == Method::LogLik => {
            return Err(CliError::Failed("--cov-inputs is required for loglik".into()))
        }
        None => None,
    };
    let (models, sel) = compare_models(&d_hat, &a.models, method, var.as_ref())?;
    let mut s = String::new();
    let _ = writeln!(s, "method = {method}");
    for (m, score) in models.iter().zip(&sel.scores) {
        let _ = write!(s, "model {} score = {}", m.name(), fmt_f64(score.value));
        if let Some(s_hat) = score.s_hat {
            let _ = write!(s, " s_hat = {} iterations = {}", fmt_f64(s_hat), score.iterations);
            if !score.converged {
                s.push_str(" (not converged)");
            }
        }
        s.push('\n');
    }
    if sel.tie {
        s.push_str("result = tie\n");
    } else {
        let _ = writeln!(s, "winner = {}", models[sel.winner].name());
    }
    Ok(s)
}
