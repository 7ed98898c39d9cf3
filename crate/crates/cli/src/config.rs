//! Command configurations: JSON files overlaid with command-line flags.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tpp_core::baselines::FitOptions;
use tpp_core::encoder::EncoderConfig;
use tpp_core::eval::F1Average;
use tpp_core::model::GapLikelihood;
use tpp_core::objective::TrainConfig;
use tpp_core::predict::{Scheme, DEFAULT_POINTS};

use crate::error::{CliError, Result};

pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(CliError::io(p))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
        }
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, flag: Option<T>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing {what} (flag or config field)")))
}

// ---- generate ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub spec: Option<PathBuf>,
    pub n_sequences: usize,
    /// Defaults to the spec's own horizon.
    pub horizon: Option<f64>,
    pub seed: u64,
    /// Output file stem; defaults to the spec's file stem.
    pub name: Option<String>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            spec: None,
            n_sequences: 1000,
            horizon: None,
            seed: 0,
            name: None,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Hawkes process spec (JSON).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Number of sequences.
    #[arg(long = "n")]
    pub n_sequences: Option<usize>,
    /// Observation window per sequence; defaults to the spec's horizon.
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Simulation seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file stem; defaults to the spec's file stem.
    #[arg(long)]
    pub name: Option<String>,
}

impl GenerateConfig {
    pub fn resolve(config: Option<&Path>, a: GenerateArgs) -> Result<Self> {
        let mut c: Self = load(config)?;
        set_opt(&mut c.spec, a.spec);
        set(&mut c.n_sequences, a.n_sequences);
        set_opt(&mut c.horizon, a.horizon);
        set(&mut c.seed, a.seed);
        set_opt(&mut c.name, a.name);
        required(&c.spec, "--spec")?;
        if c.n_sequences == 0 {
            return Err(CliError::Usage("--n must be at least 1".into()));
        }
        if let Some(h) = c.horizon {
            if !(h > 0.0 && h.is_finite()) {
                return Err(CliError::Usage(format!("--horizon must be positive, got {h}")));
            }
        }
        Ok(c)
    }

    pub fn spec_path(&self) -> &Path {
        self.spec.as_deref().expect("checked in resolve")
    }
}

// ---- train ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Variational model, linear intensity decay.
    Linear,
    /// Variational model, exponential intensity decay.
    #[default]
    Exponential,
    /// Hawkes baseline with exponential kernels.
    HpEk,
    /// Hawkes baseline with Gaussian kernels.
    HpGk,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    /// Number of event types; inferred from the data when absent.
    pub num_types: Option<usize>,
    pub method: Method,
    #[serde(rename = "J")]
    pub latent_dim: usize,
    pub encoder: EncoderConfig,
    pub gap_likelihood: GapLikelihood,
    pub train: TrainConfig,
    pub baseline: FitOptions,
    /// Master seed; copied into the model, training and baseline seeds.
    pub seed: u64,
    /// A saved `train_state.json` to continue from.
    pub resume: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train_data: None,
            val_data: None,
            num_types: None,
            method: Method::default(),
            latent_dim: 20,
            encoder: EncoderConfig::default(),
            gap_likelihood: GapLikelihood::default(),
            train: TrainConfig::default(),
            baseline: FitOptions::default(),
            seed: 0,
            resume: None,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training dataset (JSONL).
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    /// Validation dataset (JSONL), used for best-checkpoint selection.
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    /// Number of event types; inferred from the data when absent.
    #[arg(long)]
    pub num_types: Option<usize>,
    /// Model or baseline to train.
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    /// Training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Sequences per batch.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Monte Carlo samples per interval for the compensator.
    #[arg(long)]
    pub mc_samples: Option<usize>,
    /// Latent dimension J.
    #[arg(long)]
    pub latent_dim: Option<usize>,
    /// Encoder width D.
    #[arg(long)]
    pub d_model: Option<usize>,
    /// Baseline optimizer iterations.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Master seed for model, training and baseline.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a saved training state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

impl RunConfig {
    pub fn resolve(config: Option<&Path>, a: TrainArgs) -> Result<Self> {
        let mut c: Self = load(config)?;
        set_opt(&mut c.train_data, a.train_data);
        set_opt(&mut c.val_data, a.val_data);
        set_opt(&mut c.num_types, a.num_types);
        set(&mut c.method, a.method);
        set(&mut c.train.epochs, a.epochs);
        set(&mut c.train.batch_size, a.batch_size);
        set(&mut c.train.learning_rate, a.learning_rate);
        set(&mut c.train.mc_samples, a.mc_samples);
        set(&mut c.latent_dim, a.latent_dim);
        if let Some(d) = a.d_model {
            c.encoder.d_model = d;
            c.encoder.d_k = d / c.encoder.n_heads.max(1);
        }
        set(&mut c.baseline.iterations, a.iterations);
        set(&mut c.seed, a.seed);
        set_opt(&mut c.resume, a.resume);
        c.train.seed = c.seed;
        c.baseline.seed = c.seed;
        required(&c.train_data, "--train-data")?;
        c.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        c.encoder.validate().map_err(CliError::Usage)?;
        if c.latent_dim == 0 {
            return Err(CliError::Usage("latent dimension J must be positive".into()));
        }
        Ok(c)
    }

    pub fn train_path(&self) -> &Path {
        self.train_data.as_deref().expect("checked in resolve")
    }
}

// ---- evaluate / predict ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum TimeNorm {
    /// Errors in raw time units.
    #[default]
    Raw,
    /// Errors divided by the training mean gap.
    MeanGap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    RightRiemann,
    Trapezoid,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::RightRiemann => Scheme::RightRiemann,
            SchemeArg::Trapezoid => Scheme::Trapezoid,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum F1Arg {
    Micro,
    Macro,
    Weighted,
}

impl From<F1Arg> for F1Average {
    fn from(a: F1Arg) -> Self {
        match a {
            F1Arg::Micro => F1Average::Micro,
            F1Arg::Macro => F1Average::Macro,
            F1Arg::Weighted => F1Average::Weighted,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    /// Ground-truth Hawkes spec, for intensity errors.
    pub truth_spec: Option<PathBuf>,
    /// Training mean gap; read from the run summary beside the checkpoint
    /// when absent.
    pub mean_gap: Option<f64>,
    pub n_points: usize,
    pub scheme: Scheme,
    pub f1_average: F1Average,
    pub time_norm: TimeNorm,
    /// Grid points per sequence for intensity errors.
    pub resolution: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            data: None,
            truth_spec: None,
            mean_gap: None,
            n_points: DEFAULT_POINTS,
            scheme: Scheme::default(),
            f1_average: F1Average::default(),
            time_norm: TimeNorm::default(),
            resolution: 500,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Trained model or fitted baseline.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Held-out dataset (JSONL).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Ground-truth Hawkes spec; enables intensity errors.
    #[arg(long)]
    pub truth_spec: Option<PathBuf>,
    /// Training mean gap; read from the run summary beside the checkpoint when absent.
    #[arg(long)]
    pub mean_gap: Option<f64>,
    /// Quadrature points per prediction.
    #[arg(long)]
    pub n_points: Option<usize>,
    /// Quadrature scheme.
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    /// F1 averaging mode.
    #[arg(long, value_enum)]
    pub f1_average: Option<F1Arg>,
    /// Scale for time errors.
    #[arg(long, value_enum)]
    pub time_norm: Option<TimeNorm>,
    /// Grid points per sequence for intensity errors.
    #[arg(long)]
    pub resolution: Option<usize>,
}

impl EvalConfig {
    pub fn resolve(config: Option<&Path>, a: EvalArgs) -> Result<Self> {
        let mut c: Self = load(config)?;
        set_opt(&mut c.checkpoint, a.checkpoint);
        set_opt(&mut c.data, a.data);
        set_opt(&mut c.truth_spec, a.truth_spec);
        set_opt(&mut c.mean_gap, a.mean_gap);
        set(&mut c.n_points, a.n_points);
        set(&mut c.scheme, a.scheme.map(Scheme::from));
        set(&mut c.f1_average, a.f1_average.map(F1Average::from));
        set(&mut c.time_norm, a.time_norm);
        set(&mut c.resolution, a.resolution);
        required(&c.checkpoint, "--checkpoint")?;
        required(&c.data, "--data")?;
        if c.n_points < 2 || c.resolution < 2 {
            return Err(CliError::Usage("--n-points and --resolution must be at least 2".into()));
        }
        if let Some(g) = c.mean_gap {
            if !(g > 0.0 && g.is_finite()) {
                return Err(CliError::Usage(format!("--mean-gap must be positive, got {g}")));
            }
        }
        Ok(c)
    }
}

// ---- analyze ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AnalyzeMode {
    /// SVD of evaluation-mode latent means.
    #[default]
    Svd,
    /// Intensity trace of one sequence.
    Trace,
    /// Time-rescaling goodness of fit.
    Gof,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeConfig {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub truth_spec: Option<PathBuf>,
    pub mode: AnalyzeMode,
    /// Sequence traced in `trace` mode.
    pub seq_index: usize,
    pub resolution: usize,
    /// Cap on latent vectors used by `svd`.
    pub max_points: usize,
    /// Trapezoid nodes per interval for the learned model's compensator.
    pub gof_points: usize,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            data: None,
            truth_spec: None,
            mode: AnalyzeMode::default(),
            seq_index: 0,
            resolution: 500,
            max_points: 20_000,
            gof_points: 64,
        }
    }
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Trained model or fitted baseline.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset (JSONL).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Ground-truth Hawkes spec, added to traces.
    #[arg(long)]
    pub truth_spec: Option<PathBuf>,
    /// What to compute.
    #[arg(long, value_enum)]
    pub mode: Option<AnalyzeMode>,
    /// Sequence traced in `trace` mode.
    #[arg(long)]
    pub seq_index: Option<usize>,
    /// Grid points for `trace` mode.
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Cap on latent vectors used by `svd`.
    #[arg(long)]
    pub max_points: Option<usize>,
    /// Trapezoid nodes per interval for the learned model's compensator.
    #[arg(long)]
    pub gof_points: Option<usize>,
}

impl AnalyzeConfig {
    pub fn resolve(config: Option<&Path>, a: AnalyzeArgs) -> Result<Self> {
        let mut c: Self = load(config)?;
        set_opt(&mut c.checkpoint, a.checkpoint);
        set_opt(&mut c.data, a.data);
        set_opt(&mut c.truth_spec, a.truth_spec);
        set(&mut c.mode, a.mode);
        set(&mut c.seq_index, a.seq_index);
        set(&mut c.resolution, a.resolution);
        set(&mut c.max_points, a.max_points);
        set(&mut c.gof_points, a.gof_points);
        required(&c.checkpoint, "--checkpoint")?;
        required(&c.data, "--data")?;
        if c.resolution < 2 || c.gof_points < 2 || c.max_points == 0 {
            return Err(CliError::Usage(
                "--resolution and --gof-points need at least 2, --max-points at least 1".into(),
            ));
        }
        Ok(c)
    }
}
