//! Command-line interface definition. All randomness flows from explicit
//! `--seed` flags; every run echoes its resolved configuration to
//! `run_meta.json` in the output directory.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use privfilter_core::dataset::{Role, Space};
use privfilter_core::encoder::TrainConfig;
use privfilter_core::eval::Strategy;
use privfilter_core::similarity::Aggregate;

#[derive(Debug, Parser)]
#[command(
    name = "privfilter",
    version,
    about = "Correlation-based privacy filtering and evaluation for vector datasets"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a deterministic toy dataset of Gaussian patient clusters.
    GenToy(GenToyArgs),
    /// Assign every image a role (reference, validation, holdout, unseen).
    Split(SplitArgs),
    /// Train the contrastive encoder on the plan's ref_train images.
    Train(TrainArgs),
    /// Calibrate the flagging threshold tau on validation images.
    Calibrate(CalibrateArgs),
    /// Flag query images against the combined training pool.
    Flag(FlagArgs),
    /// Emit raw pool scores (max/mean/attribution) as CSV.
    Score(ScoreArgs),
    /// Flag rates on holdout images of training patients.
    EvalSensitivity(EvalSensitivityArgs),
    /// False-positive rate on patients absent from training.
    EvalSpecificity(EvalSpecificityArgs),
    /// Agreement of N independently seeded filters.
    EvalConsistency(EvalConsistencyArgs),
    /// Encoder pair-classification metrics (AUC, precision, recall).
    EvalPairs(EvalPairsArgs),
    /// Run the whole pipeline: split, train, calibrate, flag, evaluate.
    Pipeline(PipelineArgs),
    /// Recompute a decision file with a naive oracle and compare.
    Audit(AuditArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SpaceArg {
    Pixel,
    Latent,
}

impl From<SpaceArg> for Space {
    fn from(v: SpaceArg) -> Space {
        match v {
            SpaceArg::Pixel => Space::Pixel,
            SpaceArg::Latent => Space::Latent,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregateArg {
    Max,
    Mean,
}

impl From<AggregateArg> for Aggregate {
    fn from(v: AggregateArg) -> Aggregate {
        match v {
            AggregateArg::Max => Aggregate::Max,
            AggregateArg::Mean => Aggregate::Mean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyArg {
    Overall,
    SameMax,
    SameMean,
    All,
}

impl StrategyArg {
    pub fn strategies(self) -> Vec<Strategy> {
        match self {
            StrategyArg::Overall => vec![Strategy::Overall],
            StrategyArg::SameMax => vec![Strategy::SamePatientMax],
            StrategyArg::SameMean => vec![Strategy::SamePatientMean],
            StrategyArg::All => Strategy::all().to_vec(),
        }
    }
}

/// Which manifest records a command treats as queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuerySetArg {
    Synthetic,
    HoldoutSeen,
    HoldoutUnseen,
    RefValidation,
}

impl QuerySetArg {
    pub fn role(self) -> Role {
        match self {
            QuerySetArg::Synthetic => Role::Synthetic,
            QuerySetArg::HoldoutSeen => Role::HoldoutSeenPatient,
            QuerySetArg::HoldoutUnseen => Role::HoldoutUnseenPatient,
            QuerySetArg::RefValidation => Role::RefValidation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolArg {
    Combined,
    ReferenceTrain,
}

#[derive(Debug, Args, Serialize)]
pub struct GenToyArgs {
    /// Output directory for <name>.csv/.json/.bin.
    #[arg(long)]
    pub out: PathBuf,
    /// File stem for the generated dataset.
    #[arg(long, default_value = "toy")]
    pub name: String,
    /// Number of multi-image cluster patients.
    #[arg(long, default_value_t = 6)]
    pub patients: usize,
    #[arg(long, default_value_t = 6)]
    pub images_per_patient: usize,
    /// Extra one-image patients (feed validation and unseen holdout).
    #[arg(long, default_value_t = 0)]
    pub single_patients: usize,
    #[arg(long, default_value_t = 16)]
    pub dimension: usize,
    /// Noise scale around each patient's cluster center.
    #[arg(long, default_value_t = 0.1)]
    pub cluster_sd: f64,
    /// Synthetic near-duplicate records copying random real vectors.
    #[arg(long, default_value_t = 0)]
    pub near_duplicates: usize,
    /// Noise added to each near-duplicate (0 = exact copies).
    #[arg(long, default_value_t = 0.0)]
    pub nd_noise: f64,
    #[arg(long, value_enum, default_value_t = SpaceArg::Pixel)]
    pub space: SpaceArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of patients withheld entirely for the specificity protocol.
    #[arg(long, default_value_t = 0.2)]
    pub unseen_fraction: f64,
    /// Fraction of single-image training-side patients used for calibration.
    #[arg(long, default_value_t = 0.1)]
    pub validation_fraction: f64,
    /// Cap on patients entering the sensitivity half-split.
    #[arg(long)]
    pub sensitivity_cap: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainHyperArgs {
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    pub learning_rate: f64,
    /// Negative-pair hinge margin, in (-1, 1).
    #[arg(long, default_value_t = 0.2)]
    pub margin: f64,
    #[arg(long, default_value_t = 4)]
    pub negatives_per_positive: usize,
    #[arg(long, default_value_t = 32)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 16)]
    pub embedding_dim: usize,
}

impl TrainHyperArgs {
    pub fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            margin: self.margin,
            negatives_per_positive: self.negatives_per_positive,
            hidden_dim: self.hidden_dim,
            embedding_dim: self.embedding_dim,
            seed,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Space tag recorded in the model file.
    #[arg(long, value_enum, default_value_t = SpaceArg::Latent)]
    pub space: SpaceArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub hyper: TrainHyperArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Encoder model file; identity encoder when omitted.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 95.0)]
    pub percentile: f64,
    /// Skip pool images of the validation image's own patient.
    #[arg(long, default_value_t = false)]
    pub exclude_same_patient: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct FlagArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub calibration: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = AggregateArg::Max)]
    pub aggregate: AggregateArg,
    #[arg(long, value_enum, default_value_t = QuerySetArg::Synthetic)]
    pub queries: QuerySetArg,
}

#[derive(Debug, Args, Serialize)]
pub struct ScoreArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PoolArg::Combined)]
    pub pool: PoolArg,
    /// Restrict the pool to one patient's training images.
    #[arg(long)]
    pub same_patient: Option<String>,
    #[arg(long, value_enum, default_value_t = QuerySetArg::Synthetic)]
    pub queries: QuerySetArg,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalSensitivityArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub calibration: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = StrategyArg::All)]
    pub strategy: StrategyArg,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalSpecificityArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub calibration: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalConsistencyArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Filter variant: identity (pixel) or trained encoder (latent).
    #[arg(long, value_enum, default_value_t = SpaceArg::Latent)]
    pub space: SpaceArg,
    /// Number of independently seeded filters.
    #[arg(long, default_value_t = 10)]
    pub n_filters: usize,
    /// Base seed; filter i trains with seed + i.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 95.0)]
    pub percentile: f64,
    #[arg(long, value_enum, default_value_t = QuerySetArg::Synthetic)]
    pub queries: QuerySetArg,
    #[command(flatten)]
    pub hyper: TrainHyperArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalPairsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Decision threshold for precision/recall.
    #[arg(long, conflicts_with = "calibration")]
    pub threshold: Option<f64>,
    /// Take the threshold from a calibration file instead.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct PipelineArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Filter variant: identity (pixel) or trained encoder (latent).
    #[arg(long, value_enum, default_value_t = SpaceArg::Latent)]
    pub space: SpaceArg,
    #[arg(long, default_value_t = 95.0)]
    pub percentile: f64,
    #[arg(long, default_value_t = 0.2)]
    pub unseen_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    pub validation_fraction: f64,
    #[arg(long)]
    pub sensitivity_cap: Option<usize>,
    #[arg(long, value_enum, default_value_t = AggregateArg::Max)]
    pub aggregate: AggregateArg,
    /// Filters trained for the consistency report.
    #[arg(long, default_value_t = 10)]
    pub n_filters: usize,
    #[arg(long, default_value_t = false)]
    pub exclude_same_patient: bool,
    /// Recheck every decision with the naive oracle after flagging.
    #[arg(long, default_value_t = false)]
    pub audit: bool,
    /// Skip the N-filter consistency stage.
    #[arg(long, default_value_t = false)]
    pub skip_consistency: bool,
    #[command(flatten)]
    pub hyper: TrainHyperArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct AuditArgs {
    #[arg(long)]
    pub decisions: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub calibration: PathBuf,
    /// Role plan the decisions were made under; manifest roles when omitted.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Optional directory for run_meta.json and the audit report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
