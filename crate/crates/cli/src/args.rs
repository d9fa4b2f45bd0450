use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use softspread::dataset::DatasetFormat;
use softspread::graph::{GraphKind, Normalization};
use softspread::solver::DEFAULT_TOLERANCE;
use softspread::theory::ScheduleVariant;

#[derive(Debug, Parser)]
#[command(name = "softspread", version, about = "Soft-label estimation by graph spreading of sparse annotations")]
pub struct Cli {
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = "SOFTSPREAD_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset with ground-truth soft labels.
    Generate(GenerateArgs),
    /// Build a neighbourhood graph and dump its edge list.
    Graph(GraphCmdArgs),
    /// Simulated annotation budget with one estimator; writes per-checkpoint metrics.
    Run(RunArgs),
    /// Confidence-interval report for every point and class.
    Ci(CiArgs),
    /// Empirical consistency table for the rate schedule on the sine target.
    Consistency(ConsistencyArgs),
    /// Rebuild estimates from an exported event log.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Synthetic {
    TwoMoons,
    Sine1d,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(value_enum)]
    pub kind: Synthetic,
    #[arg(long)]
    pub n: usize,
    /// Gaussian noise for two-moons.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Steepness of the two-moons soft labels.
    #[arg(long, default_value_t = softspread::sim::DEFAULT_SHARPNESS)]
    pub sharpness: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub lo: f64,
    #[arg(long, default_value_t = 10.0, allow_negative_numbers = true)]
    pub hi: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, short)]
    pub out: PathBuf,
    #[command(flatten)]
    pub format: FormatArg,
}

#[derive(Debug, Args)]
pub struct FormatArg {
    /// Dataset format; inferred from the extension when omitted (.bin/.ssds are packed binary).
    #[arg(long, value_enum)]
    pub format: Option<FormatChoice>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatChoice {
    Csv,
    Binary,
}

impl FormatArg {
    pub fn resolve(&self, path: &std::path::Path) -> DatasetFormat {
        match self.format {
            Some(FormatChoice::Csv) => DatasetFormat::DelimitedText,
            Some(FormatChoice::Binary) => DatasetFormat::PackedBinary,
            None => DatasetFormat::from_path(path),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum GraphChoice {
    Knn,
    Epsilon,
}

#[derive(Debug, Args)]
pub struct GraphArgs {
    #[arg(long = "graph", value_enum, default_value = "knn")]
    pub kind: GraphChoice,
    /// Neighbours per point for the k-NN graph.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Bandwidth for the epsilon graph.
    #[arg(long)]
    pub h: Option<f64>,
    #[arg(long, default_value = "symmetric", value_parser = parse_from_str::<Normalization>)]
    pub normalization: Normalization,
}

impl GraphArgs {
    pub fn kind(&self) -> Result<GraphKind, String> {
        match (self.kind, self.h) {
            (GraphChoice::Knn, None) => Ok(GraphKind::Knn { k: self.k }),
            (GraphChoice::Knn, Some(_)) => Err("--h applies only to --graph epsilon".into()),
            (GraphChoice::Epsilon, Some(h)) => Ok(GraphKind::Epsilon { h }),
            (GraphChoice::Epsilon, None) => Err("--graph epsilon needs --h".into()),
        }
    }
}

#[derive(Debug, Args)]
pub struct DataArg {
    /// Dataset file (delimited text or packed binary).
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub format: FormatArg,
}

#[derive(Debug, Args)]
pub struct SolverArgs {
    /// Spreading intensity in [0, 1).
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct GraphCmdArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[command(flatten)]
    pub graph: GraphArgs,
    /// Edge list output `i,j,weight`.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum Estimator {
    Pls,
    Gkr,
    Knn,
    Histogram,
}

/// A budget given as a fraction of `n` (`0.1`, `10%`) or an absolute count (`100`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    Fraction(f64),
    Count(usize),
}

impl Budget {
    pub fn resolve(self, n: usize) -> usize {
        match self {
            Budget::Fraction(f) => (f * n as f64).round() as usize,
            Budget::Count(c) => c,
        }
    }
}

impl FromStr for Budget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if let Some(pct) = s.strip_suffix('%') {
            let v: f64 = pct.trim().parse().map_err(|_| format!("bad percentage '{s}'"))?;
            return Budget::fraction(v / 100.0, s);
        }
        if s.contains(['.', 'e', 'E']) {
            let v: f64 = s.parse().map_err(|_| format!("bad budget '{s}'"))?;
            return Budget::fraction(v, s);
        }
        s.parse().map(Budget::Count).map_err(|_| format!("bad budget '{s}'"))
    }
}

impl Budget {
    fn fraction(v: f64, raw: &str) -> Result<Self, String> {
        if v > 0.0 && v.is_finite() {
            Ok(Budget::Fraction(v))
        } else {
            Err(format!("budget fraction must be positive, got '{raw}'"))
        }
    }
}

fn parse_from_str<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[command(flatten)]
    pub graph: GraphArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, value_enum, default_value = "pls")]
    pub estimator: Estimator,
    /// Kernel width for the gkr estimator.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Annotated neighbours for the knn estimator.
    #[arg(long)]
    pub neighbors: Option<usize>,
    /// Total annotations: a fraction of n (0.1, 10%) or a count (100).
    #[arg(long)]
    pub budget: Budget,
    /// Comma-separated checkpoints in the same notation; defaults to the budget.
    #[arg(long, value_delimiter = ',')]
    pub checkpoints: Vec<Budget>,
    #[arg(long, default_value_t = 1)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Metric records `budget,repetition,rmse,kl,wall_ms`.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Final estimates of the first repetition.
    #[arg(long)]
    pub estimates_out: Option<PathBuf>,
    /// Event log of the first repetition.
    #[arg(long)]
    pub events_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum CiChoice {
    Wilson,
    Hoeffding,
}

#[derive(Debug, Args)]
pub struct CiArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[command(flatten)]
    pub graph: GraphArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, value_enum)]
    pub method: CiChoice,
    /// Number of classes when the dataset carries no labels.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Critical value for Wilson intervals.
    #[arg(long, default_value_t = 1.96)]
    pub z: f64,
    /// Failure probability for Hoeffding intervals.
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
    /// Split delta over the classes.
    #[arg(long)]
    pub union_bound: bool,
    /// Lipschitz constant of the soft labels; required for Hoeffding.
    #[arg(long)]
    pub lipschitz: Option<f64>,
    /// Event log to replay; the state is fresh when neither this nor --budget is given.
    #[arg(long, conflicts_with = "budget")]
    pub events: Option<PathBuf>,
    /// Simulate this many annotations from the ground truth instead.
    #[arg(long)]
    pub budget: Option<Budget>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report `id,class,lower,upper,method`.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantChoice {
    ProofBody,
    TheoremStatement,
}

impl From<VariantChoice> for ScheduleVariant {
    fn from(v: VariantChoice) -> Self {
        match v {
            VariantChoice::ProofBody => ScheduleVariant::ProofBody,
            VariantChoice::TheoremStatement => ScheduleVariant::TheoremStatement,
        }
    }
}

#[derive(Debug, Args)]
pub struct ConsistencyArgs {
    /// Strictly ascending dataset sizes.
    #[arg(long, value_delimiter = ',', default_value = "500,2000,8000")]
    pub ns: Vec<usize>,
    #[arg(long, default_value_t = 0.2)]
    pub eps: f64,
    #[arg(long, default_value_t = 0.5)]
    pub lipschitz: f64,
    #[arg(long, default_value_t = 1.0)]
    pub kappa: f64,
    #[arg(long, value_enum, default_value = "proof-body")]
    pub variant: VariantChoice,
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub lo: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub hi: f64,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[command(flatten)]
    pub graph: GraphArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Number of classes; taken from the dataset's labels when omitted.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Event log `sequence,point_id,class,source`.
    #[arg(long)]
    pub events: PathBuf,
    /// Estimates `id,p0..,received_mass`.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_notation() {
        assert_eq!("0.10".parse::<Budget>().unwrap().resolve(1000), 100);
        assert_eq!("10%".parse::<Budget>().unwrap().resolve(1000), 100);
        assert_eq!("100".parse::<Budget>().unwrap(), Budget::Count(100));
        assert_eq!("1.0".parse::<Budget>().unwrap().resolve(7), 7);
        assert_eq!("0.015".parse::<Budget>().unwrap().resolve(100), 2);
        assert!("-0.1".parse::<Budget>().is_err());
        assert!("ten".parse::<Budget>().is_err());
    }

    #[test]
    fn graph_flags_must_agree() {
        let knn = GraphArgs { kind: GraphChoice::Knn, k: 5, h: Some(1.0), normalization: Normalization::Symmetric };
        assert!(knn.kind().is_err());
        let eps = GraphArgs { kind: GraphChoice::Epsilon, k: 5, h: None, normalization: Normalization::Symmetric };
        assert!(eps.kind().is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
