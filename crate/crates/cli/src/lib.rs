//! Command-line front end over `conv_compress`.
//!
//! [`run`] parses argv, dispatches one subcommand and returns the exit code
//! together with everything that would be printed, so tests can drive the
//! CLI in-process. Reports are pretty-printed JSON on stdout.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Exit status plus captured output of one invocation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

#[derive(Debug)]
pub(crate) enum Failure {
    /// Bad invocation; exit 2.
    Usage(String),
    /// The computation itself failed; exit 1.
    Compute(String),
}

impl From<conv_compress::Error> for Failure {
    fn from(e: conv_compress::Error) -> Self {
        Failure::Compute(e.to_string())
    }
}

impl From<conv_compress::container::ContainerError> for Failure {
    fn from(e: conv_compress::container::ContainerError) -> Self {
        Failure::Compute(e.to_string())
    }
}

pub fn run<I, T>(args: I) -> Outcome
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return match e.exit_code() {
                0 => Outcome {
                    code: 0,
                    stdout: text,
                    stderr: String::new(),
                },
                _ => Outcome {
                    code: 2,
                    stdout: String::new(),
                    stderr: text,
                },
            };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(report) => Outcome {
            code: 0,
            stdout: serde_json::to_string_pretty(&report).expect("reports are plain JSON") + "\n",
            stderr: String::new(),
        },
        Err(Failure::Usage(msg)) => Outcome {
            code: 2,
            stdout: String::new(),
            stderr: format!("error: {msg}\n\nFor more information, try '--help'.\n"),
        },
        Err(Failure::Compute(msg)) => Outcome {
            code: 1,
            stdout: String::new(),
            stderr: format!("error: {msg}\n"),
        },
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "conv-compress",
    version,
    about = "Low-rank factorization, data-driven refinement and pruning of convolution kernels",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a container of random kernels
    Init(InitArgs),
    /// Sample a patch batch for one kernel from synthetic feature maps
    Sample(SampleArgs),
    /// Factorize one kernel
    Compress(CompressArgs),
    /// Data-driven low-rank refinement of one kernel
    Dataopt(DataoptArgs),
    /// Remove input channels of one kernel
    Prune(PruneArgs),
    /// Train stochastic gates on a toy regression and optionally prune by them
    Gates(GatesArgs),
    /// Choose per-layer ranks under a whole-model MAC budget
    RankSelect(RankSelectArgs),
    /// List kernels, factorized layers and their costs
    Report(ReportArgs),
    /// Rebuild a full kernel from a factorized layer and measure the error
    Reconstruct(ReconstructArgs),
}

/// Comma-separated rank list, one to three entries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Ranks(pub Vec<usize>);

/// Feature-map height and width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Hw(pub usize, pub usize);

/// `name:T,S,K` kernel description for `init`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct LayerSpec {
    pub name: String,
    pub t: usize,
    pub s: usize,
    pub k: usize,
}

fn parse_ranks(s: &str) -> Result<Ranks, String> {
    let ranks = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("'{p}' is not a rank")))
        .collect::<Result<Vec<_>, _>>()?;
    if ranks.is_empty() || ranks.len() > 3 || ranks.contains(&0) {
        return Err("expected one to three positive ranks, e.g. 4 or 3,5".into());
    }
    Ok(Ranks(ranks))
}

fn parse_ratio(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err("retained MAC fraction must lie in (0, 1]".into())
    }
}

fn parse_positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err("must be a positive number".into())
    }
}

fn parse_nonneg(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err("must be a non-negative number".into())
    }
}

fn parse_hw(s: &str) -> Result<Hw, String> {
    let parts: Vec<&str> = s.split([',', 'x']).collect();
    match parts.as_slice() {
        [h, w] => match (h.trim().parse::<usize>(), w.trim().parse::<usize>()) {
            (Ok(h), Ok(w)) if h > 0 && w > 0 => Ok(Hw(h, w)),
            _ => Err("expected two positive integers, e.g. 8,8".into()),
        },
        _ => Err("expected H,W".into()),
    }
}

fn parse_layer_spec(s: &str) -> Result<LayerSpec, String> {
    let (name, dims) = s.split_once(':').ok_or("expected name:T,S,K")?;
    if name.is_empty() || name.contains('/') {
        return Err("layer name must be non-empty and contain no '/'".into());
    }
    let d = dims
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("'{p}' is not a dimension")))
        .collect::<Result<Vec<_>, _>>()?;
    match d.as_slice() {
        &[t, s, k] if t > 0 && s > 0 && k % 2 == 1 => Ok(LayerSpec {
            name: name.into(),
            t,
            s,
            k,
        }),
        _ => Err("expected T,S,K with positive T, S and odd K".into()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub(crate) enum MethodArg {
    WeightSvd,
    SpatialSvd,
    Cp,
    Tucker,
    Tt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub(crate) enum DataoptMode {
    DataSvd,
    Asym,
    #[value(name = "asym3d")]
    Asym3d,
    SpatialRefine,
    ReluAsym,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub(crate) enum PruneMode {
    Lasso,
    Magnitude,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub(crate) enum GateKindArg {
    L0,
    Vib,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub(crate) enum StrategyArg {
    EqualAcc,
    GreedyEnergy,
}

#[derive(Args, Debug)]
pub(crate) struct InitArgs {
    /// Kernel to create as name:T,S,K (repeatable)
    #[arg(long = "layer", value_parser = parse_layer_spec, required = true)]
    pub layers: Vec<LayerSpec>,
    /// Feature-map size recorded with every kernel
    #[arg(long, value_parser = parse_hw, default_value = "8,8")]
    pub hw: Hw,
    /// Also draw a bias per kernel
    #[arg(long)]
    pub bias: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub(crate) struct SampleArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub layer: String,
    #[arg(long, default_value_t = 4)]
    pub images: usize,
    #[arg(long, default_value_t = 64)]
    pub per_image: usize,
    /// Amplitude of the uniform perturbation applied to the prefix maps
    #[arg(long, value_parser = parse_nonneg, default_value = "0")]
    pub noise: f64,
    #[arg(long, value_parser = parse_hw)]
    pub hw: Option<Hw>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Entry name of the batch in the output container
    #[arg(long, default_value = "batch")]
    pub name: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("budget").required(true).args(["rank", "ratio"])))]
pub(crate) struct CompressArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub layer: String,
    #[arg(long, value_enum)]
    pub method: MethodArg,
    /// r, r1,r2 (tucker) or r1,r2,r3 (tt)
    #[arg(long, value_parser = parse_ranks)]
    pub rank: Option<Ranks>,
    /// Retained MAC fraction of the layer
    #[arg(long, value_parser = parse_ratio)]
    pub ratio: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_parser = parse_hw)]
    pub hw: Option<Hw>,
    /// Name of the stored layer (default <layer>.<method>)
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub(crate) struct DataoptArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub layer: String,
    /// Container holding the patch batch
    #[arg(long)]
    pub batch: PathBuf,
    /// Batch entry to use when the container holds several
    #[arg(long)]
    pub batch_name: Option<String>,
    #[arg(long, value_enum)]
    pub mode: DataoptMode,
    /// r, or r_s,r_d for asym3d
    #[arg(long, value_parser = parse_ranks)]
    pub rank: Ranks,
    #[arg(long, value_parser = parse_hw)]
    pub hw: Option<Hw>,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub(crate) struct PruneArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub layer: String,
    /// Number of input channels to keep
    #[arg(long)]
    pub keep: usize,
    #[arg(long, value_enum, default_value = "lasso")]
    pub mode: PruneMode,
    /// Container holding the patch batch (lasso mode)
    #[arg(long)]
    pub batch: Option<PathBuf>,
    #[arg(long)]
    pub batch_name: Option<String>,
    #[arg(long, value_parser = parse_positive, default_value = "1e-4")]
    pub lambda_init: f64,
    #[arg(long, value_parser = parse_hw)]
    pub hw: Option<Hw>,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub(crate) struct GatesArgs {
    #[arg(long, value_enum)]
    pub kind: GateKindArg,
    #[arg(long, value_parser = parse_nonneg, default_value = "0.5")]
    pub lambda: f64,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    /// Gates whose criterion falls below this are closed
    #[arg(long, value_parser = parse_positive, default_value = "0.5")]
    pub threshold: f64,
    #[arg(long, value_parser = parse_positive, default_value = "0.1")]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Gate count (default: output channels of --layer, else 8)
    #[arg(long)]
    pub features: Option<usize>,
    #[arg(long, default_value_t = 4)]
    pub informative: usize,
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
    #[arg(long, value_parser = parse_nonneg, default_value = "0.1")]
    pub noise_std: f64,
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Kernel whose output channels the trained gates prune
    #[arg(long, requires = "input")]
    pub layer: Option<String>,
    #[arg(long, value_parser = parse_hw)]
    pub hw: Option<Hw>,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("table").required(true).args(["acc_table", "sv_table"])))]
pub(crate) struct RankSelectArgs {
    #[arg(long, value_enum)]
    pub strategy: StrategyArg,
    /// Retained fraction of the whole-model MACs
    #[arg(long, value_parser = parse_ratio)]
    pub ratio: f64,
    /// JSON accuracy table (equal-acc)
    #[arg(long)]
    pub acc_table: Option<PathBuf>,
    /// JSON list of per-layer singular values and MAC costs (greedy-energy)
    #[arg(long)]
    pub sv_table: Option<PathBuf>,
    /// Container to extend with the plan (default: a new one)
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value = "plan")]
    pub name: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub(crate) struct ReportArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Overrides the feature-map size stored with each kernel
    #[arg(long, value_parser = parse_hw)]
    pub hw: Option<Hw>,
}

#[derive(Args, Debug)]
pub(crate) struct ReconstructArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Stored factorized layer
    #[arg(long)]
    pub layer: String,
    /// Kernel to compare against (default: the layer's recorded source)
    #[arg(long)]
    pub source: Option<String>,
    #[arg(long, value_parser = parse_hw)]
    pub hw: Option<Hw>,
    /// Write the input plus the rebuilt kernel as <layer>.full
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_lists() {
        assert_eq!(parse_ranks("4").unwrap(), Ranks(vec![4]));
        assert_eq!(parse_ranks("3, 5,2").unwrap(), Ranks(vec![3, 5, 2]));
        assert!(parse_ranks("0").is_err());
        assert!(parse_ranks("1,2,3,4").is_err());
        assert!(parse_ranks("a").is_err());
    }

    #[test]
    fn value_parsers() {
        assert_eq!(parse_hw("6x7").unwrap(), Hw(6, 7));
        assert!(parse_hw("6").is_err());
        assert!(parse_ratio("1.5").is_err());
        assert_eq!(parse_ratio("1").unwrap(), 1.0);
        assert!(parse_layer_spec("c:4,2,2").is_err());
        assert_eq!(parse_layer_spec("c:4,2,3").unwrap().k, 3);
    }

    #[test]
    fn no_arguments_is_a_usage_error() {
        let out = run(["conv-compress"]);
        assert_eq!(out.code, 2);
        assert!(out.stderr.contains("Usage"));
    }

    #[test]
    fn unknown_flag_is_named() {
        let out = run(["conv-compress", "report", "--input", "x.json", "--bogus"]);
        assert_eq!(out.code, 2);
        assert!(out.stderr.contains("--bogus"));
    }

    #[test]
    fn rank_and_ratio_are_exclusive() {
        let argv = [
            "conv-compress", "compress", "--input", "a.json", "--layer", "c", "--method", "cp", "--rank", "2", "--ratio",
            "0.5", "--out", "b.json",
        ];
        assert_eq!(run(argv).code, 2);
    }
}
