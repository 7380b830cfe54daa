//! Command-line interface of the `filtag` binary.
//!
//! Exit codes: 0 success, 1 internal error, 2 bad input or usage, 3 contract
//! violation (evaluating images that helped build the tag store).

mod commands;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tagging::SelectionMethod;

pub use commands::dump_activations;

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "filtag",
    version,
    about = "Tag CNN filters with classes and explain classifications"
)]
pub struct Cli {
    /// Worker threads (0 = one per CPU).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Generate the stripe-detector demo model and a labeled image directory.
    MakeEdgeWorld(MakeEdgeWorldArgs),
    /// Run the model over an image directory and dump every conv layer output.
    DumpActivations(DumpArgs),
    /// Build a tag store from the tagging side of the split.
    Tag(TagArgs),
    /// Explain one image of a dump.
    Explain(ExplainArgs),
    /// Measure Hits@n on the test side of the split.
    Evaluate(EvaluateArgs),
    /// Tag and evaluate over a grid of k and q values.
    Sweep(SweepArgs),
    /// Report on misclassified test images.
    AnalyzeErrors(AnalyzeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Csv,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSide {
    Test,
    Tagging,
}

#[derive(Debug, Args, Serialize)]
pub struct MakeEdgeWorldArgs {
    /// Kernels of the conv layer.
    #[arg(long, value_delimiter = ',', default_value = "vertical,horizontal")]
    pub filters: Vec<String>,
    /// Classes of the softmax head; also the stripe kinds generated.
    #[arg(long, value_delimiter = ',', default_value = "vertical,horizontal")]
    pub classes: Vec<String>,
    #[arg(long, default_value_t = 40)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f32,
    #[arg(long, default_value_t = 0.0)]
    pub label_noise: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct DumpArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    /// Largest shard size in MiB.
    #[arg(long, default_value_t = 64)]
    pub shard_mib: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Exactly one of `--k` / `--q`.
#[derive(Debug, Args, Serialize)]
#[group(required = true, multiple = false)]
pub struct MethodArgs {
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub q: Option<f64>,
}

/// At most one of `--k` / `--q`; absent means "as the store was built".
#[derive(Debug, Args, Serialize)]
#[group(required = false, multiple = false)]
pub struct OptionalMethodArgs {
    /// Explanation-time k (defaults to the store's method).
    #[arg(long)]
    pub k: Option<usize>,
    /// Explanation-time q (defaults to the store's method).
    #[arg(long)]
    pub q: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct TagArgs {
    #[arg(long)]
    pub dump: PathBuf,
    #[command(flatten)]
    pub method: MethodArgs,
    #[arg(long, default_value_t = 0.8)]
    pub split_fraction: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ExplainArgs {
    #[arg(long)]
    pub dump: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub image: u32,
    #[command(flatten)]
    pub method: OptionalMethodArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
    pub n: Vec<usize>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub dump: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    #[command(flatten)]
    pub method: OptionalMethodArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
    pub n: Vec<usize>,
    /// Split seed (defaults to the store's).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Split fraction (defaults to the store's).
    #[arg(long)]
    pub split_fraction: Option<f64>,
    #[arg(long, value_enum, default_value_t = EvalSide::Test)]
    pub eval_side: EvalSide,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub dump: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub k: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub q: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
    pub n: Vec<usize>,
    #[arg(long, default_value_t = 0.8)]
    pub split_fraction: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub dump: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    /// Analyse only this image (must be misclassified).
    #[arg(long)]
    pub image: Option<u32>,
    #[command(flatten)]
    pub method: OptionalMethodArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
    pub n: Vec<usize>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl MethodArgs {
    pub fn method(&self) -> Result<SelectionMethod> {
        let m = match (self.k, self.q) {
            (Some(k), None) => SelectionMethod::KBest { k },
            (None, Some(q)) => SelectionMethod::QQuantile { q },
            _ => return Err(Error::Usage("give exactly one of --k or --q".into())),
        };
        m.validate().map_err(|e| Error::Usage(e.to_string()))?;
        Ok(m)
    }
}

impl OptionalMethodArgs {
    pub fn method(&self) -> Result<Option<SelectionMethod>> {
        match (self.k, self.q) {
            (None, None) => Ok(None),
            (k, q) => MethodArgs { k, q }.method().map(Some),
        }
    }
}

/// Exit status for an error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Contamination(_) => 3,
        Error::Index(_) | Error::ThreadPool(_) => 1,
        _ => 2,
    }
}

/// `runs/<hash>` where the hash covers the whole parsed command line.
pub fn default_run_dir(cli: &Cli) -> PathBuf {
    let json = serde_json::to_vec(cli).expect("arguments serialize");
    let digest = Sha256::digest(&json);
    Path::new("runs").join(hex::encode(&digest[..6]))
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("FILTAG_LOG", "warn");
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp(None)
        .try_init();
}

/// Runs a parsed command line, printing errors to stderr.
pub fn run(cli: Cli) -> ExitCode {
    match commands::execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Parses `args` (including the program name) and runs them.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            ExitCode::from(code)
        }
    }
}
