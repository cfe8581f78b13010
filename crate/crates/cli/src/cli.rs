use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use deltaforge::sparsify::DropVariant;
use deltaforge::{DType, MismatchPolicy};

#[derive(Debug, Parser)]
#[command(
    name = "deltaforge",
    version,
    about = "Sparsify fine-tuning deltas and merge homologous checkpoints"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Arithmetic precision (f32 or f64); defaults to the widest input type.
    #[arg(long, global = true, env = "DELTAFORGE_DTYPE", value_parser = parse_compute_dtype)]
    pub dtype: Option<DType>,

    /// Handling of tensors missing from some inputs or differing in shape:
    /// skip, error or take-from:<k>.
    #[arg(long, global = true, env = "DELTAFORGE_ON_MISMATCH", default_value = "skip", value_parser = parse_policy)]
    pub on_mismatch: MismatchPolicy,

    /// Worker threads (0 = one per core).
    #[arg(long, global = true, env = "DELTAFORGE_THREADS", default_value_t = 0)]
    pub threads: usize,

    /// Seed for every random choice.
    #[arg(long, global = true, env = "DELTAFORGE_SEED", default_value_t = 0)]
    pub seed: u64,

    /// Accept NaN and infinite values when reading checkpoints.
    #[arg(long, global = true, env = "DELTAFORGE_ALLOW_NONFINITE")]
    pub allow_nonfinite: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the delta `sft - pre` as a checkpoint.
    Delta {
        #[arg(long, env = "DELTAFORGE_SFT")]
        sft: PathBuf,
        #[arg(long, env = "DELTAFORGE_PRE")]
        pre: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Write `pre + delta` as a checkpoint.
    Apply {
        #[arg(long, env = "DELTAFORGE_PRE")]
        pre: PathBuf,
        #[arg(long)]
        delta: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Storage type of the output; defaults to the backbone's.
        #[arg(long, value_parser = parse_dtype)]
        out_dtype: Option<DType>,
    },
    /// Print delta statistics and the drop-and-rescale applicability verdict.
    Stats {
        /// Delta checkpoint.
        delta: PathBuf,
        /// Fraction of each tensor's elements to sample.
        #[arg(long, default_value_t = 1.0, value_parser = parse_fraction)]
        sample: f64,
        /// Largest max |delta| for which the verdict is "applicable".
        #[arg(long, env = "DELTAFORGE_THRESHOLD", default_value_t = deltaforge::delta::DEFAULT_APPLICABILITY_THRESHOLD)]
        threshold: f64,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Histogram bins in the JSON output.
        #[arg(long, default_value_t = 50)]
        bins: usize,
        /// Print full statistics as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Randomly drop delta entries, rescaling survivors by 1 / (1 - p).
    Dare {
        #[command(flatten)]
        input: SparsifyInput,
        #[arg(long, env = "DELTAFORGE_DROP_RATE", value_parser = parse_rate)]
        drop_rate: f64,
        #[arg(long, default_value = "dare", value_parser = parse_variant)]
        variant: DropVariant,
        /// Write the boolean keep mask (1 = kept) to this file.
        #[arg(long)]
        mask_out: Option<PathBuf>,
    },
    /// Keep only the largest-magnitude delta entries of each tensor.
    Prune {
        #[command(flatten)]
        input: SparsifyInput,
        #[arg(long, env = "DELTAFORGE_DROP_RATE", value_parser = parse_rate)]
        drop_rate: f64,
        /// Multiply kept entries by 1 / (1 - p).
        #[arg(long)]
        rescale: bool,
    },
    /// Merge checkpoints as described by a JSON recipe.
    Merge {
        recipe: PathBuf,
        /// Output checkpoint; defaults to the recipe's output.path.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run a recipe over a grid of drop rates, variants, scaling terms and
    /// seeds, writing output drift per cell as CSV.
    Sweep {
        recipe: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = deltaforge::sweep::DEFAULT_DROP_RATES, value_parser = parse_rate)]
        drop_rates: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "dare", value_parser = parse_variant)]
        variants: Vec<DropVariant>,
        /// Scaling terms; defaults to the recipe's lambda.
        #[arg(long, value_delimiter = ',')]
        lambdas: Vec<f64>,
        /// Drop seeds; defaults to the global --seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Probe checkpoint with "X" [N, D] and "y" [N]; defaults to a
        /// generated Gaussian-mixture probe.
        #[arg(long)]
        probe: Option<PathBuf>,
        /// Write 0 in the wall_ms column so reruns are byte-identical.
        #[arg(long)]
        no_timing: bool,
        /// Save each cell's merged checkpoint into this directory.
        #[arg(long)]
        save_models: Option<PathBuf>,
    },
    /// List the tensors and metadata of a checkpoint.
    Inspect {
        file: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Generate the toy calibration setup: a pretrained linear-softmax model,
    /// models fine-tuned from it, their Fisher and gram statistics and probes.
    Calibrate {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 2)]
        tasks: usize,
        #[arg(long, default_value_t = 256)]
        dim: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// Also write the drift of the first fine-tuned model under random
        /// dropping, one row per (rate, variant, seed).
        #[arg(long)]
        drift_csv: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.7, 0.9], value_parser = parse_rate)]
        drift_rates: Vec<f64>,
        #[arg(long, default_value_t = 100)]
        drift_seeds: u64,
    },
}

#[derive(Debug, Args)]
pub struct SparsifyInput {
    /// Delta checkpoint (alternative to --sft with --pre).
    #[arg(long, conflicts_with = "sft")]
    pub delta: Option<PathBuf>,
    #[arg(long, env = "DELTAFORGE_SFT")]
    pub sft: Option<PathBuf>,
    #[arg(long, env = "DELTAFORGE_PRE")]
    pub pre: Option<PathBuf>,
    /// Sparsify the delta or the fine-tuned weights themselves.
    #[arg(long, value_enum, default_value_t = Target::Delta)]
    pub on: Target,
    /// Write the sparsified delta or the reassembled model.
    #[arg(long, value_enum, default_value_t = Emit::Delta)]
    pub emit: Emit,
    /// Leave tensors whose names match this regex untouched.
    #[arg(long)]
    pub exclude: Option<String>,
    #[arg(short, long)]
    pub out: PathBuf,
    /// Storage type of an emitted model; defaults to the fine-tuned model's.
    #[arg(long, value_parser = parse_dtype)]
    pub out_dtype: Option<DType>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Target {
    Delta,
    Finetuned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Emit {
    Delta,
    Model,
}

fn parse_dtype(s: &str) -> Result<DType, String> {
    s.parse().map_err(|e: deltaforge::Error| e.to_string())
}

fn parse_compute_dtype(s: &str) -> Result<DType, String> {
    match parse_dtype(s)? {
        d @ (DType::F32 | DType::F64) => Ok(d),
        d => Err(format!("arithmetic type must be f32 or f64, got {d}")),
    }
}

fn parse_policy(s: &str) -> Result<MismatchPolicy, String> {
    s.parse().map_err(|e: deltaforge::Error| e.to_string())
}

fn parse_variant(s: &str) -> Result<DropVariant, String> {
    s.parse().map_err(|e: deltaforge::Error| e.to_string())
}

fn parse_rate(s: &str) -> Result<f64, String> {
    let p: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if (0.0..1.0).contains(&p) {
        Ok(p)
    } else {
        Err(format!("drop rate must be in [0, 1), got {p}"))
    }
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let f: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if f > 0.0 && f <= 1.0 {
        Ok(f)
    } else {
        Err(format!("sample fraction must be in (0, 1], got {f}"))
    }
}
