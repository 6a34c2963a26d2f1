use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "ascnet", version, about = "ECG denoising with an attention-gated convolutional autoencoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Segment records, add calibrated noise and write train/val/test sets.
    Prepare(PrepareArgs),
    /// Train a model on a prepared dataset family.
    Train(TrainArgs),
    /// Compute metrics on prepared test sets.
    Eval(EvalArgs),
    /// Denoise a whole record with overlapping windows.
    Denoise(DenoiseArgs),
    /// Merge several eval outputs into one comparison table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Directory of clean records (`*.hea` + format-212 `.dat`).
    #[arg(long, required_unless_present = "synthetic")]
    pub records: Option<PathBuf>,
    /// Generate this many surrogate records instead of reading `--records`.
    #[arg(long, conflicts_with = "records")]
    pub synthetic: Option<usize>,
    /// Directory holding the `bw`, `em` and `ma` noise records.
    #[arg(long)]
    pub noise_dir: Option<PathBuf>,
    /// Noise kinds, comma separated; combine with `+` (e.g. `em+bw`).
    #[arg(long, value_delimiter = ',', required = true)]
    pub noise: Vec<String>,
    /// Target input SNRs in dB, comma separated.
    #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
    pub snr: Vec<f64>,
    /// Segment length.
    #[arg(long = "L", default_value_t = 1024)]
    pub length: usize,
    #[arg(long, default_value_t = 512)]
    pub stride: usize,
    /// Record fractions for train,val,test.
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
    pub split: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Signal channel to read from each clean record.
    #[arg(long, default_value_t = 0)]
    pub channel: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// A dataset family directory written by `prepare`.
    #[arg(long)]
    pub data: PathBuf,
    /// Model config JSON; missing keys take defaults.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Training config JSON; missing keys take defaults.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    /// Use the two-block micro model as the base config.
    #[arg(long)]
    pub micro: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub init_seed: Option<u64>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Continue from this checkpoint instead of a fresh initialization.
    #[arg(long, conflicts_with_all = ["model_config", "micro"])]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stub {
    Clean,
    Noisy,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "stub")]
    pub checkpoint: Option<PathBuf>,
    /// Dataset family directories; repeat for several.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Which split to score.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Replace the model with the clean oracle or the identity.
    #[arg(long, value_enum)]
    pub stub: Option<Stub>,
    /// Method name used by `report`.
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Record header (`.hea`) or record path without extension.
    #[arg(long)]
    pub record: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub channel: usize,
    /// Corrupt the record with white noise at this SNR before denoising.
    #[arg(long, allow_negative_numbers = true)]
    pub add_awgn_snr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Eval output directories.
    #[arg(long, num_args = 0..)]
    pub eval: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}
