use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use emo_core::data::Split;
use emo_core::models::ModelVariant;

#[derive(Debug, Parser)]
#[command(name = "emo", version, about = "Joint discrete/continuous speech emotion models")]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus (EMOF features + manifest.jsonl).
    GenSynth(GenSynthArgs),
    /// Train a model from a TOML run configuration.
    Train(TrainArgs),
    /// Evaluate a saved model on one split of a manifest.
    Eval(EvalArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub din: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Std-dev of VAD labels around the class prototype.
    #[arg(long, default_value_t = 0.5)]
    pub noise_label: f64,
    /// Std-dev of per-frame feature noise.
    #[arg(long, default_value_t = 1.0)]
    pub noise_frame: f64,
    /// Train,valid,test fractions.
    #[arg(long, default_value = "0.8,0.1,0.1", value_parser = parse_ratios)]
    pub split_ratios: [f64; 3],
    #[arg(long, default_value_t = 20)]
    pub min_frames: usize,
    #[arg(long, default_value_t = 80)]
    pub max_frames: usize,
    /// Corpus name recorded in the manifest and used as the id prefix.
    #[arg(long, default_value = "synth")]
    pub corpus: String,
    /// Seed of the VAD-to-feature projection (defaults to --seed). Corpora
    /// sharing it live in the same feature space.
    #[arg(long)]
    pub projection_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub json_out: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = emo_core::data::DEFAULT_MAX_FRAMES)]
    pub max_frames: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Restrict model checks to one variant (default: all five).
    #[arg(long)]
    pub variant: Option<ModelVariant>,
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

fn parse_ratios(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    let ratios: [f64; 3] = parts
        .try_into()
        .map_err(|v: Vec<f64>| format!("expected 3 comma-separated ratios, got {}", v.len()))?;
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err("ratios must lie in [0, 1]".into());
    }
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(format!("ratios must sum to 1, got {}", ratios.iter().sum::<f64>()));
    }
    Ok(ratios)
}
