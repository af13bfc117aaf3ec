use std::path::PathBuf;

use acae::consistency::FinetuneVariant;
use acae::training::TrainConfig;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "acae", version, about = "Affine-combining autoencoder experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "command", content = "config", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a planted multi-skeleton corpus.
    Synth(SynthArgs),
    /// Fit an autoencoder to a complete corpus.
    Fit(FitArgs),
    /// Sweep the latent count and report validation error.
    Elbow(ElbowArgs),
    /// Compare the four fine-tuning variants on a two-source demo.
    ConsistencyDemo(DemoArgs),
    /// Score predicted poses against ground truth.
    Eval(EvalArgs),
    /// Re-run a recorded command and verify its outputs.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Fit(_) => "fit",
            Command::Elbow(_) => "elbow",
            Command::ConsistencyDemo(_) => "consistency-demo",
            Command::Eval(_) => "eval",
            Command::Replay(_) => "replay",
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Toggle {
    On,
    Off,
}

impl Toggle {
    pub fn on(self) -> bool {
        self == Toggle::On
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantName {
    Separate,
    Regularized,
    Latent,
    Hybrid,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SynthArgs {
    /// Skeleton preset (e.g. demo2, demo60, large555).
    #[arg(long)]
    pub formats: String,
    /// Planted latent count.
    #[arg(long)]
    pub latents: usize,
    /// Number of examples.
    #[arg(long)]
    pub k: usize,
    /// Isotropic joint noise, mm.
    #[arg(long, default_value_t = 5.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 0.0)]
    pub lambda_sparse: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Learning rate at the last step as a fraction of `--lr` (geometric decay).
    #[arg(long, default_value_t = 1.0)]
    pub final_lr_fraction: f64,
    #[arg(long, default_value_t = 20_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, value_enum, default_value_t = Toggle::Off)]
    pub chirality: Toggle,
    #[arg(long, value_enum, default_value_t = Toggle::Off)]
    pub projected_loss: Toggle,
    #[arg(long, value_enum, default_value_t = Toggle::Off)]
    pub head_weighting: Toggle,
}

impl OptimArgs {
    pub fn train_config(&self, latents: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            latents,
            learning_rate: self.lr,
            final_lr_fraction: self.final_lr_fraction,
            batch_size: self.batch_size,
            steps: self.steps,
            lambda_sparse: self.lambda_sparse,
            use_projected_loss: self.projected_loss.on(),
            chirality: self.chirality.on(),
            head_weighting: self.head_weighting.on(),
            seed,
        }
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct FitArgs {
    /// Complete corpus in JSONL form.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Skeleton preset the corpus was generated with.
    #[arg(long)]
    pub formats: String,
    #[arg(long)]
    pub latents: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub optim: OptimArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ElbowArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub formats: String,
    /// Comma-separated latent counts to sweep.
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    pub latents: Vec<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub optim: OptimArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct DemoArgs {
    /// Two-format skeleton preset.
    #[arg(long, default_value = "demo2")]
    pub formats: String,
    /// Planted latent count, also used for the frozen autoencoder.
    #[arg(long, default_value_t = 16)]
    pub latents: usize,
    /// Training examples per label source.
    #[arg(long, default_value_t = 1500)]
    pub k: usize,
    #[arg(long, default_value_t = 500)]
    pub k_test: usize,
    #[arg(long, default_value_t = 5.0)]
    pub sigma: f64,
    /// Autoencoder fitting steps.
    #[arg(long, default_value_t = 10_000)]
    pub acae_steps: usize,
    /// Lifter training steps.
    #[arg(long, default_value_t = 40_000)]
    pub steps: usize,
    /// Lifter learning rate.
    #[arg(long, default_value_t = 2.0)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Run a single variant instead of all four.
    #[arg(long, value_enum)]
    pub variant: Option<VariantName>,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_cons: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_teach: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

impl DemoArgs {
    pub fn variants(&self) -> Vec<FinetuneVariant> {
        let all = [
            VariantName::Separate,
            VariantName::Regularized,
            VariantName::Latent,
            VariantName::Hybrid,
        ];
        let names: Vec<VariantName> = match self.variant {
            Some(v) => vec![v],
            None => all.to_vec(),
        };
        names
            .into_iter()
            .map(|v| match v {
                VariantName::Separate => FinetuneVariant::SeparateHeads,
                VariantName::Regularized => FinetuneVariant::ConsistencyRegularized { lambda_cons: self.lambda_cons },
                VariantName::Latent => FinetuneVariant::DirectLatent,
                VariantName::Hybrid => FinetuneVariant::Hybrid {
                    lambda_cons: self.lambda_cons,
                    lambda_teach: self.lambda_teach,
                },
            })
            .collect()
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EvalArgs {
    /// Predicted poses (JSONL).
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth poses (JSONL), same order as the predictions.
    #[arg(long)]
    pub gt: PathBuf,
    /// Root joint for root-aligned metrics.
    #[arg(long, default_value_t = 0)]
    pub root: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}
