//! `hfn`: synthetic data, click simulation, training, evaluation, inference
//! and the interactive HTTP service behind one binary.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

const FORMATS: &str = "\
File formats:
  manifest      JSON lines: {\"id\", \"image\", \"mask\", \"label\": \"melanoma\"|\"non-melanoma\", \"split\": \"train\"|\"test\"};
                relative paths resolve against the manifest's directory
  click file    JSON: {\"image\": <path>, \"foreground\": [[row, col], ...], \"background\": [[row, col], ...], \"seed\": <int>|null}
  masks         single-channel PNG, binarized at 128
  net config    JSON with NetworkConfig fields (stages, blocks_per_stage, channels_per_stage, stem_downsample,
                gcu_reduction, crpu_chain_length, input_pad_multiple, use_him)
  train config  JSON with TrainConfig fields (epochs, batch_size, lr_encoder, lr_decoder, momentum, weight_decay,
                lr_halving_period_epochs, resize_max_long_axis, click_combinations_per_image, seed, augment,
                bn_momentum, validate); missing fields take the full-schedule defaults
  reports       pretty-printed JSON
  history       JSON lines: {\"epoch\", \"loss\", \"lr_enc\", \"lr_dec\", \"val_jaccard\"}

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.";

#[derive(Parser, Debug)]
#[command(name = "hfn", version, about = "Click-guided skin lesion segmentation", after_long_help = FORMATS)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate clean (and optionally noisy) clicks from a ground-truth mask.
    SimulateClicks(SimulateClicksArgs),
    /// Write a seeded synthetic lesion dataset with a manifest.
    MakeSynthetic(MakeSyntheticArgs),
    /// Train a network from a manifest and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate at (3, 3) clicks on the test split, with a pooled PR curve.
    Eval(EvalArgs),
    /// Mean metrics for accumulated click budgets 1 to 6.
    SweepClicks(EvalArgs),
    /// (3, 3) clicks with some replaced by noisy clicks, against the clean result.
    NoisyEval(NoisyEvalArgs),
    /// Train with and without the integration modules and compare.
    AblateHim(AblateArgs),
    /// Segment one image from a click file.
    Predict(PredictArgs),
    /// Run the interactive HTTP service.
    Serve(ServeArgs),
    /// Synthetic data, training, evaluation, sweep, noisy evaluation and
    /// ablation in one run, with a consolidated report.
    EndToEnd(EndToEndArgs),
}

#[derive(Args, Debug)]
#[command(after_long_help = FORMATS)]
pub struct SimulateClicksArgs {
    /// Ground-truth mask PNG.
    #[arg(long)]
    pub mask: PathBuf,
    /// Clicks per region, 1 to 6.
    #[arg(long)]
    pub n: usize,
    /// How many of the foreground clicks to replace with noisy ones.
    #[arg(long, default_value_t = 0)]
    pub noisy_fg: usize,
    /// How many of the background clicks to replace with noisy ones.
    #[arg(long, default_value_t = 0)]
    pub noisy_bg: usize,
    /// Image path recorded in the click file (defaults to the mask path).
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output click file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
#[command(after_long_help = FORMATS)]
pub struct MakeSyntheticArgs {
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    /// Side length of the square images.
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; receives images/, masks/ and manifest.jsonl.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ModelConfigArgs {
    /// Network config JSON (default: the four-stage tiny config).
    #[arg(long)]
    pub net_config: Option<PathBuf>,
    /// Training config JSON (default: the desk-scale schedule).
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    /// Override the number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
#[command(after_long_help = FORMATS)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub config: ModelConfigArgs,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Training history (default: <out>.history.jsonl).
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Seed for initialization, shuffling and augmentation; overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
#[command(after_long_help = FORMATS)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset manifest; the test split is used when present.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Seed for click simulation.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output report.
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Args, Debug)]
#[command(after_long_help = FORMATS)]
pub struct NoisyEvalArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    #[arg(long, default_value_t = 2)]
    pub noisy_fg: usize,
    #[arg(long, default_value_t = 2)]
    pub noisy_bg: usize,
}

#[derive(Args, Debug)]
#[command(after_long_help = FORMATS)]
pub struct AblateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub config: ModelConfigArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Args, Debug)]
#[command(after_long_help = FORMATS)]
pub struct PredictArgs {
    /// Input image (PNG or JPEG).
    #[arg(long)]
    pub image: PathBuf,
    /// Click file, in input-image coordinates.
    #[arg(long)]
    pub clicks: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output mask PNG at input resolution.
    #[arg(long)]
    pub out: PathBuf,
    /// Ground-truth mask; prints metrics against the prediction.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Accepted for uniformity; inference is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, env = "HFN_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Idle time after which a session is dropped.
    #[arg(long, default_value_t = 30)]
    pub ttl_minutes: u64,
    /// Accepted for uniformity; inference is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
#[command(after_long_help = FORMATS)]
pub struct EndToEndArgs {
    /// Small defaults: 40 images of 64x64 and 25 epochs.
    #[arg(long)]
    pub quickstart: bool,
    /// Output directory for data, checkpoint and report.json.
    #[arg(long, default_value = "hfn-run")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::SimulateClicks(a) => commands::simulate_clicks(a),
        Command::MakeSynthetic(a) => commands::make_synthetic(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::SweepClicks(a) => commands::sweep_clicks(a),
        Command::NoisyEval(a) => commands::noisy_eval(a),
        Command::AblateHim(a) => commands::ablate_him(a),
        Command::Predict(a) => commands::predict(a),
        Command::Serve(a) => commands::serve(a),
        Command::EndToEnd(a) => commands::end_to_end(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
