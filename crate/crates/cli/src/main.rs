//! `avseg`: batch front end for the segmentation pipeline.
//!
//! Exit status is 0 on success, 2 on a usage error and 1 when a command
//! fails at run time.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "avseg", version, about = "Flow-prompted audio-visual segmentation tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Copy)]
struct SeedArg {
    /// Seed for every random draw (default 0, or the config's `seed`);
    /// echoed in the output.
    #[arg(long)]
    seed: Option<u64>,
}

impl SeedArg {
    fn or(self, fallback: u64) -> u64 {
        self.seed.unwrap_or(fallback)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Align T-1 inter-frame flows to T per-frame flows.
    FlowAlign(FlowAlignArgs),
    /// Threshold a flow magnitude map into a binary mask.
    Binarize(BinarizeArgs),
    /// Tri-valued pre-mask from a flow mask and (optionally) ground truth.
    Premask(PremaskArgs),
    /// Intersection of flow mask and ground truth.
    Postmask(PostmaskArgs),
    /// Multiply a pre-mask into an image.
    Apply(ApplyArgs),
    /// Loss components for a probability map against a target.
    Loss(LossArgs),
    /// mIoU and F-score over a manifest of prediction/ground-truth pairs.
    Metrics(MetricsArgs),
    /// Write a synthetic scene to a directory.
    GenScene(GenSceneArgs),
    /// Train the toy segmenter and report held-out metrics.
    Train(TrainArgs),
    /// Train toggle variants over several seeds.
    Ablate(AblateArgs),
    /// Run the visual-textual alignment on two prompts and an image.
    VtaDemo(VtaDemoArgs),
}

#[derive(Args, Debug)]
struct FlowAlignArgs {
    /// Inter-frame flow maps, in order.
    #[arg(long, num_args = 1.., conflicts_with = "frames", required_unless_present = "frames")]
    flow: Vec<PathBuf>,
    /// Frames to difference instead of reading flows.
    #[arg(long, num_args = 2..)]
    frames: Vec<PathBuf>,
    /// Output directory; receives flow_000.pgm, flow_001.pgm, ...
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args, Debug)]
struct BinarizeArgs {
    #[arg(long)]
    flow: PathBuf,
    #[arg(long, default_value_t = avseg_core::mask::DEFAULT_TAU)]
    tau: f64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args, Debug)]
struct PremaskArgs {
    #[arg(long)]
    flow_mask: PathBuf,
    /// Without it every flow pixel is marked uncertain.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args, Debug)]
struct PostmaskArgs {
    #[arg(long)]
    flow_mask: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args, Debug)]
struct ApplyArgs {
    #[arg(long)]
    frame: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args, Debug)]
struct LossArgs {
    /// Probability map (graymap, value/255).
    #[arg(long)]
    pred: PathBuf,
    /// Binary target mask.
    #[arg(long)]
    target: PathBuf,
    /// Flow mask; enables the intersection-label term.
    #[arg(long)]
    flow_mask: Option<PathBuf>,
    /// Comma-separated class logits.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, requires = "class_labels")]
    class_logits: Vec<f64>,
    /// Comma-separated 0/1 labels matching the logits.
    #[arg(long, value_delimiter = ',', requires = "class_logits")]
    class_labels: Vec<f64>,
    #[arg(long, default_value_t = 5.0)]
    lambda_mask: f64,
    #[arg(long, default_value_t = 5.0)]
    lambda_dice: f64,
    #[arg(long, default_value_t = 2.0)]
    lambda_bce: f64,
    #[arg(long, default_value_t = 10.0)]
    lambda_mask_prime: f64,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = avseg_core::metrics::DEFAULT_BETA2)]
    beta2: f64,
    /// Average precision, recall and F per frame instead of pooling pixels.
    #[arg(long)]
    macro_average: bool,
    /// Also write the report record here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args, Debug)]
struct GenSceneArgs {
    /// Scene keys (size, frames, object_size, ...) as key = value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = avseg_core::mask::DEFAULT_TAU)]
    tau: f64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report records, one JSON object per line.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of training seeds per variant, counting up from --seed.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Comma-separated variant names; defaults to the standard ladder.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args, Debug)]
struct VtaDemoArgs {
    /// Scene description prompt.
    #[arg(long)]
    prompt1: String,
    /// Sounding-object prompt.
    #[arg(long)]
    prompt2: String,
    /// Image whose sides are multiples of the patch size (8).
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    seed: SeedArg,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("avseg: {e}");
            ExitCode::from(1)
        }
    }
}
