use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "semsplat", version, about = "Semantic Gaussian splatting toolkit")]
pub struct Cli {
    /// Seed for every random draw (overrides seeds in input files).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Square output resolution in pixels (>= 8).
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(8..))]
    pub res: Option<u32>,
    /// Loss weights JSON; missing keys keep their defaults.
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
    /// Fraction of most confident reference pixels used for geometry [default: 0.90].
    #[arg(long, global = true)]
    pub conf_ratio: Option<f64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a seeded scene and its rendered ground-truth bundle.
    Synth(SynthArgs),
    /// Render a scene for one camera, or for every camera of a bundle.
    Render(RenderArgs),
    /// Fit a scene to a bundle.
    Fit(FitArgs),
    /// Compare a predicted bundle with ground truth and print metrics.
    Eval(EvalArgs),
    /// Print the losses of a predicted bundle against ground truth.
    Losses(LossesArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Scene spec JSON.
    pub spec: PathBuf,
    /// Output bundle directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    /// Scene file (`.sgs` binary or `.json`); defaults to the bundle's scene.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Single camera JSON.
    #[arg(long, conflicts_with = "bundle")]
    pub camera: Option<PathBuf>,
    /// Render every camera of this bundle and write a full bundle.
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// Codec manifest, needed when the scene has no compressed features.
    #[arg(long)]
    pub codec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Ground-truth bundle to fit.
    pub bundle: PathBuf,
    /// Initial scene; defaults to the bundle's scene.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Standard deviation of seeded noise added to every raw parameter of the initial scene.
    #[arg(long, default_value_t = 0.0)]
    pub perturb: f64,
    #[arg(long, default_value_t = 500)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    /// Parameter groups to keep fixed.
    #[arg(long, value_delimiter = ',', value_parser = ["geometry", "semantics", "codec"])]
    pub freeze: Vec<String>,
    /// Output directory for the fitted scene, codec and trace.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Prototype manifest; defaults to the ground-truth bundle's prototypes.
    #[arg(long)]
    pub prototypes: Option<PathBuf>,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct LossesArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn error_line(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<semsplat_core::Error>())
        .map_or("error", |e| e.kind());
    let message = err
        .chain()
        .map(|e| e.to_string())
        .collect::<Vec<_>>()
        .join(": ");
    serde_json::json!({ "error": { "kind": kind, "message": message } }).to_string()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SEMSPLAT_LOG", "error")).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
