//! Thin batch CLI over the library commands. The richer entry points are
//! the runnable examples; see the README.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sockweave::commands::{
    self, CmdError, EvalArgs, ExportArgs, GenArgs, GradcheckArgs, TrainArgs,
};

#[derive(Parser)]
#[command(
    name = "sockweave",
    about = "Train and evaluate a multimodal sock-dressing policy against a deterministic 2D simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scripted-expert demonstrations into a dataset directory.
    Gen(GenCli),
    /// Train a model variant on a dataset.
    Train(TrainCli),
    /// Run closed-loop evaluation rollouts from a checkpoint.
    Eval(EvalCli),
    /// Verify reverse-mode gradients against 64-bit central differences.
    Gradcheck(GradcheckCli),
    /// Export keypoint traces and predicted frames for one episode.
    Export(ExportCli),
}

#[derive(Args)]
struct GenCli {
    /// Number of demonstrations (angles and sizes cycle).
    #[arg(long, default_value_t = 12)]
    episodes: usize,
    /// Foot angles (degrees from horizontal) to cycle over.
    #[arg(long, value_delimiter = ',', default_values_t = [30.0, 40.0, 50.0])]
    angles: Vec<f64>,
    /// Foot sizes in scene units (1 unit = 10 cm).
    #[arg(long, value_delimiter = ',', default_values_t = [2.3, 2.42, 2.54, 2.65])]
    sizes: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "dataset")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainCli {
    #[arg(long, default_value = "dataset")]
    data: PathBuf,
    #[arg(long, default_value_t = 2000)]
    epochs: usize,
    /// full | no_dam | no_sknet | no_hier | no_sam_dam
    #[arg(long, default_value = "full")]
    variant: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2e-3)]
    learning_rate: f64,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Unsupported; training always starts from a fresh initialization.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalCli {
    #[arg(long, default_value = "run/model.ckpt")]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 20)]
    episodes: usize,
    /// Fixed foot angle; omit to cycle the training angles.
    #[arg(long)]
    angle: Option<f64>,
    /// Fixed foot size; omit to cycle {2.3, 2.4, 2.5, 2.6}.
    #[arg(long)]
    size: Option<f64>,
    #[arg(long, default_value_t = 1000)]
    seed: u64,
    /// Refuse the checkpoint unless it was trained as this variant.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long, default_value = "eval")]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckCli {
    /// toy | full
    #[arg(long, default_value = "toy")]
    scale: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Test hook: corrupt one analytic gradient (the gate must then fail).
    #[arg(long, hide = true)]
    corrupt: bool,
}

#[derive(Args)]
struct ExportCli {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Episode id from the dataset manifest, e.g. 000.
    #[arg(long)]
    episode: String,
    #[arg(long, default_value = "export")]
    out: PathBuf,
}

fn init_rayon() {
    if let Ok(n) = std::env::var("SOCKWEAVE_THREADS") {
        if let Ok(n) = n.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn run() -> Result<(), CmdError> {
    let cli = Cli::parse();
    init_rayon();
    match cli.command {
        Command::Gen(a) => commands::cmd_gen(&GenArgs {
            episodes: a.episodes,
            angles: a.angles,
            sizes: a.sizes,
            seed: a.seed,
            out: a.out,
        }),
        Command::Train(a) => {
            if a.resume {
                return Err(CmdError::Validation(
                    "--resume is not supported; training always starts fresh".into(),
                ));
            }
            commands::cmd_train(&TrainArgs {
                data: a.data,
                epochs: a.epochs,
                variant: a.variant,
                seed: a.seed,
                learning_rate: a.learning_rate,
                out: a.out,
            })
            .map(|_| ())
        }
        Command::Eval(a) => commands::cmd_eval(&EvalArgs {
            ckpt: a.ckpt,
            episodes: a.episodes,
            angle: a.angle,
            size: a.size,
            seed: a.seed,
            variant: a.variant,
            out: a.out,
        })
        .map(|_| ()),
        Command::Gradcheck(a) => commands::cmd_gradcheck(&GradcheckArgs {
            scale: a.scale,
            seed: a.seed,
            corrupt: a.corrupt,
        })
        .map(|_| ()),
        Command::Export(a) => commands::cmd_export(&ExportArgs {
            ckpt: a.ckpt,
            data: a.data,
            episode: a.episode,
            out: a.out,
        }),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
