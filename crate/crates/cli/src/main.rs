mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "elgs", version, about = "Point-cloud semantic segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Experiment configuration shared by the model commands.
#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// JSON file with `network`, `train` and `data` sections.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set train.epochs=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for initialization, data order and block sampling.
    #[arg(long, env = "ELGS_SEED")]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labeled synthetic scene.
    GenData {
        /// `two-planes`, `four-class`, or a JSON scene description.
        #[arg(long, default_value = "two-planes")]
        scene: String,
        /// Output cloud; `.pcld` is binary, anything else ASCII.
        #[arg(long, short)]
        out: PathBuf,
        /// Points per plane for `two-planes`.
        #[arg(long, default_value_t = 1024)]
        points_per_plane: usize,
        #[arg(long, default_value_t = 0.0)]
        jitter: f64,
        #[arg(long, env = "ELGS_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Train on a labeled cloud; writes a checkpoint and a JSON-lines log.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, short)]
        data: PathBuf,
        /// Checkpoint path.
        #[arg(long, short)]
        out: PathBuf,
        /// Training log; defaults to the checkpoint path with `.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Print metrics of a model (or of a predicted cloud) as JSON.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Labeled ground-truth cloud.
        #[arg(long, short)]
        data: PathBuf,
        /// Checkpoint to evaluate.
        #[arg(long, short, required_unless_present = "predicted")]
        model: Option<PathBuf>,
        /// Cloud whose label column holds predictions; skips the model.
        #[arg(long, conflicts_with_all = ["model", "robustness"])]
        predicted: Option<PathBuf>,
        /// Also report accuracy under scale and rotation perturbations.
        #[arg(long)]
        robustness: bool,
    },
    /// Label every point of a cloud.
    Predict {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, short)]
        model: PathBuf,
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Finite-difference gradient check of a tiny network. Exits 2 on failure.
    Gradcheck {
        /// JSON gradcheck settings; defaults to the built-in tiny network.
        #[arg(long, short)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, env = "ELGS_SEED")]
        seed: Option<u64>,
    },
    /// Train and evaluate ablation variants on the same data.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, short)]
        data: PathBuf,
        /// Comma-separated: full, w/o-cr, w/o-gpm, w/o-am, cr-concat.
        #[arg(long, value_delimiter = ',', default_value = "full,w/o-cr,w/o-gpm,w/o-am,cr-concat")]
        variants: Vec<String>,
        /// Also write the rows as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-stage forward timing on a random block.
    Bench {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 4096)]
        points: usize,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData {
            scene,
            out,
            points_per_plane,
            jitter,
            seed,
        } => commands::gen_data(&scene, &out, points_per_plane, jitter, seed),
        Command::Train {
            config,
            data,
            out,
            log,
            lr,
            epochs,
        } => commands::train(&config, &data, &out, log.as_deref(), lr, epochs),
        Command::Eval {
            config,
            data,
            model,
            predicted,
            robustness,
        } => commands::eval(&config, &data, model.as_deref(), predicted.as_deref(), robustness),
        Command::Predict {
            config,
            model,
            input,
            out,
        } => commands::predict(&config, &model, &input, &out),
        Command::Gradcheck {
            config,
            overrides,
            seed,
        } => commands::gradcheck(config.as_deref(), &overrides, seed),
        Command::Ablate {
            config,
            data,
            variants,
            out,
        } => commands::ablate(&config, &data, &variants, out.as_deref()),
        Command::Bench {
            config,
            points,
            repeats,
        } => commands::bench(&config, points, repeats),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
