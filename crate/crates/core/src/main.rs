use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use odtc::cli::{
    cmd_eval, cmd_gen_corpus, cmd_inspect_topology, cmd_simulate_stopping, cmd_train, EvalSplit,
    ExperimentConfig, Overrides,
};
use odtc::session::stopping::PatienceMode;

/// Desk-scale simulation of resource-aware on-device ASR personalisation:
/// synthetic corpora, sub-model selection, CTC training, and stopping-rule
/// experiments, all deterministic under a fixed seed.
#[derive(Parser, Debug)]
#[command(name = "odtc", version)]
struct Cli {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the number of personalisation rounds.
    #[arg(long, global = true)]
    rounds: Option<u64>,
    /// Override the utterances per session cache.
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Override the simulated device profile, by name.
    #[arg(long, global = true)]
    device: Option<String>,
    /// Override the patience bookkeeping variant.
    #[arg(long, global = true, value_enum)]
    patience_mode: Option<PatienceModeArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PatienceModeArg {
    NoImprovement,
    PaperLiteral,
}

impl From<PatienceModeArg> for PatienceMode {
    fn from(value: PatienceModeArg) -> Self {
        match value {
            PatienceModeArg::NoImprovement => PatienceMode::NoImprovement,
            PatienceModeArg::PaperLiteral => PatienceMode::PaperLiteral,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    All,
}

impl From<SplitArg> for EvalSplit {
    fn from(value: SplitArg) -> Self {
        match value {
            SplitArg::Train => EvalSplit::Train,
            SplitArg::Validation => EvalSplit::Validation,
            SplitArg::All => EvalSplit::All,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesise per-speaker session corpora (WAVs + TSV manifest).
    GenCorpus {
        /// Output directory; defaults to `<out_dir>/corpus`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the sub-model table (window, parameters, fraction) for a
    /// layer manifest; the bundled full-scale manifest when omitted.
    InspectTopology {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Run the multi-round training loop; writes the epoch CSV and
    /// best-WER checkpoints.
    Train {
        /// Output directory; defaults to the config's `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on the corpus it was trained against.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Read utterances from a materialised corpus directory instead
        /// of regenerating them from the checkpoint's corpus seed.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "validation")]
        split: SplitArg,
        /// Where to write the per-utterance CSV report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Replay a scripted WER sequence through the stopping rule.
    SimulateStopping {
        /// Comma-separated validation WERs, one per epoch.
        #[arg(long, value_delimiter = ',', required = true)]
        wers: Vec<f64>,
        #[arg(long, default_value_t = 100.0)]
        battery_start: f64,
        /// Battery percentage drained per epoch.
        #[arg(long, default_value_t = 0.0)]
        battery_drain: f64,
        #[arg(long, default_value_t = 20.0)]
        battery_floor: f64,
        /// Epoch budget; defaults to the script length.
        #[arg(long)]
        max_epochs: Option<u64>,
        #[arg(long, default_value_t = 2)]
        patience: u64,
    },
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();

    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    config.apply_overrides(&Overrides {
        seed: cli.seed,
        rounds: cli.rounds,
        n: cli.n,
        device: cli.device.clone(),
        patience_mode: cli.patience_mode.map(PatienceMode::from),
    });

    match cli.command {
        Command::GenCorpus { out } => {
            let exp = config.resolve()?;
            let out = out.unwrap_or_else(|| exp.out_dir.join("corpus"));
            cmd_gen_corpus(&exp, &out)
        }
        Command::InspectTopology { manifest } => {
            let table = cmd_inspect_topology(manifest.as_deref())?;
            print!("{table}");
            Ok(())
        }
        Command::Train { out } => {
            let exp = config.resolve()?;
            let out = out.unwrap_or_else(|| exp.out_dir.clone());
            cmd_train(&exp, &out).map(|_| ())
        }
        Command::Eval {
            checkpoint,
            manifest,
            split,
            report,
        } => {
            let exp = config.resolve()?;
            cmd_eval(
                &exp,
                &checkpoint,
                manifest.as_deref(),
                split.into(),
                report.as_deref(),
            )
            .map(|_| ())
        }
        Command::SimulateStopping {
            wers,
            battery_start,
            battery_drain,
            battery_floor,
            max_epochs,
            patience,
        } => {
            let trace = cmd_simulate_stopping(
                &wers,
                battery_start,
                battery_drain,
                battery_floor,
                max_epochs,
                patience,
                cli.patience_mode
                    .map(PatienceMode::from)
                    .unwrap_or_default(),
            )?;
            print!("{trace}");
            Ok(())
        }
    }
}
