use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rls_harness::config::ExperimentConfig;
use rls_harness::error::{AtStage, HarnessError, Result, Stage};
use rls_harness::experiment::{
    self, attack_rows, clean_rows, diversity_k, diversity_report, load_checkpoint, train_bank, write_csv,
    ATTACKS_FILE, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE,
};
use rls_harness::seeds::{self, SeedStreams};
use rls_harness::{emit_report, run_experiment, sweep_k};

#[derive(Parser)]
#[command(
    name = "rls",
    version,
    about = "Random layer sampling ensembles: train, attack, evaluate, report"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a bank and write the checkpoint and per-epoch metrics.
    Train(Common),
    /// Attack a trained checkpoint and write attacks.csv.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Defaults to checkpoint.json in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Clean accuracy and diversity of a checkpoint, printed as JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// One full run per K value.
    SweepK {
        #[command(flatten)]
        common: Common,
        /// Comma-separated K values.
        #[arg(long, value_delimiter = ',', default_values_t = [1, 3])]
        k: Vec<usize>,
    },
    /// Render report.md and plots from a run directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train, attack, measure diversity and render the report.
    Run(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn prepare(cfg: &ExperimentConfig) -> Result<()> {
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        stage: Stage::Persist,
        path: dir.clone(),
        source,
    })?;
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_json()).map_err(|source| HarnessError::Io {
        stage: Stage::Persist,
        path: dir.join(CONFIG_FILE),
        source,
    })
}

fn checkpoint_for(cfg: &ExperimentConfig, explicit: &Option<PathBuf>) -> PathBuf {
    explicit
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join(CHECKPOINT_FILE))
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn train_cmd(common: &Common) -> Result<()> {
    let cfg = load(common)?;
    prepare(&cfg)?;
    let (train_set, test_set) = cfg.load_datasets()?;
    let streams = SeedStreams::new(cfg.seed);
    let outcome = train_bank(&cfg, &train_set, &test_set, &streams)?;
    let path = cfg.output_dir.join(CHECKPOINT_FILE);
    rls_core::checkpoint::save(
        &rls_core::checkpoint::Checkpoint {
            bank: outcome.bank,
            train: cfg.train.clone(),
        },
        &path,
    )
    .at(Stage::Checkpoint)?;
    write_csv(&cfg.output_dir.join(METRICS_FILE), &outcome.history)?;
    if let Some(last) = outcome.history.last() {
        print_json(last);
    }
    Ok(())
}

fn attack_cmd(common: &Common, checkpoint: &Option<PathBuf>) -> Result<()> {
    let cfg = load(common)?;
    let ckpt = load_checkpoint(&checkpoint_for(&cfg, checkpoint))?;
    prepare(&cfg)?;
    let (_, test_set) = cfg.load_datasets()?;
    let streams = SeedStreams::new(cfg.seed);
    let mut rows = clean_rows(&ckpt.bank, &test_set, &cfg, &streams)?;
    rows.extend(attack_rows(&ckpt.bank, &test_set, &cfg, &streams)?);
    write_csv(&cfg.output_dir.join(ATTACKS_FILE), &rows)?;
    print_json(&rows);
    Ok(())
}

fn eval_cmd(common: &Common, checkpoint: &Option<PathBuf>) -> Result<()> {
    let cfg = load(common)?;
    let ckpt = load_checkpoint(&checkpoint_for(&cfg, checkpoint))?;
    let (_, test_set) = cfg.load_datasets()?;
    let streams = SeedStreams::new(cfg.seed);
    let clean = clean_rows(&ckpt.bank, &test_set, &cfg, &streams)?;
    let diversity = diversity_report(
        &ckpt.bank,
        &test_set,
        diversity_k(&cfg),
        &mut streams.stream(seeds::DIVERSITY),
    )
    .at(Stage::Diversity)?;
    print_json(&serde_json::json!({
        "clean": clean,
        "diversity": diversity,
        "params": experiment::param_counts(&ckpt.bank),
    }));
    Ok(())
}

fn report_cmd(dir: &Path) -> Result<()> {
    for path in emit_report(dir)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train(common) => train_cmd(common),
        Command::Attack { common, checkpoint } => attack_cmd(common, checkpoint),
        Command::Eval { common, checkpoint } => eval_cmd(common, checkpoint),
        Command::SweepK { common, k } => {
            let runs = sweep_k(&load(common)?, k)?;
            print_json(&runs);
            Ok(())
        }
        Command::Report { out } => report_cmd(out),
        Command::Run(common) => {
            let cfg = load(common)?;
            let metrics = run_experiment(&cfg)?;
            print_json(&metrics);
            report_cmd(&cfg.output_dir)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.stage());
            ExitCode::from(match e.stage() {
                Stage::Config => 2,
                _ => 1,
            })
        }
    }
}
