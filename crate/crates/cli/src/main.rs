//! `wm`: data generation, training, evaluation, sweeps and impact reports.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use wm_sweep::records::{label_divergence, load_records, RunStatus, RunSummary, SUMMARY_FILE};
use wm_sweep::runner::{run_sweep, train_into};
use wm_sweep::{Manifest, VariableSpace, DESK_MIN_PAIRS, DESK_SAMPLE_SIZE};
use world_machine::config::{ExperimentConfig, ProtocolConfig};
use world_machine::eval::{result_rows, write_rows, Evaluator, Task};
use world_machine::model::checkpoint;
use world_machine::toy1d::{generate_dataset, GenerationConfig, Split, Toy1DDataset};
use world_machine::Error;

// The tape allocates and frees large buffers every step; glibc's mmap
// threshold turns that into page faults that dominate epoch time.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "wm", version, about = "Train and analyse world machines on the Toy1D system")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    /// 40,000 sequences of 200 steps, d=128, 100 epochs.
    Paper,
    /// 2,000 sequences of 64 steps, d=32, 50 epochs.
    Desk,
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    Base,
    SensoryMask,
    Complete,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Toy1D dataset container.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write train/val/test CSV files into this directory.
        #[arg(long)]
        export_csv: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "paper")]
        scale: Scale,
    },
    /// Print or write a canonical experiment config.
    Config {
        #[arg(long, value_enum, default_value = "desk")]
        scale: Scale,
        #[arg(long, value_enum, default_value = "base")]
        protocol: Protocol,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model; writes checkpoint, epoch log and summary.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the configured split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated task names or `all`.
        #[arg(long, default_value = "all")]
        tasks: String,
        /// Percentage of sensory steps hidden by mask_sensory.
        #[arg(long, default_value_t = 100.0)]
        mask_x: f64,
        #[arg(long)]
        max_sequences: Option<usize>,
        /// Result CSV path; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a sweep manifest: the stratified desk sample or the full space.
    Manifest {
        #[arg(long)]
        out: PathBuf,
        /// Base config; the desk preset with sensory masking when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = DESK_SAMPLE_SIZE)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Every one of the 9,600 variations instead of a sample.
        #[arg(long)]
        full: bool,
        #[arg(long, default_value_t = 100.0)]
        mask_x: f64,
    },
    /// Train and evaluate every manifest variation not yet completed.
    Sweep {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Impact, Wilcoxon, divergence and correlation tables plus charts.
    ImpactReport {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure carrying its exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config { .. } | Error::UnknownTask { .. } | Error::Json(_) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> CmdResult {
    match command {
        Command::GenData {
            seed,
            out,
            export_csv,
            scale,
        } => gen_data(seed, &out, export_csv.as_deref(), scale),
        Command::Config {
            scale,
            protocol,
            epochs,
            seed,
            out,
        } => config(scale, protocol, epochs, seed, out.as_deref()),
        Command::Train { config, data, out } => train(&config, &data, &out),
        Command::Eval {
            checkpoint,
            data,
            tasks,
            mask_x,
            max_sequences,
            out,
        } => eval(&checkpoint, &data, &tasks, mask_x, max_sequences, out.as_deref()),
        Command::Manifest {
            out,
            config,
            size,
            seed,
            full,
            mask_x,
        } => manifest(&out, config.as_deref(), size, seed, full, mask_x),
        Command::Sweep {
            manifest,
            data,
            out,
            parallel,
        } => sweep(&manifest, &data, &out, parallel),
        Command::ImpactReport { records, out } => impact_report(&records, &out),
    }
}

fn gen_data(seed: u64, out: &Path, export_csv: Option<&Path>, scale: Scale) -> CmdResult {
    let cfg = match scale {
        Scale::Paper => GenerationConfig::full(),
        Scale::Desk => GenerationConfig::desk(),
    };
    let data = generate_dataset(seed, &cfg)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(Error::io(parent))?;
    }
    data.save(out)?;
    if let Some(dir) = export_csv {
        data.export_csv(dir)?;
    }
    let [train, val, test] = data.split_counts();
    println!("sequences {} x {}", data.len(), data.seq_len());
    println!("splits train {train} val {val} test {test}");
    println!("sha256 {}", data.checksum());
    Ok(())
}

fn config(scale: Scale, protocol: Protocol, epochs: Option<usize>, seed: Option<u64>, out: Option<&Path>) -> CmdResult {
    let mut cfg = match scale {
        Scale::Paper => ExperimentConfig::paper(),
        Scale::Desk => ExperimentConfig::desk(),
    };
    let (proto, name) = match protocol {
        Protocol::Base => (ProtocolConfig::base(), "base"),
        Protocol::SensoryMask => (ProtocolConfig::sensory_mask(), "sensory-mask"),
        Protocol::Complete => (ProtocolConfig::complete(), "complete"),
    };
    cfg.protocol = proto;
    cfg.name = name.to_string();
    if let Some(e) = epochs {
        cfg.schedule.epochs = e;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    match out {
        Some(path) => cfg.save(path)?,
        None => println!("{}", cfg.to_canonical_json()?),
    }
    Ok(())
}

fn train(config: &Path, data: &Path, out: &Path) -> CmdResult {
    let cfg = ExperimentConfig::load(config)?;
    let data = Toy1DDataset::load(data)?;
    let total = cfg.schedule.epochs;
    let (outcome, _) = train_into(&cfg, &data, out, |s| {
        eprintln!(
            "epoch {}/{total} train {:.5} val {:.5} {:.2}s{}",
            s.epoch,
            s.train_loss,
            s.val_loss,
            s.seconds,
            if s.diverged { " diverged" } else { "" }
        );
    })?;
    let summary = RunSummary {
        variation_id: cfg.name.clone(),
        status: RunStatus::Completed,
        epochs: outcome.epochs.len(),
        total_epoch_seconds: outcome.total_seconds(),
        diverged: outcome.diverged,
        error: None,
    };
    summary.save(&out.join(SUMMARY_FILE))?;
    if outcome.diverged {
        return Err(Failure {
            code: EXIT_DIVERGED,
            msg: format!("training diverged at epoch {}", outcome.epochs.len()),
        });
    }
    Ok(())
}

fn eval(
    checkpoint_path: &Path,
    data: &Path,
    tasks: &str,
    mask_x: f64,
    max_sequences: Option<usize>,
    out: Option<&Path>,
) -> CmdResult {
    let tasks = Task::parse_list(tasks, mask_x)?;
    let (mut cfg, model) = checkpoint::load(checkpoint_path)?;
    let data = Toy1DDataset::load(data)?;
    if max_sequences.is_some() {
        cfg.eval.max_sequences = max_sequences;
    }
    if data.indices(cfg.eval.split).is_empty() {
        let split: Split = cfg.eval.split;
        return Err(Error::Invalid(format!("dataset has no {} sequences", split.name())).into());
    }
    let results = Evaluator::new(&model, &data, &cfg.eval)?.run_all(&tasks)?;
    let rows = result_rows(&cfg.name, &results, false);
    match out {
        Some(path) => write_rows(fs::File::create(path).map_err(Error::io(path))?, &rows)?,
        None => {
            let mut buf = Vec::new();
            write_rows(&mut buf, &rows)?;
            std::io::stdout().write_all(&buf).map_err(Error::io("<stdout>"))?;
        }
    }
    Ok(())
}

fn manifest(out: &Path, config: Option<&Path>, size: usize, seed: u64, full: bool, mask_x: f64) -> CmdResult {
    let base = match config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig {
            name: "sweep".to_string(),
            protocol: ProtocolConfig::sensory_mask(),
            ..ExperimentConfig::desk()
        },
    };
    let variations = if full {
        VariableSpace::full().enumerate()
    } else {
        wm_sweep::stratified(size, DESK_MIN_PAIRS, seed)
    };
    let mut m = Manifest::new(base, &variations);
    m.mask_x = mask_x;
    m.validate()?;
    m.save(out)?;
    let short: Vec<String> = wm_sweep::pair_counts(&variations)
        .into_iter()
        .filter(|&(_, n)| n < DESK_MIN_PAIRS)
        .map(|(a, n)| format!("{a}:{n}"))
        .collect();
    println!("{} variations", variations.len());
    if !short.is_empty() {
        println!("indicators below {DESK_MIN_PAIRS} pairs: {}", short.join(" "));
    }
    Ok(())
}

fn sweep(manifest: &Path, data: &Path, out: &Path, parallel: usize) -> CmdResult {
    let m = Manifest::load(manifest)?;
    let data = Toy1DDataset::load(data)?;
    let outcome = run_sweep(&m, &data, out, parallel)?;
    println!(
        "ran {} skipped {} failed {}",
        outcome.ran.len(),
        outcome.skipped.len(),
        outcome.failed.len()
    );
    for (id, err) in &outcome.failed {
        eprintln!("{id}: {err}");
    }
    if !outcome.failed.is_empty() {
        return Err(Failure {
            code: EXIT_RUNTIME,
            msg: format!("{} variations failed", outcome.failed.len()),
        });
    }
    Ok(())
}

fn impact_report(records: &Path, out: &Path) -> CmdResult {
    let mut recs = load_records(records)?;
    if recs.is_empty() {
        return Err(Error::Invalid(format!("no completed records under {}", records.display())).into());
    }
    label_divergence(&mut recs);
    wm_sweep::report::write_report(&recs, out)?;
    println!(
        "{} records, {} diverged",
        recs.len(),
        recs.iter().filter(|r| r.diverged).count()
    );
    Ok(())
}
