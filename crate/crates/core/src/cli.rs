//! Command-line surface. Exit codes: 0 success, 1 other failure (including
//! a failed gradient check), 2 configuration error, 3 I/O or format error,
//! 4 non-finite loss.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::checkpoint::{self, CHECKPOINT_FILE};
use crate::config::Config;
use crate::data::{generate_synthetic, load_dataset_dir, save_dataset, GzslDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, evaluate_zsl, metrics_csv, MetricBlock, TestEmbeddings, SEED_OFFSET_SYNTH};
use crate::gradcheck::{format_report, run_all, GradcheckOptions};
use crate::models::Models;
use crate::ndcore::Rng;
use crate::pipeline::{init_models, synthesize_unseen, train_epochs};

pub const REPORT_FILE: &str = "report.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Parser, Debug)]
#[command(name = "pcegzsl", version, about = "Prototypical contrastive embedding for generalized zero-shot learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    /// GZSL U, S, H and ZSL T.
    All,
    /// ZSL T only.
    Zsl,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a seeded synthetic dataset directory.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train, then write checkpoint, per-epoch report, metrics and config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// plain, margin or adaptive.
        #[arg(long)]
        variant: Option<String>,
        /// Continue from this checkpoint for `epochs` further epochs.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; prints the metrics CSV and writes it to a file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to the config.txt stored next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        mode: EvalMode,
        #[arg(long)]
        synth_per_class: Option<usize>,
        /// Defaults to eval.csv next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        configs: usize,
        /// Scale one suite's analytic gradient by 1.01 (self-test).
        #[arg(long)]
        corrupt: Option<String>,
    },
    /// Export embeddings of real test samples and synthetic unseen samples.
    DumpEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        synth_per_class: Option<usize>,
    },
}

/// Parses arguments and runs a command; returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if code == 0 { write!(out, "{e}") } else { write!(err, "{e}") };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    path.map_or_else(|| Ok(Config::default()), Config::load)
}

fn echo(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

/// Config for a stored checkpoint: explicit path, else the config saved
/// beside it, else defaults.
fn checkpoint_config(checkpoint: &Path, explicit: Option<&Path>) -> Result<Config> {
    if explicit.is_some() {
        return load_config(explicit);
    }
    let beside = checkpoint.with_file_name(CONFIG_FILE);
    if beside.is_file() {
        Config::load(&beside)
    } else {
        Ok(Config::default())
    }
}

/// Contract violations in user-supplied settings are configuration errors.
fn as_config_error(e: Error) -> Error {
    match e {
        Error::Contract(msg) => Error::Config { line: 0, msg },
        other => other,
    }
}

fn restore(checkpoint: &Path, ds: &GzslDataset, cfg: &Config) -> Result<(Models, usize)> {
    let template = init_models(ds, &cfg.train).map_err(as_config_error)?;
    checkpoint::load(checkpoint, &template)
}

/// Runs one command. `Ok(false)` means it ran but failed its own check.
pub fn execute(command: Command, out: &mut dyn Write) -> Result<bool> {
    match command {
        Command::GenData { config, out: dir } => {
            let cfg = load_config(config.as_deref())?;
            let ds = generate_synthetic(&cfg.data)?;
            save_dataset(&ds, &dir)?;
            echo(out, &format!("{}\n", ds.summary()))?;
        }
        Command::Train {
            config,
            data,
            out: dir,
            variant,
            resume,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(v) = variant {
                cfg.train = cfg.train.with_variant(&v).map_err(as_config_error)?;
            }
            let ds = load_dataset_dir(&data)?;
            let (mut models, completed) = match &resume {
                Some(path) => restore(path, &ds, &cfg)?,
                None => (init_models(&ds, &cfg.train).map_err(as_config_error)?, 0),
            };
            let mut report = train_epochs(&mut models, &ds, &cfg.train, completed)?;
            let metrics = evaluate(&models, &ds, &cfg.train)?.metrics;
            report.metrics = Some(metrics);

            create_dir(&dir)?;
            checkpoint::save(&models, completed + cfg.train.epochs, &dir.join(CHECKPOINT_FILE))?;
            write_file(&dir.join(REPORT_FILE), &report.to_csv())?;
            write_file(&dir.join(CONFIG_FILE), &cfg.to_text())?;
            let csv = metrics_csv(&[metrics.csv_row(cfg.train.variant.name())]);
            write_file(&dir.join(METRICS_FILE), &csv)?;
            echo(out, &csv)?;
        }
        Command::Eval {
            checkpoint,
            data,
            config,
            mode,
            synth_per_class,
            out: out_path,
        } => {
            let mut cfg = checkpoint_config(&checkpoint, config.as_deref())?;
            if let Some(n) = synth_per_class {
                cfg.train.n_synth_per_unseen = n;
                cfg.validate()?;
            }
            let ds = load_dataset_dir(&data)?;
            let (models, _) = restore(&checkpoint, &ds, &cfg)?;
            let name = cfg.train.variant.name();
            let row = match mode {
                EvalMode::All => evaluate(&models, &ds, &cfg.train)?.metrics.csv_row(name),
                EvalMode::Zsl => MetricBlock {
                    u: f64::NAN,
                    s: f64::NAN,
                    h: f64::NAN,
                    t: evaluate_zsl(&models, &ds, &cfg.train)?,
                }
                .zsl_csv_row(name),
            };
            let csv = metrics_csv(&[row]);
            let path = out_path.unwrap_or_else(|| checkpoint.with_file_name(EVAL_FILE));
            write_file(&path, &csv)?;
            echo(out, &csv)?;
        }
        Command::Gradcheck {
            seed,
            configs,
            corrupt,
        } => {
            let results = run_all(&GradcheckOptions {
                seed,
                configs,
                corrupt,
            })?;
            echo(out, &format_report(&results))?;
            return Ok(results.iter().all(|r| r.passed()));
        }
        Command::DumpEmbeddings {
            checkpoint,
            data,
            out: path,
            config,
            synth_per_class,
        } => {
            let mut cfg = checkpoint_config(&checkpoint, config.as_deref())?;
            if let Some(n) = synth_per_class {
                cfg.train.n_synth_per_unseen = n;
                cfg.validate()?;
            }
            let ds = load_dataset_dir(&data)?;
            let (models, _) = restore(&checkpoint, &ds, &cfg)?;
            let csv = embeddings_csv(&models, &ds, cfg.train.n_synth_per_unseen, cfg.train.seed)?;
            write_file(&path, &csv)?;
            echo(out, &format!("wrote {} rows to {}\n", csv.lines().count() - 1, path.display()))?;
        }
    }
    Ok(true)
}

/// Header `h0,…,h{D_h−1},label,fake`; real test rows (seen then unseen)
/// with `fake = 0`, then synthetic unseen rows with `fake = 1`.
pub fn embeddings_csv(models: &Models, ds: &GzslDataset, n_synth: usize, seed: u64) -> Result<String> {
    let test = TestEmbeddings::compute(models, ds)?;
    let mut rng = Rng::child(seed, SEED_OFFSET_SYNTH);
    let (xs, ys) = synthesize_unseen(&models.generator, ds, n_synth, &mut rng)?;
    let synth = (models.embedding.net.infer(&xs)?, ys);

    let mut out = String::new();
    for j in 0..models.dims.d_h {
        write!(out, "h{j},").unwrap();
    }
    out.push_str("label,fake\n");
    for ((emb, labels), flag) in [(&test.seen, 0), (&test.unseen, 0), (&synth, 1)] {
        for (row, label) in emb.row_iter().zip(labels) {
            for v in row {
                write!(out, "{v:.6},").unwrap();
            }
            writeln!(out, "{label},{flag}").unwrap();
        }
    }
    Ok(out)
}
