//! `mff-seld`: synthesize data, extract features, train, evaluate and verify
//! the MFF-EINV2 SELD model.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};
use mff_seld::config::{split_overrides, Config, Precision, KEYS};
use mff_seld::dataset::{atomic_write, extract_dir, synthesize, Dataset};
use mff_seld::features::save_features;
use mff_seld::labels::format_labels;
use mff_seld::metrics::{evaluate_files, MetricsReport};
use mff_seld::network::{count_params, param_breakdown, Einv2};
use mff_seld::training::{metrics_config, Trainer};
use mff_seld::verify::full_suite;
use mff_seld::SeldError;
use mff_tensor::checkpoint::{load_checkpoint, save_checkpoint};
use mff_tensor::Scalar;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Parser)]
#[command(
    name = "mff-seld",
    version,
    about = "MFF-EINV2 sound event localization and detection"
)]
struct Cli {
    /// Plain-text `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Starting configuration before the file and overrides are applied.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Full)]
    preset: Preset,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Preset {
    /// Full-size model.
    Full,
    /// Reduced model for single-machine experiments.
    Desk,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic FOA clips with labels and a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        clips: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Extract log-mel and intensity-vector features into a cache file.
    Features {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes the epoch log and checkpoints into `--out`.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Feature cache for `--data`; features are extracted when absent.
        #[arg(long)]
        features: Option<PathBuf>,
        /// Validation dataset directory; the training set is used when absent.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        val_features: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score predictions: either two label files, or a checkpoint on a dataset.
    Eval {
        #[arg(long, requires = "reference", conflicts_with_all = ["checkpoint", "data"])]
        pred: Option<PathBuf>,
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        /// Write the machine-readable report here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Write one predicted label file per segment into this directory.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Run the 64-bit finite-difference gradient suite.
    Gradcheck {
        /// Checked elements per module parameter tensor; 0 checks all.
        #[arg(long, default_value_t = 16)]
        max_per_tensor: usize,
    },
    /// Print total and per-module parameter counts.
    Params,
}

fn keys_help() -> String {
    let defaults = Config::default();
    let mut s =
        String::from("Configuration keys (set in --config FILE or as --key=value overrides; defaults shown):\n");
    for (k, doc) in KEYS {
        s.push_str(&format!("  {k:<24} {doc} [{}]\n", defaults.get(k).unwrap_or_default()));
    }
    s.push_str("\nEnvironment: MFF_SELD_THREADS caps the worker pool.\n");
    s.push_str("Exit codes: 0 success, 1 usage or configuration, 2 data or IO, 3 check failure.");
    s
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<SeldError>() {
            Some(SeldError::Config(_)) => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        Self { code, error }
    }
}

impl From<mff_tensor::TensorError> for Failure {
    fn from(e: mff_tensor::TensorError) -> Self {
        SeldError::from(e).into()
    }
}

impl From<SeldError> for Failure {
    fn from(e: SeldError) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args());
    let cli = match Cli::command_with_keys().try_get_matches_from(&args) {
        Ok(m) => match <Cli as clap::FromArgMatches>::from_arg_matches(&m) {
            Ok(c) => c,
            Err(e) => return usage(e),
        },
        Err(e) => return usage(e),
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_USAGE);
    }
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn usage(e: clap::Error) -> ExitCode {
    let _ = e.print();
    if e.use_stderr() {
        ExitCode::from(EXIT_USAGE)
    } else {
        ExitCode::SUCCESS
    }
}

trait WithKeys {
    fn command_with_keys() -> clap::Command;
}

impl WithKeys for Cli {
    fn command_with_keys() -> clap::Command {
        <Cli as clap::CommandFactory>::command()
            .after_long_help(keys_help())
            .after_help(keys_help())
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MFF_SELD_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("MFF_SELD_THREADS={v} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn load_config(preset: Preset, path: Option<&Path>, overrides: &[(String, String)]) -> Result<Config, Failure> {
    let mut cfg = match preset {
        Preset::Full => Config::default(),
        Preset::Desk => Config::desk(),
    };
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| SeldError::io(p, e))?;
        cfg.apply_text(&text)
            .map_err(SeldError::from)
            .with_context(|| format!("{}", p.display()))?;
    }
    for (k, v) in overrides {
        cfg.set(k, v).map_err(SeldError::from)?;
    }
    cfg.validate().map_err(SeldError::from)?;
    Ok(cfg)
}

fn log_config(cfg: &Config) {
    eprintln!("# configuration");
    for line in cfg.dump().lines() {
        eprintln!("#   {line}");
    }
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<(), Failure> {
    let mut cfg = load_config(cli.preset, cli.config.as_deref(), overrides)?;
    match cli.command {
        Command::Synth { out, clips, seed } => {
            log_config(&cfg);
            let ids = synthesize(&out, clips, seed, &cfg)?;
            println!(
                "wrote {} clips and {}",
                ids.len(),
                out.join(mff_seld::dataset::MANIFEST).display()
            );
        }
        Command::Features { input, out } => {
            log_config(&cfg);
            let feats = extract_dir(&input, &cfg)?;
            save_features(&out, &feats)?;
            println!("wrote {} feature blocks to {}", feats.len(), out.display());
        }
        Command::Train {
            data,
            features,
            val,
            val_features,
            out,
            seed,
            resume,
        } => {
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            log_config(&cfg);
            let train = Dataset::load(&data, &cfg, features.as_deref())?;
            if train.is_empty() {
                return Err(SeldError::data(format!("{}: no training segments", data.display())).into());
            }
            let val = val
                .map(|v| Dataset::load(&v, &cfg, val_features.as_deref()))
                .transpose()?;
            std::fs::create_dir_all(&out).map_err(|e| SeldError::io(&out, e))?;
            atomic_write(&out.join("config.txt"), cfg.dump().as_bytes())?;
            match cfg.train.precision {
                Precision::F32 => train_with::<f32>(&cfg, &train, val.as_ref(), &out, resume.as_deref())?,
                Precision::F64 => train_with::<f64>(&cfg, &train, val.as_ref(), &out, resume.as_deref())?,
            }
        }
        Command::Eval {
            pred,
            reference,
            checkpoint,
            data,
            features,
            csv,
            predictions,
        } => {
            let report = match (pred, reference, checkpoint, data) {
                (Some(p), Some(r), None, None) => evaluate_files(&p, &r, metrics_config(&cfg))?,
                (None, None, Some(ck), Some(d)) => {
                    log_config(&cfg);
                    eval_checkpoint(&cfg, &ck, &d, features.as_deref(), predictions.as_deref())?
                }
                _ => {
                    return Err(Failure {
                        code: EXIT_USAGE,
                        error: anyhow!("eval needs either --pred and --ref, or --checkpoint and --data"),
                    })
                }
            };
            print_report(&report, csv.as_deref())?;
        }
        Command::Gradcheck { max_per_tensor } => {
            let limit = (max_per_tensor > 0).then_some(max_per_tensor);
            let results = full_suite(limit)?;
            let mut failed = 0;
            println!(
                "{:<48} {:>12} {:>8} {:>6}  status",
                "check", "max rel err", "points", "kinks"
            );
            for r in &results {
                let ok = r.report.passed();
                failed += usize::from(!ok);
                println!(
                    "{:<48} {:>12.3e} {:>8} {:>6}  {}",
                    r.name,
                    r.report.max_rel_err,
                    r.report.checked,
                    r.report.kinks_skipped,
                    if ok { "ok" } else { "FAIL" }
                );
                if !ok {
                    if let Some(w) = r.report.worst.as_ref().or(r.report.non_finite.as_ref()) {
                        println!("    {w}");
                    }
                }
            }
            println!(
                "{} checks, {failed} failed, tolerance {:e}",
                results.len(),
                results[0].report.tol
            );
            if failed > 0 {
                return Err(Failure {
                    code: EXIT_CHECK,
                    error: anyhow!("{failed} gradient checks failed"),
                });
            }
        }
        Command::Params => {
            let (_, store) = Einv2::init::<f32>(&cfg, cfg.train.seed)?;
            let total = count_params(&store);
            for (module, n) in param_breakdown(&store) {
                println!("{module:<16} {n:>12}");
            }
            println!("{:<16} {total:>12}", "total");
            println!("{:<16} {:>12.2}M", "", total as f64 / 1e6);
        }
    }
    Ok(())
}

fn train_with<T: Scalar>(
    cfg: &Config,
    train: &Dataset,
    val: Option<&Dataset>,
    out: &Path,
    resume: Option<&Path>,
) -> Result<(), Failure> {
    let mut trainer = Trainer::<T>::new(cfg)?;
    if let Some(ck) = resume {
        load_checkpoint(&mut trainer.store, ck).with_context(|| format!("loading {}", ck.display()))?;
    }
    eprintln!(
        "# {} trainable parameters, {} training segments",
        count_params(&trainer.store),
        train.len()
    );
    let log_path = out.join("train_log.tsv");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| SeldError::io(&log_path, e))?);
    let best = out.join("best.ckpt");
    let history = trainer.fit(train, val, &mut log, Some(&best), &mut |rec| {
        eprintln!(
            "epoch {:>4}  lr {:.1e}  loss {:.5}  (sed {:.5}, doa {:.5})  grad-norm {:.4}{}",
            rec.epoch,
            rec.lr,
            rec.train_loss,
            rec.sed_loss,
            rec.doa_loss,
            rec.grad_norm,
            rec.val
                .as_ref()
                .map_or(String::new(), |r| format!("  val SELD {:.4}", r.seld_score))
        );
        ControlFlow::Continue(())
    })?;
    log.flush().map_err(|e| SeldError::io(&log_path, e))?;
    save_checkpoint(&trainer.store, &out.join("final.ckpt"))?;
    let best_score = history
        .iter()
        .filter_map(|r| r.val.as_ref().map(|v| v.seld_score))
        .fold(f64::INFINITY, f64::min);
    println!(
        "trained {} epochs; best validation SELD {best_score:.4}; outputs in {}",
        history.len(),
        out.display()
    );
    Ok(())
}

fn eval_checkpoint(
    cfg: &Config,
    ck: &Path,
    data: &Path,
    features: Option<&Path>,
    predictions: Option<&Path>,
) -> Result<MetricsReport, Failure> {
    if !ck.exists() {
        bail_data(format!("checkpoint {} does not exist", ck.display()))?;
    }
    let (net, mut store) = Einv2::init::<f32>(cfg, 0)?;
    load_checkpoint(&mut store, ck).with_context(|| format!("loading {}", ck.display()))?;
    let trainer = Trainer::with_params(cfg, net, store);
    let set = Dataset::load(data, cfg, features)?;
    if let Some(dir) = predictions {
        std::fs::create_dir_all(dir).map_err(|e| SeldError::io(dir, e))?;
        for (s, p) in set.samples.iter().zip(trainer.predict(&set)?) {
            let name = format!("{}.csv", s.id.replace(':', "_"));
            atomic_write(&dir.join(name), format_labels(&p).as_bytes())?;
        }
    }
    Ok(trainer.evaluate(&set)?)
}

fn bail_data(msg: String) -> Result<(), Failure> {
    Err(Failure {
        code: EXIT_DATA,
        error: anyhow!(msg),
    })
}

fn print_report(report: &MetricsReport, csv: Option<&Path>) -> Result<(), Failure> {
    print!("{}", report.table());
    match csv {
        Some(p) => atomic_write(p, report.csv().as_bytes())?,
        None => print!("\n{}", report.csv()),
    }
    Ok(())
}
