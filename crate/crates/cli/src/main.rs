//! Command-line front end: synthetic archives, training, evaluation
//! reports, and a finite-difference gradient self-check.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or configuration error,
//! 3 numeric error. `RHYME_THREADS` caps worker parallelism (default 1);
//! results do not depend on it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use rhyme_core::data::{
    generate_synthetic, load_checkpoint, load_manifest, load_utterances, save_checkpoint,
    select_dev, ClassLabel, LoadedUtterance, ManifestRecord, Split, SyntheticSpec,
};
use rhyme_core::metrics::{
    compute_eer, emit_report, per_generator_eer, reliability, roc_points, EvalReport,
    ReportFormat, REPORT_SCHEMA_VERSION, TIE_CONVENTION,
};
use rhyme_core::network::{score_utterances, Ablation, ModelConfig};
use rhyme_core::training::{kfold_split, train, GradCheckReport, TrainConfig};
use rhyme_core::{Result, RhymeError};

const GRAD_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "rhyme", version, about = "Geometry-aware audio spoofing detector")]
struct Cli {
    /// Suppress progress lines on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    /// Omit wall-clock fields from reports and train logs so identical
    /// runs produce identical bytes.
    #[arg(long, global = true)]
    no_timestamp: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic embedding archive with a manifest.
    GenSynth {
        /// Directory to create the archive in.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n_per_class: usize,
        #[arg(long, default_value_t = 50)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        /// Mean shift of the spoof class along the first coordinate.
        #[arg(long, default_value_t = 2.0)]
        sep: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Drop the frame-position sinusoid the spoof class carries.
        #[arg(long)]
        no_sinusoid: bool,
    },
    /// Train a detector on a manifest's train split.
    Train {
        #[arg(long)]
        train_manifest: PathBuf,
        /// Restrict training (and the dev split) to this corpus tag.
        #[arg(long)]
        train_corpus: Option<String>,
        /// Corpus tag the held-out test selection comes from.
        #[arg(long)]
        test_corpus: Option<String>,
        /// Spoof generator tags to hold out of training entirely.
        #[arg(long, value_delimiter = ',')]
        exclude_generators: Vec<String>,
        #[arg(long, default_value = "full", value_parser = parse_ablation)]
        ablation: Ablation,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Run stratified k-fold cross-validation over the train split
        /// first, then fit the final model on all of it.
        #[arg(long)]
        folds: Option<usize>,
        /// Checkpoint path; the train log lands beside it as JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a manifest's test split with a trained checkpoint.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Break the EER down by spoof generator tag.
        #[arg(long)]
        by_generator: bool,
        /// Report path; a .csv extension selects CSV, anything else JSON.
        #[arg(long)]
        report: PathBuf,
    },
    /// Compare every parameter group's analytic gradient against central
    /// finite differences, across all ablation modes.
    Gradcheck {
        /// Input embedding dimension of the probe network.
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    s.parse::<Ablation>().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version requests also land here; they are not errors
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    configure_threads();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}

fn configure_threads() {
    let threads = std::env::var("RHYME_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1);
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth { out, n_per_class, frames, dim, sep, seed, no_sinusoid } => {
            let spec = SyntheticSpec {
                n_per_class,
                frames,
                dim,
                separation: sep,
                seed,
                sinusoid: !no_sinusoid,
            };
            let manifest = generate_synthetic(&spec, &out)?;
            if !cli.quiet {
                eprintln!("wrote {} embeddings per class under {}", n_per_class, out.display());
            }
            println!("{}", manifest.display());
            Ok(())
        }
        Command::Train {
            train_manifest,
            train_corpus,
            test_corpus,
            exclude_generators,
            ablation,
            epochs,
            lr,
            batch,
            seed,
            folds,
            out,
        } => cmd_train(CmdTrain {
            train_manifest,
            train_corpus,
            test_corpus,
            exclude_generators,
            ablation,
            epochs,
            lr,
            batch,
            seed,
            folds,
            out,
            quiet: cli.quiet,
            no_timestamp: cli.no_timestamp,
        }),
        Command::Eval { model, manifest, by_generator, report } => {
            cmd_eval(&model, &manifest, by_generator, &report, cli.quiet, cli.no_timestamp)
        }
        Command::Gradcheck { dim, seed } => cmd_gradcheck(dim, seed),
    }
}

// ─── train ───────────────────────────────────────────────────────────────

struct CmdTrain {
    train_manifest: PathBuf,
    train_corpus: Option<String>,
    test_corpus: Option<String>,
    exclude_generators: Vec<String>,
    ablation: Ablation,
    epochs: usize,
    lr: f64,
    batch: usize,
    seed: u64,
    folds: Option<usize>,
    out: PathBuf,
    quiet: bool,
    no_timestamp: bool,
}

fn cmd_train(args: CmdTrain) -> Result<()> {
    let records = load_manifest(&args.train_manifest)?;
    let (train_sel, _test_sel) = rhyme_core::data::protocol_select(
        &records,
        args.train_corpus.as_deref(),
        args.test_corpus.as_deref(),
        &args.exclude_generators,
    )?;
    let items = load_utterances(&args.train_manifest, &train_sel)?;
    let dev_sel = select_dev(&records, args.train_corpus.as_deref());
    let dev_items = load_utterances(&args.train_manifest, &dev_sel)?;

    let input_dim = items[0].seq.dim();
    if let Some(d) = dev_items.first().map(|it| it.seq.dim()) {
        if d != input_dim {
            return Err(RhymeError::Config(format!(
                "dev embeddings have dimension {d}, train has {input_dim}"
            )));
        }
    }

    let mut model_cfg = ModelConfig::new(input_dim);
    model_cfg.ablation = args.ablation;
    let mut train_cfg = TrainConfig {
        lr: args.lr,
        batch_size: args.batch,
        epochs: args.epochs,
        seed: args.seed,
        ..TrainConfig::default()
    };
    if let Some(k) = args.folds {
        train_cfg.folds = k;
        run_cross_validation(&items, k, &model_cfg, &train_cfg, args.quiet)?;
    }

    let explicit_val = (!dev_items.is_empty()).then_some(dev_items.as_slice());
    let (params, log) = train(&items, explicit_val, &model_cfg, &train_cfg)?;
    save_checkpoint(&args.out, &params, &model_cfg, &train_cfg)?;

    let log_out = if args.no_timestamp { log.without_timing() } else { log.clone() };
    let log_path = PathBuf::from(format!("{}.log.json", args.out.display()));
    let mut body = serde_json::to_string_pretty(&log_out)
        .map_err(|e| RhymeError::InvalidArgument(format!("train log serialization: {e}")))?;
    body.push('\n');
    std::fs::write(&log_path, body)?;

    if !args.quiet {
        match (log.best_epoch, log.epochs.last()) {
            (Some(best), _) => {
                let stats = &log.epochs[best];
                eprintln!(
                    "best epoch {} of {}: val loss {:.6}{}",
                    best + 1,
                    log.epochs.len(),
                    stats.val_loss.unwrap_or(f64::NAN),
                    stats
                        .val_eer_percent
                        .map(|e| format!(", val EER {e:.2}%"))
                        .unwrap_or_default(),
                );
            }
            (None, Some(last)) => {
                eprintln!("{} epochs, final train loss {:.6}", log.epochs.len(), last.train_loss)
            }
            (None, None) => eprintln!("zero epochs requested, checkpoint holds the init"),
        }
    }
    println!("{}", args.out.display());
    Ok(())
}

fn run_cross_validation(
    items: &[LoadedUtterance],
    folds: usize,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    quiet: bool,
) -> Result<()> {
    let labels: Vec<ClassLabel> = items.iter().map(|it| it.label).collect();
    let splits = kfold_split(&labels, folds, train_cfg.seed)?;
    let mut eers = Vec::new();
    for (fold, (tr_idx, va_idx)) in splits.iter().enumerate() {
        let tr: Vec<LoadedUtterance> = tr_idx.iter().map(|&i| items[i].clone()).collect();
        let va: Vec<LoadedUtterance> = va_idx.iter().map(|&i| items[i].clone()).collect();
        let (_, log) = train(&tr, Some(&va), model_cfg, train_cfg)?;
        let best = log
            .best_epoch
            .and_then(|b| log.epochs.get(b))
            .ok_or_else(|| RhymeError::Config("cross-validation fold logged no epochs".into()))?;
        if !quiet {
            eprintln!(
                "fold {}/{}: val loss {:.6}{}",
                fold + 1,
                folds,
                best.val_loss.unwrap_or(f64::NAN),
                best.val_eer_percent.map(|e| format!(", val EER {e:.2}%")).unwrap_or_default(),
            );
        }
        if let Some(e) = best.val_eer_percent {
            eers.push(e);
        }
    }
    if !quiet && !eers.is_empty() {
        let mean = eers.iter().sum::<f64>() / eers.len() as f64;
        eprintln!("cross-validation mean val EER over {} folds: {mean:.2}%", eers.len());
    }
    Ok(())
}

// ─── eval ────────────────────────────────────────────────────────────────

fn cmd_eval(
    model: &Path,
    manifest: &Path,
    by_generator: bool,
    report_path: &Path,
    quiet: bool,
    no_timestamp: bool,
) -> Result<()> {
    let (params, model_cfg, _) = load_checkpoint(model)?;
    let records = load_manifest(manifest)?;
    let test_sel: Vec<&ManifestRecord> =
        records.iter().filter(|r| r.split == Split::Test).collect();
    if test_sel.is_empty() {
        return Err(RhymeError::Config("manifest has no test records".into()));
    }
    let items = load_utterances(manifest, &test_sel)?;
    let dim = items[0].seq.dim();
    if dim != model_cfg.input_dim {
        return Err(RhymeError::Config(format!(
            "manifest embeddings have dimension {dim}, checkpoint expects {}",
            model_cfg.input_dim
        )));
    }

    let scores = score_utterances(&items, &params, &model_cfg)?;
    let scored: Vec<(f64, ClassLabel)> =
        scores.iter().zip(&items).map(|(&s, it)| (s, it.label)).collect();
    let eer = compute_eer(&scored)?;
    let (_, ece) = reliability(&scored, 10)?;
    let roc = roc_points(&scored)?;
    let per_gen = if by_generator {
        let tagged: Vec<(f64, ClassLabel, String)> = scores
            .iter()
            .zip(&items)
            .map(|(&s, it)| (s, it.label, it.generator.clone()))
            .collect();
        per_generator_eer(&tagged)?
    } else {
        BTreeMap::new()
    };

    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        model: model.display().to_string(),
        manifest: manifest.display().to_string(),
        timestamp: (!no_timestamp).then(now_unix),
        tie_convention: TIE_CONVENTION.to_string(),
        eer_percent: eer.eer_percent,
        eer_threshold: eer.threshold,
        ece,
        roc,
        per_generator_eer: per_gen,
    };
    let format = match report_path.extension().and_then(|e| e.to_str()) {
        Some("csv") => ReportFormat::Csv,
        _ => ReportFormat::Json,
    };
    emit_report(&report, report_path, format)?;

    if !quiet {
        eprintln!(
            "{} utterances: EER {:.4}% at threshold {:.6}, ECE {:.4}",
            items.len(),
            report.eer_percent,
            report.eer_threshold,
            report.ece
        );
    }
    println!("{}", report_path.display());
    Ok(())
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

// ─── gradcheck ───────────────────────────────────────────────────────────

fn cmd_gradcheck(dim: usize, seed: u64) -> Result<()> {
    let mut all_ok = true;
    for ablation in Ablation::ALL {
        let mut cfg = ModelConfig::new(dim);
        cfg.conv_channels = 8;
        cfg.utterance_dim = 8;
        cfg.ablation = ablation;
        let report = run_grad_check(&cfg, seed)?;
        for g in &report.groups {
            println!("{:<18} {:<24} {:.3e}", ablation.as_str(), g.name, g.max_rel_err);
        }
        if !report.all_below(GRAD_TOL) {
            all_ok = false;
        }
    }
    if !all_ok {
        return Err(RhymeError::numeric(
            "gradcheck",
            format!("a parameter group exceeded {GRAD_TOL:e} relative error"),
        ));
    }
    println!("all parameter groups within {GRAD_TOL:e}");
    Ok(())
}

fn run_grad_check(cfg: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    #[cfg(debug_assertions)]
    if std::env::var_os("RHYME_GRADCHECK_CORRUPT").is_some() {
        return rhyme_core::training::grad_check_corrupted(cfg, seed);
    }
    rhyme_core::training::grad_check(cfg, seed)
}
