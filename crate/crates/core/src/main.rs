//! `ssmlab` command line: train desk models, run experiments, merge reports
//! and run the numerical self-checks.
//!
//! Exit codes: 0 on success, 1 when the input is invalid, 2 when a run fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ssmlab::checkpoint::{save_checkpoint, to_bytes};
use ssmlab::config::ConfigDoc;
use ssmlab::data::{load_idx, synth_split, Dataset, Split, SynthConfig};
use ssmlab::experiments::{self, ExperimentSpec};
use ssmlab::model::{Model, ModelConfig};
use ssmlab::oracle::{gradient_suite, mask_suite, recurrence_vs_convolution, zoh_vs_integration, OracleCheck};
use ssmlab::report::{grid_csv, merge, sha256_hex, Format, Metadata, Report, Row};
use ssmlab::train::{train, TrainConfig};
use ssmlab::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "ssmlab", version, about = "Robustness laboratory for desk-scale selective state-space classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a config file and write a checkpoint plus a training curve.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `[train] seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint path; overrides `[output] checkpoint`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one experiment spec and write its report.
    Run {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "csv")]
        format: Format,
        #[command(flatten)]
        attack: AttackFlags,
    },
    /// Merge report files into one table.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "csv")]
        format: Format,
    },
    /// Compare reverse-mode gradients with central differences.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "csv")]
        format: Format,
    },
    /// Check the recurrence against the convolution and the zero-order hold
    /// against numerical integration.
    Oracle {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random systems per oracle.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "csv")]
        format: Format,
    },
}

/// Overrides for the attack constants in a spec. Values accept fractions
/// such as `8/255`.
#[derive(Args, Debug, Default)]
struct AttackFlags {
    #[arg(long, value_parser = real)]
    epsilon: Option<f32>,
    #[arg(long, value_parser = real)]
    step_size: Option<f32>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Patch-Fool iterations.
    #[arg(long)]
    pf_iterations: Option<usize>,
    /// Patch-Fool initial learning rate.
    #[arg(long, value_parser = real)]
    pf_lr: Option<f32>,
}

fn real(s: &str) -> std::result::Result<f32, String> {
    ssmlab::config::parse_real(s).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

/// Returns `Ok(false)` when a self-check ran but did not pass.
fn dispatch(command: Command) -> Result<bool> {
    match command {
        Command::Train { config, seed, out } => cmd_train(&config, seed, out).map(|_| true),
        Command::Run {
            spec,
            seed,
            samples,
            out,
            format,
            attack,
        } => cmd_run(&spec, seed, samples, &out, format, &attack).map(|_| true),
        Command::Report { inputs, out, format } => {
            let reports = inputs.iter().map(Report::load).collect::<Result<Vec<_>>>()?;
            let merged = merge(&reports)?;
            merged.emit(format, &out)?;
            println!("merged {} rows from {} reports into {}", merged.rows.len(), reports.len(), out.display());
            Ok(true)
        }
        Command::GradCheck { seed, out, format } => {
            let mut checks = gradient_suite(seed, 1e-3, 1e-3)?;
            checks.extend(mask_suite(seed, 1e-3, 1e-3)?);
            emit_checks(&checks, seed, "grad-check", out.as_deref(), format)
        }
        Command::Oracle {
            seed,
            samples,
            out,
            format,
        } => {
            let checks = vec![
                recurrence_vs_convolution(samples.unwrap_or(200), seed, 1e-5)?,
                zoh_vs_integration(samples.unwrap_or(100), seed, 1e-6, 1e-4)?,
            ];
            emit_checks(&checks, seed, "oracle", out.as_deref(), format)
        }
    }
}

fn emit_checks(checks: &[OracleCheck], seed: u64, what: &str, out: Option<&Path>, format: Format) -> Result<bool> {
    let mut report = Report::new(Metadata::new(seed, &format!("{what} seed={seed}")));
    for c in checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        println!(
            "{status} {:<28} cases={:<5} max_error={:.3e} tol={:.0e}",
            c.name, c.cases, c.max_error, c.tol
        );
        report.push(Row::new(&c.name, what, "max_error", c.max_error));
        report.push(Row::new(&c.name, what, "cases", c.cases as f64));
    }
    if let Some(path) = out {
        report.emit(format, path)?;
    }
    Ok(checks.iter().all(|c| c.passed))
}

const MODEL_KEYS: [&str; 10] = [
    "arch",
    "image_size",
    "patch_size",
    "in_channels",
    "depths",
    "dims",
    "n_state",
    "n_classes",
    "window",
    "seed",
];

/// Train and test sets described by a `[data]` section.
fn train_data(doc: &ConfigDoc, base: &Path, model: &ModelConfig) -> Result<(Dataset, Dataset)> {
    let d = doc.section("data");
    match d.get::<String>("source")?.as_deref().unwrap_or("synth") {
        "synth" => {
            d.only(&["source", "train_n", "test_n", "noise", "seed"])?;
            let seed: u64 = d.get_or("seed", 1)?;
            let noise = d.real("noise")?.unwrap_or(0.08);
            let make = |n: usize, seed: u64, split| {
                let mut s = SynthConfig::new(n, model.image_size, model.n_classes, seed);
                s.channels = model.in_channels;
                s.noise = noise;
                synth_split(&s, split)
            };
            let train_n: usize = d.get_or("train_n", 4000)?;
            let test_n: usize = d.get_or("test_n", 1000)?;
            if train_n == 0 || test_n == 0 {
                return Err(d.fail("train_n", "train_n and test_n must be positive"));
            }
            Ok((make(train_n, seed, Split::Train), make(test_n, seed.wrapping_add(1), Split::Test)))
        }
        "idx" => {
            d.only(&["source", "train_images", "train_labels", "test_images", "test_labels"])?;
            let path = |k: &str| -> Result<PathBuf> { Ok(base.join(d.require::<String>(k)?)) };
            Ok((
                load_idx(path("train_images")?, path("train_labels")?, model.n_classes)?,
                load_idx(path("test_images")?, path("test_labels")?, model.n_classes)?,
            ))
        }
        other => Err(d.fail("source", format!("expected synth or idx, got {other:?}"))),
    }
}

fn cmd_train(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let doc = ConfigDoc::load(config)?;
    let base = config.parent().unwrap_or(Path::new("."));
    for name in doc.sections() {
        if !["model", "data", "train", "output"].contains(&name) {
            return Err(Error::Parse {
                path: doc.path.clone(),
                line: 0,
                msg: format!("unknown section [{name}]"),
            });
        }
    }
    let m = doc.section("model");
    m.only(&MODEL_KEYS)?;
    let mut model_cfg = ModelConfig::default();
    for (k, v) in m.pairs() {
        model_cfg
            .apply_kv([(k, v)])
            .map_err(|e| m.fail(k, e.to_string()))?;
    }
    model_cfg.validate().map_err(|e| Error::Parse {
        path: doc.path.clone(),
        line: 0,
        msg: format!("[model] {e}"),
    })?;

    let t = doc.section("train");
    t.only(&["epochs", "batch_size", "lr", "lr_floor", "weight_decay", "seed"])?;
    let defaults = TrainConfig::default();
    let train_cfg = TrainConfig {
        epochs: t.get_or("epochs", defaults.epochs)?,
        batch_size: t.get_or("batch_size", defaults.batch_size)?,
        lr: t.real("lr")?.unwrap_or(defaults.lr),
        lr_floor: t.real("lr_floor")?.unwrap_or(defaults.lr_floor),
        weight_decay: t.real("weight_decay")?.unwrap_or(defaults.weight_decay),
        seed: seed.unwrap_or(t.get_or("seed", defaults.seed)?),
    };
    train_cfg.validate()?;

    let o = doc.section("output");
    o.only(&["checkpoint", "curve"])?;
    let checkpoint = match out {
        Some(p) => p,
        None => base.join(o.get::<String>("checkpoint")?.unwrap_or_else(|| "model.ssmr".into())),
    };
    let curve = match o.get::<String>("curve")? {
        Some(c) => base.join(c),
        None => checkpoint.with_extension("curve.csv"),
    };

    let (train_set, test_set) = train_data(&doc, base, &model_cfg)?;
    let mut model = Model::build(model_cfg)?;
    eprintln!(
        "training {} ({} parameters) on {} images for {} epochs",
        model.arch(),
        model.param_count(),
        train_set.len(),
        train_cfg.epochs
    );
    let log = train(&mut model, &train_set, Some(&test_set), &train_cfg)?;
    for e in &log.epochs {
        eprintln!(
            "epoch {} loss {:.4} train {:.4} test {:.4}",
            e.epoch,
            e.loss,
            e.train_accuracy,
            e.test_accuracy.unwrap_or(f64::NAN)
        );
    }
    save_checkpoint(&model, &checkpoint)?;
    fs::write(&curve, log.curve_csv()).map_err(|e| Error::Io {
        context: curve.clone(),
        source: e,
    })?;
    let final_acc = log.epochs.last().and_then(|e| e.test_accuracy).unwrap_or(f64::NAN);
    println!(
        "wrote {} (sha256 {}) test_accuracy={final_acc:.4}",
        checkpoint.display(),
        sha256_hex(&to_bytes(&model))
    );
    Ok(())
}

fn cmd_run(
    spec_path: &Path,
    seed: Option<u64>,
    samples: Option<usize>,
    out: &Path,
    format: Format,
    flags: &AttackFlags,
) -> Result<()> {
    let mut spec = ExperimentSpec::load(spec_path)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(n) = samples {
        spec.samples = n;
    }
    if let Some(e) = flags.epsilon {
        spec.attack.epsilon = e;
    }
    if let Some(s) = flags.step_size {
        spec.attack.step_size = s;
    }
    if let Some(i) = flags.iterations {
        spec.attack.iterations = i;
    }
    if let Some(i) = flags.pf_iterations {
        spec.patch_fool.iterations = i;
    }
    if let Some(lr) = flags.pf_lr {
        spec.patch_fool.step_size = lr;
    }
    spec.validate()?;
    eprintln!("running {} on {} samples", spec.kind, spec.samples);
    let outcome = experiments::run(&spec)?;
    outcome.report.emit(format, out)?;
    for (name, map) in &outcome.heatmaps {
        let stem = out.with_extension("");
        let grid = PathBuf::from(format!("{}.heatmap.{name}.csv", stem.display()));
        let text = grid_csv(&map.values, map.grid)?;
        fs::write(&grid, text).map_err(|e| Error::Io {
            context: grid.clone(),
            source: e,
        })?;
    }
    println!("wrote {} rows to {}", outcome.report.rows.len(), out.display());
    Ok(())
}
