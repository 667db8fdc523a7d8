use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use mmtsvit::config::RunConfig;
use mmtsvit::data::{gen_synthetic_dataset, DatasetManifest, SignatureMode, Split, SynthConfig};
use mmtsvit::model::{FusionMode, Model};
use mmtsvit::tensor::Fault;
use mmtsvit::train::{confusion, examples_for, load_checkpoint, save_checkpoint, train, ConfusionMatrix, Metrics};
use mmtsvit::verify::grad_check_architecture;
use mmtsvit::{Error, ModelF64};
use serde_json::json;

#[derive(Parser)]
#[command(name = "mmtsvit", version, about = "Multi-modal TSViT for satellite image time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic co-registered dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        samples: usize,
        #[arg(long, default_value_t = 3)]
        modalities: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// Finest grid size; coarse modalities use a third of it.
        #[arg(long, default_value_t = 24)]
        size: usize,
        #[arg(long, default_value_t = 12)]
        timesteps: usize,
        #[arg(long, value_enum, default_value_t = Signature::Distinct)]
        signature: Signature,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 0.2)]
        val_fraction: f64,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
    },
    /// Train a model from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on one split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Compare analytic gradients with finite differences.
    GradCheck {
        #[arg(long, value_enum, default_value_t = Arch::All)]
        arch: Arch,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one backward rule to confirm the check can fail.
        #[arg(long, hide = true)]
        corrupt_adjoint: bool,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Signature {
    Distinct,
    Split,
}

#[derive(Clone, Copy, PartialEq, clap::ValueEnum)]
enum Arch {
    #[value(name = "SM")]
    Sm,
    #[value(name = "EF")]
    Ef,
    #[value(name = "SCTF")]
    Sctf,
    #[value(name = "CAF")]
    Caf,
    #[value(name = "all")]
    All,
}

/// A failed command: exit 1 for failed checks, 2 for everything the
/// caller got wrong.
enum Failure {
    Check(String),
    Usage(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Usage(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData {
            out,
            seed,
            samples,
            modalities,
            classes,
            size,
            timesteps,
            signature,
            noise,
            val_fraction,
            test_fraction,
        } => SynthConfig::preset(modalities, classes, size, samples, seed)
            .map(|mut c| {
                c.n_timesteps = timesteps;
                c.signature = match signature {
                    Signature::Distinct => SignatureMode::Distinct,
                    Signature::Split => SignatureMode::Split,
                };
                c.noise = noise;
                c.val_fraction = val_fraction;
                c.test_fraction = test_fraction;
                c
            })
            .and_then(|c| cmd_gen_data(c, &out))
            .map_err(Failure::from),
        Command::Train { config } => cmd_train(&config).map_err(Failure::from),
        Command::Eval { checkpoint, data, split } => cmd_eval(&checkpoint, &data, &split).map_err(Failure::from),
        Command::GradCheck {
            arch,
            seed,
            corrupt_adjoint,
        } => cmd_grad_check(arch, seed, corrupt_adjoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn cmd_gen_data(config: SynthConfig, out: &Path) -> mmtsvit::Result<()> {
    let manifest = gen_synthetic_dataset(config, out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> mmtsvit::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn report(metrics: &Metrics, cm: &ConfusionMatrix, names: &[String]) -> serde_json::Value {
    let k = cm.num_classes();
    let per_class: Vec<_> = metrics
        .per_class
        .iter()
        .map(|c| {
            json!({
                "class": c.class,
                "name": names.get(c.class),
                "support": c.support,
                "recall": c.recall,
                "IoU": c.iou,
            })
        })
        .collect();
    let matrix: Vec<Vec<u64>> = (0..k).map(|i| (0..k).map(|j| cm.at(i, j)).collect()).collect();
    json!({
        "MA": metrics.ma,
        "OA": metrics.oa,
        "mIoU": metrics.miou,
        "per_class": per_class,
        "confusion": matrix,
    })
}

fn cmd_train(config_path: &Path) -> mmtsvit::Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let (manifest, base) = DatasetManifest::load(&cfg.manifest)?;
    let model_cfg = cfg.model_config(&manifest)?;
    let model = ModelF64::new(model_cfg, cfg.seed)?;
    let train_sets = manifest.load_split(&base, Split::Train)?;
    let val_sets = manifest.load_split(&base, Split::Val)?;
    let train_ex = examples_for(&model, &train_sets)?;
    let val_ex = examples_for(&model, &val_sets)?;
    if val_ex.is_empty() {
        eprintln!("warning: empty validation split; validating on the training split");
    }

    fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let log_path = cfg.out_dir.join("metrics.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(io_err(&log_path))?);
    let start = Instant::now();
    let outcome = train(model, &train_ex, &val_ex, cfg.train_config(), |r| {
        let line = serde_json::to_string(r)?;
        writeln!(log, "{line}").and_then(|_| log.flush()).map_err(io_err(&log_path))?;
        eprintln!(
            "epoch {:>3}  loss {:.5}  val MA {:.4}  OA {:.4}  mIoU {:.4}",
            r.epoch, r.train_loss, r.val_ma, r.val_oa, r.val_miou
        );
        Ok(())
    })?;
    drop(log);

    save_checkpoint(&outcome.best, &cfg.out_dir.join("best.tsvc"))?;
    save_checkpoint(&outcome.last, &cfg.out_dir.join("last.tsvc"))?;
    let val = if val_ex.is_empty() { &train_ex } else { &val_ex };
    let cm = confusion(&outcome.best, val)?;
    let mut rep = report(&cm.metrics()?, &cm, &manifest.class_names);
    rep["best_epoch"] = json!(outcome.best_epoch);
    rep["mode"] = json!(outcome.best.config.mode);
    rep["modalities"] = json!(outcome.best.config.modalities);
    write_json(&cfg.out_dir.join("report.json"), &rep)?;
    eprintln!(
        "trained {} epochs in {:.1} s; best epoch {}",
        outcome.records.len(),
        start.elapsed().as_secs_f64(),
        outcome.best_epoch
    );
    println!("{}", cfg.out_dir.display());
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path, split: &str) -> mmtsvit::Result<()> {
    let split: Split = split.parse()?;
    let model: Model<f64> = load_checkpoint(checkpoint)?;
    let (manifest, base) = DatasetManifest::load(data)?;
    let c = &model.config;
    if c.tsvit.num_classes != manifest.num_classes || c.tsvit.height != manifest.size {
        return Err(Error::Config(format!(
            "checkpoint expects {} classes on a {}×{} grid; dataset has {} classes on {}×{}",
            c.tsvit.num_classes, c.tsvit.height, c.tsvit.width, manifest.num_classes, manifest.size, manifest.size
        )));
    }
    for (id, &ch) in c.modalities.iter().zip(&c.channels) {
        match manifest.modality(id) {
            Some(m) if m.channels == ch => {}
            Some(m) => {
                return Err(Error::Config(format!(
                    "modality {id}: checkpoint expects {ch} channels, dataset has {}",
                    m.channels
                )))
            }
            None => return Err(Error::Config(format!("modality {id} not in the dataset"))),
        }
    }
    let sets = manifest.load_split(&base, split)?;
    let examples = examples_for(&model, &sets)?;
    if examples.is_empty() {
        return Err(Error::Contract(format!("split {split:?} is empty")));
    }
    let cm = confusion(&model, &examples)?;
    let mut rep = report(&cm.metrics()?, &cm, &manifest.class_names);
    rep["split"] = json!(split);
    println!("{}", serde_json::to_string(&rep)?);
    Ok(())
}

fn cmd_grad_check(arch: Arch, seed: u64, corrupt: bool) -> Result<(), Failure> {
    let modes: Vec<FusionMode> = match arch {
        Arch::Sm => vec![FusionMode::Single],
        Arch::Ef => vec![FusionMode::Early],
        Arch::Sctf => vec![FusionMode::SyncClassToken],
        Arch::Caf => vec![FusionMode::CrossAttention],
        Arch::All => FusionMode::ALL.to_vec(),
    };
    let fault = corrupt.then_some(Fault::FlipGeluAdjoint);
    let mut failed = Vec::new();
    for mode in modes {
        let start = Instant::now();
        let r = grad_check_architecture(mode, seed, fault)?;
        let worst = r.worst().expect("models have parameters");
        println!(
            "{:<4} {}  worst relative error {:.3e} in {} ({} tensors, {:.1} s)",
            mode.to_string(),
            if r.passed { "pass" } else { "FAIL" },
            worst.rel_error,
            worst.name,
            r.params.len(),
            start.elapsed().as_secs_f64()
        );
        if !r.passed {
            failed.push(format!("{mode}: {} relative error {:.3e} ≥ {:e}", worst.name, worst.rel_error, r.tol));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient check failed: {}", failed.join("; "))))
    }
}
