use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use roadfusion::augment::AugmentConfig;
use roadfusion::check::{model_gradcheck, GRADCHECK_TOL};
use roadfusion::config::{Mode, ModelConfig};
use roadfusion::datagen::{gen_dataset, DatagenConfig, DEFAULT_PRIORS};
use roadfusion::dataio::{
    load_checkpoint, read_imu_csv, read_ppm, save_checkpoint, split_by_segment_stratified, write_dataset,
    DataError, Dataset, Split,
};
use roadfusion::model::predict;
use roadfusion::sample::SurfaceClass;
use roadfusion::tensor::FaultyAdjoint;
use roadfusion::trainer::{evaluate, train, TrainConfig, TrainError};

#[derive(Parser)]
#[command(name = "roadfusion", version, about = "Road surface classification from camera and IMU")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 600)]
        samples: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Class priors for asphalt, blocks, off-road.
        #[arg(long, value_delimiter = ',')]
        priors: Option<Vec<f64>>,
        #[arg(long, default_value_t = 10)]
        segment_len: usize,
        /// JSON file with generator settings.
        #[arg(long)]
        datagen: Option<PathBuf>,
    },
    /// Train a model and write the best checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<CliMode>,
        /// Assign segment-level splits first, e.g. 0.7,0.2,0.1.
        #[arg(long, value_delimiter = ',', num_args = 0..=1)]
        auto_split: Option<Vec<f64>>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Classify one image and IMU window.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        imu: Option<PathBuf>,
        #[arg(long, default_value_t = 400.0)]
        sample_rate: f32,
    },
    /// Finite-difference check of the full model in float64.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Dims::Tiny)]
        dims: Dims,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Debug: swap in a wrong adjoint rule (the check must fail).
        #[arg(long, value_enum, hide = true)]
        corrupt: Option<Corrupt>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CliMode {
    Fused,
    VisionOnly,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Dims {
    Tiny,
    Default,
}

#[derive(Clone, Copy, ValueEnum)]
enum Corrupt {
    Sigmoid,
    Matmul,
    Layernorm,
}

/// Contents of `--config`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    /// Overrides `train.seed`.
    seed: Option<u64>,
    /// Split fractions used with `--auto-split` when the flag has no values.
    split: Option<[f64; 3]>,
    train: TrainConfig,
}

enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => Failure::Usage(e.to_string()),
            TrainError::Diverged { .. } | TrainError::NonFiniteGradient { .. } => Failure::Numeric(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn generate(
    out: &Path,
    samples: usize,
    seed: u64,
    priors: Option<Vec<f64>>,
    segment_len: usize,
    datagen: Option<PathBuf>,
) -> Result<()> {
    let cfg: DatagenConfig = match datagen {
        Some(p) => read_json(&p)?,
        None => DatagenConfig::default(),
    };
    let priors = priors.unwrap_or_else(|| DEFAULT_PRIORS.to_vec());
    if priors.len() != 3 {
        return Err(Failure::Usage(format!("--priors needs 3 values, got {}", priors.len())));
    }
    let data = gen_dataset(samples, &priors, seed, segment_len, &cfg).map_err(|e| Failure::Usage(e.to_string()))?;
    let manifest = write_dataset(out, &data, cfg.sample_rate)?;
    let segments: std::collections::BTreeSet<usize> = data.iter().map(|s| s.segment_id).collect();
    println!("wrote {} samples to {}", manifest.samples.len(), out.display());
    for class in SurfaceClass::ALL {
        println!("  {:<14}{}", class.name(), data.iter().filter(|s| s.label == class).count());
    }
    println!("segments: {}", segments.len());
    Ok(())
}

fn cmd_train(
    data: &Path,
    config: Option<PathBuf>,
    out: &Path,
    mode: Option<CliMode>,
    auto_split: Option<Vec<f64>>,
    seed: Option<u64>,
) -> Result<()> {
    let run: RunConfig = match config {
        Some(p) => read_json(&p)?,
        None => RunConfig::default(),
    };
    let mut cfg = run.train;
    if let Some(s) = seed.or(run.seed) {
        cfg.seed = s;
    }
    if let Some(m) = mode {
        cfg.model.mode = match m {
            CliMode::Fused => Mode::Fused,
            CliMode::VisionOnly => Mode::VisionOnly,
        };
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;

    let mut ds = Dataset::open(data)?;
    if let Some(f) = auto_split {
        let fractions: [f64; 3] = match f.as_slice() {
            [] => run.split.unwrap_or([0.7, 0.2, 0.1]),
            [a, b, c] => [*a, *b, *c],
            _ => return Err(Failure::Usage(format!("--auto-split needs 3 fractions, got {}", f.len()))),
        };
        ds.manifest = split_by_segment_stratified(&ds.manifest, fractions, cfg.seed)?;
        ds.save_manifest()?;
        println!("assigned segment-level splits {fractions:?} (seed {})", cfg.seed);
    } else if !ds.manifest.has_splits() {
        return Err(Failure::Data(format!(
            "{} has no split labels; pass --auto-split 0.7,0.2,0.1",
            data.display()
        )));
    }
    let tr = ds.load_all(&ds.manifest.indices(Split::Train))?;
    let va = ds.load_all(&ds.manifest.indices(Split::Val))?;
    println!("train {} / val {} samples, mode {:?}", tr.len(), va.len(), cfg.model.mode);

    let log_path = out.parent().unwrap_or(Path::new(".")).join("train_log.jsonl");
    if let Some(dir) = log_path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut log_text = String::new();
    let start = Instant::now();
    let result = train(&cfg, &tr, &va, |e| {
        log_text.push_str(&serde_json::to_string(e).expect("serializable"));
        log_text.push('\n');
        let gate = e.mean_gate.map(|g| format!(" gate {g:.3}")).unwrap_or_default();
        println!(
            "epoch {:>3}  loss {:.4}  val_acc {:.4}{gate}  ({:.0}s)",
            e.epoch,
            e.loss,
            e.val_acc,
            start.elapsed().as_secs_f64()
        );
    });
    fs::write(&log_path, &log_text).map_err(|e| io_err(&log_path, e))?;
    let outcome = match result {
        Ok(o) => o,
        Err(TrainError::Diverged { epoch, reason, last_good }) => {
            let meta = serde_json::json!({ "diverged_at": epoch, "augment": cfg.augment });
            save_checkpoint(out, &last_good, &cfg.model, meta)?;
            return Err(Failure::Numeric(format!(
                "training diverged at epoch {epoch} ({reason}); last good parameters saved to {}",
                out.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    let meta = serde_json::json!({
        "best_epoch": outcome.best_epoch,
        "best_val_acc": outcome.best_val_acc,
        "epochs_run": outcome.log.len(),
        "seed": cfg.seed,
        "augment": cfg.augment,
    });
    save_checkpoint(out, &outcome.params, &cfg.model, meta)?;
    println!(
        "best epoch {} (val_acc {:.4}); wrote {} and {}",
        outcome.best_epoch,
        outcome.best_val_acc,
        out.display(),
        log_path.display()
    );
    Ok(())
}

/// Preprocessing settings stored with the checkpoint, or defaults sized to
/// the model input.
fn checkpoint_augment(meta: &serde_json::Value, model: &ModelConfig) -> AugmentConfig {
    meta.get("augment")
        .and_then(|a| serde_json::from_value(a.clone()).ok())
        .unwrap_or_else(|| {
            let s = model.encoder.image_size;
            AugmentConfig::degenerate(s + s / 8, s)
        })
}

fn cmd_eval(data: &Path, ckpt: &Path, split: &str, report: Option<PathBuf>) -> Result<()> {
    let split: Split = split.parse().map_err(Failure::Usage)?;
    let ck = load_checkpoint(ckpt, None)?;
    let ds = Dataset::open(data)?;
    let idx = ds.manifest.indices(split);
    if idx.is_empty() {
        return Err(Failure::Data(format!("{} split of {} is empty", split.name(), data.display())));
    }
    let samples = ds.load_all(&idx)?;
    let aug = checkpoint_augment(&ck.meta, &ck.config);
    let r = evaluate(&ck.params, &ck.config, &aug, &samples)?;
    println!(
        "{} samples: accuracy {:.4}  macro-F1 {:.4}",
        r.samples, r.accuracy, r.macro_f1
    );
    for c in &r.per_class {
        println!(
            "  {:<14}P {:.3}  R {:.3}  F1 {:.3}  n {}",
            c.name, c.precision, c.recall, c.f1, c.support
        );
    }
    for (cond, m) in &r.per_condition {
        println!("  [{cond}] n {} accuracy {:.4} macro-F1 {:.4}", m.samples, m.accuracy, m.macro_f1);
    }
    if let Some(g) = r.mean_gate {
        println!("  mean gate {g:.4}");
    }
    if let Some(path) = report {
        write_json(&path, &r)?;
    }
    Ok(())
}

fn cmd_predict(ckpt: &Path, image: &Path, imu: Option<PathBuf>, sample_rate: f32) -> Result<()> {
    let ck = load_checkpoint(ckpt, None)?;
    let aug = checkpoint_augment(&ck.meta, &ck.config);
    let img = roadfusion::augment::preprocess(&read_ppm(image)?, &aug).map_err(|e| Failure::Data(e.to_string()))?;
    let window = match (ck.config.mode, imu) {
        (Mode::Fused, None) => return Err(Failure::Usage("fused checkpoint needs --imu".into())),
        (Mode::Fused, Some(p)) => Some(read_imu_csv(&p, sample_rate)?),
        (Mode::VisionOnly, Some(_)) => {
            eprintln!("warning: vision-only checkpoint; --imu is ignored");
            None
        }
        (Mode::VisionOnly, None) => None,
    };
    let out = predict(&ck.params, &ck.config, &img, window.as_ref()).map_err(|e| Failure::Data(e.to_string()))?;
    let probs = out.probs.data();
    println!("{}", SurfaceClass::ALL[out.predicted()].name());
    for (class, p) in SurfaceClass::ALL.iter().zip(probs) {
        println!("  {:<14}{p:.6}", class.name());
    }
    match out.mean_gate() {
        Some(g) => println!("mean gate {g:.4} (1 = vision, 0 = inertial)"),
        None => println!("mean gate n/a (vision-only)"),
    }
    Ok(())
}

fn cmd_gradcheck(dims: Dims, seed: u64, corrupt: Option<Corrupt>) -> Result<()> {
    let cfg = match dims {
        Dims::Tiny => ModelConfig::tiny(),
        Dims::Default => ModelConfig::default(),
    };
    let fault = corrupt.map(|c| match c {
        Corrupt::Sigmoid => FaultyAdjoint::Sigmoid,
        Corrupt::Matmul => FaultyAdjoint::MatMul,
        Corrupt::Layernorm => FaultyAdjoint::LayerNorm,
    });
    // Default dims probe a sample of elements per tensor.
    let per_param = if dims == Dims::Tiny { usize::MAX } else { 6 };
    let start = Instant::now();
    let report = model_gradcheck(&cfg, seed, fault, per_param).map_err(|e| Failure::Numeric(e.to_string()))?;
    for p in &report.params {
        println!("  {:<32}rel {:.3e}  abs {:.3e}", p.name, p.max_rel_error, p.max_abs_error);
    }
    let verdict = if report.passed { "PASS" } else { "FAIL" };
    println!(
        "{verdict}: max relative error {:.3e} (tolerance {GRADCHECK_TOL:e}) over {} tensors in {:.1}s",
        report.max_rel_error,
        report.params.len(),
        start.elapsed().as_secs_f64()
    );
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Numeric("gradient check failed".into()))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Generate {
            out,
            samples,
            seed,
            priors,
            segment_len,
            datagen,
        } => generate(&out, samples, seed, priors, segment_len, datagen),
        Command::Train {
            data,
            config,
            out,
            mode,
            auto_split,
            seed,
        } => cmd_train(&data, config, &out, mode, auto_split, seed),
        Command::Eval {
            data,
            ckpt,
            split,
            report,
        } => cmd_eval(&data, &ckpt, &split, report),
        Command::Predict {
            ckpt,
            image,
            imu,
            sample_rate,
        } => cmd_predict(&ckpt, &image, imu, sample_rate),
        Command::Gradcheck { dims, seed, corrupt } => cmd_gradcheck(dims, seed, corrupt),
    }
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
