use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use refseg::checkpoint::{self, Checkpoint};
use refseg::config::Scale;
use refseg::data::{self, Dataset, Split, SyntheticSpec};
use refseg::metrics::{self, MiouMode};
use refseg::text::{build_tokenizer, restore_tokenizer};
use refseg::training::{self, FitOptions};
use refseg::{viz, Error, RunConfig, SegModel};

#[derive(Parser)]
#[command(name = "refseg", version, about = "Text-guided lesion segmentation for chest X-rays")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and keep the best validation checkpoint.
    Train(TrainArgs),
    /// Report Dice and mIoU of a checkpoint on one split.
    Eval(EvalArgs),
    /// Write the predicted mask for one image and expression.
    Predict(PredictArgs),
    /// Write an input | ground truth | prediction | causal mask panel.
    Visualize(VisualizeArgs),
    /// Render a synthetic dataset in the on-disk layout.
    GenSynthetic(SynthArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset used when no config file is given.
    #[arg(long, value_parser = ["tiny", "full"])]
    scale: Option<String>,
    /// Override any config key, e.g. `--set batch_size=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    dataset_root: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self, out_dir: &Path) -> refseg::Result<RunConfig> {
        let base = match (&self.config, &self.scale) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(s)) if s == "tiny" => RunConfig::preset(Scale::Tiny),
            (None, _) => RunConfig::default(),
        };
        let mut table = toml::Table::new();
        for o in &self.overrides {
            let (k, v) = RunConfig::parse_override(o)?;
            table.insert(k, v);
        }
        let mut set = |k: &str, v: toml::Value| {
            table.insert(k.to_string(), v);
        };
        if self.config.is_some() {
            if let Some(s) = &self.scale {
                set("scale", toml::Value::String(s.clone()));
            }
        }
        if let Some(p) = &self.dataset_root {
            set("dataset_root", toml::Value::String(p.display().to_string()));
        }
        if let Some(v) = self.lambda {
            set("lambda", toml::Value::Float(v));
        }
        if let Some(v) = self.lr {
            set("lr", toml::Value::Float(v));
        }
        if let Some(v) = self.epochs {
            set("max_epochs", toml::Value::Integer(v as i64));
        }
        if let Some(v) = self.patience {
            set("patience", toml::Value::Integer(v as i64));
        }
        if let Some(v) = self.batch_size {
            set("batch_size", toml::Value::Integer(v as i64));
        }
        if let Some(v) = self.seed {
            set("seed", toml::Value::Integer(v as i64));
        }
        set("out_dir", toml::Value::String(out_dir.display().to_string()));
        base.overlay(table)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "runs/train")]
    out_dir: PathBuf,
    /// Stop after the epoch that exceeds this many seconds of wall time.
    #[arg(long)]
    time_budget_secs: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    /// Config the checkpoint must match (its architecture hash is compared).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset_root: Option<PathBuf>,
    #[arg(long, default_value = "runs/eval")]
    out_dir: PathBuf,
    /// Also write per-image scores.
    #[arg(long)]
    per_image: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    text: String,
    #[arg(long, default_value = "runs/predict")]
    out_dir: PathBuf,
    /// File name of the written mask inside the output directory.
    #[arg(long, default_value = "pred.png")]
    name: String,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    text: String,
    /// Ground-truth mask shown in the second tile.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long, default_value = "runs/visualize")]
    out_dir: PathBuf,
    /// Panel file name; the thresholded prediction is written next to it with a `_pred` suffix.
    #[arg(long, default_value = "panel.png")]
    name: String,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 500)]
    n_train: usize,
    #[arg(long, default_value_t = 100)]
    n_val: usize,
    #[arg(long, default_value_t = 200)]
    n_test: usize,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 0.0)]
    confound_strength: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Prefix prepended to mask file names.
    #[arg(long, default_value = "")]
    mask_prefix: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Visualize(a) => visualize(a),
        Command::GenSynthetic(a) => gen_synthetic(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 2 } else { 3 })
        }
    }
}

fn create_dir(dir: &Path) -> refseg::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn train(a: TrainArgs) -> refseg::Result<()> {
    let mut cfg = a.config.resolve(&a.out_dir)?;
    let root = PathBuf::from(&cfg.dataset_root);
    let records = data::read_records(&root, &cfg)?;
    let train_records: Vec<_> = records.iter().filter(|r| r.split == Split::Train).cloned().collect();
    let (tokenizer, vocab) = build_tokenizer(&cfg, train_records.iter().map(|r| r.text.as_str()))?;
    cfg.vocab_size = tokenizer.vocab_size();
    cfg.validate()?;

    create_dir(&a.out_dir)?;
    cfg.save(&a.out_dir.join("config.toml"))?;
    let train_set = Dataset::load(&records, Split::Train, &cfg)?;
    let val_set = Dataset::load(&records, Split::Val, &cfg)?;
    log::info!("loaded {} train / {} val samples", train_set.len(), val_set.len());

    let device = candle_core::Device::Cpu;
    let model = SegModel::new(&cfg, &device)?;
    if !cfg.pretrained_path.is_empty() {
        let report = model.load_clip_weights(Path::new(&cfg.pretrained_path))?;
        log::info!(
            "loaded {} encoder tensors ({} skipped, {} missing)",
            report.loaded.len(),
            report.skipped.len(),
            report.missing.len()
        );
    }
    log::info!("{} parameters", model.params().num_elements());
    let options = FitOptions {
        time_budget: a.time_budget_secs.map(Duration::from_secs),
        vocab,
        record_first_epoch: false,
    };
    let outcome = training::fit(&model, tokenizer.as_ref(), &train_set, &val_set, &a.out_dir, &options)?;
    println!(
        "best_checkpoint={}\nbest_epoch={}\nbest_val_dice={}\nepochs={}",
        outcome.best_checkpoint.display(),
        outcome.state.best_epoch,
        outcome.state.best_validation_dice,
        outcome.state.epoch
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> refseg::Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::Checkpoint(format!("checkpoint {} does not exist", path.display())));
    }
    checkpoint::load(path, &candle_core::Device::Cpu)
}

fn eval(a: EvalArgs) -> refseg::Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    if let Some(path) = &a.config {
        ckpt.check_compatible(&RunConfig::load(path)?)?;
    }
    let split: Split = a.split.parse()?;
    let mut cfg = ckpt.config.clone();
    if let Some(root) = &a.dataset_root {
        cfg.dataset_root = root.display().to_string();
    }
    let records = data::read_records(Path::new(&cfg.dataset_root), &cfg)?;
    let dataset = Dataset::load(&records, split, &cfg)?;
    let tokenizer = restore_tokenizer(&cfg, ckpt.vocab.as_deref())?;
    let model = ckpt.build_model(&candle_core::Device::Cpu)?;
    let preds = training::predict(&model, &dataset, tokenizer.as_ref(), cfg.batch_size)?;
    let mode = MiouMode::from_two_class_flag(cfg.miou_two_class);
    let report = metrics::evaluate_pairs(
        preds.iter().zip(dataset.samples.iter().map(|s| &s.mask)),
        mode,
        a.per_image,
    )?;
    create_dir(&a.out_dir)?;
    report.save(&a.out_dir.join(format!("metrics_{split}.txt")))?;
    print!("split={split}\n{}", report.to_kv_string());
    Ok(())
}

struct Prediction {
    input: image::GrayImage,
    inference: training::Inference,
}

fn run_single(checkpoint: &Path, image_path: &Path, text: &str) -> refseg::Result<Prediction> {
    let ckpt = load_checkpoint(checkpoint)?;
    let cfg = ckpt.config.clone();
    let tokenizer = restore_tokenizer(&cfg, ckpt.vocab.as_deref())?;
    let model = ckpt.build_model(&candle_core::Device::Cpu)?;
    let raw = data::open_gray(image_path)?;
    let blank = vec![false; (raw.width() * raw.height()) as usize];
    let sample = data::preprocess(String::new(), &raw, &blank, text.to_string(), &cfg)?;
    let inference = training::infer(&model, tokenizer.as_ref(), &sample)?;
    let n = cfg.image_size as u32;
    let input = image::imageops::resize(&raw, n, n, image::imageops::FilterType::Triangle);
    Ok(Prediction { input, inference })
}

fn save_gray(img: &image::GrayImage, path: &Path) -> refseg::Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn predict(a: PredictArgs) -> refseg::Result<()> {
    let p = run_single(&a.checkpoint, &a.image, &a.text)?;
    create_dir(&a.out_dir)?;
    let out = a.out_dir.join(&a.name);
    save_gray(&viz::mask_image(&p.inference.pred), &out)?;
    println!("mask={}\nforeground_pixels={}", out.display(), p.inference.pred.count());
    Ok(())
}

fn visualize(a: VisualizeArgs) -> refseg::Result<()> {
    let p = run_single(&a.checkpoint, &a.image, &a.text)?;
    let (w, h) = p.input.dimensions();
    let gt = match &a.gt {
        Some(path) => {
            let m = data::open_mask(path)?;
            let img = viz::mask_image(&m);
            let img = image::imageops::resize(&img, w, h, image::imageops::FilterType::Nearest);
            Some(metrics::BinaryMask::new(
                h as usize,
                w as usize,
                img.as_raw().iter().map(|&v| v != 0).collect(),
            )?)
        }
        None => None,
    };
    let panel = viz::render_panel(&p.input, gt.as_ref(), &p.inference.pred, p.inference.causal_mask.as_deref())?;
    create_dir(&a.out_dir)?;
    let out = a.out_dir.join(&a.name);
    panel.save(&out).map_err(|source| Error::Image {
        path: out.clone(),
        source,
    })?;
    let stem = Path::new(&a.name).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let pred_path = a.out_dir.join(format!("{stem}_pred.png"));
    save_gray(&viz::mask_image(&p.inference.pred), &pred_path)?;
    println!("panel={}\nprediction={}", out.display(), pred_path.display());
    Ok(())
}

fn gen_synthetic(a: SynthArgs) -> refseg::Result<()> {
    let spec = SyntheticSpec {
        n_train: a.n_train,
        n_val: a.n_val,
        n_test: a.n_test,
        image_size: a.image_size,
        confound_strength: a.confound_strength,
        seed: a.seed,
        ..SyntheticSpec::default()
    };
    let records = data::generate_synthetic(&spec)?;
    data::write_dataset(&records, &a.out_dir, &a.mask_prefix)?;
    println!("wrote {} records to {}", records.len(), a.out_dir.display());
    Ok(())
}
