//! Adversarial objective, Adam, cosine schedule, evaluation and the epoch loop.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use candle_core::{backprop::GradStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::LrSchedule;
use crate::data::{epoch_order, Batch, Dataset};
use crate::error::{shape_err, Error, Result};
use crate::metrics::{self, BinaryMask, MetricsReport, MiouMode};
use crate::model::{ModelOutput, SegModel};
use crate::ops;
use crate::text::Tokenizer;

/// Scalar loss values of one step; `l` is always `l_c - lambda * l_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_c: f64,
    pub l_s: f64,
    pub lambda: f64,
    pub l: f64,
}

impl LossBundle {
    pub fn new(l_c: f64, l_s: f64, lambda: f64) -> Self {
        Self {
            l_c,
            l_s,
            lambda,
            l: l_c - lambda * l_s,
        }
    }
}

/// Differentiable loss graph plus its scalar summary.
#[derive(Debug, Clone)]
pub struct Losses {
    pub total: Tensor,
    pub l_c: Tensor,
    pub l_s: Option<Tensor>,
    pub bundle: LossBundle,
}

fn check_binary(y: &Tensor) -> Result<()> {
    let v: Vec<f32> = y.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1()?;
    if let Some(bad) = v.iter().find(|&&x| x != 0.0 && x != 1.0) {
        return Err(Error::Dataset(format!("ground truth value {bad} is not binary")));
    }
    Ok(())
}

/// Per-pixel BCE on each stream's logits, averaged over pixels and batch; `L = L_c − λ·L_s`.
///
/// Without a confounding stream `L_s` is 0 and `L = L_c`.
pub fn compute_losses(s_c: &Tensor, s_s: Option<&Tensor>, y: &Tensor, lambda: f64) -> Result<Losses> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    if s_c.dims() != y.dims() || s_s.is_some_and(|s| s.dims() != y.dims()) {
        return Err(shape_err!(
            "response maps {:?}/{:?} vs ground truth {:?}",
            s_c.dims(),
            s_s.map(|s| s.dims().to_vec()),
            y.dims()
        ));
    }
    check_binary(y)?;
    let y = y.to_dtype(s_c.dtype())?;
    let l_c = ops::bce_with_logits(s_c, &y)?;
    let l_c_val = l_c.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    match s_s {
        Some(s_s) => {
            let l_s = ops::bce_with_logits(s_s, &y)?;
            let l_s_val = l_s.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            let total = (&l_c - l_s.affine(lambda, 0.0)?)?;
            Ok(Losses {
                total,
                l_c,
                l_s: Some(l_s),
                bundle: LossBundle::new(l_c_val, l_s_val, lambda),
            })
        }
        None => Ok(Losses {
            total: l_c.clone(),
            l_c,
            l_s: None,
            bundle: LossBundle::new(l_c_val, 0.0, lambda),
        }),
    }
}

pub fn model_losses(model: &SegModel, batch: &Batch, lambda: f64) -> Result<(ModelOutput, Losses)> {
    let out = model.forward(&batch.images, &batch.tokens)?;
    let losses = compute_losses(&out.causal_logits, out.confounding_logits.as_ref(), &batch.masks, lambda)?;
    Ok((out, losses))
}

/// Cosine decay from `base` at epoch 0 to 0 at `max_epochs`, no warmup.
pub fn cosine_lr(base: f64, epoch: usize, max_epochs: usize) -> f64 {
    if max_epochs == 0 {
        return base;
    }
    let t = (epoch.min(max_epochs) as f64) / max_epochs as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam without weight decay; moments are kept per parameter name so they can be checkpointed.
pub struct Adam {
    params: Vec<(String, Var)>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>) -> Self {
        Self {
            params,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> impl Iterator<Item = (&String, (&Tensor, &Tensor))> {
        self.m.iter().filter_map(|(n, m)| self.v.get(n).map(|v| (n, (m, v))))
    }

    pub fn load_moments(
        &mut self,
        m: &BTreeMap<String, Tensor>,
        v: &BTreeMap<String, Tensor>,
        step: u64,
    ) -> Result<()> {
        for (name, var) in &self.params {
            if let (Some(mt), Some(vt)) = (m.get(name), v.get(name)) {
                if mt.dims() != var.dims() || vt.dims() != var.dims() {
                    return Err(Error::Checkpoint(format!("optimizer state shape mismatch for {name}")));
                }
                self.m.insert(name.clone(), mt.to_dtype(var.dtype())?);
                self.v.insert(name.clone(), vt.to_dtype(var.dtype())?);
            }
        }
        self.step = step;
        Ok(())
    }

    /// One update at learning rate `lr`; parameters without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, var) in &self.params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let g2 = g.sqr()?;
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (&g2 * (1.0 - self.beta2))?)?,
                None => (&g2 * (1.0 - self.beta2))?,
            };
            let denom = ((&v / c2)?.sqrt()? + self.eps)?;
            let update = ((&m / c1)? / denom)?;
            var.set(&(var.as_tensor().detach() - (update * lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }
}

/// One joint step minimizing `L`; a non-finite loss aborts before any parameter changes.
pub fn train_step(
    model: &SegModel,
    batch: &Batch,
    optimizer: &mut Adam,
    lambda: f64,
    lr: f64,
    (epoch, step): (usize, usize),
) -> Result<LossBundle> {
    let (_, losses) = model_losses(model, batch, lambda)?;
    let b = losses.bundle;
    if !b.l_c.is_finite() || !b.l_s.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch,
            step,
            l_c: b.l_c,
            l_s: b.l_s,
        });
    }
    let grads = losses.total.backward()?;
    optimizer.step(&grads, lr)?;
    Ok(b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub best_validation_dice: f64,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
    pub learning_rate: f64,
    pub rng_seed: u64,
}

impl TrainState {
    pub fn new(base_lr: f64, seed: u64) -> Self {
        Self {
            epoch: 0,
            best_validation_dice: -1.0,
            best_epoch: 0,
            epochs_since_improvement: 0,
            learning_rate: base_lr,
            rng_seed: seed,
        }
    }

    /// Records a finished epoch's validation Dice; returns true on strict improvement.
    pub fn record(&mut self, val_dice: f64) -> bool {
        self.epoch += 1;
        if val_dice > self.best_validation_dice {
            self.best_validation_dice = val_dice;
            self.best_epoch = self.epoch;
            self.epochs_since_improvement = 0;
            true
        } else {
            self.epochs_since_improvement += 1;
            false
        }
    }
}

/// Binary predictions of `D_c` for every sample.
pub fn predict(
    model: &SegModel,
    dataset: &Dataset,
    tokenizer: &dyn Tokenizer,
    batch_size: usize,
) -> Result<Vec<BinaryMask>> {
    let mut out = Vec::with_capacity(dataset.len());
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = dataset.batch(chunk, tokenizer, model.config().max_text_len, None, model.device())?;
        let logits = model.forward(&batch.images, &batch.tokens)?.causal_logits.detach();
        for i in 0..chunk.len() {
            out.push(BinaryMask::from_logits(&logits.get(i)?.squeeze(0)?)?);
        }
    }
    Ok(out)
}

/// Prediction for a single sample.
#[derive(Debug, Clone)]
pub struct Inference {
    pub pred: BinaryMask,
    /// `D_c` logits, row-major at input resolution.
    pub logits: Vec<f32>,
    /// Finest-level causal mask `M` upsampled (nearest) to input resolution.
    pub causal_mask: Option<Vec<f32>>,
}

pub fn infer(model: &SegModel, tokenizer: &dyn Tokenizer, sample: &crate::data::Sample) -> Result<Inference> {
    let ds = Dataset::new(vec![sample.clone()]);
    let batch = ds.batch(&[0], tokenizer, model.config().max_text_len, None, model.device())?;
    let out = model.forward(&batch.images, &batch.tokens)?;
    let logits = out.causal_logits.get(0)?.squeeze(0)?.detach();
    let (h, w) = logits.dims2()?;
    let causal_mask = match out.masks.first() {
        Some(m) => {
            let m = m.mask.get(0)?.squeeze(0)?;
            let (mh, mw) = m.dims2()?;
            let v: Vec<f32> = m.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1()?;
            Some(crate::viz::upsample_nearest(&v, mh, mw, h, w))
        }
        None => None,
    };
    Ok(Inference {
        pred: BinaryMask::from_logits(&logits)?,
        logits: logits.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1()?,
        causal_mask,
    })
}

/// Dataset mean of per-image Dice and mIoU of thresholded `D_c` logits.
pub fn evaluate(
    model: &SegModel,
    dataset: &Dataset,
    tokenizer: &dyn Tokenizer,
    batch_size: usize,
) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty dataset".into()));
    }
    let preds = predict(model, dataset, tokenizer, batch_size)?;
    let mode = MiouMode::from_two_class_flag(model.config().miou_two_class);
    metrics::evaluate_pairs(preds.iter().zip(dataset.samples.iter().map(|s| &s.mask)), mode, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l: f64,
    pub l_c: f64,
    pub l_s: f64,
    pub lr: f64,
    pub val_dice: f64,
    pub val_miou: f64,
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Stop after the epoch during which this much wall time has elapsed.
    pub time_budget: Option<Duration>,
    /// Word vocabulary stored in checkpoints so evaluation can rebuild the tokenizer.
    pub vocab: Option<String>,
    /// Keep per-step losses of the first epoch in the outcome.
    pub record_first_epoch: bool,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub best_checkpoint: PathBuf,
    pub state: TrainState,
    pub history: Vec<EpochLog>,
    pub first_epoch_steps: Vec<LossBundle>,
    pub stopped_early: bool,
}

const METRICS_HEADER: &str = "epoch,L,L_c,L_s,lr,val_dice,val_miou";

/// Trains with Adam under the cosine schedule, validating every epoch.
///
/// Writes `best.ckpt` on every strict validation improvement, `last.ckpt` at the end, and one
/// `metrics.csv` row per epoch under `out_dir`. Stops after `patience` epochs without
/// improvement or at `max_epochs`.
pub fn fit(
    model: &SegModel,
    tokenizer: &dyn Tokenizer,
    train: &Dataset,
    val: &Dataset,
    out_dir: &Path,
    options: &FitOptions,
) -> Result<FitOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Dataset("training and validation sets must be non-empty".into()));
    }
    let cfg = model.config().clone();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let best_path = out_dir.join("best.ckpt");
    let csv_path = out_dir.join("metrics.csv");
    let mut csv = File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    writeln!(csv, "{METRICS_HEADER}").map_err(|e| Error::io(&csv_path, e))?;

    let mut adam = Adam::new(model.trainable_params());
    let mut state = TrainState::new(cfg.lr, cfg.seed);
    let mut history = Vec::new();
    let mut first_epoch_steps = Vec::new();
    let started = Instant::now();
    let mut stopped_early = false;

    while state.epoch < cfg.max_epochs {
        let epoch = state.epoch;
        let lr = match cfg.lr_schedule {
            LrSchedule::Cosine => cosine_lr(cfg.lr, epoch, cfg.max_epochs),
            LrSchedule::Constant => cfg.lr,
        };
        state.learning_rate = lr;
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut flip_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        flip_rng.set_stream(epoch as u64 + 1);
        let (mut sum, mut n) = (LossBundle::new(0.0, 0.0, cfg.lambda), 0usize);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let flips: Vec<bool> = chunk
                .iter()
                .map(|_| cfg.augment_flip && flip_rng.random_bool(0.5))
                .collect();
            let batch = train.batch(chunk, tokenizer, cfg.max_text_len, Some(&flips), model.device())?;
            let b = train_step(model, &batch, &mut adam, cfg.lambda, lr, (epoch, step))?;
            if options.record_first_epoch && epoch == 0 {
                first_epoch_steps.push(b);
            }
            sum.l_c += b.l_c;
            sum.l_s += b.l_s;
            n += 1;
        }
        let mean = LossBundle::new(sum.l_c / n as f64, sum.l_s / n as f64, cfg.lambda);
        let report = evaluate(model, val, tokenizer, cfg.batch_size)?;
        let improved = state.record(report.dice);
        let row = EpochLog {
            epoch: state.epoch,
            l: mean.l,
            l_c: mean.l_c,
            l_s: mean.l_s,
            lr,
            val_dice: report.dice,
            val_miou: report.miou,
        };
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            row.epoch, row.l, row.l_c, row.l_s, row.lr, row.val_dice, row.val_miou
        )
        .and_then(|_| csv.flush())
        .map_err(|e| Error::io(&csv_path, e))?;
        log::info!(
            "epoch {} L={:.4} L_c={:.4} L_s={:.4} lr={:.3e} val_dice={:.4} val_miou={:.4}{}",
            row.epoch,
            row.l,
            row.l_c,
            row.l_s,
            row.lr,
            row.val_dice,
            row.val_miou,
            if improved { " *" } else { "" }
        );
        history.push(row);
        if improved {
            checkpoint::save(&best_path, model, Some(&adam), &state, options.vocab.as_deref())?;
        }
        if state.epochs_since_improvement >= cfg.patience {
            stopped_early = true;
            break;
        }
        if options.time_budget.is_some_and(|b| started.elapsed() >= b) {
            stopped_early = true;
            break;
        }
    }
    checkpoint::save(&out_dir.join("last.ckpt"), model, Some(&adam), &state, options.vocab.as_deref())?;
    Ok(FitOutcome {
        best_checkpoint: best_path,
        state,
        history,
        first_epoch_steps,
        stopped_early,
    })
}
