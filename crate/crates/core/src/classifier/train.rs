//! Mini-batch trainer: focal loss, AdamW with decoupled weight decay, linear
//! warm-up/decay schedule, layer-wise learning-rate decay and global-norm clipping.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{argmax, focal_loss_grad};
use super::model::{ClassifierModel, Dense, DropoutMasks, Gradients};
use super::ClassifierError;
use crate::exec::Exec;
use crate::preprocess::LabeledFeatures;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainingProfile {
    /// Initial rate 3e-5.
    Default,
    /// Rate 2e-5 used for the reported evaluation runs.
    PaperEval,
    /// 3e-5 scaled by 100 so a from-scratch MLP converges in ten epochs.
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub base_learning_rate: f64,
    pub lr_multiplier: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub layer_decay: f64,
    pub clip_norm: f64,
    /// Per-class α; `None` means 1.0 for every class.
    pub focal_alpha: Option<Vec<f64>>,
    pub focal_gamma: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self::profile(TrainingProfile::Default)
    }
}

impl TrainingConfig {
    pub fn profile(profile: TrainingProfile) -> Self {
        let (base, mult) = match profile {
            TrainingProfile::Default => (3e-5, 1.0),
            TrainingProfile::PaperEval => (2e-5, 1.0),
            TrainingProfile::Desk => (3e-5, 100.0),
        };
        Self {
            base_learning_rate: base,
            lr_multiplier: mult,
            epochs: 10,
            batch_size: 16,
            warmup_fraction: 0.1,
            layer_decay: 0.95,
            clip_norm: 1.0,
            focal_alpha: None,
            focal_gamma: 2.0,
            weight_decay: 0.01,
            seed: 0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.base_learning_rate * self.lr_multiplier
    }

    // Negated comparisons so NaN fails too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), ClassifierError> {
        let bad = |m: &str| Err(ClassifierError::Config(m.to_string()));
        if !(self.learning_rate() >= 0.0) || !self.learning_rate().is_finite() {
            return bad("learning rate must be finite and >= 0");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup fraction must lie in [0, 1]");
        }
        if !(self.layer_decay > 0.0) || !(self.clip_norm > 0.0) {
            return bad("layer decay and clip norm must be positive");
        }
        if !(self.focal_gamma >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("focal gamma and weight decay must be >= 0");
        }
        Ok(())
    }

    fn alpha(&self, class: usize) -> f64 {
        self.focal_alpha
            .as_ref()
            .and_then(|a| a.get(class).copied())
            .unwrap_or(1.0)
    }
}

/// Linear warm-up from 0 over `warmup` steps, then linear decay to 0 at `total`.
pub fn lr_factor(step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        step as f64 / warmup as f64
    } else if total > warmup {
        ((total - step) as f64 / (total - warmup) as f64).max(0.0)
    } else {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the evaluation before any update.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    /// Largest global gradient norm after clipping seen during the epoch.
    pub max_clipped_grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingHistory {
    pub fn initial_train_loss(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.train_loss)
    }

    pub fn final_record(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,train_loss,val_loss,train_acc,val_acc")?;
        for e in &self.epochs {
            writeln!(
                w,
                "{},{},{},{},{}",
                e.epoch, e.train_loss, e.val_loss, e.train_acc, e.val_acc
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> std::io::Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Mean focal loss and accuracy with dropout off.
pub fn evaluate_loss(
    model: &ClassifierModel,
    data: &LabeledFeatures,
    cfg: &TrainingConfig,
    exec: Exec,
) -> (f64, f64) {
    if data.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let per_sample = exec.map_range(data.len(), |i| {
        let logits = model.forward_fused(&data.features[i], None);
        let y = data.labels[i];
        let (loss, _) = focal_loss_grad(&logits, y, cfg.alpha(y), cfg.focal_gamma);
        (loss, argmax(&logits) == y)
    });
    let n = data.len() as f64;
    let loss = per_sample.iter().map(|(l, _)| l).sum::<f64>() / n;
    let acc = per_sample.iter().filter(|(_, ok)| *ok).count() as f64 / n;
    (loss, acc)
}

/// Mean batch loss and its gradient. `masks` (one per sample) fixes dropout;
/// `None` trains without dropout.
pub fn batch_loss_and_grad(
    model: &ClassifierModel,
    xs: &[&[f64]],
    ys: &[usize],
    masks: Option<&[DropoutMasks]>,
    cfg: &TrainingConfig,
    grads: &mut Gradients,
) -> f64 {
    grads.zero();
    let scale = 1.0 / xs.len() as f64;
    let mut total = 0.0;
    for (k, (&x, &y)) in xs.iter().zip(ys).enumerate() {
        let m = masks.map(|m| &m[k]);
        let cache = model.forward_cached(x, m);
        let (loss, dlogits) = focal_loss_grad(&cache.logits, y, cfg.alpha(y), cfg.focal_gamma);
        total += loss;
        model.backward(x, &cache, m, &dlogits, scale, grads);
    }
    total * scale
}

struct AdamState {
    m: Vec<Dense>,
    v: Vec<Dense>,
    t: i32,
}

impl AdamState {
    fn new(model: &ClassifierModel) -> Self {
        let zeros: Vec<Dense> = model
            .layers()
            .iter()
            .map(|l| Dense::zeros(l.inputs, l.outputs))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, model: &mut ClassifierModel, grads: &Gradients, lr: f64, cfg: &TrainingConfig) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t);
        let bc2 = 1.0 - BETA2.powi(self.t);
        let grad_layers = grads.layers();
        for (depth, layer) in model.layers_mut().into_iter().enumerate() {
            let layer_lr = lr * cfg.layer_decay.powi(depth as i32);
            let g = grad_layers[depth];
            let (m, v) = (&mut self.m[depth], &mut self.v[depth]);
            let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64, decay: bool| {
                if decay {
                    *p -= layer_lr * cfg.weight_decay * *p;
                }
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= layer_lr * mhat / (vhat.sqrt() + ADAM_EPS);
            };
            for i in 0..layer.weights.len() {
                update(&mut layer.weights[i], g.weights[i], &mut m.weights[i], &mut v.weights[i], true);
            }
            for i in 0..layer.bias.len() {
                update(&mut layer.bias[i], g.bias[i], &mut m.bias[i], &mut v.bias[i], false);
            }
        }
    }
}

/// Trains a copy of `model`. Deterministic for a fixed `cfg.seed`, including
/// batch order and dropout masks.
pub fn train(
    model: &ClassifierModel,
    train_set: &LabeledFeatures,
    val_set: &LabeledFeatures,
    cfg: &TrainingConfig,
) -> Result<(ClassifierModel, TrainingHistory), ClassifierError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(ClassifierError::EmptyTrainingSet);
    }
    for x in train_set.features.iter().chain(&val_set.features) {
        model.check_input(x)?;
    }
    if let Some(&bad) = train_set
        .labels
        .iter()
        .chain(&val_set.labels)
        .find(|&&y| y >= model.config.n_classes)
    {
        return Err(ClassifierError::InvalidTarget {
            target: bad,
            classes: model.config.n_classes,
        });
    }

    let exec = Exec::default();
    let mut model = model.clone();
    let mut history = TrainingHistory::default();
    let record = |model: &ClassifierModel, epoch: usize, max_norm: f64| {
        let (train_loss, train_acc) = evaluate_loss(model, train_set, cfg, exec);
        let (val_loss, val_acc) = evaluate_loss(model, val_set, cfg, exec);
        EpochRecord {
            epoch,
            train_loss,
            val_loss,
            train_acc,
            val_acc,
            max_clipped_grad_norm: max_norm,
        }
    };
    history.epochs.push(record(&model, 0, 0.0));

    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let warmup = (cfg.warmup_fraction * total_steps as f64).round() as usize;
    let lr = cfg.learning_rate();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&model);
    let mut grads = model.zero_grads();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut max_norm: f64 = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xs: Vec<&[f64]> = batch.iter().map(|&i| train_set.features[i].as_slice()).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| train_set.labels[i]).collect();
            let masks: Option<Vec<DropoutMasks>> = (model.config.dropout_rate > 0.0).then(|| {
                batch
                    .iter()
                    .map(|_| DropoutMasks::sample(&model.config, &mut rng))
                    .collect()
            });
            let loss = batch_loss_and_grad(&model, &xs, &ys, masks.as_deref(), cfg, &mut grads);
            if !loss.is_finite() {
                return Err(ClassifierError::Diverged { step });
            }
            let norm = grads.global_norm();
            if !norm.is_finite() {
                return Err(ClassifierError::Diverged { step });
            }
            if norm > cfg.clip_norm {
                grads.scale(cfg.clip_norm / norm);
            }
            max_norm = max_norm.max(grads.global_norm());
            adam.step(&mut model, &grads, lr * lr_factor(step, warmup, total_steps), cfg);
            step += 1;
        }
        if !model.all_finite() {
            return Err(ClassifierError::Diverged { step });
        }
        history.epochs.push(record(&model, epoch, max_norm));
    }
    Ok((model, history))
}
