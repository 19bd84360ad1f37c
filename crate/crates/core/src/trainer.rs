//! Loss, AdamW, the training loop with early stopping, and evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{augment_image, augment_imu, preprocess, AugmentConfig, AugmentError};
use crate::config::{Mode, ModelConfig};
use crate::encoders::{image_var, imu_var};
use crate::error::{ConfigError, ModelError};
use crate::metrics::{metrics_from_confusion, ConditionMetrics, ConfusionMatrix, MetricsReport};
use crate::model::{argmax, forward, predict};
use crate::params::ModelParams;
use crate::rng::sample_rng;
use crate::sample::{ImageTensor, ImuWindow, Sample, SurfaceClass};
use crate::tensor::{Graph, Scalar, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Optional per-class loss weights.
    pub class_weights: Option<Vec<f64>>,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 2e-4,
            batch_size: 32,
            max_epochs: 50,
            patience: 5,
            seed: 42,
            class_weights: None,
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ConfigError::invalid("train.lr", "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(ConfigError::invalid("train.weight_decay", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(ConfigError::invalid("train.batch_size", "must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(ConfigError::invalid("train.max_epochs", "must be positive"));
        }
        if self.patience == 0 {
            return Err(ConfigError::invalid("train.patience", "must be at least 1"));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != self.model.num_classes || w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(ConfigError::invalid(
                    "train.class_weights",
                    "needs one finite non-negative weight per class",
                ));
            }
        }
        if self.augment.crop_to != self.model.encoder.image_size {
            return Err(ConfigError::invalid(
                "augment.crop_to",
                format!("must equal the model image size {}", self.model.encoder.image_size),
            ));
        }
        self.model.validate()?;
        self.augment.validate()
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("non-finite gradient for `{name}`; step aborted")]
    NonFiniteGradient { name: String },
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        last_good: Box<ModelParams<f32>>,
    },
}

/// `−w · log softmax(logits)[label]`, stable through log-sum-exp.
pub fn cross_entropy<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    label: usize,
    weight: Option<T>,
) -> Result<Var, ModelError> {
    let k = g.shape(logits).iter().product::<usize>();
    if label >= k {
        return Err(ModelError::Tensor(TensorError::InvalidArgument {
            op: "cross_entropy",
            reason: format!("label {label} outside {k} classes"),
        }));
    }
    let lp = g.log_softmax(logits, 0)?;
    let picked = g.pick(lp, label)?;
    let w = weight.unwrap_or_else(T::one);
    Ok(g.scale(picked, -w)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWHyper {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    pub step: u64,
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
}

impl<T> Default for AdamWState<T> {
    fn default() -> Self {
        Self {
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One AdamW update. Every gradient is checked for finiteness before any
/// parameter changes; decay `θ −= lr·wd·θ` is applied separately from the
/// bias-corrected adaptive step.
pub fn adamw_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &BTreeMap<String, Vec<T>>,
    state: &mut AdamWState<T>,
    hp: &AdamWHyper,
) -> Result<(), TrainError> {
    for (name, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient { name: name.clone() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(hp.beta1), T::lit(hp.beta2));
    let bc1 = T::one() - T::lit(hp.beta1.powi(t));
    let bc2 = T::one() - T::lit(hp.beta2.powi(t));
    let (lr, decay, eps) = (T::lit(hp.lr), T::lit(hp.lr * hp.weight_decay), T::lit(hp.eps));
    for (name, theta) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        let n = theta.numel();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
        for (i, p) in theta.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *p = *p - decay * *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// One line of `train_log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_acc: f64,
    pub val_loss: f64,
    pub mean_gate: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub params: ModelParams<f32>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub log: Vec<EpochLog>,
    pub stopped_early: bool,
}

/// Model-ready inputs for one sample.
struct Prepared {
    image: ImageTensor,
    imu: ImuWindow,
    label: usize,
}

fn prepare_eval(samples: &[Sample], aug: &AugmentConfig) -> Result<Vec<Prepared>, AugmentError> {
    samples
        .iter()
        .map(|s| {
            Ok(Prepared {
                image: preprocess(&s.image, aug)?,
                imu: s.imu.clone(),
                label: s.label.index(),
            })
        })
        .collect()
}

/// Loss value and parameter gradients for one sample.
fn sample_grad(
    params: &ModelParams<f32>,
    cfg: &TrainConfig,
    p: &Prepared,
    grads: &mut BTreeMap<String, Vec<f32>>,
) -> Result<f64, ModelError> {
    let mut g = Graph::<f32>::new();
    let bound = params.bind(&mut g, true);
    let x = image_var(&mut g, &p.image);
    let s = match cfg.model.mode {
        Mode::Fused => Some(imu_var(&mut g, &p.imu)),
        Mode::VisionOnly => None,
    };
    let fv = forward(&mut g, &bound, &cfg.model, x, s)?;
    let w = cfg.class_weights.as_ref().map(|w| w[p.label] as f32);
    let loss = cross_entropy(&mut g, fv.logits, p.label, w)?;
    let value = f64::from(g.value(loss).data()[0]);
    g.backward(loss)?;
    for (name, var) in bound.iter() {
        let gt = g.grad(*var);
        let acc = grads.entry(name.clone()).or_insert_with(|| vec![0.0; gt.numel()]);
        acc.iter_mut().zip(gt.data()).for_each(|(a, b)| *a += b);
    }
    Ok(value)
}

/// Predictions plus loss and mean gate over a prepared split.
struct EvalPass {
    pairs: Vec<(usize, usize)>,
    loss: f64,
    mean_gate: Option<f64>,
}

fn eval_pass(params: &ModelParams<f32>, cfg: &ModelConfig, data: &[Prepared]) -> Result<EvalPass, ModelError> {
    let mut pairs = Vec::with_capacity(data.len());
    let mut loss = 0.0;
    let mut gate_sum = 0.0;
    let mut gates = 0usize;
    for p in data {
        let out = predict(params, cfg, &p.image, Some(&p.imu))?;
        let prob = f64::from(out.probs.data()[p.label]).max(1e-12);
        loss -= prob.ln();
        pairs.push((p.label, out.predicted()));
        if let Some(g) = out.mean_gate() {
            gate_sum += g;
            gates += 1;
        }
    }
    Ok(EvalPass {
        pairs,
        loss: loss / data.len().max(1) as f64,
        mean_gate: (gates > 0).then(|| gate_sum / gates as f64),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Wait,
    Stop,
}

/// Tracks the best epoch. Higher validation accuracy wins; at equal
/// accuracy the lower validation loss wins.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(f64, f64)>,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience: patience.max(1),
            best: None,
            best_epoch: 0,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_acc: f64, val_loss: f64) -> Verdict {
        let better = match self.best {
            None => true,
            Some((acc, loss)) => val_acc > acc || (val_acc == acc && val_loss < loss),
        };
        if better {
            self.best = Some((val_acc, val_loss));
            self.best_epoch = epoch;
            self.since_best = 0;
            return Verdict::Improved;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Wait
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_val_acc(&self) -> f64 {
        self.best.map_or(0.0, |b| b.0)
    }
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut sample_rng(seed, "shuffle", epoch as u64));
    order
}

/// Trains from seeded initialization; `on_epoch` sees every log line.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }
    let mut params = ModelParams::<f32>::init(&cfg.model, cfg.seed);
    let val = prepare_eval(val_set, &cfg.augment)?;
    let hp = AdamWHyper::new(cfg.lr, cfg.weight_decay);
    let mut state = AdamWState::default();
    let mut best = params.clone();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut log = Vec::new();
    let aug_seed = cfg.seed ^ cfg.augment.seed;

    for epoch in 1..=cfg.max_epochs {
        let diverged = |reason: String, best: &ModelParams<f32>| TrainError::Diverged {
            epoch,
            reason,
            last_good: Box::new(best.clone()),
        };
        let order = shuffled(train_set.len(), cfg.seed, epoch);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = BTreeMap::new();
            for &i in batch {
                let s = &train_set[i];
                let mut rng = sample_rng(aug_seed, &s.id, epoch as u64);
                let p = Prepared {
                    image: augment_image(&s.image, &cfg.augment, &mut rng)?,
                    imu: augment_imu(&s.imu, &cfg.augment, &mut rng)?,
                    label: s.label.index(),
                };
                match sample_grad(&params, cfg, &p, &mut grads) {
                    Ok(l) if l.is_finite() => epoch_loss += l,
                    Ok(l) => return Err(diverged(format!("loss {l}"), &best)),
                    Err(ModelError::Tensor(e @ TensorError::NonFinite { .. })) => {
                        return Err(diverged(e.to_string(), &best))
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            let inv = 1.0 / batch.len() as f32;
            grads.values_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= inv));
            match adamw_step(&mut params, &grads, &mut state, &hp) {
                Err(TrainError::NonFiniteGradient { name }) => {
                    return Err(diverged(format!("non-finite gradient for `{name}`"), &best))
                }
                other => other?,
            }
        }
        let pass = match eval_pass(&params, &cfg.model, &val) {
            Ok(p) => p,
            Err(ModelError::Tensor(e @ TensorError::NonFinite { .. })) => return Err(diverged(e.to_string(), &best)),
            Err(e) => return Err(e.into()),
        };
        let correct = pass.pairs.iter().filter(|(t, p)| t == p).count();
        let val_acc = correct as f64 / val.len() as f64;
        let entry = EpochLog {
            epoch,
            loss: epoch_loss / train_set.len() as f64,
            val_acc,
            val_loss: pass.loss,
            mean_gate: pass.mean_gate,
        };
        on_epoch(&entry);
        log.push(entry);
        match stopper.observe(epoch, val_acc, pass.loss) {
            Verdict::Improved => best = params.clone(),
            Verdict::Wait => {}
            Verdict::Stop => {
                return Ok(TrainOutcome {
                    params: best,
                    best_epoch: stopper.best_epoch(),
                    best_val_acc: stopper.best_val_acc(),
                    log,
                    stopped_early: true,
                })
            }
        }
    }
    Ok(TrainOutcome {
        params: best,
        best_epoch: stopper.best_epoch(),
        best_val_acc: stopper.best_val_acc(),
        log,
        stopped_early: false,
    })
}

/// Metrics on `samples` without augmentation (resize and crop only).
pub fn evaluate(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    aug: &AugmentConfig,
    samples: &[Sample],
) -> Result<MetricsReport, TrainError> {
    let data = prepare_eval(samples, aug)?;
    let pass = eval_pass(params, cfg, &data)?;
    let names = SurfaceClass::names();
    let k = cfg.num_classes;
    let cm = ConfusionMatrix::from_pairs(k, pass.pairs.iter().copied());
    let mut report = metrics_from_confusion(&cm.counts, &names).expect("square by construction");
    let mut by_condition: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
    for (s, pair) in samples.iter().zip(&pass.pairs) {
        by_condition.entry(s.condition.name().to_string()).or_default().push(*pair);
    }
    for (cond, pairs) in by_condition {
        let c = ConfusionMatrix::from_pairs(k, pairs);
        let r = metrics_from_confusion(&c.counts, &names).expect("square by construction");
        // Only classes that occur under this condition enter the average.
        let present: Vec<f64> = (0..k)
            .filter(|&i| r.per_class[i].support > 0 || c.counts.iter().any(|row| row[i] > 0))
            .map(|i| r.per_class[i].f1)
            .collect();
        report.per_condition.insert(
            cond,
            ConditionMetrics {
                samples: r.samples,
                accuracy: r.accuracy,
                macro_f1: present.iter().sum::<f64>() / present.len().max(1) as f64,
            },
        );
    }
    report.mean_gate = pass.mean_gate;
    Ok(report)
}

/// Class index predicted for each sample, without augmentation.
pub fn predict_labels(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    aug: &AugmentConfig,
    samples: &[Sample],
) -> Result<Vec<usize>, TrainError> {
    let data = prepare_eval(samples, aug)?;
    data.iter()
        .map(|p| Ok(argmax(predict(params, cfg, &p.image, Some(&p.imu))?.probs.data())))
        .collect()
}
