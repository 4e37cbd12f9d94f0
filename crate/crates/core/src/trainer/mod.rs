//! Small per-pixel segmentation model trained by momentum SGD in which
//! propagated-label samples have their gradient scaled by a trust factor.

mod model;
mod snapshot;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagery::{Frame, ImageryError, LabelMap, Tier};
use crate::metrics::{ConfusionMatrix, MetricsError};
use crate::par::Exec;

pub use model::{ModelShape, Scores, TinySegModel};
pub use snapshot::{load_snapshot, read_snapshot_from, round_trip, save_snapshot, write_snapshot_to};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("label map has no scored pixels")]
    AllVoid,
    #[error("model predicts {model} classes but labels use {labels}")]
    ClassMismatch { model: usize, labels: usize },
    #[error("frame and labels differ in size")]
    DimensionMismatch,
    #[error("trust factor {0} outside [0, 1]")]
    BadTrust(f64),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("diverged at epoch {epoch}, sample {sample}: loss {loss}")]
    Diverged { epoch: usize, sample: usize, loss: f64 },
    #[error("empty training set")]
    EmptyTrainSet,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Imagery(#[from] ImageryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An image with labels and the weight its gradient receives.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    frame: Frame,
    labels: LabelMap,
    tier: Tier,
    trust: f64,
}

impl TrainSample {
    /// GT samples always carry trust 1.
    pub fn new(frame: Frame, labels: LabelMap, tier: Tier, trust: f64) -> Result<Self, TrainError> {
        if frame.width() != labels.width() || frame.height() != labels.height() {
            return Err(TrainError::DimensionMismatch);
        }
        if !(0.0..=1.0).contains(&trust) {
            return Err(TrainError::BadTrust(trust));
        }
        let trust = if tier == Tier::Gt { 1.0 } else { trust };
        Ok(Self { frame, labels, tier, trust })
    }

    pub fn gt(frame: Frame, labels: LabelMap) -> Result<Self, TrainError> {
        Self::new(frame, labels, Tier::Gt, 1.0)
    }

    pub fn pgt(frame: Frame, labels: LabelMap, trust: f64) -> Result<Self, TrainError> {
        Self::new(frame, labels, Tier::Pgt, trust)
    }

    pub fn frame(&self) -> &Frame {
        &self.frame
    }

    pub fn labels(&self) -> &LabelMap {
        &self.labels
    }

    pub fn tier(&self) -> Tier {
        self.tier
    }

    pub fn trust(&self) -> f64 {
        self.trust
    }
}

/// Momentum SGD state.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
    steps: u64,
}

impl OptimState {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64, num_params: usize) -> Result<Self, TrainError> {
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig(format!("learning rate {learning_rate} must be > 0")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(TrainError::InvalidConfig(format!("momentum {momentum} outside [0, 1)")));
        }
        if !(weight_decay.is_finite() && weight_decay >= 0.0) {
            return Err(TrainError::InvalidConfig(format!("weight decay {weight_decay} must be >= 0")));
        }
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: vec![0.0; num_params],
            steps: 0,
        })
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// `g = grad + decay·θ`, scaled by `trust` for PGT samples;
    /// `v ← momentum·v − lr·g`; `θ ← θ + v`.
    pub fn sgd_step(&mut self, theta: &mut [f64], grad: &[f64], tier: Tier, trust: f64) -> Result<(), TrainError> {
        if theta.len() != self.velocity.len() || grad.len() != theta.len() {
            return Err(TrainError::InvalidConfig(format!(
                "shape mismatch: {} parameters, {} gradients, {} velocities",
                theta.len(),
                grad.len(),
                self.velocity.len()
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(TrainError::NonFinite(format!("gradient coordinate {i}")));
        }
        if !(0.0..=1.0).contains(&trust) {
            return Err(TrainError::BadTrust(trust));
        }
        for ((t, &g), v) in theta.iter_mut().zip(grad).zip(&mut self.velocity) {
            let raw = g + self.weight_decay * *t;
            let eff = match tier {
                Tier::Gt => raw,
                Tier::Pgt => trust * raw,
            };
            *v = self.momentum * *v - self.learning_rate * eff;
            *t += *v;
        }
        self.steps += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Must be 1.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Trust factor for PGT samples that do not carry their own.
    pub pgt_trust: f64,
    pub shuffle_seed: u64,
    pub init_seed: u64,
    pub hidden1: usize,
    pub hidden2: usize,
    pub kernel: usize,
    /// Save a snapshot every this many epochs; 0 disables.
    pub snapshot_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 1,
            learning_rate: 1e-2,
            momentum: 0.9,
            weight_decay: 5e-4,
            pgt_trust: 0.9,
            shuffle_seed: 0,
            init_seed: 0,
            hidden1: 8,
            hidden2: 8,
            kernel: 3,
            snapshot_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size != 1 {
            return Err(TrainError::InvalidConfig(format!("batch_size {} (only 1 is supported)", self.batch_size)));
        }
        if !(0.0..=1.0).contains(&self.pgt_trust) {
            return Err(TrainError::BadTrust(self.pgt_trust));
        }
        OptimState::new(self.learning_rate, self.momentum, self.weight_decay, 0)?;
        self.shape(1).validate()
    }

    pub fn shape(&self, classes: usize) -> ModelShape {
        ModelShape {
            classes,
            hidden1: self.hidden1,
            hidden2: self.hidden2,
            kernel: self.kernel,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Gradient steps taken so far.
    pub step: u64,
    pub train_loss: f64,
    pub val_miou: Option<f64>,
    pub tf: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: TinySegModel,
    pub log: Vec<EpochLog>,
    /// `(epoch, model)` at the configured cadence.
    pub snapshots: Vec<(usize, TinySegModel)>,
}

/// Runs `cfg.epochs` passes of one SGD step per sample in a seeded shuffled
/// order, scoring `val` after every epoch.
pub fn train(
    model: TinySegModel,
    samples: &[TrainSample],
    val: &[(Frame, LabelMap)],
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let mut model = model;
    let mut opt = OptimState::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay, model.num_params())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut snapshots = Vec::new();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let s = &samples[i];
            let (loss, grad) = model.loss_and_grad(s)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, sample: i, loss });
            }
            total += loss;
            opt.sgd_step(model.params_mut(), &grad, s.tier(), s.trust())
                .map_err(|e| match e {
                    TrainError::NonFinite(_) => TrainError::Diverged { epoch, sample: i, loss },
                    e => e,
                })?;
        }
        let val_miou = if val.is_empty() {
            None
        } else {
            Some(evaluate(&model, val, exec)?.mean_iou()?)
        };
        log.push(EpochLog {
            epoch,
            step: opt.steps(),
            train_loss: total / samples.len() as f64,
            val_miou,
            tf: cfg.pgt_trust,
        });
        if cfg.snapshot_every > 0 && epoch % cfg.snapshot_every == 0 {
            snapshots.push((epoch, model.clone()));
        }
    }
    Ok(TrainOutcome { model, log, snapshots })
}

/// Confusion matrix of the model's predictions over `data`.
pub fn evaluate(model: &TinySegModel, data: &[(Frame, LabelMap)], exec: Exec) -> Result<ConfusionMatrix, TrainError> {
    let parts = exec.map_slice(data, |(f, l)| -> Result<ConfusionMatrix, TrainError> {
        let mut m = ConfusionMatrix::new(model.num_classes());
        m.accumulate(&model.predict(f)?, l)?;
        Ok(m)
    });
    let mut total = ConfusionMatrix::new(model.num_classes());
    for p in parts {
        total.merge(&p?)?;
    }
    Ok(total)
}

pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<(), TrainError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,step,train_loss,val_miou,tf")?;
    for r in log {
        let miou = r.val_miou.map(|v| format!("{v:.6}")).unwrap_or_default();
        writeln!(f, "{},{},{:.6},{},{}", r.epoch, r.step, r.train_loss, miou, r.tf)?;
    }
    f.flush()?;
    Ok(())
}

/// Largest relative error between the analytic gradient and central
/// differences (step `1e-4`) over `num_coords` seeded parameter indices
/// drawn evenly from every layer. Relative error is
/// `|a − n| / max(|a|, |n|, 1e-4)`.
pub fn grad_check(model: &TinySegModel, sample: &TrainSample, num_coords: usize, seed: u64) -> Result<f64, TrainError> {
    grad_check_perturbed(model, sample, num_coords, seed, 0.0)
}

/// [`grad_check`] with `perturbation` added to every analytic derivative.
pub fn grad_check_perturbed(
    model: &TinySegModel,
    sample: &TrainSample,
    num_coords: usize,
    seed: u64,
    perturbation: f64,
) -> Result<f64, TrainError> {
    const STEP: f64 = 1e-4;
    const FLOOR: f64 = 1e-4;
    if num_coords == 0 {
        return Err(TrainError::InvalidConfig("num_coords must be >= 1".into()));
    }
    let (_, grad) = model.loss_and_grad(sample)?;
    // round-robin over layers so each one is probed
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_layer: Vec<Vec<usize>> = model
        .layer_ranges()
        .into_iter()
        .map(|r| {
            let mut v: Vec<usize> = r.collect();
            v.shuffle(&mut rng);
            v
        })
        .collect();
    let mut coords = Vec::with_capacity(model.num_params());
    while per_layer.iter().any(|v| !v.is_empty()) {
        for v in per_layer.iter_mut() {
            if let Some(i) = v.pop() {
                coords.push(i);
            }
        }
    }
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for &i in coords.iter().cycle().take(num_coords) {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + STEP;
        let up = probe.loss(sample)?;
        probe.params_mut()[i] = orig - STEP;
        let down = probe.loss(sample)?;
        probe.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let analytic = grad[i] + perturbation;
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}
