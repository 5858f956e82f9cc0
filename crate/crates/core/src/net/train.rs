//! Mini-batch training loop.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{batch_loss, AdamConfig, ArchConfig, DropoutMasks, LocModel, LossKind};
use crate::dataio::AnnotationRecord;
use crate::error::{Error, Result};
use crate::geometry::{normalize_keypoints_with, Centering, INPUT_DIM};
use crate::rng::{derive_seed, stream};
use crate::synthgen::SceneSample;

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub p_drop: f64,
    /// Multiplier on the `(1 − p)/(2N)·‖θ‖²` regularizer; `0` disables it.
    pub weight_decay_scale: f64,
    pub loss: LossKind,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub bn_momentum: f64,
    pub arch: ArchConfig,
    pub centering: Centering,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            lr: adam.lr,
            batch: 512,
            epochs: 200,
            p_drop: 0.2,
            weight_decay_scale: 1.0,
            loss: LossKind::Laplace,
            seed: 0,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            bn_momentum: 0.1,
            arch: ArchConfig::default(),
            centering: Centering::Centroid,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..1.0).contains(&self.p_drop) {
            return bad(format!("p_drop {} outside [0, 1)", self.p_drop));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if self.batch < 2 {
            return bad(format!("batch size {} must be at least 2", self.batch));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return bad("Adam eps must be positive".into());
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return bad(format!("bn momentum {} outside (0, 1]", self.bn_momentum));
        }
        if !(self.weight_decay_scale >= 0.0 && self.weight_decay_scale.is_finite()) {
            return bad("weight decay scale must be non-negative".into());
        }
        if self.arch.input_dim != INPUT_DIM {
            return bad(format!("input dimension must be {INPUT_DIM}"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Normalized inputs and ground-truth distances.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub inputs: Array2<f64>,
    pub targets: Array1<f64>,
}

impl TrainingSet {
    pub fn new(inputs: Array2<f64>, targets: Array1<f64>) -> Result<Self> {
        if inputs.nrows() != targets.len() {
            return Err(Error::Shape(format!(
                "{} inputs but {} targets",
                inputs.nrows(),
                targets.len()
            )));
        }
        if inputs.ncols() != INPUT_DIM {
            return Err(Error::Shape(format!("inputs must have {INPUT_DIM} columns")));
        }
        if let Some(&x) = targets.iter().find(|x| !(**x > 0.0 && x.is_finite())) {
            return Err(Error::InvalidTarget(x));
        }
        Ok(TrainingSet { inputs, targets })
    }

    pub fn from_samples(samples: &[SceneSample], centering: Centering) -> Result<Self> {
        let mut inputs = Array2::zeros((samples.len(), INPUT_DIM));
        let mut targets = Array1::zeros(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let n = normalize_keypoints_with(&s.camera, &s.kp, centering)?;
            inputs.row_mut(i).assign(&ndarray::aview1(&n.coords));
            targets[i] = s.d_gt;
        }
        Self::new(inputs, targets)
    }

    /// Records without ground truth are rejected.
    pub fn from_records(records: &[AnnotationRecord], centering: Centering) -> Result<Self> {
        let mut inputs = Array2::zeros((records.len(), INPUT_DIM));
        let mut targets = Array1::zeros(records.len());
        for (i, r) in records.iter().enumerate() {
            let n = normalize_keypoints_with(&r.camera()?, &r.keypoints()?, centering)?;
            inputs.row_mut(i).assign(&ndarray::aview1(&n.coords));
            targets[i] = r
                .distance()
                .ok_or_else(|| Error::InvalidConfig(format!("record {} has no ground truth", r.id)))?;
        }
        Self::new(inputs, targets)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    #[serde(rename = "val_ALE")]
    pub val_ale: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model from the epoch with the lowest validation loss.
    pub model: LocModel,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Mean loss and ALE of the eval-mode model on a data set.
pub fn evaluate(model: &LocModel, data: &TrainingSet, loss: LossKind) -> Result<(f64, f64)> {
    let out = model.predict(&data.inputs)?;
    let (l, _) = batch_loss(loss, &out, data.targets.view());
    let ale = out
        .column(0)
        .iter()
        .zip(&data.targets)
        .map(|(mu, x)| (mu - x).abs())
        .sum::<f64>()
        / data.len() as f64;
    Ok((l, ale))
}

/// Trains with the given configuration. Without a validation set the
/// training set is used for model selection.
pub fn train(
    data: &TrainingSet,
    val: Option<&TrainingSet>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_progress(data, val, cfg, |_| {})
}

pub fn train_with_progress(
    data: &TrainingSet,
    val: Option<&TrainingSet>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    if data.len() < 2 {
        return Err(Error::BatchTooSmall(data.len()));
    }
    let val = match val {
        Some(v) if !v.is_empty() => v,
        _ => data,
    };

    let mut model = LocModel::new(cfg.arch, cfg.p_drop, &mut stream(cfg.seed, INIT_STREAM))?;
    model.bn_momentum = cfg.bn_momentum;
    model.centering = cfg.centering;
    // the output layer starts as a constant: the mean target and the
    // maximum-likelihood spread around it
    if let Some(head) = model.params.linears.last_mut() {
        head.weight.fill(0.0);
        let m = data.targets.mean().unwrap_or(0.0);
        head.bias[0] = m;
        if let Some(s) = initial_log_spread(cfg.loss, data.targets.view(), m) {
            head.bias[1] = s;
        }
    }
    let mut adam = super::Adam::new(&model.params, cfg.adam());
    let decay = cfg.weight_decay_scale * (1.0 - cfg.p_drop) / data.len() as f64;

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut dropout_rng = stream(cfg.seed, DROPOUT_STREAM);
    let mut best: Option<(f64, usize, LocModel)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut stream(derive_seed(cfg.seed, SHUFFLE_STREAM), epoch as u64));
        let (mut total, mut seen) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let x = data.inputs.select(Axis(0), chunk);
            let t = data.targets.select(Axis(0), chunk);
            let masks = (cfg.p_drop > 0.0)
                .then(|| DropoutMasks::sample(&mut dropout_rng, &cfg.arch, chunk.len(), cfg.p_drop));
            let (out, cache) = model.forward_train(&x, masks.as_ref())?;
            let (loss, d_out) = batch_loss(cfg.loss, &out, t.view());
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: bi,
                    loss,
                });
            }
            let grads = model.backward(&cache, &d_out, masks.as_ref(), decay);
            adam.step(&mut model.params, &grads);
            model.update_running_stats(&cache, chunk.len());
            total += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        model.trained = true;
        let (val_loss, val_ale) = evaluate(&model, val, cfg.loss)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: usize::MAX,
                loss: val_loss,
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss: total / seen.max(1) as f64,
            val_loss,
            val_ale,
        };
        on_epoch(&record);
        history.push(record);
        if best.as_ref().is_none_or(|(l, _, _)| val_loss < *l) {
            best = Some((val_loss, epoch, model.clone()));
        }
    }

    let (_, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        best_epoch,
        history,
    })
}

/// Maximum-likelihood `s` for a constant prediction `m`.
fn initial_log_spread(loss: LossKind, targets: ndarray::ArrayView1<f64>, m: f64) -> Option<f64> {
    let r = targets.mapv(|x| 1.0 - m / x);
    let scale = match loss {
        LossKind::Laplace => r.mapv(f64::abs).mean()?,
        LossKind::Gaussian => r.mapv(|v| v * v).mean()?.sqrt(),
        LossKind::L1 => return None,
    };
    (scale > 0.0).then(|| scale.ln())
}
