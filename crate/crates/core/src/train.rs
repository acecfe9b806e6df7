//! Weighted binary cross-entropy, Adam, and the epoch loop with
//! validation-based model selection.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{forward_tape, ModelError, ModelLeaves, ModelParams, SequenceInput, TrainingMeta, WindowSample};
use crate::nn::{bce_term, NnError, Tape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("no labelled training windows")]
    NoLabels,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: {what} is not finite")]
    Diverged { epoch: usize, what: &'static str },
    #[error("gradient/parameter mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl From<NnError> for TrainError {
    fn from(e: NnError) -> Self {
        TrainError::Model(ModelError::Nn(e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Weight of windows holding at least one anomalous reading.
    pub anomaly_day_weight: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs without a new best validation loss before stopping; 0 never stops early.
    pub early_stop_patience: usize,
    /// Share of sites held out for validation when a single corpus is given.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 400,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            anomaly_day_weight: 5.0,
            batch_size: 32,
            seed: 0,
            early_stop_patience: 50,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(TrainError::Config(format!("{name} must lie in (0, 1)")));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive");
        }
        if !(self.anomaly_day_weight > 0.0 && self.anomaly_day_weight.is_finite()) {
            return bad("anomaly_day_weight must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("plain struct");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `w · -(y ln p + (1 - y) ln(1 - p))` with `p` clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(p: f64, y: bool, weight: f64) -> f64 {
    weight * bce_term(p, if y { 1.0 } else { 0.0 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &TrainConfig) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::Mismatch(format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len())));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(TrainError::Mismatch(format!("{:?} vs {:?}", p.shape(), g.shape())));
        }
        if !g.is_finite() {
            return Err(TrainError::Diverged { epoch: 0, what: "gradient" });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((pi, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mh = *mi / c1;
            let vh = *vi / c2;
            *pi -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// Training weight of a window.
pub fn sample_weight(w: &WindowSample, cfg: &TrainConfig) -> f64 {
    if w.has_anomaly() {
        cfg.anomaly_day_weight
    } else {
        1.0
    }
}

struct Batch {
    inputs: Vec<SequenceInput>,
    targets: Vec<f64>,
    weights: Vec<f64>,
}

/// Time-major targets and per-step weights; missing steps get weight 0.
fn batch_of(samples: &[&WindowSample], sample_weights: &[f64]) -> Batch {
    let steps = samples.first().map(|s| s.values.len()).unwrap_or(0);
    let mut targets = Vec::with_capacity(steps * samples.len());
    let mut weights = Vec::with_capacity(steps * samples.len());
    for t in 0..steps {
        for (s, w) in samples.iter().zip(sample_weights) {
            let y = s.labels.as_ref().is_some_and(|l| l[t]);
            targets.push(if y { 1.0 } else { 0.0 });
            weights.push(if s.missing_mask[t] { 0.0 } else { *w });
        }
    }
    Batch { inputs: samples.iter().map(|s| s.input()).collect(), targets, weights }
}

/// Loss `Σ wᵢ · bceᵢ / rows` of a batch and, optionally, its gradients in
/// [`ModelParams::names`] order.
pub fn batch_loss(
    params: &ModelParams, samples: &[&WindowSample], sample_weights: &[f64], with_grads: bool,
) -> Result<(f64, Option<Vec<Tensor>>), TrainError> {
    run_batch(params, samples, sample_weights, with_grads).map(|(l, _, g)| (l, g))
}

type BatchResult = (f64, Vec<f64>, Option<Vec<Tensor>>);

fn run_batch(params: &ModelParams, samples: &[&WindowSample], sample_weights: &[f64], with_grads: bool) -> Result<BatchResult, TrainError> {
    let b = batch_of(samples, sample_weights);
    let mut tape = Tape::new();
    let leaves = ModelLeaves::record(&mut tape, params);
    let p = forward_tape(&mut tape, &leaves, &b.inputs)?;
    let rows = b.targets.len().max(1) as f64;
    let loss = tape.bce(p, b.targets, b.weights, rows)?;
    let value = tape.value(loss).data()[0];
    let probs = tape.value(p).data().to_vec();
    if !with_grads {
        return Ok((value, probs, None));
    }
    let g = tape.backward(loss)?;
    let grads = leaves
        .vars
        .iter()
        .zip(params.tensors())
        .map(|(v, t)| g.get_or_zeros(*v, t))
        .collect();
    Ok((value, probs, Some(grads)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Mean weighted loss and step accuracy at 0.5 over `samples`.
pub fn evaluate_windows(params: &ModelParams, samples: &[&WindowSample], cfg: &TrainConfig) -> Result<(f64, f64), TrainError> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut counted = 0usize;
    let chunk = cfg.batch_size.max(1);
    for batch in samples.chunks(chunk) {
        let weights: Vec<f64> = batch.iter().map(|s| sample_weight(s, cfg)).collect();
        let (l, probs, _) = run_batch(params, batch, &weights, false)?;
        loss += l * batch.len() as f64;
        let nb = batch.len();
        for (k, s) in batch.iter().enumerate() {
            let labels = s.labels.as_ref().expect("labelled");
            for t in 0..s.values.len() {
                if !s.missing_mask[t] {
                    counted += 1;
                    if (probs[t * nb + k] >= 0.5) == labels[t] {
                        correct += 1;
                    }
                }
            }
        }
    }
    let n = samples.len().max(1) as f64;
    Ok((loss / n, if counted == 0 { 1.0 } else { correct as f64 / counted as f64 }))
}

pub fn train(model: ModelParams, train: &[WindowSample], val: &[WindowSample], cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_with(model, train, val, cfg, |_| {})
}

/// Trains and reports every finished epoch to `on_epoch`.
pub fn train_with(
    mut model: ModelParams,
    train: &[WindowSample],
    val: &[WindowSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let train: Vec<&WindowSample> = train.iter().filter(|w| w.labels.is_some()).collect();
    if train.is_empty() {
        return Err(TrainError::NoLabels);
    }
    let val: Vec<&WindowSample> = val.iter().filter(|w| w.labels.is_some()).collect();
    let mut rng = crate::rng::derived(cfg.seed, 0x7a41);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut adam = AdamState::new(&model.tensors());
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&WindowSample> = idx.iter().map(|&i| train[i]).collect();
            let weights: Vec<f64> = batch.iter().map(|s| sample_weight(s, cfg)).collect();
            let (loss, grads) = batch_loss(&model, &batch, &weights, true)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, what: "training loss" });
            }
            total += loss * batch.len() as f64;
            adam_step(&mut model.tensors_mut(), &grads.expect("requested"), &mut adam, cfg).map_err(|e| match e {
                TrainError::Diverged { what, .. } => TrainError::Diverged { epoch, what },
                e => e,
            })?;
        }
        let train_loss = total / train.len() as f64;
        let (val_loss, val_accuracy) = if val.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate_windows(&model, &val, cfg)?;
            if !l.is_finite() {
                return Err(TrainError::Diverged { epoch, what: "validation loss" });
            }
            (Some(l), Some(a))
        };
        let rec = EpochRecord { epoch, train_loss, val_loss, val_accuracy };
        on_epoch(&rec);
        history.push(rec);

        let score = val_loss.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, _, _)| score < *b || val.is_empty()) {
            best = Some((score, epoch, model.clone()));
        }
        let best_epoch = best.as_ref().map(|b| b.1).unwrap_or(epoch);
        if !val.is_empty() && cfg.early_stop_patience > 0 && epoch - best_epoch >= cfg.early_stop_patience {
            break;
        }
    }
    let (_, best_epoch, mut params) = best.expect("at least one epoch");
    params.meta = Some(TrainingMeta {
        seed: cfg.seed,
        epochs: history.len(),
        best_epoch,
        config_hash: cfg.hash(),
    });
    Ok(TrainOutcome { params, history, best_epoch })
}

/// History as CSV: `epoch,train_loss,val_loss,val_accuracy`.
pub fn write_history<W: Write>(w: W, history: &[EpochRecord]) -> Result<(), TrainError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["epoch", "train_loss", "val_loss", "val_accuracy"])?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in history {
        wtr.write_record([r.epoch.to_string(), r.train_loss.to_string(), opt(r.val_loss), opt(r.val_accuracy)])?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_examples() {
        assert!(bce_loss(1.0 - 1e-7, true, 1.0) < 1e-6);
        assert!((bce_loss(0.5, true, 1.0) - 0.693147).abs() < 1e-6);
        assert!((bce_loss(0.5, false, 3.0) - 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut p = Tensor::vector(vec![0.3, -0.2]);
        let before = p.clone();
        let mut st = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &[Tensor::zeros(&[2])], &mut st, &TrainConfig::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_first_step_is_about_lr() {
        let cfg = TrainConfig::default();
        let mut p = Tensor::vector(vec![0.0; 3]);
        let g = Tensor::vector(vec![0.5, -2.0, 1e-3]);
        let mut st = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &[g.clone()], &mut st, &cfg).unwrap();
        for (x, gi) in p.data().iter().zip(g.data()) {
            let expect = -cfg.learning_rate * gi.abs() / (gi.abs() + cfg.epsilon) * gi.signum();
            assert!((x - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_rejects_nan() {
        let mut p = Tensor::vector(vec![0.0]);
        let mut st = AdamState::new(&[&p]);
        let r = adam_step(&mut [&mut p], &[Tensor::vector(vec![f64::NAN])], &mut st, &TrainConfig::default());
        assert!(matches!(r, Err(TrainError::Diverged { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert_eq!(TrainConfig::default().hash().len(), 64);
    }
}
