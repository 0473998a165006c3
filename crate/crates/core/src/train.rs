//! Deterministic mini-batch gradient descent and evaluation.
//!
//! The sample order of every epoch comes from a generator seeded by the
//! model seed and the epoch number. Per-sample gradients are summed in
//! sample order, divided by the batch size and applied as `p -= lr * g`,
//! after optional global-norm clipping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::masking::MaskStats;
use crate::params::{Gradients, ParamId, ParamStore};
use crate::pipeline::{DraxModel, FeatureBundle, CANDIDATES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Running averages collected while the parameters change.
    Train,
    /// A full evaluation pass over the training set after the last update.
    Final,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub phase: Phase,
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// Masked share of cross-attention weights, per encoder layer.
    pub mask_density: Vec<f64>,
    pub fusion_density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub index: usize,
    pub label: usize,
    pub predicted: usize,
    pub probs: [f64; CANDIDATES],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub mask_density: Vec<f64>,
    pub fusion_density: f64,
    pub predictions: Vec<Prediction>,
}

/// Forward passes over `data` in dataset order.
pub fn evaluate(model: &DraxModel, data: &[FeatureBundle]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut stats = MaskStats::default();
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut predictions = Vec::with_capacity(data.len());
    for (index, b) in data.iter().enumerate() {
        let mut ctx = model.default_ctx();
        let out = model.sample_loss(&mut ctx, b)?;
        stats.merge(&out.stats);
        loss += out.loss;
        let predicted = out.scores.predict();
        correct += usize::from(predicted == b.label);
        predictions.push(Prediction {
            index,
            label: b.label,
            predicted,
            probs: out.scores.probs,
        });
    }
    let n = data.len() as f64;
    Ok(EvalReport {
        samples: data.len(),
        loss: loss / n,
        accuracy: correct as f64 / n,
        mask_density: stats.layer_density(),
        fusion_density: stats.fusion_density(),
        predictions,
    })
}

/// Sample order for `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// One pass over `data` with an update after every mini-batch.
pub fn train_epoch(
    model: &mut DraxModel,
    data: &[FeatureBundle],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochMetrics> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.validate()?;
    let order = epoch_order(model.config.seed, epoch, data.len());
    let mut stats = MaskStats::default();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for batch in order.chunks(cfg.batch_size) {
        let mut grads = Gradients::default();
        for &i in batch {
            let mut ctx = model.default_ctx();
            let (out, g) = model.sample_gradients(&mut ctx, &data[i])?;
            stats.merge(&out.stats);
            loss += out.loss;
            correct += usize::from(out.scores.predict() == data[i].label);
            grads.merge(g);
        }
        if cfg.lr != 0.0 {
            apply_update(&mut model.store, &grads, 1.0 / batch.len() as f64, cfg.lr, cfg.clip_norm);
        }
    }
    let n = data.len() as f64;
    Ok(EpochMetrics {
        phase: Phase::Train,
        epoch,
        loss: loss / n,
        accuracy: correct as f64 / n,
        mask_density: stats.layer_density(),
        fusion_density: stats.fusion_density(),
    })
}

/// `p -= lr * clip(scale * g)`.
pub fn apply_update(store: &mut ParamStore, grads: &Gradients, scale: f64, lr: f64, clip: Option<f64>) {
    let norm = grads
        .by_param
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|v| (v * scale).powi(2))
        .sum::<f64>()
        .sqrt();
    let factor = match clip {
        Some(c) if norm > c => scale * c / norm,
        _ => scale,
    };
    for (i, g) in grads.by_param.iter().enumerate() {
        if let Some(g) = g {
            let t = store.tensor_mut(ParamId(i));
            t.data_mut().iter_mut().zip(g).for_each(|(p, gv)| *p -= lr * factor * gv);
        }
    }
}

/// Trains for up to `cfg.epochs` epochs, calling `on_record` for every metrics record.
///
/// With a target accuracy set, training stops once an evaluation pass over
/// the training set reaches it; that pass only runs when the epoch's running
/// accuracy is within 0.1 of the target. A final evaluation record always
/// closes the log.
pub fn train(
    model: &mut DraxModel,
    data: &[FeatureBundle],
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    let mut log = Vec::new();
    let mut last_eval: Option<EvalReport> = None;
    for epoch in 1..=cfg.epochs {
        last_eval = None;
        let m = train_epoch(model, data, cfg, epoch)?;
        let running = m.accuracy;
        on_record(&m)?;
        log.push(m);
        if let Some(target) = cfg.target_accuracy.filter(|t| running >= t - 0.1) {
            let report = evaluate(model, data)?;
            let done = report.accuracy >= target;
            last_eval = Some(report);
            if done {
                break;
            }
        }
    }
    let report = match last_eval {
        Some(r) => r,
        None => evaluate(model, data)?,
    };
    let fin = EpochMetrics {
        phase: Phase::Final,
        epoch: log.len(),
        loss: report.loss,
        accuracy: report.accuracy,
        mask_density: report.mask_density,
        fusion_density: report.fusion_density,
    };
    on_record(&fin)?;
    log.push(fin);
    Ok(log)
}
