//! Mini-batch SGD training and accuracy evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::engine;
use crate::error::{Error, Result};
use crate::model::{LayerParams, ModelState};

/// Hyperparameters for one training run. Fully seeded: identical config and
/// data always produce identical parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seeds the batch shuffling only; parameter init has its own seed.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            epochs: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }

    /// Same hyperparameters, different shuffle stream. Used to give each
    /// fine-tuning run in an iterative schedule its own deterministic order.
    pub fn reseeded(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Per-epoch training statistics.
#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Trains `model` in place with momentum SGD on softmax cross-entropy.
///
/// Velocity update per parameter: `v <- momentum*v + g; w <- w - lr*v`.
/// Aborts with [`Error::TrainingDiverged`] if any batch loss is non-finite.
pub fn train(model: &mut ModelState, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    if data.classes() != model.spec.classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes, model emits {}",
            data.classes(),
            model.spec.classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = model.zeros_like();
    let mut indices: Vec<usize> = (0..data.len()).collect();
    let mut stats = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for (batch_no, chunk) in indices.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = data.gather(chunk)?;
            let tape = engine::forward_with_tape(model, &x)?;
            let (loss, grads) = engine::backward(model, tape, &labels)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch, batch: batch_no });
            }
            loss_sum += f64::from(loss);
            batches += 1;
            apply_sgd(model, &mut velocity, &grads, cfg);
        }
        stats.push(EpochStats { epoch, mean_loss: loss_sum / batches as f64 });
    }
    Ok(stats)
}

fn apply_sgd(
    model: &mut ModelState,
    velocity: &mut [LayerParams],
    grads: &[LayerParams],
    cfg: &TrainConfig,
) {
    let (lr, mu) = (cfg.learning_rate, cfg.momentum);
    for ((p, v), g) in model.params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        match (p, v, g) {
            (LayerParams::None, _, _) => {}
            (
                LayerParams::Conv { weights: pw, bias: pb },
                LayerParams::Conv { weights: vw, bias: vb },
                LayerParams::Conv { weights: gw, bias: gb },
            ) => {
                step(pw.data_mut(), vw.data_mut(), gw.data(), lr, mu);
                step(pb, vb, gb, lr, mu);
            }
            (
                LayerParams::Dense { weights: pw, bias: pb, .. },
                LayerParams::Dense { weights: vw, bias: vb, .. },
                LayerParams::Dense { weights: gw, bias: gb, .. },
            ) => {
                step(pw, vw, gw, lr, mu);
                step(pb, vb, gb, lr, mu);
            }
            _ => unreachable!("gradients mirror parameter shapes"),
        }
    }
}

fn step(params: &mut [f32], velocity: &mut [f32], grads: &[f32], lr: f32, mu: f32) {
    for ((w, v), g) in params.iter_mut().zip(velocity).zip(grads) {
        *v = mu * *v + g;
        *w -= lr * *v;
    }
}

/// Top-1 accuracy on `data`, evaluated in fixed order (deterministic).
pub fn evaluate(model: &ModelState, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    if data.classes() != model.spec.classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes, model emits {}",
            data.classes(),
            model.spec.classes
        )));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(256) {
        let (x, labels) = data.gather(chunk)?;
        let logits = engine::forward(model, &x)?;
        let classes = model.spec.classes;
        for (row, &label) in labels.iter().enumerate() {
            let l = &logits.data()[row * classes..(row + 1) * classes];
            let pred = l
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(i, _)| i)
                .expect("at least two classes");
            if pred == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
