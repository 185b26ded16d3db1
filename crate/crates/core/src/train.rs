//! Supervised training of the full-precision teacher.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{crop_flip, LabeledImages};
use crate::error::{LabError, Result};
use crate::optim::OptimizerConfig;
use crate::synthesis::loss_cl;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::vit::{accuracy, forward, FullPrecision, MicroViT, ViTConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub optimizer: OptimizerConfig,
    /// Cosine decay of the learning rate to zero over all steps.
    pub cosine: bool,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch: 32,
            optimizer: OptimizerConfig::adam(2e-3),
            cosine: true,
            augment: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
}

pub struct TrainOutcome {
    /// Parameters of the epoch with the best held-out accuracy.
    pub model: MicroViT,
    pub best_epoch: usize,
    pub best_accuracy: f64,
    pub log: Vec<EpochLog>,
}

pub fn cosine_scale(step: usize, total: usize) -> f64 {
    if total <= 1 {
        return 1.0;
    }
    0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// Accuracy of a full-precision model on labelled images.
pub fn evaluate(model: &MicroViT, data: &LabeledImages, batch: usize) -> Result<f64> {
    let preds = model.predict(&data.images, batch)?;
    Ok(accuracy(&preds, &data.labels))
}

pub fn train_teacher(
    config: &ViTConfig,
    train: &LabeledImages,
    eval: &LabeledImages,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if train.is_empty() || eval.is_empty() {
        return Err(LabError::invalid("training and evaluation sets must be non-empty"));
    }
    if let Some(&y) = train.labels.iter().chain(&eval.labels).find(|&&y| y >= config.classes) {
        return Err(LabError::invalid(format!("label {y} outside 0..{}", config.classes)));
    }
    if cfg.epochs == 0 || cfg.batch == 0 {
        return Err(LabError::config("train.epochs", "epochs and batch must be positive"));
    }
    let mut model = MicroViT::new(config.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut opt = cfg.optimizer.build();
    let n = train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut best = (model.clone(), 0, f64::NEG_INFINITY);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let batch = train.subset(chunk)?;
            let images = if cfg.augment {
                crop_flip(&batch.images, &mut rng)
            } else {
                batch.images
            };
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let x = tape.constant(images);
            let out = forward(&mut tape, &bound, x, &mut FullPrecision, false)?;
            let loss = loss_cl(&mut tape, out.logits, &batch.labels)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(LabError::Diverged {
                    seed: cfg.seed,
                    step,
                    detail: format!("teacher loss {lv} in epoch {epoch}"),
                });
            }
            let preds = crate::vit::argmax_rows(tape.value(out.logits));
            hits += preds.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
            loss_sum += lv * chunk.len() as f64;
            tape.backward(loss)?;
            let grads: Vec<Option<Tensor>> = bound.params.refs().iter().map(|&&v| tape.grad(v)).collect();
            let scale = if cfg.cosine { cosine_scale(step, total_steps) } else { 1.0 };
            opt.step(&mut model.params.refs_mut(), &grads, scale);
            step += 1;
        }
        let eval_accuracy = evaluate(&model, eval, 256)?;
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / n as f64,
            train_accuracy: hits as f64 / n as f64,
            eval_accuracy,
        };
        log::info!(
            "teacher epoch {epoch}: loss {:.4} train acc {:.3} held-out acc {:.3}",
            entry.train_loss,
            entry.train_accuracy,
            entry.eval_accuracy
        );
        if eval_accuracy > best.2 {
            best = (model.clone(), epoch, eval_accuracy);
        }
        log.push(entry);
    }
    Ok(TrainOutcome {
        model: best.0,
        best_epoch: best.1,
        best_accuracy: best.2,
        log,
    })
}
