//! Mini-batch training with a stratified validation carve-out and
//! best-validation model selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::{classify, clip_loss, init_params, ModelConfig, ModelParams, DISTRACTED};
use crate::tape::ParamGrads;
use crate::train::data::Example;
use crate::train::optim::{cosine_lr, AdamW, AdamWSettings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate, decayed along a cosine over all steps.
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Per-class loss weights (attentive, distracted); `None` is unweighted.
    pub class_weights: Option<[f64; 2]>,
    /// Fraction of each class held out of training to pick the best epoch.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 16,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            seed: 0,
            class_weights: None,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1, "epochs must be at least 1");
        ensure!(self.batch_size >= 1, "batch size must be at least 1");
        ensure!(
            self.learning_rate.is_finite() && self.learning_rate > 0.0,
            "learning rate must be positive"
        );
        ensure!(
            self.weight_decay.is_finite() && self.weight_decay >= 0.0,
            "weight decay must be nonnegative"
        );
        ensure!(
            (0.0..1.0).contains(&self.validation_fraction),
            "validation fraction must be in [0, 1)"
        );
        if let Some(w) = self.class_weights {
            ensure!(
                w.iter().all(|v| v.is_finite() && *v > 0.0),
                "class weights must be positive"
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub validation_loss: Option<f64>,
    pub validation_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch, or the last epoch without
    /// a validation set.
    pub params: ModelParams<f32>,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch the returned parameters come from.
    pub best_epoch: usize,
    pub train_size: usize,
    pub validation_size: usize,
}

/// Deterministic stratified carve-out: `floor(fraction * class size)` clips of
/// each class go to validation.
fn carve_validation(examples: &[Example], fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for class in [0, DISTRACTED] {
        let mut members: Vec<usize> = (0..examples.len())
            .filter(|&i| examples[i].target == class)
            .collect();
        members.shuffle(rng);
        let held = (fraction * members.len() as f64).floor() as usize;
        validation.extend_from_slice(&members[..held]);
        train.extend_from_slice(&members[held..]);
    }
    train.sort_unstable();
    validation.sort_unstable();
    (train, validation)
}

fn dropout_rng(seed: u64, epoch: usize, position: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd80f_u64.wrapping_mul(epoch as u64 + 1));
    rng.set_stream(position as u64);
    rng
}

fn mean_loss_and_accuracy(params: &ModelParams<f32>, examples: &[&Example]) -> Result<(f64, f64)> {
    let outcomes: Vec<(f64, bool)> = examples
        .par_iter()
        .map(|ex| {
            let (probs, _) = classify(params, &ex.clip)?;
            let p = probs[ex.target].max(f32::MIN_POSITIVE) as f64;
            let predicted = usize::from(probs[DISTRACTED] >= 0.5);
            Ok((-p.ln(), predicted == ex.target))
        })
        .collect::<Result<_>>()?;
    let n = outcomes.len() as f64;
    Ok((
        outcomes.iter().map(|o| o.0).sum::<f64>() / n,
        outcomes.iter().filter(|o| o.1).count() as f64 / n,
    ))
}

/// Trains from a seeded initialization. Clip order, validation carve-out and
/// dropout masks all derive from `train.seed`, and per-clip gradients are
/// summed in a fixed order, so results do not depend on thread scheduling.
pub fn train(model: &ModelConfig, train: &TrainConfig, examples: &[Example]) -> Result<TrainOutcome> {
    model.validate()?;
    train.validate()?;
    ensure!(!examples.is_empty(), "no training examples");
    ensure!(
        examples.iter().all(|e| e.clip.frames() == model.frames_per_clip),
        "examples were prepared for a different clip length"
    );
    let mut params = init_params::<f32>(model, train.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed.wrapping_add(1));
    let (mut order, held) = carve_validation(examples, train.validation_fraction, &mut rng);
    ensure!(!order.is_empty(), "validation carve-out left no training examples");
    let validation: Vec<&Example> = held.iter().map(|&i| &examples[i]).collect();

    let batches_per_epoch = order.len().div_ceil(train.batch_size);
    let total_steps = batches_per_epoch * train.epochs;
    let mut optimizer = AdamW::new(
        &params.store,
        AdamWSettings {
            weight_decay: train.weight_decay,
            ..AdamWSettings::default()
        },
    );
    let weight = |target: usize| train.class_weights.map_or(1.0, |w| w[target]);
    let mut history = Vec::with_capacity(train.epochs);
    let mut best: Option<(f64, f64, usize, ModelParams<f32>)> = None;

    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut lr = train.learning_rate;
        for (b, batch) in order.chunks(train.batch_size).enumerate() {
            let results: Vec<_> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &i)| {
                    let ex = &examples[i];
                    let mut drop = (model.dropout > 0.0)
                        .then(|| dropout_rng(train.seed, epoch, b * train.batch_size + k));
                    clip_loss(&params, &ex.clip, ex.target, drop.as_mut())
                })
                .collect::<Result<_>>()?;
            let total_weight: f64 = batch.iter().map(|&i| weight(examples[i].target)).sum();
            let mut grads = ParamGrads::zeros_like(&params.store);
            for (&i, r) in batch.iter().zip(&results) {
                let target = examples[i].target;
                grads.add_scaled(&r.grads, (weight(target) / total_weight) as f32);
                loss_sum += r.loss as f64;
                correct += usize::from(usize::from(r.probabilities[DISTRACTED] >= 0.5) == target);
            }
            if !grads.all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at epoch {} batch {}",
                    epoch + 1,
                    b + 1
                )));
            }
            lr = cosine_lr(train.learning_rate, epoch * batches_per_epoch + b, total_steps);
            optimizer.step(&mut params.store, &grads, lr);
        }
        if !params.store.all_finite() {
            return Err(Error::Numeric(format!("parameters diverged at epoch {}", epoch + 1)));
        }
        let (validation_loss, validation_accuracy) = if validation.is_empty() {
            (None, None)
        } else {
            let (l, a) = mean_loss_and_accuracy(&params, &validation)?;
            (Some(l), Some(a))
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            learning_rate: lr,
            train_loss: loss_sum / order.len() as f64,
            train_accuracy: correct as f64 / order.len() as f64,
            validation_loss,
            validation_accuracy,
        };
        log::info!(
            "epoch {}: loss {:.4} acc {:.3} val acc {:?}",
            record.epoch,
            record.train_loss,
            record.train_accuracy,
            record.validation_accuracy
        );
        if let (Some(acc), Some(loss)) = (validation_accuracy, validation_loss) {
            let improves = best
                .as_ref()
                .is_none_or(|(a, l, _, _)| acc > *a || (acc == *a && loss < *l));
            if improves {
                best = Some((acc, loss, epoch + 1, params.clone()));
            }
        }
        history.push(record);
    }

    let (params, best_epoch) = match best {
        Some((_, _, epoch, p)) => (p, epoch),
        None => (params, train.epochs),
    };
    Ok(TrainOutcome {
        params,
        history,
        best_epoch,
        train_size: order.len(),
        validation_size: validation.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::record::tests::sample_clip;
    use crate::geometry::FrameImage;
    use crate::model::prepare_clip;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            frames_per_clip: 2,
            encoder_input_size: 16,
            patch_size: 8,
            embed_dim: 8,
            gaze_heads: 2,
            video_heads: 2,
            gdsq_heads: 2,
            video_blocks: 1,
            gdsq_blocks: 1,
            ..ModelConfig::default()
        }
    }

    fn examples(config: &ModelConfig) -> Vec<Example> {
        (0..2)
            .map(|k| {
                let mut record = sample_clip(&format!("c{k}"), 2);
                record.label = if k == 0 {
                    crate::dataset::Label::Attentive
                } else {
                    crate::dataset::Label::Distracted
                };
                let shade = k as f32;
                let frames = vec![FrameImage::filled(16, 16, [shade, 0.5, 1.0 - shade]); 2];
                Example {
                    target: k,
                    clip: prepare_clip(config, &frames, &record.gaze).unwrap(),
                    record,
                }
            })
            .collect()
    }

    #[test]
    fn memorizes_two_clips() {
        let config = tiny_config();
        let tc = TrainConfig {
            epochs: 50,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let outcome = train(&config, &tc, &examples(&config)).unwrap();
        assert_eq!(outcome.validation_size, 0);
        assert_eq!(outcome.best_epoch, 50);
        assert!(outcome.history.last().unwrap().train_loss < 0.1);
    }

    #[test]
    fn same_seed_same_parameters() {
        let config = ModelConfig {
            dropout: 0.2,
            ..tiny_config()
        };
        let tc = TrainConfig {
            epochs: 3,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let ex = examples(&config);
        let a = train(&config, &tc, &ex).unwrap();
        let b = train(&config, &tc, &ex).unwrap();
        assert_eq!(a.params.store, b.params.store);
        assert_eq!(a.history, b.history);
        let c = train(&config, &TrainConfig { seed: 5, ..tc }, &ex).unwrap();
        assert_ne!(a.params.store, c.params.store);
    }

    #[test]
    fn rejects_bad_settings() {
        let config = tiny_config();
        let ex = examples(&config);
        for bad in [
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { class_weights: Some([1.0, -1.0]), ..TrainConfig::default() },
        ] {
            assert!(matches!(train(&config, &bad, &ex), Err(Error::Validation(_))));
        }
        assert!(train(&config, &TrainConfig::default(), &[]).is_err());
    }
}
