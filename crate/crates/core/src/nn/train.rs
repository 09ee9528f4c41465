use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::model::TappedModel;
use crate::nn::optim::Adam;
use crate::nn::tape::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: TappedModel,
    pub history: Vec<EpochStats>,
}

/// Mini-batch Adam on softmax cross-entropy. A trailing softmax layer is
/// folded into the loss. Single-threaded and fully determined by the seed.
pub fn train_classifier(
    model: &TappedModel,
    data: &LabeledDataset,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    if data.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    if config.epochs == 0 {
        return Err(Error::Precondition("epochs must be at least 1".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Precondition("batch size must be at least 1".into()));
    }
    if model.input_shape() != data.sample_shape() {
        return Err(Error::Shape(format!(
            "model input {:?} vs dataset samples {:?}",
            model.input_shape(),
            data.sample_shape()
        )));
    }

    let mut model = model.clone();
    let mut opt = Adam::new(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let end = model.logits_end();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut correct = 0usize;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = data.features.select_rows(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();

            let mut tape = Tape::new();
            let x = tape.constant(batch);
            let (logits, _) = model.record(&mut tape, x, end, 0);
            correct += tape
                .value(logits)
                .argmax_rows()
                .iter()
                .zip(&labels)
                .filter(|(p, y)| p == y)
                .count();
            let loss = tape.softmax_cross_entropy(logits, &labels);
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: value,
                });
            }
            total += value * chunk.len() as f64;
            let grads = tape.backward(loss)?;
            opt.step(&mut model.params_mut(), &grads);
        }
        let stats = EpochStats {
            loss: total / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        };
        log::debug!(
            "epoch {epoch}: loss {:.5} acc {:.4}",
            stats.loss,
            stats.accuracy
        );
        history.push(stats);
    }
    Ok(TrainedModel { model, history })
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn accuracy(model: &TappedModel, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let pred = model.classify(&data.features)?;
    let hits = pred.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len() as f64)
}
