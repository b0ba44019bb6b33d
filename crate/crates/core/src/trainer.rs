//! Deterministic mini-batch SGD for classifiers and encoder/decoder pairs.
//!
//! Per-sample gradients are computed through [`par`], then summed in batch
//! order, so the final parameters do not depend on the thread count.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::kernels;
use crate::network::{Gradients, SequentialNet};
use crate::par;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 0.05, epochs: 20, batch_size: 16, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr == 0 is allowed and acts as a no-op run
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::invalid(format!("learning rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Outcome of a training run.
///
/// Accuracies are absent for reconstruction training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub train_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub test_accuracy: Option<f64>,
    pub elapsed_secs: f64,
}

impl TrainReport {
    /// The report with timing removed, for reproducibility comparisons.
    pub fn without_timing(&self) -> TrainReport {
        TrainReport { elapsed_secs: 0.0, ..self.clone() }
    }
}

/// Cross-entropy loss of one sample and its parameter gradients.
pub fn classification_loss_and_grads(net: &SequentialNet, image: &Tensor, label: usize) -> Result<(f64, Gradients)> {
    let (logits, trace) = net.forward(image, true)?;
    let (loss, grad_logits) = kernels::softmax_cross_entropy(&logits, label)?;
    let (_, grads) = net.backward(&trace, &grad_logits)?;
    Ok((loss, grads))
}

/// Mean squared reconstruction error of one image through encoder then decoder.
pub fn reconstruction_loss(encoder: &SequentialNet, decoder: &SequentialNet, image: &Tensor) -> Result<f64> {
    let (z, _) = encoder.forward(image, false)?;
    let (y, _) = decoder.forward(&z, false)?;
    mse(&y, image).map(|(l, _)| l)
}

/// Reconstruction loss plus encoder and decoder parameter gradients.
pub fn reconstruction_loss_and_grads(
    encoder: &SequentialNet,
    decoder: &SequentialNet,
    image: &Tensor,
) -> Result<(f64, Gradients, Gradients)> {
    let (z, enc_trace) = encoder.forward(image, true)?;
    let (y, dec_trace) = decoder.forward(&z, true)?;
    let (loss, grad_y) = mse(&y, image)?;
    let (grad_z, dec_grads) = decoder.backward(&dec_trace, &grad_y)?;
    let (_, enc_grads) = encoder.backward(&enc_trace, &grad_z)?;
    Ok((loss, enc_grads, dec_grads))
}

fn mse(flat: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if flat.len() != target.len() {
        return Err(Error::shape(format!("decoder emits {} values for a {:?} image", flat.len(), target.shape())));
    }
    let n = flat.len() as f64;
    let diff: Vec<f64> = flat.data().iter().zip(target.data()).map(|(y, x)| y - x).collect();
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let grad = Tensor::new(flat.shape().to_vec(), diff.iter().map(|d| 2.0 * d / n).collect())?;
    Ok((loss, grad))
}

fn check_classification_set(net: &SequentialNet, data: &LabeledDataset, what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty(format!("{what} set is empty")));
    }
    let classes = net.output_shape().iter().product::<usize>();
    for (i, (im, &label)) in data.images.iter().zip(&data.labels).enumerate() {
        im.expect_shape(net.input_shape(), what)?;
        if label >= classes {
            return Err(Error::invalid(format!("{what} sample {i} has label {label} for {classes} classes")));
        }
    }
    Ok(())
}

fn sum_in_order(mut parts: Vec<Gradients>) -> Result<Gradients> {
    let mut iter = parts.drain(..);
    let mut total = iter.next().ok_or_else(|| Error::Empty("empty batch".into()))?;
    for g in iter {
        total.add_assign(&g)?;
    }
    Ok(total)
}

fn diverged(epoch: usize, batch: usize, loss: f64) -> Error {
    Error::Diverged(format!(
        "non-finite loss or parameters ({loss}) at epoch {epoch}, batch {batch}; lower the learning rate"
    ))
}

/// Trains `net` in place with softmax cross-entropy.
pub fn train_classifier(
    net: &mut SequentialNet,
    train: &LabeledDataset,
    test: &LabeledDataset,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    check_classification_set(net, train, "training")?;
    check_classification_set(net, test, "test")?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let model = &*net;
            let results =
                par::map_slice(batch, |&i| classification_loss_and_grads(model, &train.images[i], train.labels[i]));
            let mut grads = Vec::with_capacity(batch.len());
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, g) = r?;
                batch_loss += loss;
                grads.push(g);
            }
            if !batch_loss.is_finite() {
                return Err(diverged(epoch, b, batch_loss));
            }
            loss_sum += batch_loss;
            let mut total = sum_in_order(grads)?;
            total.scale(1.0 / batch.len() as f64);
            net.apply_sgd(&total, config.learning_rate)?;
            if !net.parameters_finite() {
                return Err(diverged(epoch, b, f64::NAN));
            }
        }
        epoch_loss.push(loss_sum / train.len() as f64);
    }
    let train_accuracy = evaluate(net, train)?;
    let test_accuracy = evaluate(net, test)?;
    Ok(TrainReport {
        epoch_loss,
        train_accuracy: Some(train_accuracy),
        test_accuracy: Some(test_accuracy),
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

/// Trains an encoder/decoder pair in place on mean squared reconstruction error.
pub fn train_encoder(
    encoder: &mut SequentialNet,
    decoder: &mut SequentialNet,
    images: &[Tensor],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if images.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    if decoder.input_shape() != encoder.output_shape() {
        return Err(Error::shape(format!(
            "decoder input {:?} does not match encoder output {:?}",
            decoder.input_shape(),
            encoder.output_shape()
        )));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let (enc, dec) = (&*encoder, &*decoder);
            let results = par::map_slice(batch, |&i| reconstruction_loss_and_grads(enc, dec, &images[i]));
            let mut enc_parts = Vec::with_capacity(batch.len());
            let mut dec_parts = Vec::with_capacity(batch.len());
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, ge, gd) = r?;
                batch_loss += loss;
                enc_parts.push(ge);
                dec_parts.push(gd);
            }
            if !batch_loss.is_finite() {
                return Err(diverged(epoch, b, batch_loss));
            }
            loss_sum += batch_loss;
            let scale = 1.0 / batch.len() as f64;
            let mut ge = sum_in_order(enc_parts)?;
            let mut gd = sum_in_order(dec_parts)?;
            ge.scale(scale);
            gd.scale(scale);
            encoder.apply_sgd(&ge, config.learning_rate)?;
            decoder.apply_sgd(&gd, config.learning_rate)?;
            if !encoder.parameters_finite() || !decoder.parameters_finite() {
                return Err(diverged(epoch, b, f64::NAN));
            }
        }
        epoch_loss.push(loss_sum / images.len() as f64);
    }
    Ok(TrainReport {
        epoch_loss,
        train_accuracy: None,
        test_accuracy: None,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

/// Predicted class of one image (argmax of the logits, ties to the lower index).
pub fn predict(net: &SequentialNet, image: &Tensor) -> Result<usize> {
    Ok(net.forward(image, false)?.0.argmax())
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn evaluate(net: &SequentialNet, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set is empty".into()));
    }
    let predictions = par::map_slice(&data.images, |im| predict(net, im));
    let mut correct = 0usize;
    for (p, &label) in predictions.into_iter().zip(&data.labels) {
        if p? == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
