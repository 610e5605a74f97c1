//! Minibatch Adam training loop, deterministic given the seed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{AdamState, Classifier};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub train_accuracy: f32,
    pub final_loss: f32,
}

pub fn train(
    model: &mut Classifier,
    images: &[Tensor],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::Input("empty or mismatched training set".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= model.num_classes) {
        return Err(Error::Input(format!("label {} out of range", bad)));
    }
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&model.params(), cfg.lr);
    let mut indices: Vec<usize> = (0..images.len()).collect();
    let mut last_loss = f32::NAN;
    for epoch in 0..cfg.epochs {
        indices.shuffle(&mut rng);
        for chunk in indices.chunks(cfg.batch_size.max(1)) {
            let batch = stack(images, chunk, model.input_shape)?;
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (grads, loss) = model.param_grad(&batch, &batch_labels)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "loss diverged to {} at epoch {}",
                    loss, epoch
                )));
            }
            last_loss = loss;
            adam.step_layers(&mut model.params_mut(), &grads);
        }
    }
    let train_accuracy = evaluate(model, images, labels)?;
    Ok(TrainReport {
        train_accuracy,
        final_loss: last_loss,
    })
}

/// Fraction of samples whose argmax logit equals the label.
pub fn evaluate(model: &Classifier, images: &[Tensor], labels: &[usize]) -> Result<f32> {
    if images.is_empty() {
        return Err(Error::Input("empty evaluation set".into()));
    }
    let mut correct = 0usize;
    for (img, &label) in images.iter().zip(labels) {
        let logits = model.forward_sample(img)?;
        let pred = argmax(logits.data());
        if pred == label {
            correct += 1;
        }
    }
    Ok(correct as f32 / images.len() as f32)
}

pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Stack selected samples into a [b,h,w,c] batch tensor.
pub(crate) fn stack(
    images: &[Tensor],
    indices: &[usize],
    input_shape: (usize, usize, usize),
) -> Result<Tensor> {
    let (h, w, c) = input_shape;
    let per = h * w * c;
    let mut data = Vec::with_capacity(indices.len() * per);
    for &i in indices {
        if images[i].len() != per {
            return Err(Error::Config("sample shape mismatch".into()));
        }
        data.extend_from_slice(images[i].data());
    }
    Tensor::from_vec(&[indices.len(), h, w, c], data)
}
