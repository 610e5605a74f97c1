//! Self-contained differentiable classifier core: forward passes,
//! cross-entropy loss, parameter gradients for training and input gradients
//! for the saliency mapper.

mod adam;
pub(crate) mod checkpoint;
mod layer;
mod train;

pub use adam::AdamState;
pub use checkpoint::{load_model, save_model};
pub use layer::{Layer, LayerGrads, Padding};
pub use train::{argmax, evaluate, train, TrainConfig, TrainReport};
pub(crate) use train::stack as train_stack;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Classifier {
    pub layers: Vec<Layer>,
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
}

impl Classifier {
    /// Checks the layer shapes chain and that the head emits `num_classes`
    /// logits.
    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.input_shape;
        let mut shape = vec![h, w, c];
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer
                .out_shape(&shape)
                .map_err(|e| Error::Config(format!("layer {}: {}", i, e)))?;
        }
        if shape != vec![self.num_classes] {
            return Err(Error::Config(format!(
                "head emits shape {:?}, expected [{}]",
                shape, self.num_classes
            )));
        }
        Ok(())
    }

    /// Standard small architecture used across the crate: two conv+pool
    /// stages and a dense head. Weights are He-uniform from the seeded RNG.
    pub fn small_cnn(input_shape: (usize, usize, usize), num_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let (h, w, c) = input_shape;
        let conv1 = conv_init(8, 3, c, rng);
        let conv2 = conv_init(16, 3, 8, rng);
        let flat = (h / 4) * (w / 4) * 16;
        let dense = dense_init(num_classes, flat, rng);
        let model = Classifier {
            layers: vec![
                conv1,
                Layer::ReLU,
                Layer::MaxPool2d,
                conv2,
                Layer::ReLU,
                Layer::MaxPool2d,
                Layer::Flatten,
                dense,
            ],
            input_shape,
            num_classes,
        };
        debug_assert!(model.validate().is_ok());
        model
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn zero_grads(&self) -> Vec<LayerGrads> {
        self.layers.iter().map(|l| l.zero_grads()).collect()
    }

    /// Forward one sample, returning all activations: `acts[0]` is the input,
    /// `acts[i+1]` the output of layer `i`.
    pub fn forward_trace(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.clone());
        for layer in &self.layers {
            let out = layer.forward(acts.last().unwrap())?;
            acts.push(out);
        }
        Ok(acts)
    }

    pub fn forward_sample(&self, input: &Tensor) -> Result<Tensor> {
        let mut cur = input.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur)?;
        }
        Ok(cur)
    }

    /// Forward a batch [b,h,w,c] to logits [b,L].
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let samples = split_batch(batch, self.input_shape)?;
        let b = samples.len();
        let mut logits = Tensor::zeros(&[b, self.num_classes]);
        for (i, s) in samples.iter().enumerate() {
            let out = self.forward_sample(s)?;
            logits.data_mut()[i * self.num_classes..(i + 1) * self.num_classes]
                .copy_from_slice(out.data());
        }
        Ok(logits)
    }

    /// Per-sample gradient of the cross-entropy loss w.r.t. each input pixel,
    /// for a fixed class label. Same shape as `batch`.
    pub fn input_grad(&self, batch: &Tensor, label: usize) -> Result<Tensor> {
        if label >= self.num_classes {
            return Err(Error::Input(format!(
                "label {} out of range [0,{})",
                label, self.num_classes
            )));
        }
        let samples = split_batch(batch, self.input_shape)?;
        let mut out = Tensor::zeros(batch.shape());
        let per = samples[0].len();
        for (i, s) in samples.iter().enumerate() {
            let g = self.input_grad_sample(s, label)?;
            out.data_mut()[i * per..(i + 1) * per].copy_from_slice(g.data());
        }
        Ok(out)
    }

    pub fn input_grad_sample(&self, input: &Tensor, label: usize) -> Result<Tensor> {
        let acts = self.forward_trace(input)?;
        let logits = acts.last().unwrap();
        let dlogits = ce_grad_logits(logits, label);
        let mut d = dlogits;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            d = layer.backward(&acts[i], &d, None)?;
        }
        Ok(d)
    }

    /// Parameter gradients of the mean cross-entropy loss over a labeled
    /// batch, in `params()` order, plus the loss value.
    pub fn param_grad(&self, batch: &Tensor, labels: &[usize]) -> Result<(Vec<LayerGrads>, f32)> {
        let samples = split_batch(batch, self.input_shape)?;
        if samples.len() != labels.len() {
            return Err(Error::Input("batch/labels length mismatch".into()));
        }
        for &l in labels {
            if l >= self.num_classes {
                return Err(Error::Input(format!("label {} out of range", l)));
            }
        }
        let mut grads = self.zero_grads();
        let inv_b = 1.0 / samples.len() as f32;
        let mut loss = 0.0f32;
        for (s, &label) in samples.iter().zip(labels) {
            let acts = self.forward_trace(s)?;
            let logits = acts.last().unwrap();
            loss += ce_sample(logits, label);
            let mut d = ce_grad_logits(logits, label);
            d.scale(inv_b);
            for (i, layer) in self.layers.iter().enumerate().rev() {
                d = layer.backward(&acts[i], &d, Some(&mut grads[i]))?;
            }
        }
        Ok((grads, loss * inv_b))
    }

    /// Post-ReLU activations of the last conv layer for a single input.
    pub fn conv_base_activations(&self, input: &Tensor) -> Result<Tensor> {
        let last_conv = self
            .layers
            .iter()
            .rposition(|l| l.is_conv())
            .ok_or_else(|| Error::Config("model has no conv layer".into()))?;
        let mut cur = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.forward(&cur)?;
            if i == last_conv {
                // fold in the ReLU that follows the conv, if present
                if let Some(Layer::ReLU) = self.layers.get(i + 1) {
                    cur = self.layers[i + 1].forward(&cur)?;
                }
                return Ok(cur);
            }
        }
        unreachable!()
    }
}

/// Softmax of one logit row, numerically stabilized.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = logits.iter().map(|v| (v - m).exp()).collect();
    let sum: f32 = exps.iter().sum();
    exps.iter().map(|v| v / sum).collect()
}

fn ce_sample(logits: &Tensor, label: usize) -> f32 {
    let l = logits.data();
    let m = l.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let lse = m + l.iter().map(|v| (v - m).exp()).sum::<f32>().ln();
    lse - l[label]
}

fn ce_grad_logits(logits: &Tensor, label: usize) -> Tensor {
    let mut p = Tensor::from_vec(logits.shape(), softmax(logits.data())).unwrap();
    p.data_mut()[label] -= 1.0;
    p
}

/// Mean over the batch of -log softmax(logits)[label].
pub fn loss_ce(logits: &Tensor, labels: &[usize]) -> Result<f32> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Input("logits/labels shape mismatch".into()));
    }
    let num_classes = shape[1];
    let mut total = 0.0f32;
    for (i, &label) in labels.iter().enumerate() {
        if label >= num_classes {
            return Err(Error::Input(format!("label {} out of range", label)));
        }
        let row = Tensor::from_vec(
            &[num_classes],
            logits.data()[i * num_classes..(i + 1) * num_classes].to_vec(),
        )?;
        total += ce_sample(&row, label);
    }
    Ok(total / labels.len() as f32)
}

/// Views of a [b,h,w,c] batch as per-sample tensors.
pub fn split_batch(batch: &Tensor, input_shape: (usize, usize, usize)) -> Result<Vec<Tensor>> {
    let (h, w, c) = input_shape;
    let shape = batch.shape();
    let (b, rest) = match shape.len() {
        4 => (shape[0], &shape[1..]),
        3 => (1, shape),
        _ => return Err(Error::Config(format!("bad batch shape {:?}", shape))),
    };
    if rest != [h, w, c] {
        return Err(Error::Config(format!(
            "batch sample shape {:?} does not match model input {:?}",
            rest,
            (h, w, c)
        )));
    }
    let per = h * w * c;
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        out.push(Tensor::from_vec(
            &[h, w, c],
            batch.data()[i * per..(i + 1) * per].to_vec(),
        )?);
    }
    Ok(out)
}

fn he_uniform(fan_in: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let limit = (6.0 / fan_in as f32).sqrt();
    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
}

fn conv_init(out_c: usize, k: usize, in_c: usize, rng: &mut ChaCha8Rng) -> Layer {
    let fan_in = k * k * in_c;
    Layer::Conv2d {
        weight: Tensor::from_vec(&[out_c, k, k, in_c], he_uniform(fan_in, out_c * k * k * in_c, rng))
            .unwrap(),
        bias: Tensor::zeros(&[out_c]),
        padding: Padding::Same,
    }
}

fn dense_init(out_n: usize, in_n: usize, rng: &mut ChaCha8Rng) -> Layer {
    Layer::Dense {
        weight: Tensor::from_vec(&[out_n, in_n], he_uniform(in_n, out_n * in_n, rng)).unwrap(),
        bias: Tensor::zeros(&[out_n]),
    }
}
