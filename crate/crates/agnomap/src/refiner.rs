//! Map refinement: activation-weighted cleanup of a saliency map, optimized
//! with Adam, then clipped and re-projected so the result seeds the next
//! mapper round.
//!
//! Objective per step: mean J_CE(clip(I - nu), theta, l_c) over a minibatch
//! plus lambda * mean |nu * (1 - Xi)|, with Xi recomputed from the current nu.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::mapper::{self, SaliencyMap};
use crate::micronet::{self, AdamState, Classifier};
use crate::tensor::Tensor;

/// Activation weighting matrix, [0,1]-normalized, broadcast to input shape.
#[derive(Debug, Clone)]
pub struct XiMatrix {
    pub xi: Tensor,
    /// Index of the conv layer whose activations were used.
    pub source_layer: usize,
}

#[derive(Debug, Clone)]
pub struct RefineConfig {
    pub lambda: f32,
    pub iterations: usize,
    pub lr: f32,
    pub eta: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl RefineConfig {
    /// Full-scale defaults: 150 iterations, lambda = 50.
    pub fn paper_scale(eta: f32, seed: u64) -> Self {
        RefineConfig {
            lambda: 50.0,
            iterations: 150,
            lr: 0.05,
            eta,
            batch_size: 128,
            seed,
        }
    }

    /// Desk-scale defaults: 60 iterations.
    pub fn desk_scale(eta: f32, seed: u64) -> Self {
        RefineConfig {
            lambda: 50.0,
            iterations: 60,
            lr: 0.05,
            eta,
            batch_size: 32,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Input("lambda must be >= 0".into()));
        }
        if !(self.eta > 0.0) {
            return Err(Error::Input("eta must be > 0".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Input("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Forward nu through the conv base, channel-average the post-ReLU
/// activations, upsample bilinearly to the input grid, min-max normalize to
/// [0,1] and broadcast across channels. All-flat activations yield Xi = 0.
pub fn compute_xi(model: &Classifier, nu: &Tensor) -> Result<XiMatrix> {
    let source_layer = model
        .layers
        .iter()
        .rposition(|l| l.is_conv())
        .ok_or_else(|| Error::Config("model has no conv layer".into()))?;
    let acts = model.conv_base_activations(nu)?;
    let shape = acts.shape();
    let (ah, aw, ad) = (shape[0], shape[1], shape[2]);
    let mut plane = vec![0.0f32; ah * aw];
    for y in 0..ah {
        for x in 0..aw {
            let mut acc = 0.0;
            for d in 0..ad {
                acc += acts.data()[(y * aw + x) * ad + d];
            }
            plane[y * aw + x] = acc / ad as f32;
        }
    }
    let (h, w, c) = model.input_shape;
    let up = bilinear_upsample(&plane, ah, aw, h, w);
    let lo = up.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = up.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut xi = Tensor::zeros(&[h, w, c]);
    if hi > lo {
        let xd = xi.data_mut();
        let inv = 1.0 / (hi - lo);
        for y in 0..h {
            for x in 0..w {
                let v = (up[y * w + x] - lo) * inv;
                for ch in 0..c {
                    xd[(y * w + x) * c + ch] = v;
                }
            }
        }
    }
    Ok(XiMatrix { xi, source_layer })
}

fn bilinear_upsample(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; dh * dw];
    let sy = if dh > 1 { (sh - 1) as f32 / (dh - 1) as f32 } else { 0.0 };
    let sx = if dw > 1 { (sw - 1) as f32 / (dw - 1) as f32 } else { 0.0 };
    for y in 0..dh {
        let fy = y as f32 * sy;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let ty = fy - y0 as f32;
        for x in 0..dw {
            let fx = x as f32 * sx;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let tx = fx - x0 as f32;
            let top = src[y0 * sw + x0] * (1.0 - tx) + src[y0 * sw + x1] * tx;
            let bot = src[y1 * sw + x0] * (1.0 - tx) + src[y1 * sw + x1] * tx;
            out[y * dw + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// The refinement objective on a fixed batch and frozen Xi.
pub fn objective(
    model: &Classifier,
    batch: &Tensor,
    label: usize,
    nu: &Tensor,
    xi: &XiMatrix,
    lambda: f32,
) -> Result<f32> {
    let nudged = mapper::nudge_batch(batch, nu);
    let logits = model.forward(&nudged)?;
    let labels = vec![label; logits.shape()[0]];
    let ce = micronet::loss_ce(&logits, &labels)?;
    Ok(ce + lambda * penalty(nu, xi))
}

/// mean |nu * (1 - Xi)|.
pub fn penalty(nu: &Tensor, xi: &XiMatrix) -> f32 {
    let n = nu.len() as f32;
    nu.data()
        .iter()
        .zip(xi.xi.data())
        .map(|(v, x)| (v * (1.0 - x)).abs())
        .sum::<f32>()
        / n
}

/// Mean |nu| over pixels where Xi < threshold; NaN when no pixel qualifies.
pub fn mean_abs_low_xi(nu: &Tensor, xi: &XiMatrix, threshold: f32) -> f32 {
    let mut total = 0.0f32;
    let mut count = 0usize;
    for (v, x) in nu.data().iter().zip(xi.xi.data()) {
        if *x < threshold {
            total += v.abs();
            count += 1;
        }
    }
    if count == 0 {
        f32::NAN
    } else {
        total / count as f32
    }
}

/// Run `cfg.iterations` Adam steps on nu, then clip to the valid perturbation
/// range [-1,1] and apply the Psi projection.
pub fn refine(
    model: &Classifier,
    dataset: &Dataset,
    map: &SaliencyMap,
    cfg: &RefineConfig,
) -> Result<SaliencyMap> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    let label = map.concept_label;
    let mut nu = map.nu.clone();
    let mut adam = AdamState::new(&[&nu], cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let inv_n = 1.0 / nu.len() as f32;
    for _ in 0..cfg.iterations {
        let mut indices = Vec::with_capacity(cfg.batch_size);
        while indices.len() < cfg.batch_size.min(dataset.len()).max(1) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            indices.push(order[cursor]);
            cursor += 1;
        }
        let xi = compute_xi(model, &nu)?;
        let batch = micronet::train_stack(&dataset.images, &indices, model.input_shape)?;
        let nudged = mapper::nudge_batch(&batch, &nu);
        let input_grads = model.input_grad(&nudged, label)?;
        // d/dnu of mean J_CE(clip(I - nu)): -g where the clip is inactive
        let b = indices.len();
        let per = nu.len();
        let mut grad = Tensor::zeros(nu.shape());
        let gd = grad.data_mut();
        let igd = input_grads.data();
        let ndg = nudged.data();
        for i in 0..b {
            for j in 0..per {
                let v = ndg[i * per + j];
                if v > 0.0 && v < 1.0 {
                    gd[j] -= igd[i * per + j];
                }
            }
        }
        let inv_b = 1.0 / b as f32;
        for v in gd.iter_mut() {
            *v *= inv_b;
        }
        // subgradient of lambda * mean |nu * (1 - Xi)|
        for ((g, v), x) in gd.iter_mut().zip(nu.data()).zip(xi.xi.data()) {
            *g += cfg.lambda * inv_n * v.signum() * (1.0 - x) * if *v == 0.0 { 0.0 } else { 1.0 };
        }
        adam.step(&mut [&mut nu], &[&grad]);
    }
    nu.clamp(-1.0, 1.0);
    let nu = mapper::project(&nu, cfg.eta);
    Ok(SaliencyMap {
        nu,
        concept_label: label,
        norm_bound: cfg.eta,
    })
}
