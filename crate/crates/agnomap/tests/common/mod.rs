//! Shared test support: an independent f64 reference evaluator for the
//! classifier loss (used as the finite-difference oracle) and fixture
//! builders. The reference path shares no code with the crate's forward or
//! backward implementations.

#![allow(dead_code)]

use agnomap::micronet::{Classifier, Layer, Padding};
use agnomap::Tensor;

/// All parameters of a model flattened to f64, in `params()` order.
pub fn params_f64(model: &Classifier) -> Vec<Vec<f64>> {
    model
        .params()
        .iter()
        .map(|p| p.data().iter().map(|&v| v as f64).collect())
        .collect()
}

/// Evaluate the cross-entropy loss of one sample in f64, layer by layer.
/// `params` overrides the model's own weights (same order/shape).
pub fn reference_loss(
    model: &Classifier,
    params: &[Vec<f64>],
    input: &[f64],
    label: usize,
) -> f64 {
    reference_eval(model, params, input, label).0
}

/// Smallest distance of the evaluation to a ReLU or pool-argmax kink.
/// Finite differences are only trustworthy when this comfortably exceeds
/// the step size.
pub fn kink_margin(model: &Classifier, input: &Tensor, label: usize) -> f64 {
    let params = params_f64(model);
    let input_f64: Vec<f64> = input.data().iter().map(|&v| v as f64).collect();
    reference_eval(model, &params, &input_f64, label).1
}

fn reference_eval(
    model: &Classifier,
    params: &[Vec<f64>],
    input: &[f64],
    label: usize,
) -> (f64, f64) {
    let mut margin = f64::INFINITY;
    let (h, w, c) = model.input_shape;
    let mut cur = input.to_vec();
    let mut shape = (h, w, c);
    let mut flat_len = h * w * c;
    let mut flat = false;
    let mut pi = 0usize;
    for layer in &model.layers {
        match layer {
            Layer::Conv2d {
                weight, padding, ..
            } => {
                let ws = weight.shape();
                let (oc_n, kh, kw, ic_n) = (ws[0], ws[1], ws[2], ws[3]);
                let wdat = &params[pi];
                let bdat = &params[pi + 1];
                pi += 2;
                let (ih, iw, _) = shape;
                let (oh, ow, py, px) = match padding {
                    Padding::Same => (ih, iw, (kh / 2) as isize, (kw / 2) as isize),
                    Padding::Valid => (ih - kh + 1, iw - kw + 1, 0, 0),
                };
                let mut out = vec![0.0f64; oh * ow * oc_n];
                for oy in 0..oh {
                    for ox in 0..ow {
                        for oc in 0..oc_n {
                            let mut acc = bdat[oc];
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = oy as isize + ky as isize - py;
                                    let ix = ox as isize + kx as isize - px;
                                    if iy < 0 || ix < 0 || iy >= ih as isize || ix >= iw as isize {
                                        continue;
                                    }
                                    for ic in 0..ic_n {
                                        acc += cur[((iy as usize * iw) + ix as usize) * ic_n + ic]
                                            * wdat[((oc * kh + ky) * kw + kx) * ic_n + ic];
                                    }
                                }
                            }
                            out[(oy * ow + ox) * oc_n + oc] = acc;
                        }
                    }
                }
                cur = out;
                shape = (oh, ow, oc_n);
                flat_len = oh * ow * oc_n;
            }
            Layer::ReLU => {
                for v in &mut cur {
                    // exact zeros come from upstream clamping and are locally
                    // constant, not kinks
                    if *v != 0.0 {
                        margin = margin.min(v.abs());
                    }
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            Layer::MaxPool2d => {
                let (ih, iw, ic) = shape;
                let (oh, ow) = (ih / 2, iw / 2);
                let mut out = vec![0.0f64; oh * ow * ic];
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ch in 0..ic {
                            let mut best = f64::NEG_INFINITY;
                            let mut second = f64::NEG_INFINITY;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let v = cur[((oy * 2 + dy) * iw + ox * 2 + dx) * ic + ch];
                                    if v > best {
                                        second = best;
                                        best = v;
                                    } else if v > second {
                                        second = v;
                                    }
                                }
                            }
                            // a tie between clamped zeros is locally constant
                            if !(best == second && best <= 0.0) {
                                margin = margin.min(best - second);
                            }
                            out[(oy * ow + ox) * ic + ch] = best;
                        }
                    }
                }
                cur = out;
                shape = (oh, ow, ic);
                flat_len = oh * ow * ic;
            }
            Layer::Flatten => {
                flat = true;
            }
            Layer::Dense { weight, .. } => {
                let ws = weight.shape();
                let (on, inn) = (ws[0], ws[1]);
                let wdat = &params[pi];
                let bdat = &params[pi + 1];
                pi += 2;
                assert_eq!(inn, if flat { flat_len } else { cur.len() });
                let mut out = vec![0.0f64; on];
                for o in 0..on {
                    let mut acc = bdat[o];
                    for i in 0..inn {
                        acc += wdat[o * inn + i] * cur[i];
                    }
                    out[o] = acc;
                }
                cur = out;
            }
        }
    }
    // cross-entropy via log-sum-exp
    let m = cur.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + cur.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    (lse - cur[label], margin)
}

/// Central finite-difference gradient of the reference loss w.r.t. the input.
pub fn fd_input_grad(
    model: &Classifier,
    input: &Tensor,
    label: usize,
    step: f64,
) -> Vec<f64> {
    let params = params_f64(model);
    let base: Vec<f64> = input.data().iter().map(|&v| v as f64).collect();
    let mut grad = vec![0.0f64; base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += step;
        let mut minus = base.clone();
        minus[i] -= step;
        grad[i] = (reference_loss(model, &params, &plus, label)
            - reference_loss(model, &params, &minus, label))
            / (2.0 * step);
    }
    grad
}

/// Central finite-difference gradient of the reference loss w.r.t. one
/// parameter tensor (index into `params()` order).
pub fn fd_param_grad(
    model: &Classifier,
    input: &Tensor,
    label: usize,
    param_idx: usize,
    step: f64,
) -> Vec<f64> {
    let base = params_f64(model);
    let input_f64: Vec<f64> = input.data().iter().map(|&v| v as f64).collect();
    let n = base[param_idx].len();
    let mut grad = vec![0.0f64; n];
    for i in 0..n {
        let mut plus = base.clone();
        plus[param_idx][i] += step;
        let mut minus = base.clone();
        minus[param_idx][i] -= step;
        grad[i] = (reference_loss(model, &plus, &input_f64, label)
            - reference_loss(model, &minus, &input_f64, label))
            / (2.0 * step);
    }
    grad
}

/// Relative disagreement between an analytic f32 gradient and the f64
/// finite-difference oracle: max |a-n| over max(max |n|, floor).
pub fn rel_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let max_diff = analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a as f64 - n).abs())
        .fold(0.0, f64::max);
    let scale = numeric.iter().map(|n| n.abs()).fold(0.0, f64::max).max(1e-3);
    max_diff / scale
}
