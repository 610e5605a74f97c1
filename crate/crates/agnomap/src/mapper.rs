//! Input-agnostic saliency mapper: iterative accumulation of expected input
//! gradients with moment estimation, a branch-tested signed update, and
//! l2-ball projection after every iteration.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::micronet::{self, Classifier};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SaliencyMap {
    pub nu: Tensor,
    pub concept_label: usize,
    pub norm_bound: f32,
}

impl SaliencyMap {
    /// The all-zeros seed map for round 1.
    pub fn zero(shape: (usize, usize, usize), concept_label: usize, norm_bound: f32) -> Self {
        SaliencyMap {
            nu: Tensor::zeros(&[shape.0, shape.1, shape.2]),
            concept_label,
            norm_bound,
        }
    }
}

/// How the branch probe reads "E[K(I) -> l_c]".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeMode {
    /// Mean softmax probability of the concept label (default).
    Probability,
    /// Fraction of samples predicted as the concept label.
    PredictionRate,
}

#[derive(Debug, Clone)]
pub struct MapperConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub eta: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub probe: ProbeMode,
    pub seed: u64,
}

impl MapperConfig {
    /// Full-scale defaults: b=128, K=650, eta=30.
    pub fn paper_scale(seed: u64) -> Self {
        MapperConfig {
            batch_size: 128,
            iterations: 650,
            eta: 30.0,
            beta1: 0.9,
            beta2: 0.999,
            probe: ProbeMode::Probability,
            seed,
        }
    }

    /// Desk-scale defaults for 32x32x3 inputs: b=32, K=150, eta=4.5.
    pub fn desk_scale(seed: u64) -> Self {
        MapperConfig {
            batch_size: 32,
            iterations: 150,
            eta: 4.5,
            beta1: 0.9,
            beta2: 0.999,
            probe: ProbeMode::Probability,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Input("batch_size must be >= 1".into()));
        }
        if !(self.eta > 0.0) {
            return Err(Error::Input("eta must be > 0".into()));
        }
        if !(0.0 < self.beta1 && self.beta1 < self.beta2 && self.beta2 < 1.0) {
            return Err(Error::Input("need 0 < beta1 < beta2 < 1".into()));
        }
        Ok(())
    }
}

/// Moment accumulators of the mapper loop.
#[derive(Debug, Clone)]
pub struct MapperState {
    pub mu: Tensor,
    pub sigma: Tensor,
    pub k: u64,
}

const MOMENT_EPS: f32 = 1e-12;

impl MapperState {
    pub fn new(shape: &[usize]) -> Self {
        MapperState {
            mu: Tensor::zeros(shape),
            sigma: Tensor::zeros(shape),
            k: 0,
        }
    }
}

/// clip(I_i - nu, 0, 1) per sample.
pub fn nudge_batch(batch: &Tensor, nu: &Tensor) -> Tensor {
    let per = nu.len();
    let mut out = batch.clone();
    let nd = nu.data();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = (*v - nd[i % per]).clamp(0.0, 1.0);
    }
    out
}

/// Arithmetic mean over the batch of per-sample input gradients, fixed
/// summation order for bit reproducibility.
pub fn expected_grad(model: &Classifier, nudged: &Tensor, label: usize) -> Result<Tensor> {
    let grads = model.input_grad(nudged, label)?;
    let shape = grads.shape();
    if shape.len() != 4 {
        // single sample, already the mean
        return Ok(grads);
    }
    let (b, per) = (shape[0], shape[1] * shape[2] * shape[3]);
    let mut mean = Tensor::zeros(&shape[1..]);
    let md = mean.data_mut();
    let gd = grads.data();
    for i in 0..b {
        for j in 0..per {
            md[j] += gd[i * per + j];
        }
    }
    let inv = 1.0 / b as f32;
    for v in md {
        *v *= inv;
    }
    Ok(mean)
}

/// Moment update and direction:
/// mu_k = b1*mu + (1-b1)*x, sigma_k = b2*sigma + (1-b2)*x*x,
/// v = (mu_k * sqrt(1-b2^k)) / (sqrt(sigma_k) * (1-b1^k) + eps).
/// Algebraically the bias-corrected mu_hat/sqrt(sigma_hat).
pub fn moment_direction(state: &mut MapperState, x_k: &Tensor, beta1: f32, beta2: f32) -> Tensor {
    state.k += 1;
    let k = state.k as i32;
    let md = state.mu.data_mut();
    let sd = state.sigma.data_mut();
    let xd = x_k.data();
    let num_scale = (1.0 - beta2.powi(k)).sqrt();
    let den_scale = 1.0 - beta1.powi(k);
    let mut v = Tensor::zeros(x_k.shape());
    let vd = v.data_mut();
    for i in 0..xd.len() {
        md[i] = beta1 * md[i] + (1.0 - beta1) * xd[i];
        sd[i] = beta2 * sd[i] + (1.0 - beta2) * xd[i] * xd[i];
        vd[i] = (md[i] * num_scale) / (sd[i].sqrt() * den_scale + MOMENT_EPS);
    }
    v
}

/// Outcome of the branch probe: the chosen sign and both candidate scores.
#[derive(Debug, Clone, Copy)]
pub struct BranchChoice {
    pub positive: bool,
    pub score_plus: f32,
    pub score_minus: f32,
}

/// Probe clip(I_i - (nu_prev +/- v/||v||)) and keep the sign whose candidate
/// set scores at least as well for the concept (ties go to +). The probe uses
/// the unit-normalized direction; the map update later applies raw v.
pub fn branch_select(
    model: &Classifier,
    batch: &Tensor,
    nu_prev: &Tensor,
    v: &Tensor,
    label: usize,
    probe: ProbeMode,
) -> Result<BranchChoice> {
    let norm = v.l2_norm();
    if norm == 0.0 {
        return Ok(BranchChoice {
            positive: true,
            score_plus: 0.0,
            score_minus: 0.0,
        });
    }
    let mut unit = v.clone();
    unit.scale(1.0 / norm);
    let mut plus = nu_prev.clone();
    plus.add_assign(&unit);
    let mut minus = nu_prev.clone();
    minus.sub_assign(&unit);
    let score_plus = probe_score(model, &nudge_batch(batch, &plus), label, probe)?;
    let score_minus = probe_score(model, &nudge_batch(batch, &minus), label, probe)?;
    Ok(BranchChoice {
        positive: score_plus >= score_minus,
        score_plus,
        score_minus,
    })
}

pub fn probe_score(model: &Classifier, batch: &Tensor, label: usize, probe: ProbeMode) -> Result<f32> {
    let samples = micronet::split_batch(batch, model.input_shape)?;
    let mut total = 0.0f32;
    for s in &samples {
        let logits = model.forward_sample(s)?;
        match probe {
            ProbeMode::Probability => {
                total += micronet::softmax(logits.data())[label];
            }
            ProbeMode::PredictionRate => {
                if micronet::argmax(logits.data()) == label {
                    total += 1.0;
                }
            }
        }
    }
    Ok(total / samples.len() as f32)
}

/// Psi: rescale onto the l2-ball of radius eta, direction preserved.
pub fn project(nu: &Tensor, eta: f32) -> Tensor {
    let norm = nu.l2_norm();
    if norm == 0.0 || norm <= eta {
        return nu.clone();
    }
    let mut out = nu.clone();
    out.scale(eta / norm);
    out
}

/// Epoch-style minibatch sampler: shuffle without replacement, reshuffle when
/// exhausted. Falls back to replacement sampling when the set is smaller than
/// the batch.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    with_replacement: bool,
}

impl BatchSampler {
    fn new(n: usize, b: usize, rng: &mut ChaCha8Rng) -> Self {
        let with_replacement = n < b;
        if with_replacement {
            eprintln!(
                "warning: dataset of {} samples is smaller than batch size {}; sampling with replacement",
                n, b
            );
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        BatchSampler {
            order,
            cursor: 0,
            with_replacement,
        }
    }

    fn next_batch(&mut self, b: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if self.with_replacement {
            return (0..b).map(|_| rng.gen_range(0..self.order.len())).collect();
        }
        let mut out = Vec::with_capacity(b);
        while out.len() < b {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Run the full mapper loop for `cfg.iterations` iterations from `seed_map`.
pub fn run_mapper(
    model: &Classifier,
    dataset: &Dataset,
    label: usize,
    cfg: &MapperConfig,
    seed_map: &SaliencyMap,
) -> Result<SaliencyMap> {
    cfg.validate()?;
    if label >= model.num_classes {
        return Err(Error::Input(format!("concept label {} out of range", label)));
    }
    if dataset.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    if seed_map.nu.l2_norm() > cfg.eta + 1e-4 {
        return Err(Error::Input(format!(
            "seed map norm {} exceeds eta {}",
            seed_map.nu.l2_norm(),
            cfg.eta
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sampler = BatchSampler::new(dataset.len(), cfg.batch_size, &mut rng);
    let mut nu = seed_map.nu.clone();
    let mut state = MapperState::new(nu.shape());
    for _ in 0..cfg.iterations {
        let indices = sampler.next_batch(cfg.batch_size, &mut rng);
        let batch = crate::micronet::train_stack(&dataset.images, &indices, model.input_shape)?;
        let nudged = nudge_batch(&batch, &nu);
        let x_k = expected_grad(model, &nudged, label)?;
        let v = moment_direction(&mut state, &x_k, cfg.beta1, cfg.beta2);
        let choice = branch_select(model, &batch, &nu, &v, label, cfg.probe)?;
        if choice.positive {
            nu.add_assign(&v);
        } else {
            nu.sub_assign(&v);
        }
        nu = project(&nu, cfg.eta);
        debug_assert!(nu.l2_norm() <= cfg.eta + 1e-5);
    }
    Ok(SaliencyMap {
        nu,
        concept_label: label,
        norm_bound: cfg.eta,
    })
}
