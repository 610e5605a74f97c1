//! Refiner tests: Xi construction, the penalty term against a convex oracle,
//! and refine loop contracts.

use agnomap::datagen::Dataset;
use agnomap::mapper::SaliencyMap;
use agnomap::micronet::{Classifier, Layer, Padding};
use agnomap::refiner::{self, RefineConfig, XiMatrix};
use agnomap::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn tiny_model(rng: &mut ChaCha8Rng) -> Classifier {
    Classifier::small_cnn((8, 8, 1), 3, rng)
}

/// A classifier whose conv stage is identically zero: activations are flat,
/// so Xi is all zeros and the model term of the refinement objective is
/// constant in nu.
fn inert_model() -> Classifier {
    Classifier {
        layers: vec![
            Layer::Conv2d {
                weight: Tensor::zeros(&[4, 3, 3, 1]),
                bias: Tensor::zeros(&[4]),
                padding: Padding::Same,
            },
            Layer::ReLU,
            Layer::MaxPool2d,
            Layer::Flatten,
            Layer::Dense {
                weight: Tensor::zeros(&[3, 4 * 4 * 4]),
                bias: Tensor::zeros(&[3]),
            },
        ],
        input_shape: (8, 8, 1),
        num_classes: 3,
    }
}

fn tiny_dataset(n: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let images = (0..n)
        .map(|_| {
            let mut t = rand_tensor(&[8, 8, 1], rng);
            for v in t.data_mut() {
                *v = (*v + 1.0) / 2.0;
            }
            t
        })
        .collect();
    Dataset {
        images,
        labels: (0..n).map(|i| i % 3).collect(),
        seed: 0,
    }
}

#[test]
fn xi_is_in_unit_range_and_broadcast_across_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = Classifier::small_cnn((8, 8, 3), 3, &mut rng);
    let nu = rand_tensor(&[8, 8, 3], &mut rng);
    let xi = refiner::compute_xi(&model, &nu).unwrap();
    assert_eq!(xi.xi.shape(), &[8, 8, 3]);
    assert!(xi.xi.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    // channels carry the same plane
    let d = xi.xi.data();
    for p in 0..64 {
        assert_eq!(d[p * 3], d[p * 3 + 1]);
        assert_eq!(d[p * 3], d[p * 3 + 2]);
    }
    // a non-degenerate map spans the full normalized range
    let lo = xi.xi.data().iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = xi.xi.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    assert_eq!(lo, 0.0);
    assert_eq!(hi, 1.0);
}

#[test]
fn xi_of_flat_activations_is_zero() {
    let model = inert_model();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let nu = rand_tensor(&[8, 8, 1], &mut rng);
    let xi = refiner::compute_xi(&model, &nu).unwrap();
    assert!(xi.xi.data().iter().all(|&v| v == 0.0));
}

#[test]
fn xi_uses_last_conv_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = tiny_model(&mut rng);
    let nu = rand_tensor(&[8, 8, 1], &mut rng);
    let xi = refiner::compute_xi(&model, &nu).unwrap();
    let expect = model
        .layers
        .iter()
        .rposition(|l| l.is_conv())
        .unwrap();
    assert_eq!(xi.source_layer, expect);
}

#[test]
fn penalty_matches_naive_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let nu = rand_tensor(&[6, 6, 2], &mut rng);
    let mut xi_t = rand_tensor(&[6, 6, 2], &mut rng);
    for v in xi_t.data_mut() {
        *v = (*v + 1.0) / 2.0;
    }
    let xi = XiMatrix {
        xi: xi_t.clone(),
        source_layer: 0,
    };
    let mut acc = 0.0f32;
    for (v, x) in nu.data().iter().zip(xi_t.data()) {
        acc += (v * (1.0 - x)).abs();
    }
    acc /= nu.len() as f32;
    assert!((refiner::penalty(&nu, &xi) - acc).abs() < 1e-6);
}

#[test]
fn penalty_zero_when_xi_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let nu = rand_tensor(&[4, 4, 1], &mut rng);
    let xi = XiMatrix {
        xi: Tensor::full(&[4, 4, 1], 1.0),
        source_layer: 0,
    };
    assert_eq!(refiner::penalty(&nu, &xi), 0.0);
}

#[test]
fn mean_abs_low_xi_counts_only_suppressed_pixels() {
    let nu = Tensor::from_vec(&[2, 2, 1], vec![1.0, -2.0, 3.0, -4.0]).unwrap();
    let xi = XiMatrix {
        xi: Tensor::from_vec(&[2, 2, 1], vec![0.0, 0.05, 0.5, 0.9]).unwrap(),
        source_layer: 0,
    };
    let got = refiner::mean_abs_low_xi(&nu, &xi, 0.1);
    assert!((got - 1.5).abs() < 1e-6);
    assert!(refiner::mean_abs_low_xi(&nu, &xi, 0.0).is_nan());
}

/// With a zero-weight model the objective reduces to the convex penalty
/// lambda * mean |nu| (Xi stays zero), so refinement must drive the penalty
/// strictly down and more steps must not do worse.
#[test]
fn refine_descends_pure_penalty_objective() {
    let model = inert_model();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ds = tiny_dataset(9, &mut rng);
    let mut nu = rand_tensor(&[8, 8, 1], &mut rng);
    // entries large relative to lr * iterations so no sign crossings
    for v in nu.data_mut() {
        *v = v.signum() * (v.abs() + 5.0);
    }
    let nu = agnomap::mapper::project(&nu, 50.0);
    let start = SaliencyMap {
        nu,
        concept_label: 0,
        norm_bound: 50.0,
    };
    let xi = refiner::compute_xi(&model, &start.nu).unwrap();
    let before = refiner::penalty(&start.nu, &xi);
    let mut last = before;
    for iters in [5usize, 15, 30] {
        let cfg = RefineConfig {
            lambda: 100.0,
            iterations: iters,
            lr: 0.05,
            eta: 50.0,
            batch_size: 4,
            seed: 1,
        };
        let out = refiner::refine(&model, &ds, &start, &cfg).unwrap();
        let p = refiner::penalty(&out.nu, &xi);
        assert!(p < before, "iters={} penalty {} !< {}", iters, p, before);
        assert!(p <= last + 1e-6, "iters={} penalty {} > {}", iters, p, last);
        last = p;
    }
}

#[test]
fn refine_zero_iterations_only_clips_and_projects() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = tiny_model(&mut rng);
    let ds = tiny_dataset(6, &mut rng);
    let mut nu = rand_tensor(&[8, 8, 1], &mut rng);
    nu.scale(0.3); // already inside [-1,1] and the ball
    let map = SaliencyMap {
        nu: nu.clone(),
        concept_label: 1,
        norm_bound: 4.5,
    };
    let cfg = RefineConfig {
        iterations: 0,
        ..RefineConfig::desk_scale(4.5, 0)
    };
    let out = refiner::refine(&model, &ds, &map, &cfg).unwrap();
    assert_eq!(out.nu.data(), nu.data());
}

#[test]
fn refine_output_respects_clip_and_ball() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = tiny_model(&mut rng);
    let ds = tiny_dataset(9, &mut rng);
    let map = SaliencyMap {
        nu: rand_tensor(&[8, 8, 1], &mut rng),
        concept_label: 2,
        norm_bound: 2.0,
    };
    let cfg = RefineConfig {
        eta: 2.0,
        iterations: 12,
        batch_size: 4,
        ..RefineConfig::desk_scale(2.0, 3)
    };
    let out = refiner::refine(&model, &ds, &map, &cfg).unwrap();
    assert!(out.nu.l2_norm() <= 2.0 + 1e-5);
    assert!(out.nu.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
}

#[test]
fn refine_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model = tiny_model(&mut rng);
    let ds = tiny_dataset(9, &mut rng);
    let map = SaliencyMap {
        nu: rand_tensor(&[8, 8, 1], &mut rng),
        concept_label: 0,
        norm_bound: 4.5,
    };
    let cfg = RefineConfig {
        iterations: 10,
        batch_size: 4,
        ..RefineConfig::desk_scale(4.5, 11)
    };
    let a = refiner::refine(&model, &ds, &map, &cfg).unwrap();
    let b = refiner::refine(&model, &ds, &map, &cfg).unwrap();
    assert_eq!(a.nu.data(), b.nu.data());
}

#[test]
fn refine_config_validation() {
    let mut cfg = RefineConfig::desk_scale(4.5, 0);
    cfg.lambda = -1.0;
    assert!(cfg.validate().is_err());
    let mut cfg = RefineConfig::desk_scale(4.5, 0);
    cfg.eta = 0.0;
    assert!(cfg.validate().is_err());
}
