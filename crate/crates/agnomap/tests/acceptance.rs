//! Acceptance gate: one pass/fail line per criterion, all run sequentially so
//! fixtures (trained models, generated maps) are shared. Run with
//! `cargo test -p agnomap --test acceptance -- --nocapture` to watch progress.

mod common;

use std::sync::OnceLock;
use std::time::Instant;

use agnomap::datagen::{self, Dataset, TriggerKind, TriggerSpec};
use agnomap::mapper::{self, SaliencyMap};
use agnomap::metrics;
use agnomap::micronet::{self, Classifier, Layer, TrainConfig};
use agnomap::pipeline::{self, PipelineConfig};
use agnomap::refiner;
use agnomap::trojanscan::{self, ScanConfig};
use agnomap::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NUM_CLASSES: usize = 4;

struct Fixtures {
    model: Classifier,
    train: Dataset,
    test: Dataset,
}

static FIXTURES: OnceLock<Fixtures> = OnceLock::new();
static MAPS: OnceLock<Vec<SaliencyMap>> = OnceLock::new();

fn fixtures() -> &'static Fixtures {
    FIXTURES.get_or_init(|| {
        let train = datagen::generate(&datagen::default_concepts(), 500, 0).unwrap();
        let test = datagen::generate(&datagen::default_concepts(), 100, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut model = Classifier::small_cnn((32, 32, 3), NUM_CLASSES, &mut rng);
        let tc = TrainConfig {
            epochs: 10,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
        };
        micronet::train(&mut model, &train.images, &train.labels, &tc).unwrap();
        let acc = micronet::evaluate(&model, &test.images, &test.labels).unwrap();
        assert!(acc >= 0.95, "source model accuracy {} below 0.95", acc);
        Fixtures { model, train, test }
    })
}

/// The 40 pinned desk-profile maps: 10 per class, run seeds 1000..1040.
fn desk_maps() -> &'static [SaliencyMap] {
    MAPS.get_or_init(|| {
        let fx = fixtures();
        let cfg = PipelineConfig::desk_scale(0);
        let mut maps = Vec::with_capacity(NUM_CLASSES * 10);
        for concept in 0..NUM_CLASSES {
            for run in 0..10 {
                let seed = 1000 + (concept * 10 + run) as u64;
                maps.push(
                    pipeline::visualize_concept(&fx.model, &fx.train, concept, &cfg, seed)
                        .unwrap(),
                );
            }
        }
        maps
    })
}

fn rand_tensor(shape: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn stack(ds: &Dataset, indices: &[usize]) -> Tensor {
    let shape = ds.images[0].shape();
    let mut data = Vec::with_capacity(indices.len() * ds.images[0].len());
    for &i in indices {
        data.extend_from_slice(ds.images[i].data());
    }
    Tensor::from_vec(&[indices.len(), shape[0], shape[1], shape[2]], data).unwrap()
}

#[test]
fn acceptance() {
    let checks: Vec<(&str, fn() -> Result<String, String>)> = vec![
        ("1 gradient oracle", c1_gradient_oracle),
        ("2 projection law", c2_projection_law),
        ("3 adam-form identity", c3_adam_identity),
        ("4 descent property", c4_descent),
        ("5 end-to-end fidelity", c5_fidelity),
        ("6 cross-model transfer", c6_transfer),
        ("7 m_score endpoints", c7_endpoints),
        ("8 backdoor detection", c8_backdoor),
        ("9 refinement suppression", c9_suppression),
        ("10 determinism", c10_determinism),
    ];
    let mut failed = Vec::new();
    for (name, check) in checks {
        let t = Instant::now();
        match check() {
            Ok(detail) => {
                println!("criterion {}: PASS ({}) [{:.1?}]", name, detail, t.elapsed())
            }
            Err(detail) => {
                println!("criterion {}: FAIL ({}) [{:.1?}]", name, detail, t.elapsed());
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {:?}", failed);
}

/// Analytic input/parameter gradients vs central finite differences of an
/// independent f64 evaluator, >= 20 instances each, rel error < 1e-3.
fn c1_gradient_oracle() -> Result<String, String> {
    const TOL: f64 = 1e-3;
    const STEP: f64 = 1e-3;
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let mut checked = 0usize;
    'outer: for i in 0..200 {
        let model = if i % 2 == 0 {
            Classifier::small_cnn((6, 6, 1), 3, &mut rng)
        } else {
            Classifier::small_cnn((8, 8, 2), 4, &mut rng)
        };
        let (h, w, c) = model.input_shape;
        let shape = [h, w, c];
        // resample until the evaluation point is safely away from kinks
        let mut input = rand_tensor(&shape, 0.05, 0.95, &mut rng);
        let mut tries = 0;
        while common::kink_margin(&model, &input, 0) < 6e-3 {
            input = rand_tensor(&shape, 0.05, 0.95, &mut rng);
            tries += 1;
            if tries > 100 {
                continue 'outer;
            }
        }
        let label = i % model.num_classes;
        let analytic = model.input_grad_sample(&input, label).unwrap();
        let numeric = common::fd_input_grad(&model, &input, label, STEP);
        let e = common::rel_error(analytic.data(), &numeric);
        worst = worst.max(e);
        if e >= TOL {
            return Err(format!("input grad rel error {:.2e} at instance {}", e, i));
        }
        // one parameter tensor per instance, cycling through all of them
        let batch = input.clone().reshape(&[1, h, w, c]).unwrap();
        let (grads, _) = model.param_grad(&batch, &[label]).unwrap();
        let flat: Vec<&Tensor> = grads.iter().flat_map(|g| g.tensors.iter()).collect();
        let pi = i % flat.len();
        let numeric = common::fd_param_grad(&model, &input, label, pi, STEP);
        let e = common::rel_error(flat[pi].data(), &numeric);
        worst = worst.max(e);
        if e >= TOL {
            return Err(format!("param grad rel error {:.2e} at instance {}", e, i));
        }
        checked += 1;
        if checked >= 20 {
            break;
        }
    }
    if checked < 20 {
        return Err(format!("only {} well-conditioned instances found", checked));
    }
    Ok(format!("{} instances, worst rel error {:.2e}", checked, worst))
}

/// Post-projection norm equals min(norm, eta) within 1e-5 and Psi is
/// idempotent, for 100 random maps per eta in {1, 4.5, 30}.
fn c2_projection_law() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let mut worst = 0.0f32;
    for eta in [1.0f32, 4.5, 30.0] {
        for i in 0..100 {
            let mut nu = rand_tensor(&[32, 32, 3], -1.0, 1.0, &mut rng);
            nu.scale(rng.gen_range(0.0..3.0));
            let p = mapper::project(&nu, eta);
            let want = nu.l2_norm().min(eta);
            let err = (p.l2_norm() - want).abs();
            worst = worst.max(err);
            if err > 1e-5 {
                return Err(format!("eta {} map {}: norm error {:.2e}", eta, i, err));
            }
            let pp = mapper::project(&p, eta);
            if p.max_abs_diff(&pp) > 1e-6 {
                return Err(format!("eta {} map {}: not idempotent", eta, i));
            }
        }
    }
    Ok(format!("300 maps, worst norm error {:.2e}", worst))
}

/// The moment direction equals bias-corrected mu_hat/sqrt(sigma_hat) within
/// 1e-6 over 50-step random gradient streams, and equals sign(g) at k=1.
fn c3_adam_identity() -> Result<String, String> {
    let (b1, b2) = (0.9f32, 0.999f32);
    let mut rng = ChaCha8Rng::seed_from_u64(92);
    let mut worst = 0.0f32;
    for stream in 0..10 {
        let n = 64;
        let mut state = mapper::MapperState::new(&[n]);
        let mut mu = vec![0.0f32; n];
        let mut sigma = vec![0.0f32; n];
        for k in 1..=50 {
            let g = rand_tensor(&[n], -1.0, 1.0, &mut rng);
            let v = mapper::moment_direction(&mut state, &g, b1, b2);
            for i in 0..n {
                let gi = g.data()[i];
                mu[i] = b1 * mu[i] + (1.0 - b1) * gi;
                sigma[i] = b2 * sigma[i] + (1.0 - b2) * gi * gi;
                let mu_hat = mu[i] / (1.0 - b1.powi(k));
                let sigma_hat = sigma[i] / (1.0 - b2.powi(k));
                // the implementation's 1e-12 guard on sqrt(sigma), mapped
                // through the bias-correction algebra
                let eps = 1e-12 / ((1.0 - b2.powi(k)).sqrt() * (1.0 - b1.powi(k)));
                let reference = mu_hat / (sigma_hat.sqrt() + eps);
                let err = (v.data()[i] - reference).abs() / reference.abs().max(1.0);
                worst = worst.max(err);
                if err > 1e-6 {
                    return Err(format!(
                        "stream {} k {} i {}: v {} vs reference {}",
                        stream,
                        k,
                        i,
                        v.data()[i],
                        reference
                    ));
                }
                if k == 1 && gi.abs() > 1e-6 && (v.data()[i] - gi.signum()).abs() > 1e-4 {
                    return Err(format!("k=1 not sign(g): {} vs {}", v.data()[i], gi));
                }
            }
        }
    }
    Ok(format!("10 streams of 50, worst rel error {:.1e}", worst))
}

/// A 1e-3 step along -E[grad J_CE] raises the mean softmax probability of
/// the concept on a 128-sample batch, for every class.
fn c4_descent() -> Result<String, String> {
    let fx = fixtures();
    let mut rng = ChaCha8Rng::seed_from_u64(93);
    let mut order: Vec<usize> = (0..fx.train.len()).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let batch = stack(&fx.train, &order[..128]);
    let mut min_gain = f64::INFINITY;
    for class in 0..NUM_CLASSES {
        let g = mapper::expected_grad(&fx.model, &batch, class).unwrap();
        let norm = g.l2_norm();
        if norm == 0.0 {
            return Err(format!("class {}: zero expected gradient", class));
        }
        let mut step = g.clone();
        step.scale(-1e-3 / norm);
        let mut moved = batch.clone();
        let per = step.len();
        for (i, v) in moved.data_mut().iter_mut().enumerate() {
            *v += step.data()[i % per];
        }
        let before = mean_prob(&fx.model, &batch, class);
        let after = mean_prob(&fx.model, &moved, class);
        min_gain = min_gain.min(after - before);
        if after <= before {
            return Err(format!(
                "class {}: prob {} -> {} did not increase",
                class, before, after
            ));
        }
    }
    Ok(format!("all {} classes, min gain {:.2e}", NUM_CLASSES, min_gain))
}

/// Mean softmax probability of `label` over a batch, accumulated in f64.
fn mean_prob(model: &Classifier, batch: &Tensor, label: usize) -> f64 {
    let samples = micronet::split_batch(batch, model.input_shape).unwrap();
    let mut total = 0.0f64;
    for s in &samples {
        let logits = model.forward_sample(s).unwrap();
        total += micronet::softmax(logits.data())[label] as f64;
    }
    total / samples.len() as f64
}

/// Desk profile, 4 classes x 10 maps: m_score(s|s) >= 0.75 and >= 90% of
/// maps classified as their concept by the source model.
fn c5_fidelity() -> Result<String, String> {
    let fx = fixtures();
    let maps = desk_maps();
    let report = metrics::m_score(&fx.model, maps, NUM_CLASSES).unwrap();
    let hits = report
        .per_map_pred
        .iter()
        .filter(|(concept, pred)| concept == pred)
        .count();
    let frac = hits as f32 / maps.len() as f32;
    if report.m_score < 0.75 {
        return Err(format!("m_score(s|s) {} < 0.75", report.m_score));
    }
    if frac < 0.9 {
        return Err(format!(
            "only {}/{} maps classified as their concept",
            hits,
            maps.len()
        ));
    }
    Ok(format!(
        "m_score(s|s) {:.3}, {}/{} maps on concept",
        report.m_score,
        hits,
        maps.len()
    ))
}

/// Independently seeded target of >= 95% accuracy: m_score(t|s) >= 0.5 and
/// >= 1.5x the m_score of random-noise images under the same protocol.
fn c6_transfer() -> Result<String, String> {
    let fx = fixtures();
    let maps = desk_maps();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut target = Classifier::small_cnn((32, 32, 3), NUM_CLASSES, &mut rng);
    let tc = TrainConfig {
        epochs: 10,
        lr: 1e-3,
        batch_size: 32,
        seed: 7,
    };
    micronet::train(&mut target, &fx.train.images, &fx.train.labels, &tc).unwrap();
    let acc = micronet::evaluate(&target, &fx.test.images, &fx.test.labels).unwrap();
    if acc < 0.95 {
        return Err(format!("target accuracy {} < 0.95", acc));
    }
    let transfer = metrics::m_score(&target, maps, NUM_CLASSES).unwrap().m_score;
    // random-noise pseudo-maps under the identical protocol
    let mut noise_rng = ChaCha8Rng::seed_from_u64(94);
    let noise: Vec<SaliencyMap> = (0..maps.len())
        .map(|i| {
            let mut nu = rand_tensor(&[32, 32, 3], 0.0, 1.0, &mut noise_rng);
            nu.scale(-1.0); // rendering clip(-nu) recovers the noise image
            SaliencyMap {
                nu,
                concept_label: i / 10,
                norm_bound: 4.5,
            }
        })
        .collect();
    let noise_score = metrics::m_score(&target, &noise, NUM_CLASSES).unwrap().m_score;
    if transfer < 0.5 {
        return Err(format!("m_score(t|s) {} < 0.5", transfer));
    }
    if transfer < 1.5 * noise_score {
        return Err(format!(
            "m_score(t|s) {} < 1.5x noise score {}",
            transfer, noise_score
        ));
    }
    Ok(format!(
        "target acc {:.3}, m_score(t|s) {:.3}, noise {:.3}",
        acc, transfer, noise_score
    ))
}

/// Analytic endpoints: identical conditionals -> exactly 1/L; one-hot
/// conditionals with uniform coverage -> 1.0 within 1e-6.
fn c7_endpoints() -> Result<String, String> {
    // zero-weight model: every conditional is uniform and identical
    let flat = Classifier {
        layers: vec![
            Layer::Flatten,
            Layer::Dense {
                weight: Tensor::zeros(&[4, 16]),
                bias: Tensor::zeros(&[4]),
            },
        ],
        input_shape: (4, 4, 1),
        num_classes: 4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(95);
    let maps: Vec<SaliencyMap> = (0..8)
        .map(|i| SaliencyMap {
            nu: rand_tensor(&[4, 4, 1], -1.0, 1.0, &mut rng),
            concept_label: i % 4,
            norm_bound: 4.5,
        })
        .collect();
    let low = metrics::m_score(&flat, &maps, 4).unwrap().m_score;
    if (low - 0.25).abs() > 1e-9 {
        return Err(format!("identical conditionals gave {} not 0.25", low));
    }
    // row detectors: each class reads one image row; maps are row indicators,
    // so conditionals are one-hot with uniform concept coverage
    let mut weight = Tensor::zeros(&[4, 16]);
    for class in 0..4 {
        for x in 0..4 {
            weight.data_mut()[class * 16 + class * 4 + x] = 1000.0;
        }
    }
    let detector = Classifier {
        layers: vec![Layer::Flatten, Layer::Dense {
            weight,
            bias: Tensor::zeros(&[4]),
        }],
        input_shape: (4, 4, 1),
        num_classes: 4,
    };
    let maps: Vec<SaliencyMap> = (0..4)
        .map(|class| {
            let mut nu = Tensor::zeros(&[4, 4, 1]);
            for x in 0..4 {
                // negative so the clip(-nu) rendering is the row indicator
                nu.data_mut()[class * 4 + x] = -1.0;
            }
            SaliencyMap {
                nu,
                concept_label: class,
                norm_bound: 4.5,
            }
        })
        .collect();
    let high = metrics::m_score(&detector, &maps, 4).unwrap().m_score;
    if (high - 1.0).abs() > 1e-6 {
        return Err(format!("one-hot conditionals gave {} not 1.0", high));
    }
    Ok(format!("1/L endpoint {}, one-hot endpoint {}", low, high))
}

/// Three pinned (trigger, target-class) settings: compromised ratio >= 2x the
/// clean ratio, clean ratio within [0.5, 2].
fn c8_backdoor() -> Result<String, String> {
    let fx = fixtures();
    let settings = [
        (TriggerKind::SolidSquare, 0usize, 500u64),
        (TriggerKind::Checkerboard, 0, 600),
        (TriggerKind::CrossGlyph, 0, 700),
    ];
    let mut details = Vec::new();
    for (kind, target, scan_seed) in settings {
        let trig = TriggerSpec::corner(kind, 8, target, 0.1)
            .map_err(|e| format!("trigger spec: {}", e))?;
        let tc = TrainConfig {
            epochs: 10,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
        };
        let (bad, _, asr) = trojanscan::train_compromised(&fx.train, &fx.test, &trig, &tc, 7)
            .map_err(|e| format!("{:?} target {}: {}", kind, target, e))?;
        let mut cfg = ScanConfig::desk_scale(scan_seed);
        cfg.n_runs = 3;
        let report =
            trojanscan::scan(&bad, &fx.model, &fx.train, target, &trig.mask, &cfg, None)
                .map_err(|e| format!("scan: {}", e))?;
        if !(0.5..=2.0).contains(&report.clean_ratio) {
            return Err(format!(
                "{:?} target {}: clean ratio {} outside [0.5, 2]",
                kind, target, report.clean_ratio
            ));
        }
        if report.trigger_energy_ratio < 2.0 * report.clean_ratio {
            return Err(format!(
                "{:?} target {}: ratio {} < 2x clean {}",
                kind, target, report.trigger_energy_ratio, report.clean_ratio
            ));
        }
        details.push(format!(
            "{:?}@{}: asr {:.2}, ratio {:.2} vs clean {:.2}",
            kind, target, asr, report.trigger_energy_ratio, report.clean_ratio
        ));
    }
    Ok(details.join("; "))
}

/// Across each refinement round of 4 pinned runs, mean |nu| over pixels with
/// Xi < 0.1 (Xi frozen at the round's entry) does not increase.
fn c9_suppression() -> Result<String, String> {
    let fx = fixtures();
    let base = PipelineConfig::desk_scale(0);
    let mut rounds = 0usize;
    for concept in 0..NUM_CLASSES {
        let mut map = SaliencyMap::zero((32, 32, 3), concept, base.mapper.eta);
        for cycle in 0..base.cycles {
            let mut mcfg = base.mapper.clone();
            mcfg.seed = 3000 + (concept * 10 + cycle) as u64;
            map = mapper::run_mapper(&fx.model, &fx.train, concept, &mcfg, &map).unwrap();
            let xi = refiner::compute_xi(&fx.model, &map.nu).unwrap();
            let before = refiner::mean_abs_low_xi(&map.nu, &xi, 0.1);
            let mut rcfg = base.refine.clone();
            rcfg.seed = 4000 + (concept * 10 + cycle) as u64;
            map = refiner::refine(&fx.model, &fx.train, &map, &rcfg).unwrap();
            let after = refiner::mean_abs_low_xi(&map.nu, &xi, 0.1);
            if before.is_nan() {
                continue; // no suppressed pixels this round
            }
            rounds += 1;
            if after > before + 1e-6 {
                return Err(format!(
                    "concept {} cycle {}: low-Xi mean |nu| {} -> {}",
                    concept, cycle, before, after
                ));
            }
        }
    }
    Ok(format!("{} refinement rounds, none increased", rounds))
}

/// Repeated full-pipeline runs with identical seeds write byte-identical
/// .map checkpoints.
fn c10_determinism() -> Result<String, String> {
    let fx = fixtures();
    let cfg = PipelineConfig::desk_scale(0);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    for run in 0..2 {
        let map = pipeline::visualize_concept(&fx.model, &fx.train, 1, &cfg, 77).unwrap();
        let path = dir.path().join(format!("{}.map", run));
        pipeline::save_map(&path, &map, cfg.mapper.iterations as u64).unwrap();
        files.push(std::fs::read(&path).map_err(|e| e.to_string())?);
    }
    if files[0] != files[1] {
        return Err("repeated runs differ".into());
    }
    Ok(format!("{} bytes identical across runs", files[0].len()))
}
