//! Backdoor case study: train compromised classifiers, visualize the attack
//! target class, and score trigger presence in the resulting maps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::datagen::{self, Dataset, TriggerSpec};
use crate::error::{Error, Result};
use crate::mapper::SaliencyMap;
use crate::micronet::{self, Classifier, TrainConfig};
use crate::pipeline::{self, PipelineConfig};
use crate::tensor::Tensor;

const ENERGY_FLOOR: f32 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    CleanConsistent,
    BackdoorSuspect,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Verdict::CleanConsistent => f.write_str("clean-consistent"),
            Verdict::BackdoorSuspect => f.write_str("backdoor-suspect"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScanReport {
    /// Median mask-region energy ratio of the scanned model's maps.
    pub trigger_energy_ratio: f32,
    /// Same statistic on the clean reference model.
    pub clean_ratio: f32,
    pub map_paths: Vec<PathBuf>,
    pub verdict: Verdict,
    /// Suspect when scanned ratio >= threshold * clean ratio.
    pub threshold: f32,
}

#[derive(Debug, Clone)]
pub struct ScanConfig {
    pub pipeline: PipelineConfig,
    pub n_runs: usize,
    pub threshold: f32,
    pub base_seed: u64,
}

impl ScanConfig {
    /// Detection schedule: a shorter mapper run (80 iterations, one cycle)
    /// followed by a light refinement pass (lambda 20, 30 iterations). Long
    /// runs even out |nu| across the image; the refinement penalty then
    /// suppresses regions the model does not attend to, which keeps trigger
    /// energy high only on a compromised model.
    pub fn desk_scale(base_seed: u64) -> Self {
        let mut pipeline = PipelineConfig::desk_scale(base_seed);
        pipeline.mapper.iterations = 80;
        pipeline.cycles = 1;
        pipeline.refine.lambda = 20.0;
        pipeline.refine.iterations = 30;
        ScanConfig {
            pipeline,
            n_runs: 3,
            threshold: 2.0,
            base_seed,
        }
    }
}

/// Train a backdoored classifier on the poisoned training set until it holds
/// both operating points: clean accuracy >= 0.9 and attack success >= 0.95 on
/// held-out data. Retries with more epochs, then errors with measured rates.
pub fn train_compromised(
    train_ds: &Dataset,
    test_ds: &Dataset,
    trig: &TriggerSpec,
    cfg: &TrainConfig,
    arch_seed: u64,
) -> Result<(Classifier, f32, f32)> {
    trig.validate()?;
    if trig.target_label >= num_classes_of(train_ds) {
        return Err(Error::Input("trigger target label out of range".into()));
    }
    let poisoned = datagen::poison(train_ds, trig, cfg.seed ^ 0x5eed)?;
    let num_classes = num_classes_of(train_ds);
    let shape = image_shape(train_ds)?;
    let mut rng = rand::SeedableRng::seed_from_u64(arch_seed);
    let mut model = Classifier::small_cnn(shape, num_classes, &mut rng);
    let mut epochs = cfg.epochs;
    for attempt in 0..3 {
        let mut tc = cfg.clone();
        tc.epochs = epochs;
        tc.seed = cfg.seed.wrapping_add(attempt);
        micronet::train(&mut model, &poisoned.images, &poisoned.labels, &tc)?;
        let clean_acc = micronet::evaluate(&model, &test_ds.images, &test_ds.labels)?;
        let asr = attack_success_rate(&model, test_ds, trig)?;
        if clean_acc >= 0.9 && asr >= 0.95 {
            return Ok((model, clean_acc, asr));
        }
        epochs *= 2;
    }
    let clean_acc = micronet::evaluate(&model, &test_ds.images, &test_ds.labels)?;
    let asr = attack_success_rate(&model, test_ds, trig)?;
    Err(Error::Training(format!(
        "compromised model missed operating point: clean_acc={:.3}, attack_success={:.3}",
        clean_acc, asr
    )))
}

/// Fraction of triggered held-out images (true class != target) predicted as
/// the attack target.
pub fn attack_success_rate(model: &Classifier, ds: &Dataset, trig: &TriggerSpec) -> Result<f32> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (img, &label) in ds.images.iter().zip(&ds.labels) {
        if label == trig.target_label {
            continue;
        }
        let triggered = datagen::apply_trigger(img, trig)?;
        let logits = model.forward_sample(&triggered)?;
        if micronet::argmax(logits.data()) == trig.target_label {
            hits += 1;
        }
        total += 1;
    }
    if total == 0 {
        return Err(Error::Input("no non-target samples to trigger".into()));
    }
    Ok(hits as f32 / total as f32)
}

/// (mean |nu| inside mask) / (mean |nu| outside mask), denominator floored.
/// Uses only the mask region, never the trigger pattern's pixel values.
pub fn trigger_energy(map: &SaliencyMap, mask: &Tensor) -> Result<f32> {
    let shape = map.nu.shape();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if mask.shape() != [h, w] {
        return Err(Error::Input(format!(
            "mask shape {:?} does not match map {:?}",
            mask.shape(),
            shape
        )));
    }
    let (mut in_sum, mut in_n, mut out_sum, mut out_n) = (0.0f32, 0usize, 0.0f32, 0usize);
    for p in 0..h * w {
        let inside = mask.data()[p] != 0.0;
        for ch in 0..c {
            let v = map.nu.data()[p * c + ch].abs();
            if inside {
                in_sum += v;
                in_n += 1;
            } else {
                out_sum += v;
                out_n += 1;
            }
        }
    }
    if in_n == 0 || out_n == 0 {
        return Err(Error::Input("mask selects an empty region".into()));
    }
    let inside_mean = in_sum / in_n as f32;
    let outside_mean = (out_sum / out_n as f32).max(ENERGY_FLOOR);
    Ok(inside_mean / outside_mean)
}

/// Blind localization: threshold channel-mean |nu| at its 90th percentile and
/// return the largest 4-connected component as a candidate trigger mask.
pub fn blind_locate(map: &SaliencyMap) -> Tensor {
    let shape = map.nu.shape();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let mut mag = vec![0.0f32; h * w];
    for p in 0..h * w {
        let mut acc = 0.0;
        for ch in 0..c {
            acc += map.nu.data()[p * c + ch].abs();
        }
        mag[p] = acc / c as f32;
    }
    let mut sorted = mag.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let thresh = sorted[(0.9 * (sorted.len() - 1) as f32).round() as usize];
    let hot: Vec<bool> = mag.iter().map(|&v| v > thresh).collect();
    // flood fill for the largest component
    let mut seen = vec![false; h * w];
    let mut best: Vec<usize> = Vec::new();
    for start in 0..h * w {
        if !hot[start] || seen[start] {
            continue;
        }
        let mut comp = vec![start];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            let mut push = |q: usize| {
                if hot[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                    comp.push(q);
                }
            };
            if y > 0 {
                push(p - w);
            }
            if y + 1 < h {
                push(p + w);
            }
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < w {
                push(p + 1);
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    let mut mask = Tensor::zeros(&[h, w]);
    for p in best {
        mask.data_mut()[p] = 1.0;
    }
    mask
}

/// Visualize the target class `n_runs` times on both the scanned and the
/// clean reference model, compare median mask-region energies, and export the
/// maps for human inspection.
pub fn scan(
    model: &Classifier,
    clean_reference: &Classifier,
    dataset: &Dataset,
    target_class: usize,
    mask: &Tensor,
    cfg: &ScanConfig,
    out_dir: Option<&Path>,
) -> Result<ScanReport> {
    let mut scanned = Vec::with_capacity(cfg.n_runs);
    let mut clean = Vec::with_capacity(cfg.n_runs);
    let mut map_paths = Vec::new();
    for run in 0..cfg.n_runs {
        let seed = cfg.base_seed.wrapping_add(run as u64);
        let m = pipeline::visualize_concept(model, dataset, target_class, &cfg.pipeline, seed)?;
        scanned.push(trigger_energy(&m, mask)?);
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(format!("scan_{}_{}.ppm", target_class, run));
            pipeline::export_map(&m, &path)?;
            map_paths.push(path);
        }
        let r =
            pipeline::visualize_concept(clean_reference, dataset, target_class, &cfg.pipeline, seed)?;
        clean.push(trigger_energy(&r, mask)?);
    }
    let trigger_energy_ratio = median(&mut scanned);
    let clean_ratio = median(&mut clean);
    let verdict = if trigger_energy_ratio >= cfg.threshold * clean_ratio {
        Verdict::BackdoorSuspect
    } else {
        Verdict::CleanConsistent
    };
    Ok(ScanReport {
        trigger_energy_ratio,
        clean_ratio,
        map_paths,
        verdict,
        threshold: cfg.threshold,
    })
}

pub fn write_report<P: AsRef<Path>>(path: P, report: &ScanReport) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "verdict = {}", report.verdict)?;
    writeln!(w, "trigger_energy_ratio = {}", report.trigger_energy_ratio)?;
    writeln!(w, "clean_ratio = {}", report.clean_ratio)?;
    writeln!(w, "threshold = {}", report.threshold)?;
    for p in &report.map_paths {
        writeln!(w, "map = {}", p.display())?;
    }
    w.flush()?;
    Ok(())
}

fn median(values: &mut [f32]) -> f32 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn num_classes_of(ds: &Dataset) -> usize {
    ds.labels.iter().copied().max().map_or(0, |m| m + 1)
}

fn image_shape(ds: &Dataset) -> Result<(usize, usize, usize)> {
    let shape = ds.images[0].shape();
    if shape.len() != 3 {
        return Err(Error::Input("dataset images must be h,w,c".into()));
    }
    Ok((shape[0], shape[1], shape[2]))
}
