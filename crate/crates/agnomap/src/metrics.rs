//! Model-score evaluation: per-map conditional class distributions under a
//! target classifier, their marginal, KL divergence, and the aggregate score
//! exp(E[KL(cond || marg)]) / L.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mapper::SaliencyMap;
use crate::micronet::{self, Classifier};

const KL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct ScoreReport {
    pub m_score: f32,
    pub per_map_kl: Vec<f32>,
    pub marginal: Vec<f32>,
    /// Concept label and predicted label per map, aligned with per_map_kl.
    pub per_map_pred: Vec<(usize, usize)>,
    pub source_id: String,
    pub target_id: String,
}

/// Softmax of the target model's logits on the map rendered as an image:
/// clip(-nu, 0, 1), the map nudging an all-black input. The concept content
/// of nu lives in its negation (the mapper ascends the loss of clip(I - nu)),
/// and clipping keeps the rendering in the training dynamic range.
pub fn conditional_dist(target: &Classifier, map: &SaliencyMap) -> Result<Vec<f32>> {
    let img = render(&map.nu);
    let (h, w, c) = target.input_shape;
    if img.shape() != [h, w, c] {
        return Err(Error::Input(format!(
            "map shape {:?} does not match target input {:?}",
            img.shape(),
            (h, w, c)
        )));
    }
    let logits = target.forward_sample(&img)?;
    Ok(micronet::softmax(logits.data()))
}

/// The scoring rendering of a map: clip(-nu, 0, 1).
pub fn render(nu: &crate::Tensor) -> crate::Tensor {
    let mut img = nu.clone();
    img.scale(-1.0);
    img.clamp(0.0, 1.0);
    img
}

/// Arithmetic mean of the conditionals (normalized sum).
pub fn marginal_dist(conditionals: &[Vec<f32>]) -> Result<Vec<f32>> {
    let first = conditionals
        .first()
        .ok_or_else(|| Error::Input("no conditionals".into()))?;
    let mut out = vec![0.0f32; first.len()];
    for cond in conditionals {
        for (o, v) in out.iter_mut().zip(cond) {
            *o += v;
        }
    }
    let inv = 1.0 / conditionals.len() as f32;
    for o in &mut out {
        *o *= inv;
    }
    Ok(out)
}

/// KL(p || q) with q floored at 1e-12 and 0*log(0/.) = 0.
pub fn kl(p: &[f32], q: &[f32]) -> f32 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            let pi = pi as f64;
            if pi <= 0.0 {
                0.0
            } else {
                pi * (pi / (qi as f64).max(KL_FLOOR)).ln()
            }
        })
        .sum::<f64>() as f32
}

/// Aggregate score over a set of maps under a target classifier.
/// `num_concepts` is L, the number of visualized concepts.
pub fn m_score(
    target: &Classifier,
    maps: &[SaliencyMap],
    num_concepts: usize,
) -> Result<ScoreReport> {
    if maps.is_empty() {
        return Err(Error::Input("no maps to score".into()));
    }
    if num_concepts == 0 {
        return Err(Error::Input("num_concepts must be >= 1".into()));
    }
    let conditionals: Vec<Vec<f32>> = maps
        .iter()
        .map(|m| conditional_dist(target, m))
        .collect::<Result<_>>()?;
    let marginal = marginal_dist(&conditionals)?;
    let per_map_kl: Vec<f32> = conditionals.iter().map(|c| kl(c, &marginal)).collect();
    let mean_kl = per_map_kl.iter().map(|&v| v as f64).sum::<f64>() / per_map_kl.len() as f64;
    let score = (mean_kl.exp() / num_concepts as f64) as f32;
    let per_map_pred = maps
        .iter()
        .zip(&conditionals)
        .map(|(m, c)| (m.concept_label, argmax_f(c)))
        .collect();
    Ok(ScoreReport {
        m_score: score,
        per_map_kl,
        marginal,
        per_map_pred,
        source_id: String::new(),
        target_id: String::new(),
    })
}

fn argmax_f(v: &[f32]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Plain-text report: key=value header plus a per-map TSV
/// (concept, predicted_label, kl).
pub fn write_report<P: AsRef<Path>>(path: P, report: &ScoreReport) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "source = {}", report.source_id)?;
    writeln!(w, "target = {}", report.target_id)?;
    writeln!(w, "m_score = {}", report.m_score)?;
    let marg: Vec<String> = report.marginal.iter().map(|v| v.to_string()).collect();
    writeln!(w, "marginal = {}", marg.join(","))?;
    writeln!(w)?;
    writeln!(w, "concept\tpredicted_label\tkl")?;
    for ((concept, pred), klv) in report.per_map_pred.iter().zip(&report.per_map_kl) {
        writeln!(w, "{}\t{}\t{}", concept, pred, klv)?;
    }
    w.flush()?;
    Ok(())
}
