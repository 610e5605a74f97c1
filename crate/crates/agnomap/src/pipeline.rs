//! Cycling driver: alternate the mapper and the refiner, manage seeding
//! between rounds, and export the final visualization.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::mapper::{self, MapperConfig, SaliencyMap};
use crate::micronet::checkpoint::{self, KIND_MAP};
use crate::micronet::Classifier;
use crate::pnm;
use crate::refiner::{self, RefineConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub mapper: MapperConfig,
    pub refine: RefineConfig,
    pub cycles: usize,
}

impl PipelineConfig {
    pub fn desk_scale(seed: u64) -> Self {
        PipelineConfig {
            mapper: MapperConfig::desk_scale(seed),
            refine: RefineConfig::desk_scale(4.5, seed),
            cycles: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cycles < 1 {
            return Err(Error::Input("cycles must be >= 1".into()));
        }
        self.mapper.validate()?;
        self.refine.validate()
    }
}

/// Derive a per-stage RNG stream from the run seed; cycle and stage get
/// disjoint streams.
fn stage_seed(run_seed: u64, cycle: usize, stage: u64) -> u64 {
    let mut z = run_seed
        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(1 + 2 * cycle as u64 + stage));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Round 1 seeds with the zero map; each cycle runs the mapper then the
/// refiner, and the refined map seeds the next cycle.
pub fn visualize_concept(
    model: &Classifier,
    dataset: &Dataset,
    label: usize,
    cfg: &PipelineConfig,
    run_seed: u64,
) -> Result<SaliencyMap> {
    cfg.validate()?;
    if label >= model.num_classes {
        return Err(Error::Input(format!("concept label {} out of range", label)));
    }
    let mut map = SaliencyMap::zero(model.input_shape, label, cfg.mapper.eta);
    for cycle in 0..cfg.cycles {
        let mut mcfg = cfg.mapper.clone();
        mcfg.seed = stage_seed(run_seed, cycle, 0);
        map = mapper::run_mapper(model, dataset, label, &mcfg, &map)?;
        let mut rcfg = cfg.refine.clone();
        rcfg.seed = stage_seed(run_seed, cycle, 1);
        map = refiner::refine(model, dataset, &map, &rcfg)?;
    }
    Ok(map)
}

/// Min-max normalize a map to [0,1] for display; a constant map becomes
/// mid-gray. Raw nu is never altered; this is export-only.
pub fn display_normalize(nu: &Tensor) -> Tensor {
    let lo = nu.data().iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = nu.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if !(hi > lo) {
        return Tensor::full(nu.shape(), 0.5);
    }
    let inv = 1.0 / (hi - lo);
    let mut out = nu.clone();
    for v in out.data_mut() {
        *v = (*v - lo) * inv;
    }
    out
}

/// Write the display-normalized map as a P6 PPM (P5 for single-channel).
pub fn export_map<P: AsRef<Path>>(map: &SaliencyMap, path: P) -> Result<()> {
    pnm::write_image(path, &display_normalize(&map.nu))
}

/// Map checkpoint: shared binary container storing nu plus (l_c, eta, k).
pub fn save_map<P: AsRef<Path>>(path: P, map: &SaliencyMap, iterations: u64) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    checkpoint::write_header(&mut w, KIND_MAP)?;
    w.write_u32::<LittleEndian>(map.concept_label as u32)?;
    w.write_f32::<LittleEndian>(map.norm_bound)?;
    w.write_u64::<LittleEndian>(iterations)?;
    checkpoint::write_tensor(&mut w, &map.nu)?;
    Ok(())
}

pub fn load_map<P: AsRef<Path>>(path: P) -> Result<(SaliencyMap, u64)> {
    let mut r = BufReader::new(File::open(path)?);
    checkpoint::read_header(&mut r, KIND_MAP)?;
    let concept_label = r.read_u32::<LittleEndian>()? as usize;
    let norm_bound = r.read_f32::<LittleEndian>()?;
    let iterations = r.read_u64::<LittleEndian>()?;
    let nu = checkpoint::read_tensor(&mut r)?;
    Ok((
        SaliencyMap {
            nu,
            concept_label,
            norm_bound,
        },
        iterations,
    ))
}
