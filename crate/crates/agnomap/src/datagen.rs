//! Procedural generator for the labeled image distribution: anti-aliased
//! geometric shapes on a noise background, plus poisoned variants carrying a
//! visible backdoor trigger.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pnm;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
const BACKGROUND_NOISE: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Stripes,
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
            ShapeKind::Stripes => "stripes",
        };
        f.write_str(s)
    }
}

/// Inclusive jitter range; min == max pins the value.
#[derive(Debug, Clone, Copy)]
pub struct Jitter {
    pub min: f32,
    pub max: f32,
}

impl Jitter {
    pub fn new(min: f32, max: f32) -> Self {
        Jitter { min, max }
    }

    pub fn fixed(v: f32) -> Self {
        Jitter { min: v, max: v }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f32 {
        if self.min == self.max {
            self.min
        } else {
            rng.gen_range(self.min..self.max)
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.min > self.max || !self.min.is_finite() || !self.max.is_finite() {
            return Err(Error::Input(format!(
                "degenerate jitter range for {}: [{}, {}]",
                name, self.min, self.max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ConceptSpec {
    pub label: usize,
    pub shape_kind: ShapeKind,
    /// Shape radius as a fraction of the image side.
    pub size: Jitter,
    /// Center offset from image center, fraction of side, both axes.
    pub offset: Jitter,
    /// Rotation in radians.
    pub rotation: Jitter,
    /// Brightness multiplier applied to the base color.
    pub intensity: Jitter,
    /// Base RGB color of the shape.
    pub color: [f32; 3],
}

impl ConceptSpec {
    pub fn validate(&self) -> Result<()> {
        self.size.validate("size")?;
        self.offset.validate("offset")?;
        self.rotation.validate("rotation")?;
        self.intensity.validate("intensity")?;
        Ok(())
    }
}

/// The stock four-concept set used throughout the crate.
pub fn default_concepts() -> Vec<ConceptSpec> {
    let base = |label, shape_kind, color| ConceptSpec {
        label,
        shape_kind,
        size: Jitter::new(0.18, 0.32),
        offset: Jitter::new(-0.12, 0.12),
        rotation: Jitter::new(0.0, std::f32::consts::PI / 4.0),
        intensity: Jitter::new(0.6, 1.0),
        color,
    };
    vec![
        base(0, ShapeKind::Circle, [1.0, 0.85, 0.85]),
        base(1, ShapeKind::Square, [0.85, 1.0, 0.85]),
        base(2, ShapeKind::Triangle, [0.85, 0.85, 1.0]),
        base(3, ShapeKind::Cross, [1.0, 1.0, 0.8]),
    ]
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Render a balanced, seeded dataset of `|specs| * n_per_class` images with
/// pixels in [0,1]. Images are ordered class by class.
pub fn generate(specs: &[ConceptSpec], n_per_class: usize, seed: u64) -> Result<Dataset> {
    if specs.len() < 2 {
        return Err(Error::Input("need at least 2 concept specs".into()));
    }
    if n_per_class == 0 {
        return Err(Error::Input("n_per_class must be >= 1".into()));
    }
    for spec in specs {
        spec.validate()?;
    }
    let mut images = Vec::with_capacity(specs.len() * n_per_class);
    let mut labels = Vec::with_capacity(specs.len() * n_per_class);
    for spec in specs {
        for i in 0..n_per_class {
            let img_seed = seed
                .wrapping_mul(0x9e3779b97f4a7c15)
                .wrapping_add((spec.label as u64) << 32)
                .wrapping_add(i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(img_seed);
            images.push(render(spec, &mut rng));
            labels.push(spec.label);
        }
    }
    Ok(Dataset {
        images,
        labels,
        seed,
    })
}

/// Rasterize one sample of a concept. Anti-aliased via a signed distance
/// field with a ~1px smooth edge.
pub fn render(spec: &ConceptSpec, rng: &mut ChaCha8Rng) -> Tensor {
    let n = IMAGE_SIZE as f32;
    let radius = spec.size.sample(rng) * n;
    let cx = n / 2.0 + spec.offset.sample(rng) * n;
    let cy = n / 2.0 + spec.offset.sample(rng) * n;
    let rot = spec.rotation.sample(rng);
    let intensity = spec.intensity.sample(rng);
    let color = [
        spec.color[0] * intensity,
        spec.color[1] * intensity,
        spec.color[2] * intensity,
    ];
    let (sin_r, cos_r) = rot.sin_cos();
    let mut img = Tensor::zeros(&[IMAGE_SIZE, IMAGE_SIZE, CHANNELS]);
    let data = img.data_mut();
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            // rotate into the shape's local frame
            let dx = x as f32 + 0.5 - cx;
            let dy = y as f32 + 0.5 - cy;
            let px = dx * cos_r + dy * sin_r;
            let py = -dx * sin_r + dy * cos_r;
            let coverage = shape_coverage(spec.shape_kind, px, py, radius);
            let idx = (y * IMAGE_SIZE + x) * CHANNELS;
            for ch in 0..CHANNELS {
                let bg = rng.gen_range(0.0..BACKGROUND_NOISE);
                data[idx + ch] = (bg * (1.0 - coverage) + color[ch] * coverage).clamp(0.0, 1.0);
            }
        }
    }
    img
}

fn shape_coverage(kind: ShapeKind, px: f32, py: f32, r: f32) -> f32 {
    let d = match kind {
        ShapeKind::Circle => (px * px + py * py).sqrt() - r,
        ShapeKind::Square => px.abs().max(py.abs()) - r,
        ShapeKind::Triangle => {
            // equilateral triangle with circumradius r, apex up;
            // distance is the max over the three outward edge half-planes
            let inr = r / 2.0;
            let mut d = f32::NEG_INFINITY;
            for k in 0..3 {
                let a = std::f32::consts::FRAC_PI_2 + std::f32::consts::FRAC_PI_3 * (2 * k) as f32
                    + std::f32::consts::PI;
                d = d.max(px * a.cos() + py * a.sin() - inr);
            }
            d
        }
        ShapeKind::Cross => {
            let t = r * 0.35;
            let bar_h = (px.abs() - r).max(py.abs() - t);
            let bar_v = (px.abs() - t).max(py.abs() - r);
            bar_h.min(bar_v)
        }
        ShapeKind::Stripes => {
            let disc = (px * px + py * py).sqrt() - r;
            let period = (r * 0.6).max(2.0);
            let phase = (px / period) * std::f32::consts::TAU;
            // signed distance surrogate for alternating bands inside the disc
            let band = -phase.sin() * period / std::f32::consts::TAU;
            disc.max(band)
        }
    };
    // ~1px anti-aliased edge
    (0.5 - d).clamp(0.0, 1.0)
}

#[derive(Debug, Clone)]
pub struct TriggerSpec {
    /// Binary [h,w] mask, nonzero on the trigger footprint.
    pub mask: Tensor,
    /// [h,w,c] replacement pattern in [0,1].
    pub pattern: Tensor,
    pub target_label: usize,
    pub poison_fraction: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriggerKind {
    SolidSquare,
    Checkerboard,
    CrossGlyph,
}

impl fmt::Display for TriggerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TriggerKind::SolidSquare => "solid-square",
            TriggerKind::Checkerboard => "checkerboard",
            TriggerKind::CrossGlyph => "cross-glyph",
        };
        f.write_str(s)
    }
}

impl TriggerSpec {
    /// A `side`x`side` trigger anchored at the top-left corner (1px inset).
    pub fn corner(
        kind: TriggerKind,
        side: usize,
        target_label: usize,
        poison_fraction: f32,
    ) -> Result<Self> {
        let (h, w, c) = (IMAGE_SIZE, IMAGE_SIZE, CHANNELS);
        if side == 0 || side + 1 > h || side + 1 > w {
            return Err(Error::Input(format!("bad trigger side {}", side)));
        }
        let mut mask = Tensor::zeros(&[h, w]);
        let mut pattern = Tensor::zeros(&[h, w, c]);
        for y in 0..side {
            for x in 0..side {
                let (iy, ix) = (y + 1, x + 1);
                let on = match kind {
                    TriggerKind::SolidSquare => true,
                    TriggerKind::Checkerboard => true,
                    TriggerKind::CrossGlyph => {
                        let mid = side / 2;
                        let band = (side / 4).max(1);
                        y.abs_diff(mid) < band || x.abs_diff(mid) < band
                    }
                };
                if !on {
                    continue;
                }
                mask.data_mut()[iy * w + ix] = 1.0;
                let v = match kind {
                    TriggerKind::Checkerboard => {
                        if (y + x) % 2 == 0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    _ => 1.0,
                };
                for ch in 0..c {
                    pattern.data_mut()[(iy * w + ix) * c + ch] = v;
                }
            }
        }
        let spec = TriggerSpec {
            mask,
            pattern,
            target_label,
            poison_fraction,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Visible-trigger regime: footprint covers at most 15% of pixels.
    pub fn validate(&self) -> Result<()> {
        let [h, w] = [self.mask.shape()[0], self.mask.shape()[1]];
        let on = self.mask.data().iter().filter(|&&v| v != 0.0).count();
        if on == 0 {
            return Err(Error::Input("trigger mask is empty".into()));
        }
        if on as f32 > 0.15 * (h * w) as f32 {
            return Err(Error::Input(format!(
                "trigger covers {} of {} pixels, above the 15% visible-trigger cap",
                on,
                h * w
            )));
        }
        if !(0.0 < self.poison_fraction && self.poison_fraction <= 1.0) {
            return Err(Error::Input(format!(
                "poison_fraction {} outside (0,1]",
                self.poison_fraction
            )));
        }
        Ok(())
    }
}

/// Composite: out = img*(1-mask) + pattern*mask, clipped to [0,1].
pub fn apply_trigger(img: &Tensor, trig: &TriggerSpec) -> Result<Tensor> {
    let shape = img.shape();
    if shape != trig.pattern.shape() {
        return Err(Error::Input(format!(
            "image shape {:?} does not match trigger pattern {:?}",
            shape,
            trig.pattern.shape()
        )));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if trig.mask.shape() != [h, w] {
        return Err(Error::Input("trigger mask shape mismatch".into()));
    }
    let mut out = img.clone();
    let od = out.data_mut();
    let md = trig.mask.data();
    let pd = trig.pattern.data();
    for y in 0..h {
        for x in 0..w {
            let m = md[y * w + x];
            if m == 0.0 {
                continue;
            }
            for ch in 0..c {
                let idx = (y * w + x) * c + ch;
                od[idx] = (od[idx] * (1.0 - m) + pd[idx] * m).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Apply the trigger to a seeded floor(fraction*n)-sized subset and rewrite
/// those labels to the attack target.
pub fn poison(ds: &Dataset, trig: &TriggerSpec, seed: u64) -> Result<Dataset> {
    trig.validate()?;
    let n = ds.len();
    let n_poison = (trig.poison_fraction * n as f32).floor() as usize;
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let chosen: std::collections::HashSet<usize> = indices[..n_poison].iter().copied().collect();
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        if chosen.contains(&i) {
            images.push(apply_trigger(&ds.images[i], trig)?);
            labels.push(trig.target_label);
        } else {
            images.push(ds.images[i].clone());
            labels.push(ds.labels[i]);
        }
    }
    Ok(Dataset {
        images,
        labels,
        seed: ds.seed,
    })
}

/// Export as a directory of PGM/PPM files plus labels.tsv (filename TAB label).
pub fn export_dir<P: AsRef<Path>>(dir: P, ds: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut tsv = std::io::BufWriter::new(fs::File::create(dir.join("labels.tsv"))?);
    for (i, (img, label)) in ds.images.iter().zip(&ds.labels).enumerate() {
        let ext = if img.shape().len() == 3 && img.shape()[2] == 3 {
            "ppm"
        } else {
            "pgm"
        };
        let name = format!("{:06}.{}", i, ext);
        pnm::write_image(dir.join(&name), img)?;
        writeln!(tsv, "{}\t{}", name, label)?;
    }
    tsv.flush()?;
    Ok(())
}

pub fn import_dir<P: AsRef<Path>>(dir: P) -> Result<Dataset> {
    let dir = dir.as_ref();
    let tsv = fs::read_to_string(dir.join("labels.tsv"))?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in tsv.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (name, label) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("labels.tsv line {}: missing TAB", lineno + 1)))?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("labels.tsv line {}: bad label", lineno + 1)))?;
        images.push(pnm::read_image(dir.join(name))?);
        labels.push(label);
    }
    if images.is_empty() {
        return Err(Error::Input("no images listed in labels.tsv".into()));
    }
    Ok(Dataset {
        images,
        labels,
        seed: 0,
    })
}
