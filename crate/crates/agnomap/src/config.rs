//! Line-oriented `key = value` run configuration with `#` comments.
//! Unknown keys are rejected; numeric keys are validated up front.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mapper::{MapperConfig, ProbeMode};
use crate::pipeline::PipelineConfig;
use crate::refiner::RefineConfig;

/// Every key a config file or meta.txt may carry. `final_score` is written
/// by runs and accepted (ignored) on re-load so a meta.txt replays as-is.
const KNOWN_KEYS: &[&str] = &[
    "profile",
    "seed",
    "concept",
    "b",
    "k",
    "eta",
    "beta1",
    "beta2",
    "probe",
    "refine_iterations",
    "lambda",
    "refine_lr",
    "cycles",
    "n_per_class",
    "epochs",
    "train_lr",
    "train_batch",
    "trigger",
    "trigger_side",
    "target_label",
    "poison_fraction",
    "n_runs",
    "scan_threshold",
    "maps_per_class",
    "final_score",
];

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn from_file<P: AsRef<Path>>(path: P) -> Result<Self> {
        let text = std::fs::read_to_string(&path)?;
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Input(format!("config line {}: expected key = value", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Input(format!("unknown config key {:?}", key)));
        }
        if key == "profile" {
            // expand profile defaults first so explicit keys can override them
            let defaults: &[(&str, &str)] = match value {
                "desk" => &[
                    ("b", "32"),
                    ("k", "150"),
                    ("eta", "4.5"),
                    ("refine_iterations", "60"),
                    ("cycles", "2"),
                ],
                "paper" => &[
                    ("b", "128"),
                    ("k", "650"),
                    ("eta", "30"),
                    ("refine_iterations", "150"),
                    ("cycles", "2"),
                ],
                "scan" => &[
                    ("b", "32"),
                    ("k", "80"),
                    ("eta", "4.5"),
                    ("refine_iterations", "30"),
                    ("lambda", "20"),
                    ("cycles", "1"),
                ],
                other => {
                    return Err(Error::Input(format!(
                        "unknown profile {:?} (expected desk, paper, or scan)",
                        other
                    )))
                }
            };
            for (k, v) in defaults {
                self.values.insert((*k).into(), (*v).into());
            }
        }
        self.values.insert(key.into(), value.into());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Input(format!("config key {:?}: bad value {:?}", key, v))),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed", 0)
    }

    pub fn n_per_class(&self) -> Result<usize> {
        self.parse("n_per_class", 500)
    }

    pub fn epochs(&self) -> Result<usize> {
        self.parse("epochs", 10)
    }

    pub fn train_lr(&self) -> Result<f32> {
        self.parse("train_lr", 1e-3)
    }

    pub fn train_batch(&self) -> Result<usize> {
        self.parse("train_batch", 32)
    }

    pub fn n_runs(&self) -> Result<usize> {
        self.parse("n_runs", 3)
    }

    pub fn scan_threshold(&self) -> Result<f32> {
        self.parse("scan_threshold", 2.0)
    }

    pub fn maps_per_class(&self) -> Result<usize> {
        self.parse("maps_per_class", 10)
    }

    pub fn trigger_side(&self) -> Result<usize> {
        self.parse("trigger_side", 8)
    }

    pub fn target_label(&self) -> Result<usize> {
        self.parse("target_label", 0)
    }

    pub fn poison_fraction(&self) -> Result<f32> {
        self.parse("poison_fraction", 0.1)
    }

    pub fn concept(&self) -> Result<Option<usize>> {
        match self.values.get("concept") {
            None => Ok(None),
            Some(_) => self.parse("concept", 0).map(Some),
        }
    }

    /// Assemble the pipeline configuration; desk profile unless overridden.
    pub fn pipeline(&self) -> Result<PipelineConfig> {
        let seed = self.seed()?;
        let eta = self.parse("eta", 4.5f32)?;
        let probe = match self.get("probe").unwrap_or("probability") {
            "probability" => ProbeMode::Probability,
            "rate" => ProbeMode::PredictionRate,
            other => {
                return Err(Error::Input(format!(
                    "config key \"probe\": bad value {:?} (expected probability or rate)",
                    other
                )))
            }
        };
        let cfg = PipelineConfig {
            mapper: MapperConfig {
                batch_size: self.parse("b", 32)?,
                iterations: self.parse("k", 150)?,
                eta,
                beta1: self.parse("beta1", 0.9f32)?,
                beta2: self.parse("beta2", 0.999f32)?,
                probe,
                seed,
            },
            refine: RefineConfig {
                lambda: self.parse("lambda", 50.0f32)?,
                iterations: self.parse("refine_iterations", 60)?,
                lr: self.parse("refine_lr", 0.05f32)?,
                eta,
                batch_size: self.parse("b", 32)?,
                seed,
            },
            cycles: self.parse("cycles", 2)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Check every numeric key against module invariants before any work.
    pub fn validate(&self) -> Result<()> {
        self.pipeline()?;
        self.seed()?;
        if self.n_per_class()? == 0 {
            return Err(Error::Input("n_per_class must be >= 1".into()));
        }
        if self.train_batch()? == 0 {
            return Err(Error::Input("train_batch must be >= 1".into()));
        }
        let f = self.poison_fraction()?;
        if !(0.0 < f && f <= 1.0) {
            return Err(Error::Input("poison_fraction must be in (0,1]".into()));
        }
        if self.n_runs()? == 0 {
            return Err(Error::Input("n_runs must be >= 1".into()));
        }
        if self.maps_per_class()? == 0 {
            return Err(Error::Input("maps_per_class must be >= 1".into()));
        }
        if let Some(t) = self.get("trigger") {
            trigger_kind(t)?;
        }
        Ok(())
    }

    /// Fully resolved view for meta.txt; re-running from it reproduces the run.
    pub fn resolved(&self, extra: &[(&str, String)]) -> String {
        let mut map = self.values.clone();
        map.remove("profile");
        let defaults: &[(&str, &str)] = &[
            ("seed", "0"),
            ("b", "32"),
            ("k", "150"),
            ("eta", "4.5"),
            ("beta1", "0.9"),
            ("beta2", "0.999"),
            ("probe", "probability"),
            ("refine_iterations", "60"),
            ("lambda", "50"),
            ("refine_lr", "0.05"),
            ("cycles", "2"),
        ];
        for (k, v) in defaults {
            map.entry((*k).into()).or_insert_with(|| (*v).into());
        }
        for (k, v) in extra {
            map.insert((*k).to_string(), v.clone());
        }
        let mut out = String::new();
        for (k, v) in &map {
            let _ = writeln!(out, "{} = {}", k, v);
        }
        out
    }
}

pub fn trigger_kind(name: &str) -> Result<crate::datagen::TriggerKind> {
    use crate::datagen::TriggerKind::*;
    match name {
        "solid-square" => Ok(SolidSquare),
        "checkerboard" => Ok(Checkerboard),
        "cross-glyph" => Ok(CrossGlyph),
        other => Err(Error::Input(format!(
            "config key \"trigger\": bad value {:?}",
            other
        ))),
    }
}
