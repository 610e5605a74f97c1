//! Command-line frontend: dataset generation, training, visualization,
//! scoring, and backdoor scanning with reproducible config files.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use agnomap::config::{self, RunConfig};
use agnomap::datagen::{self, TriggerSpec};
use agnomap::mapper::SaliencyMap;
use agnomap::metrics;
use agnomap::micronet::{self, TrainConfig};
use agnomap::pipeline;
use agnomap::trojanscan::{self, ScanConfig};
use agnomap::{Error, Result};

#[derive(Parser)]
#[command(name = "agnomap", about = "Input-agnostic saliency mapping toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key = value config file; flags override its entries
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed override
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shape dataset into a directory.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_per_class: Option<usize>,
    },
    /// Train a classifier on a generated dataset directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Model checkpoint to write
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Held-out dataset directory for the printed accuracy
        #[arg(long)]
        eval: Option<PathBuf>,
    },
    /// Train a backdoored classifier on a poisoned copy of the dataset.
    Poison {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Held-out dataset directory for the operating-point check
        #[arg(long)]
        eval: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// solid-square, checkerboard, or cross-glyph
        #[arg(long)]
        trigger: Option<String>,
        #[arg(long)]
        trigger_side: Option<usize>,
        #[arg(long)]
        target_label: Option<usize>,
        #[arg(long)]
        poison_fraction: Option<f32>,
    },
    /// Visualize one concept of a trained model as a saliency map.
    Map {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        concept: usize,
        /// Root output directory; maps land in <out>/<model>/<concept>/
        #[arg(long, default_value = "maps")]
        out: PathBuf,
    },
    /// Score a directory of .map checkpoints under a target model.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        maps: PathBuf,
        #[arg(long, default_value = "score_report.txt")]
        out: PathBuf,
    },
    /// Compare a model's target-class maps against a clean reference.
    Scan {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        target_label: Option<usize>,
        #[arg(long)]
        trigger: Option<String>,
        #[arg(long)]
        trigger_side: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Some(v) = std::env::var_os("AGNOMAP_THREADS") {
        // accepted for forward compatibility; compute is single-threaded
        if v.to_string_lossy().parse::<usize>().is_err() {
            eprintln!("error: AGNOMAP_THREADS must be an integer");
            std::process::exit(2);
        }
    }
    if let Err(e) = run(cli.command) {
        eprintln!("error: {}", e);
        let code = match e {
            Error::Input(_) | Error::Config(_) => 2,
            _ => 1,
        };
        std::process::exit(code);
    }
}

/// Load --config if given and apply flag overrides on top.
fn load_config(common: &Common, overrides: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            require_file("--config", path)?;
            RunConfig::from_file(path)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    for (key, value) in overrides {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_file(key: &str, path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::Input(format!(
            "{}: no such file {}",
            key,
            path.display()
        )));
    }
    Ok(())
}

fn opt_str<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(|x| x.to_string())
}

fn write_meta(dir: &Path, cfg: &RunConfig, extra: &[(&str, String)]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("meta.txt"), cfg.resolved(extra))?;
    Ok(())
}

fn train_config(cfg: &RunConfig) -> Result<TrainConfig> {
    Ok(TrainConfig {
        epochs: cfg.epochs()?,
        lr: cfg.train_lr()?,
        batch_size: cfg.train_batch()?,
        seed: cfg.seed()?,
    })
}

fn trigger_from(cfg: &RunConfig) -> Result<TriggerSpec> {
    let kind = config::trigger_kind(cfg.get("trigger").unwrap_or("solid-square"))?;
    TriggerSpec::corner(
        kind,
        cfg.trigger_side()?,
        cfg.target_label()?,
        cfg.poison_fraction()?,
    )
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen {
            common,
            out,
            n_per_class,
        } => {
            let cfg = load_config(&common, &[("n_per_class", opt_str(&n_per_class))])?;
            let ds = datagen::generate(
                &datagen::default_concepts(),
                cfg.n_per_class()?,
                cfg.seed()?,
            )?;
            datagen::export_dir(&out, &ds)?;
            write_meta(&out, &cfg, &[])?;
            println!("wrote {} images to {}", ds.len(), out.display());
            Ok(())
        }
        Command::Train {
            common,
            data,
            out,
            epochs,
            eval,
        } => {
            require_file("--data", &data)?;
            let cfg = load_config(&common, &[("epochs", opt_str(&epochs))])?;
            let ds = datagen::import_dir(&data)?;
            let shape = ds.images[0].shape();
            let num_classes = ds.labels.iter().copied().max().map_or(0, |m| m + 1);
            let mut rng: rand_chacha::ChaCha8Rng = rand::SeedableRng::seed_from_u64(cfg.seed()?);
            let mut model = micronet::Classifier::small_cnn(
                (shape[0], shape[1], shape[2]),
                num_classes,
                &mut rng,
            );
            let tc = train_config(&cfg)?;
            let report = micronet::train(&mut model, &ds.images, &ds.labels, &tc)?;
            let acc = match &eval {
                Some(dir) => {
                    require_file("--eval", dir)?;
                    let test = datagen::import_dir(dir)?;
                    micronet::evaluate(&model, &test.images, &test.labels)?
                }
                None => micronet::evaluate(&model, &ds.images, &ds.labels)?,
            };
            micronet::save_model(&out, &model)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                write_meta(parent, &cfg, &[("final_score", acc.to_string())])?;
            }
            println!(
                "trained {} epochs, final loss {:.4}, accuracy {:.4}",
                tc.epochs, report.final_loss, acc
            );
            Ok(())
        }
        Command::Poison {
            common,
            data,
            eval,
            out,
            trigger,
            trigger_side,
            target_label,
            poison_fraction,
        } => {
            require_file("--data", &data)?;
            require_file("--eval", &eval)?;
            let cfg = load_config(
                &common,
                &[
                    ("trigger", trigger.clone()),
                    ("trigger_side", opt_str(&trigger_side)),
                    ("target_label", opt_str(&target_label)),
                    ("poison_fraction", opt_str(&poison_fraction)),
                ],
            )?;
            let train_ds = datagen::import_dir(&data)?;
            let test_ds = datagen::import_dir(&eval)?;
            let trig = trigger_from(&cfg)?;
            let tc = train_config(&cfg)?;
            let (model, clean_acc, asr) =
                trojanscan::train_compromised(&train_ds, &test_ds, &trig, &tc, cfg.seed()?)?;
            micronet::save_model(&out, &model)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                write_meta(parent, &cfg, &[("final_score", asr.to_string())])?;
            }
            println!(
                "compromised model: clean accuracy {:.4}, attack success {:.4}",
                clean_acc, asr
            );
            Ok(())
        }
        Command::Map {
            common,
            model,
            data,
            concept,
            out,
        } => {
            require_file("--model", &model)?;
            require_file("--data", &data)?;
            let cfg = load_config(&common, &[("concept", Some(concept.to_string()))])?;
            let net = micronet::load_model(&model)?;
            let ds = datagen::import_dir(&data)?;
            let pcfg = cfg.pipeline()?;
            let seed = cfg.seed()?;
            let map = pipeline::visualize_concept(&net, &ds, concept, &pcfg, seed)?;
            let stem = model
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "model".into());
            let dir = out.join(stem).join(concept.to_string());
            std::fs::create_dir_all(&dir)?;
            pipeline::export_map(&map, dir.join(format!("{}.ppm", seed)))?;
            let total_iters = (pcfg.mapper.iterations + pcfg.refine.iterations) * pcfg.cycles;
            pipeline::save_map(dir.join(format!("{}.map", seed)), &map, total_iters as u64)?;
            // final_score: mean softmax probability of the concept on the
            // nudged dataset under the source model
            let indices: Vec<usize> = (0..ds.len()).collect();
            let batch = stack_all(&ds, net.input_shape, &indices)?;
            let nudged = agnomap::mapper::nudge_batch(&batch, &map.nu);
            let score = agnomap::mapper::probe_score(
                &net,
                &nudged,
                concept,
                agnomap::mapper::ProbeMode::Probability,
            )?;
            write_meta(&dir, &cfg, &[("final_score", score.to_string())])?;
            println!("map norm {:.4}, concept score {:.4}", map.nu.l2_norm(), score);
            Ok(())
        }
        Command::Score {
            common,
            model,
            maps,
            out,
        } => {
            require_file("--model", &model)?;
            require_file("--maps", &maps)?;
            let _cfg = load_config(&common, &[])?;
            let net = micronet::load_model(&model)?;
            let loaded = load_maps(&maps)?;
            let mut report = metrics::m_score(&net, &loaded, net.num_classes)?;
            report.source_id = maps.display().to_string();
            report.target_id = model.display().to_string();
            metrics::write_report(&out, &report)?;
            println!("m_score = {}", report.m_score);
            Ok(())
        }
        Command::Scan {
            common,
            model,
            reference,
            data,
            target_label,
            trigger,
            trigger_side,
            out,
        } => {
            require_file("--model", &model)?;
            require_file("--reference", &reference)?;
            require_file("--data", &data)?;
            let mut cfg = load_config(
                &common,
                &[
                    ("target_label", opt_str(&target_label)),
                    ("trigger", trigger.clone()),
                    ("trigger_side", opt_str(&trigger_side)),
                ],
            )?;
            // scan defaults to the detection schedule unless the run pins its own
            let pipeline_keys = ["profile", "b", "k", "eta", "refine_iterations", "lambda", "cycles"];
            if pipeline_keys.iter().all(|k| cfg.get(k).is_none()) {
                cfg.set("profile", "scan")?;
            }
            let net = micronet::load_model(&model)?;
            let reference_net = micronet::load_model(&reference)?;
            let ds = datagen::import_dir(&data)?;
            let trig = trigger_from(&cfg)?;
            let scfg = ScanConfig {
                pipeline: cfg.pipeline()?,
                n_runs: cfg.n_runs()?,
                threshold: cfg.scan_threshold()?,
                base_seed: cfg.seed()?,
            };
            let report = trojanscan::scan(
                &net,
                &reference_net,
                &ds,
                cfg.target_label()?,
                &trig.mask,
                &scfg,
                Some(&out),
            )?;
            trojanscan::write_report(out.join("scan_report.txt"), &report)?;
            write_meta(&out, &cfg, &[("final_score", report.trigger_energy_ratio.to_string())])?;
            println!(
                "verdict = {} (ratio {:.3} vs clean {:.3})",
                report.verdict, report.trigger_energy_ratio, report.clean_ratio
            );
            Ok(())
        }
    }
}

fn stack_all(
    ds: &datagen::Dataset,
    shape: (usize, usize, usize),
    indices: &[usize],
) -> Result<agnomap::Tensor> {
    let (h, w, c) = shape;
    let mut data = Vec::with_capacity(indices.len() * h * w * c);
    for &i in indices {
        data.extend_from_slice(ds.images[i].data());
    }
    agnomap::Tensor::from_vec(&[indices.len(), h, w, c], data)
}

/// Load every .map file under a directory, sorted by file name.
fn load_maps(dir: &Path) -> Result<Vec<SaliencyMap>> {
    let mut paths = Vec::new();
    collect_maps(dir, &mut paths)?;
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Input(format!(
            "--maps: no .map files under {}",
            dir.display()
        )));
    }
    paths
        .iter()
        .map(|p| pipeline::load_map(p).map(|(m, _)| m))
        .collect()
}

fn collect_maps(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_maps(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "map") {
            out.push(path);
        }
    }
    Ok(())
}
