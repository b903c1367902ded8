//! Command-line front end.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors, 1 for
//! pipeline failures. Failures also print one JSON line on stderr:
//! `{"error":{"kind":"empty_bank","message":"..."}}`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::augment::augment_sample;
use crate::blend::PlacementRecord;
use crate::cam::{self, predict_mask, Augmentation, TrainReport};
use crate::error::{Error, Result};
use crate::experiment::{ablation_axes, arm_table, evaluate, run_experiment, run_sweep, ExperimentConfig, SweepReport};
use crate::harvest::harvest;
use crate::io;
use crate::raster::CategoryMask;
use crate::rng::RngStream;
use crate::sample::Sample;
use crate::synth::gen_corpus;

pub const EXIT_OK: i32 = 0;
pub const EXIT_PIPELINE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "ctxpaste",
    version,
    about = "Context-decoupling copy-paste augmentation toolkit"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with manifest.
    Synth {
        /// Number of scenes (defaults to train_size).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Build an instance bank from a corpus and predicted masks.
    Harvest {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory of `<id>.png` predicted masks.
        #[arg(long, conflicts_with = "model")]
        pred_dir: Option<PathBuf>,
        /// Predict masks with this model instead.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Write augmented samples for inspection.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
    /// Train a model, with augmentation when a bank is given.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Held-out corpus for average precision.
        #[arg(long)]
        holdout: Option<PathBuf>,
    },
    /// Score a model's thresholded CAMs against ground truth.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Run the baseline and decoupled arms end to end.
    Experiment {
        /// Ablation axis to sweep: an axis name, `all`, or `config` for the
        /// overrides listed in the config file.
        #[arg(long)]
        sweep: Option<String>,
        /// Skip raster dumps.
        #[arg(long)]
        no_dump: bool,
    },
    /// Write CAM heatmaps and pseudo-masks for selected samples.
    DumpCam {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated sample ids; all samples when omitted.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
    },
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    error: ErrorBody<'a>,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    kind: &'a str,
    message: String,
}

fn report_error(kind: &str, message: String) {
    let line = ErrorLine {
        error: ErrorBody { kind, message },
    };
    eprintln!("{}", serde_json::to_string(&line).expect("error line serializes"));
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            eprint!("{e}");
            report_error("usage", e.kind().to_string());
            return EXIT_USAGE;
        }
    };
    let cfg = match load_config(&cli.global) {
        Ok(cfg) => cfg,
        Err(e) => {
            report_error(e.kind(), e.to_string());
            return EXIT_USAGE;
        }
    };
    let result = match cli.global.jobs {
        Some(0) => {
            report_error("usage", "--jobs must be >= 1".into());
            return EXIT_USAGE;
        }
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(&cli, &cfg)),
            Err(e) => {
                report_error("usage", format!("thread pool: {e}"));
                return EXIT_USAGE;
            }
        },
        None => dispatch(&cli, &cfg),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            report_error(e.kind(), e.to_string());
            EXIT_PIPELINE
        }
    }
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => io::load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn dispatch(cli: &Cli, cfg: &ExperimentConfig) -> Result<()> {
    let out = &cli.global.out;
    match &cli.command {
        Command::Synth { count } => synth(cfg, count.unwrap_or(cfg.train_size), out),
        Command::Harvest {
            manifest,
            pred_dir,
            model,
        } => harvest_cmd(cfg, manifest, pred_dir.as_deref(), model.as_deref(), out),
        Command::Augment { manifest, bank, count } => augment_cmd(cfg, manifest, bank, *count, out),
        Command::Train {
            manifest,
            bank,
            holdout,
        } => train_cmd(cfg, manifest, bank.as_deref(), holdout.as_deref(), out),
        Command::Eval { manifest, model } => eval_cmd(cfg, manifest, model, out),
        Command::Experiment { sweep, no_dump } => experiment_cmd(cfg, sweep.as_deref(), !no_dump, out),
        Command::DumpCam { manifest, model, ids } => dump_cam(cfg, manifest, model, ids, out),
    }
}

fn synth(cfg: &ExperimentConfig, count: usize, out: &Path) -> Result<()> {
    if count == 0 {
        return Err(Error::Config("synth: --count must be >= 1".into()));
    }
    let corpus = gen_corpus(&cfg.synth, count, cfg.seed)?;
    io::save_corpus(out, &cfg.synth.category_names(), &corpus)?;
    Ok(())
}

fn names_of(manifest: &io::Manifest) -> Vec<String> {
    manifest.categories.clone()
}

fn harvest_cmd(
    cfg: &ExperimentConfig,
    manifest: &Path,
    pred_dir: Option<&Path>,
    model: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let corpus = io::load_corpus(manifest)?;
    let preds: Vec<CategoryMask> = match (pred_dir, model) {
        (Some(dir), _) => corpus
            .samples
            .iter()
            .map(|s| io::read_mask(&dir.join(format!("{}.png", s.id))))
            .collect::<Result<_>>()?,
        (None, Some(m)) => {
            let m = io::load_model(m)?.model;
            corpus
                .samples
                .iter()
                .map(|s| predict_mask(&m, &s.image, &s.labels, cfg.model.tau))
                .collect::<Result<_>>()?
        }
        (None, None) => corpus
            .samples
            .iter()
            .map(|s| {
                s.gt_mask
                    .clone()
                    .ok_or_else(|| Error::Config(format!("{}: no ground-truth mask; pass --pred-dir or --model", s.id)))
            })
            .collect::<Result<_>>()?,
    };
    let pairs: Vec<(&Sample, &CategoryMask)> = corpus.samples.iter().zip(&preds).collect();
    let source = match (pred_dir, model) {
        (Some(d), _) => format!("pred-dir:{}", d.display()),
        (None, Some(m)) => format!("model:{}", m.display()),
        (None, None) => "ground-truth".to_string(),
    };
    let bank = harvest(&pairs, &cfg.harvest, &source)?;
    io::save_bank(out, &bank)?;
    Ok(())
}

#[derive(Serialize)]
struct AugmentRecord {
    id: String,
    source: String,
    placements: Vec<PlacementRecord>,
}

fn augment_cmd(cfg: &ExperimentConfig, manifest: &Path, bank: &Path, count: usize, out: &Path) -> Result<()> {
    let corpus = io::load_corpus(manifest)?;
    let bank = io::load_bank(bank)?;
    if corpus.samples.is_empty() {
        return Err(Error::Config(format!("{}: corpus is empty", manifest.display())));
    }
    cfg.augment.validate()?;
    let root = RngStream::root(cfg.seed).child("augment");
    let mut samples = Vec::with_capacity(count);
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let rng = root.child_index(i as u64);
        let src = &corpus.samples[rng.child("pick").below(corpus.samples.len())];
        let mut aug = augment_sample(src, &bank, &cfg.augment, &rng.child("paste"))
            .map_err(|e| e.context(format!("augment {}", src.id)))?;
        aug.sample.id = format!("aug_{i:05}");
        records.push(AugmentRecord {
            id: aug.sample.id.clone(),
            source: src.id.clone(),
            placements: aug.placements,
        });
        samples.push(aug.sample);
    }
    io::save_corpus(out, &names_of(&corpus.manifest), &samples)?;
    io::write_json(&out.join("placements.json"), &records)
}

#[derive(Serialize)]
struct TrainOutput<'a> {
    seed: u64,
    augmented: bool,
    report: &'a TrainReport,
}

fn train_cmd(
    cfg: &ExperimentConfig,
    manifest: &Path,
    bank: Option<&Path>,
    holdout: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let corpus = io::load_corpus(manifest)?;
    let holdout = holdout.map(io::load_corpus).transpose()?;
    let bank = bank.map(io::load_bank).transpose()?;
    let augmentation = bank.as_ref().map(|bank| Augmentation {
        bank,
        cfg: &cfg.augment,
    });
    let (model, report) = cam::train(
        &corpus.samples,
        holdout.as_ref().map_or(&[][..], |h| &h.samples),
        corpus.manifest.category_count(),
        &cfg.model,
        augmentation,
        &RngStream::root(cfg.seed).child("train"),
    )?;
    io::save_model(&out.join("model.json"), &model, cfg.seed, &names_of(&corpus.manifest))?;
    io::write_json(
        &out.join("train_report.json"),
        &TrainOutput {
            seed: cfg.seed,
            augmented: bank.is_some(),
            report: &report,
        },
    )
}

#[derive(Serialize)]
struct EvalOutput {
    miou: f64,
    per_class_iou: BTreeMap<String, Option<f64>>,
    background_activation: f64,
    tau: f64,
    samples: usize,
}

fn eval_cmd(cfg: &ExperimentConfig, manifest: &Path, model: &Path, out: &Path) -> Result<()> {
    let corpus = io::load_corpus(manifest)?;
    let model = io::load_model(model)?.model;
    let eval = evaluate(&model, &corpus.samples, cfg.model.tau)?;
    let per_class_iou = eval
        .per_class
        .iter()
        .map(|(&c, &v)| (corpus.manifest.categories[c as usize].clone(), v))
        .collect();
    io::write_json(
        &out.join("eval.json"),
        &EvalOutput {
            miou: eval.miou,
            per_class_iou,
            background_activation: eval.background_activation,
            tau: cfg.model.tau,
            samples: corpus.samples.len(),
        },
    )
}

fn experiment_cmd(cfg: &ExperimentConfig, sweep: Option<&str>, dump: bool, out: &Path) -> Result<()> {
    match sweep {
        None => {
            let output = run_experiment(cfg)?;
            io::write_json(&out.join("report.json"), &output.report)?;
            io::write_text(&out.join("report.md"), &arm_table(&output.report))?;
            if dump {
                let names = cfg.synth.category_names();
                io::save_corpus(&out.join("eval"), &names, &output.eval_corpus)?;
                for arm in &output.arms {
                    let dir = out.join("arms").join(&arm.name);
                    io::save_model(&dir.join("model.json"), &arm.model, cfg.seed, &names)?;
                    for (id, mask) in &arm.masks {
                        io::write_mask(&dir.join("masks").join(format!("{id}.png")), mask)?;
                    }
                    for (id, c, h) in &arm.heatmaps {
                        let name = &names[*c as usize];
                        io::write_heatmap(&dir.join("cams").join(format!("{id}_{name}.png")), h)?;
                    }
                    if let Some(bank) = &arm.bank {
                        io::save_bank(&dir.join("bank"), bank)?;
                    }
                }
            }
            Ok(())
        }
        Some(which) => {
            let axes = match which {
                "all" => ablation_axes(),
                "config" => {
                    if cfg.sweep.is_empty() {
                        return Err(Error::Config("config lists no sweep overrides".into()));
                    }
                    vec![crate::experiment::Axis {
                        name: "config".into(),
                        overrides: cfg.sweep.clone(),
                    }]
                }
                name => {
                    let all = ablation_axes();
                    let known: Vec<String> = all.iter().map(|a| a.name.clone()).collect();
                    let axis = all.into_iter().find(|a| a.name == name).ok_or_else(|| {
                        Error::Config(format!(
                            "unknown sweep axis {name:?}; expected one of {known:?}, all, config"
                        ))
                    })?;
                    vec![axis]
                }
            };
            let mut tables = String::new();
            for axis in &axes {
                let report: SweepReport = run_sweep(cfg, &axis.name, &axis.overrides)?;
                io::write_json(&out.join("sweeps").join(format!("{}.json", axis.name)), &report)?;
                tables.push_str(&report.table);
                tables.push('\n');
            }
            io::write_text(&out.join("sweeps").join("tables.md"), &tables)
        }
    }
}

fn dump_cam(cfg: &ExperimentConfig, manifest: &Path, model: &Path, ids: &[String], out: &Path) -> Result<()> {
    let corpus = io::load_corpus(manifest)?;
    let model = io::load_model(model)?.model;
    let selected: Vec<&Sample> = if ids.is_empty() {
        corpus.samples.iter().collect()
    } else {
        ids.iter()
            .map(|id| {
                corpus
                    .samples
                    .iter()
                    .find(|s| &s.id == id)
                    .ok_or_else(|| Error::Config(format!("no sample with id {id:?} in {}", manifest.display())))
            })
            .collect::<Result<_>>()?
    };
    for s in selected {
        for c in s.labels.iter() {
            let h = cam::cam(&model, &s.image, c)?;
            let name = &corpus.manifest.categories[c as usize];
            io::write_heatmap(&out.join(format!("{}_{name}.png", s.id)), &h)?;
        }
        let mask = predict_mask(&model, &s.image, &s.labels, cfg.model.tau)?;
        io::write_mask(&out.join(format!("{}_mask.png", s.id)), &mask)?;
    }
    Ok(())
}
