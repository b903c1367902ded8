//! Baseline-versus-augmented experiments on confounded synthetic scenes.
//!
//! Both arms train the same toy CAM model from scratch on the same corpus.
//! The baseline trains on originals only; the decoupled arm harvests a bank
//! from the previous round's pseudo-masks and trains on pairwise augmented
//! batches. Both are scored on one shared evaluation corpus.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{run_rounds, AugmentConfig, RoundTrainer};
use crate::cam::{
    self, cam_from_features, combine_heatmaps, extract_features, Augmentation, Heatmap, ModelConfig, ToyModel,
    TrainReport,
};
use crate::error::{Error, Result};
use crate::harvest::{HarvestCriteria, InstanceBank, Provenance};
use crate::metrics::IouAccumulator;
use crate::raster::CategoryMask;
use crate::rng::RngStream;
use crate::sample::{Category, Sample, BACKGROUND};
use crate::synth::{gen_corpus, SynthConfig};

pub const BASELINE_ARM: &str = "baseline";
pub const DECOUPLED_ARM: &str = "decoupled";

/// A named patch merged into the experiment configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Override {
    pub name: String,
    /// Partial configuration object, e.g. `{"augment": {"pairwise": false}}`.
    pub set: serde_json::Value,
}

impl Override {
    pub fn new(name: impl Into<String>, set: serde_json::Value) -> Self {
        Override { name: name.into(), set }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub train_size: usize,
    pub eval_size: usize,
    pub rounds: usize,
    /// Evaluation scenes whose heatmaps are kept as artifacts.
    pub dump_count: usize,
    pub synth: SynthConfig,
    pub harvest: HarvestCriteria,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub sweep: Vec<Override>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            train_size: 2000,
            eval_size: 500,
            rounds: 1,
            dump_count: 8,
            synth: SynthConfig::default(),
            harvest: HarvestCriteria::default(),
            augment: AugmentConfig::default(),
            model: ModelConfig::default(),
            sweep: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_size == 0 || self.eval_size == 0 {
            return Err(Error::Config(
                "experiment: train_size and eval_size must be >= 1".into(),
            ));
        }
        self.synth.validate()?;
        self.harvest.validate()?;
        self.augment.validate()?;
        self.model.validate()
    }

    /// Deep-merges `patch` into this configuration.
    pub fn with_override(&self, patch: &serde_json::Value) -> Result<ExperimentConfig> {
        let mut base = serde_json::to_value(self).expect("config serializes");
        merge(&mut base, patch);
        let cfg: ExperimentConfig =
            serde_json::from_value(base).map_err(|e| Error::Config(format!("override {patch}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn categories(&self) -> usize {
        self.synth.shape_categories
    }
}

fn merge(base: &mut serde_json::Value, patch: &serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub name: String,
    /// mIoU of thresholded CAM masks, accumulated over the eval corpus.
    pub miou: f64,
    pub per_class_iou: BTreeMap<String, Option<f64>>,
    /// Mean share of CAM mass that falls on ground-truth background.
    pub background_activation: f64,
    pub train: TrainReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub miou: f64,
    pub background_activation: f64,
    pub bank_size: usize,
    pub bank_per_category: BTreeMap<Category, usize>,
    pub harvest: Option<Provenance>,
    pub skipped_augmentations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub arms: Vec<ArmReport>,
    pub rounds: Vec<RoundReport>,
    pub config: ExperimentConfig,
}

impl ExperimentReport {
    pub fn arm(&self, name: &str) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.name == name)
    }
}

/// Rasters behind an arm's numbers.
#[derive(Clone, Debug)]
pub struct ArmArtifacts {
    pub name: String,
    pub model: ToyModel,
    /// Predicted mask per eval scene, in eval order.
    pub masks: Vec<(String, CategoryMask)>,
    /// Heatmaps of the first `dump_count` eval scenes, per labeled class.
    pub heatmaps: Vec<(String, Category, Heatmap)>,
    pub bank: Option<InstanceBank>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub report: ExperimentReport,
    pub arms: Vec<ArmArtifacts>,
    pub eval_corpus: Vec<Sample>,
}

struct ToyTrainer<'a> {
    corpus: &'a [Sample],
    holdout: &'a [Sample],
    categories: usize,
    model: &'a ModelConfig,
    augment: &'a AugmentConfig,
}

impl RoundTrainer for ToyTrainer<'_> {
    type Model = (ToyModel, TrainReport);

    fn train(&self, _round: usize, bank: Option<&InstanceBank>, rng: &RngStream) -> Result<Self::Model> {
        let augmentation = bank.map(|bank| Augmentation {
            bank,
            cfg: self.augment,
        });
        cam::train(
            self.corpus,
            self.holdout,
            self.categories,
            self.model,
            augmentation,
            rng,
        )
    }

    fn predict_masks(&self, model: &Self::Model, corpus: &[Sample]) -> Result<Vec<CategoryMask>> {
        corpus
            .par_iter()
            .map(|s| cam::predict_mask(&model.0, &s.image, &s.labels, self.model.tau))
            .collect()
    }
}

/// Evaluation of one model on the eval corpus.
pub struct Evaluation {
    pub miou: f64,
    pub per_class: BTreeMap<Category, Option<f64>>,
    pub background_activation: f64,
    pub masks: Vec<CategoryMask>,
    pub heatmaps: Vec<Vec<(Category, Heatmap)>>,
}

/// Scores CAM pseudo-masks against ground truth. Samples without a
/// ground-truth mask are skipped.
pub fn evaluate(model: &ToyModel, corpus: &[Sample], tau: f64) -> Result<Evaluation> {
    let per_sample: Vec<(CategoryMask, Vec<(Category, Heatmap)>)> = corpus
        .par_iter()
        .map(|s| {
            let f = extract_features(&s.image);
            let heatmaps = s
                .labels
                .iter()
                .map(|c| Ok((c, cam_from_features(model, &f, c)?)))
                .collect::<Result<Vec<_>>>()?;
            let mask = combine_heatmaps(&heatmaps, s.image.width(), s.image.height(), tau);
            Ok((mask, heatmaps))
        })
        .collect::<Result<_>>()?;

    let mut acc = IouAccumulator::new((1..=model.categories).map(|c| c as Category));
    let mut activation_sum = 0.0;
    let mut activation_n = 0usize;
    for (s, (mask, heatmaps)) in corpus.iter().zip(&per_sample) {
        let Some(gt) = &s.gt_mask else { continue };
        acc.add(mask, gt)?;
        for (_, hm) in heatmaps {
            let total: f64 = hm.data().iter().sum();
            if total > 0.0 {
                let on_bg: f64 = hm
                    .data()
                    .iter()
                    .zip(gt.data())
                    .filter(|(_, &g)| g == BACKGROUND)
                    .map(|(v, _)| v)
                    .sum();
                activation_sum += on_bg / total;
                activation_n += 1;
            }
        }
    }
    let report = acc.report();
    let (masks, heatmaps) = per_sample.into_iter().unzip();
    Ok(Evaluation {
        miou: report.miou,
        per_class: report.per_class,
        background_activation: if activation_n == 0 {
            0.0
        } else {
            activation_sum / activation_n as f64
        },
        masks,
        heatmaps,
    })
}

fn arm_report(name: &str, eval: &Evaluation, names: &[String], train: &TrainReport) -> ArmReport {
    ArmReport {
        name: name.to_string(),
        miou: eval.miou,
        per_class_iou: eval
            .per_class
            .iter()
            .map(|(&c, &v)| (names.get(c as usize).cloned().unwrap_or_else(|| c.to_string()), v))
            .collect(),
        background_activation: eval.background_activation,
        train: train.clone(),
    }
}

fn arm_artifacts(
    name: &str,
    model: &ToyModel,
    eval: Evaluation,
    corpus: &[Sample],
    dump_count: usize,
    bank: Option<InstanceBank>,
) -> ArmArtifacts {
    let masks = corpus.iter().map(|s| s.id.clone()).zip(eval.masks).collect();
    let heatmaps = corpus
        .iter()
        .zip(eval.heatmaps)
        .take(dump_count)
        .flat_map(|(s, hms)| hms.into_iter().map(move |(c, h)| (s.id.clone(), c, h)))
        .collect();
    ArmArtifacts {
        name: name.to_string(),
        model: model.clone(),
        masks,
        heatmaps,
        bank,
    }
}

/// Generates the corpora, trains both arms and evaluates them.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let root = RngStream::root(cfg.seed);
    let train_corpus =
        gen_corpus(&cfg.synth, cfg.train_size, cfg.seed).map_err(|e| e.context("synth: train corpus"))?;
    // eval scenes come from a separate seed-derived stream
    let eval_seed = root.child("eval-corpus").stream_id();
    let eval_corpus = gen_corpus(&cfg.synth, cfg.eval_size, eval_seed).map_err(|e| e.context("synth: eval corpus"))?;
    let names = cfg.synth.category_names();

    let trainer = ToyTrainer {
        corpus: &train_corpus,
        holdout: &eval_corpus,
        categories: cfg.categories(),
        model: &cfg.model,
        augment: &cfg.augment,
    };
    let rounds = run_rounds(&trainer, &train_corpus, cfg.rounds, &cfg.harvest, &root.child("rounds"))
        .map_err(|e| e.context(DECOUPLED_ARM))?;

    let mut round_reports = Vec::with_capacity(rounds.len());
    let mut evals = Vec::with_capacity(rounds.len());
    for art in &rounds {
        let eval = evaluate(&art.model.0, &eval_corpus, cfg.model.tau)
            .map_err(|e| e.context(format!("evaluate round {}", art.round)))?;
        let mut per_cat = BTreeMap::new();
        if let Some(bank) = &art.bank {
            for c in bank.categories() {
                per_cat.insert(c, bank.indices_of(c).len());
            }
        }
        round_reports.push(RoundReport {
            round: art.round,
            miou: eval.miou,
            background_activation: eval.background_activation,
            bank_size: art.bank.as_ref().map_or(0, |b| b.len()),
            bank_per_category: per_cat,
            harvest: art.bank.as_ref().map(|b| b.provenance.clone()),
            skipped_augmentations: art.model.1.skipped,
        });
        evals.push(eval);
    }

    let last = rounds.len() - 1;
    let mut evals = evals.into_iter();
    let base_eval = evals.next().expect("round 0 exists");
    let base_report = arm_report(BASELINE_ARM, &base_eval, &names, &rounds[0].model.1);
    let (dec_report, dec_eval) = if last == 0 {
        let r = arm_report(DECOUPLED_ARM, &base_eval, &names, &rounds[0].model.1);
        let e = Evaluation {
            miou: base_eval.miou,
            per_class: base_eval.per_class.clone(),
            background_activation: base_eval.background_activation,
            masks: base_eval.masks.clone(),
            heatmaps: base_eval.heatmaps.clone(),
        };
        (r, e)
    } else {
        let e = evals.last().expect("last round");
        (arm_report(DECOUPLED_ARM, &e, &names, &rounds[last].model.1), e)
    };

    let mut rounds = rounds;
    let dec_art = rounds.pop().expect("non-empty");
    let base_art = if last == 0 {
        dec_art.clone()
    } else {
        rounds.swap_remove(0)
    };
    let arms = vec![
        arm_artifacts(
            BASELINE_ARM,
            &base_art.model.0,
            base_eval,
            &eval_corpus,
            cfg.dump_count,
            None,
        ),
        arm_artifacts(
            DECOUPLED_ARM,
            &dec_art.model.0,
            dec_eval,
            &eval_corpus,
            cfg.dump_count,
            dec_art.bank,
        ),
    ];

    Ok(ExperimentOutput {
        report: ExperimentReport {
            arms: vec![base_report, dec_report],
            rounds: round_reports,
            config: cfg.clone(),
        },
        arms,
        eval_corpus,
    })
}

/// One ablation axis: a name and the overrides that span it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub name: String,
    pub overrides: Vec<Override>,
}

/// The standard ablation axes: pasting method, training manner, pasted
/// object count with the same-category toggle, and retraining rounds.
pub fn ablation_axes() -> Vec<Axis> {
    use serde_json::json;
    let blend = |rotation: bool, sigma: f64| json!({"augment": {"blend": {"rescale_enabled": true, "rotation_enabled": rotation, "gaussian_sigma": sigma}}});
    let mut objects = Vec::new();
    for n in 1..=3 {
        for same in [false, true] {
            objects.push(Override::new(
                format!("objects={n},same_category={}", if same { "on" } else { "off" }),
                json!({"augment": {"objects_per_image": n, "allow_same_category": same}}),
            ));
        }
    }
    vec![
        Axis {
            name: "pasting_method".into(),
            overrides: vec![
                Override::new("rescale", blend(false, 0.0)),
                Override::new("rescale+rotation", blend(true, 0.0)),
                Override::new("rescale+gaussian", blend(false, 1.0)),
                Override::new("rescale+rotation+gaussian", blend(true, 1.0)),
            ],
        },
        Axis {
            name: "training_manner".into(),
            overrides: vec![
                Override::new("pairwise", json!({"augment": {"pairwise": true}})),
                Override::new("non_pairwise", json!({"augment": {"pairwise": false}})),
            ],
        },
        Axis {
            name: "pasted_objects".into(),
            overrides: objects,
        },
        Axis {
            name: "retraining_rounds".into(),
            overrides: (0..=2)
                .map(|r| Override::new(format!("rounds={r}"), json!({ "rounds": r })))
                .collect(),
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub name: String,
    pub report: ExperimentReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: String,
    pub entries: Vec<SweepEntry>,
    pub table: String,
}

/// Runs the base configuration once per override.
pub fn run_sweep(cfg: &ExperimentConfig, axis: &str, overrides: &[Override]) -> Result<SweepReport> {
    if overrides.is_empty() {
        return Err(Error::Config("sweep needs at least one override".into()));
    }
    let mut entries = Vec::with_capacity(overrides.len());
    for o in overrides {
        let point = cfg
            .with_override(&o.set)
            .map_err(|e| e.context(format!("sweep {axis}/{}", o.name)))?;
        let out = run_experiment(&point).map_err(|e| e.context(format!("sweep {axis}/{}", o.name)))?;
        entries.push(SweepEntry {
            name: o.name.clone(),
            report: out.report,
        });
    }
    let table = comparison_table(axis, &entries);
    Ok(SweepReport {
        axis: axis.to_string(),
        entries,
        table,
    })
}

pub fn comparison_table(axis: &str, entries: &[SweepEntry]) -> String {
    let mut t = String::new();
    let _ = writeln!(t, "## {axis}");
    let _ = writeln!(
        t,
        "| setting | baseline mIoU | decoupled mIoU | delta | baseline bg-act | decoupled bg-act | bank | skipped |"
    );
    let _ = writeln!(t, "|---|---|---|---|---|---|---|---|");
    for e in entries {
        let (Some(b), Some(d)) = (e.report.arm(BASELINE_ARM), e.report.arm(DECOUPLED_ARM)) else {
            continue;
        };
        let last = e.report.rounds.last();
        let _ = writeln!(
            t,
            "| {} | {:.1} | {:.1} | {:+.1} | {:.3} | {:.3} | {} | {} |",
            e.name,
            100.0 * b.miou,
            100.0 * d.miou,
            100.0 * (d.miou - b.miou),
            b.background_activation,
            d.background_activation,
            last.map_or(0, |r| r.bank_size),
            last.map_or(0, |r| r.skipped_augmentations),
        );
    }
    t
}

pub fn arm_table(report: &ExperimentReport) -> String {
    let mut t = String::new();
    let _ = writeln!(t, "| arm | mIoU | bg-act | per-class IoU |");
    let _ = writeln!(t, "|---|---|---|---|");
    for a in &report.arms {
        let per: Vec<String> = a
            .per_class_iou
            .iter()
            .map(|(k, v)| match v {
                Some(v) => format!("{k}={:.1}", 100.0 * v),
                None => format!("{k}=n/a"),
            })
            .collect();
        let _ = writeln!(
            t,
            "| {} | {:.1} | {:.3} | {} |",
            a.name,
            100.0 * a.miou,
            a.background_activation,
            per.join(" ")
        );
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            train_size: 150,
            eval_size: 40,
            model: ModelConfig {
                epochs: 4,
                ..ModelConfig::default()
            },
            harvest: HarvestCriteria {
                eps1: 0.02,
                eps2: 0.9,
                require_single_class: true,
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn override_merges_nested_fields() {
        let cfg = ExperimentConfig::default();
        let out = cfg
            .with_override(&serde_json::json!({"augment": {"blend": {"gaussian_sigma": 2.0}}, "rounds": 3}))
            .unwrap();
        assert_eq!(out.augment.blend.gaussian_sigma, 2.0);
        assert_eq!(out.augment.blend.scale_area_range, (0.05, 0.30));
        assert_eq!(out.rounds, 3);
        assert!(cfg.with_override(&serde_json::json!({"bogus": 1})).is_err());
        assert!(cfg.with_override(&serde_json::json!({"train_size": 0})).is_err());
    }

    #[test]
    fn zero_rounds_arms_coincide() {
        let cfg = ExperimentConfig { rounds: 0, ..small() };
        let out = run_experiment(&cfg).unwrap();
        let (b, d) = (&out.report.arms[0], &out.report.arms[1]);
        assert_eq!(b.miou, d.miou);
        assert_eq!(b.per_class_iou, d.per_class_iou);
        assert_eq!(b.train, d.train);
        assert_eq!(out.arms[0].masks, out.arms[1].masks);
    }

    #[test]
    fn empty_sweep_is_rejected() {
        assert!(matches!(run_sweep(&small(), "x", &[]), Err(Error::Config(_))));
    }

    #[test]
    fn axes_cover_the_ablations() {
        let axes = ablation_axes();
        let sizes: Vec<usize> = axes.iter().map(|a| a.overrides.len()).collect();
        assert_eq!(sizes, vec![4, 2, 6, 3]);
        let cfg = ExperimentConfig::default();
        for axis in &axes {
            for o in &axis.overrides {
                cfg.with_override(&o.set).unwrap();
            }
        }
    }
}
