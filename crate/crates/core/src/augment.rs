//! Online copy-paste augmentation and pairwise batch assembly.
//!
//! For each drawn sample an instance whose category is absent from the
//! sample's labels is pasted in and its category appended to the labels.
//! In pairwise mode each original is followed by its augmented copy, giving
//! batches of `2N` entries.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blend::{random_blend, BlendConfig, PlacementRecord};
use crate::error::{Error, Result};
use crate::harvest::{harvest, HarvestCriteria, InstanceBank};
use crate::raster::CategoryMask;
use crate::rng::RngStream;
use crate::sample::{LabelSet, ObjectInstance, Sample, BACKGROUND};

/// Placement redraws allowed when a paste would hide an existing object
/// completely.
const OCCLUSION_RETRIES: u64 = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub objects_per_image: usize,
    pub allow_same_category: bool,
    pub pairwise: bool,
    pub max_resample_attempts: usize,
    pub blend: BlendConfig,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            objects_per_image: 1,
            allow_same_category: false,
            pairwise: true,
            max_resample_attempts: 100,
            blend: BlendConfig::default(),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.objects_per_image < 1 {
            return Err(Error::Config("augment: objects_per_image must be >= 1".into()));
        }
        if self.max_resample_attempts < 1 {
            return Err(Error::Config("augment: max_resample_attempts must be >= 1".into()));
        }
        self.blend.validate()
    }
}

/// Draws an instance uniformly from the bank, redrawing while its category
/// is in `excluded` (unless same-category pastes are allowed).
pub fn sample_disjoint_instance<'b>(
    bank: &'b InstanceBank,
    excluded: &LabelSet,
    cfg: &AugmentConfig,
    rng: &mut RngStream,
) -> Result<&'b ObjectInstance> {
    if bank.is_empty() {
        return Err(Error::EmptyBank("cannot draw from an empty bank".into()));
    }
    if !cfg.allow_same_category && bank.categories().all(|c| excluded.contains(c)) {
        return Err(Error::NoDisjointCategory {
            excluded: excluded.iter().collect(),
        });
    }
    for _ in 0..cfg.max_resample_attempts {
        let inst = bank.get(rng.below(bank.len()));
        if cfg.allow_same_category || !excluded.contains(inst.category) {
            return Ok(inst);
        }
    }
    Err(Error::ResampleExhausted {
        attempts: cfg.max_resample_attempts,
    })
}

/// An augmented sample and the pastes that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub sample: Sample,
    pub placements: Vec<PlacementRecord>,
}

fn categories_survive(mask: &CategoryMask, labels: &LabelSet) -> bool {
    LabelSet::from_mask(mask) == *labels
}

/// Pastes `objects_per_image` instances into `s` one after another.
///
/// Labels become the original labels plus every pasted category. When a
/// ground-truth mask is present, pasted support pixels (alpha > 0.5) take
/// the pasted category; a placement that would erase every pixel of a
/// labeled category is redrawn.
pub fn augment_sample(s: &Sample, bank: &InstanceBank, cfg: &AugmentConfig, rng: &RngStream) -> Result<Augmented> {
    let mut image = s.image.clone();
    let mut labels = s.labels.clone();
    let mut mask = s.gt_mask.clone();
    let mut excluded = s.labels.clone();
    let mut placements = Vec::with_capacity(cfg.objects_per_image);

    for k in 0..cfg.objects_per_image {
        let paste_rng = rng.child_index(k as u64);
        let inst = sample_disjoint_instance(bank, &excluded, cfg, &mut paste_rng.child("instance"))?;
        let mut new_labels = labels.clone();
        new_labels.insert(inst.category);

        let mut accepted = None;
        for attempt in 0..OCCLUSION_RETRIES {
            let mut blend_rng = paste_rng.child("blend").child_index(attempt);
            let occupied = mask
                .as_ref()
                .map(|m| move |x: usize, y: usize| m.get(x, y, 0) != BACKGROUND);
            let occupied_ref = occupied.as_ref().map(|f| f as &dyn Fn(usize, usize) -> bool);
            let blended = random_blend(&image, occupied_ref, inst, &cfg.blend, &mut blend_rng)?;
            let new_mask = mask.as_ref().map(|m| {
                let mut m = m.clone();
                let r = blended.record.rect();
                for y in 0..r.h {
                    for x in 0..r.w {
                        if blended.instance.alpha.get(x, y, 0) > 0.5 {
                            m.set(r.x0 + x, r.y0 + y, 0, inst.category);
                        }
                    }
                }
                m
            });
            if new_mask.as_ref().is_none_or(|m| categories_survive(m, &new_labels)) {
                accepted = Some((blended, new_mask));
                break;
            }
        }
        let (blended, new_mask) = accepted.ok_or_else(|| {
            Error::Placement {
                iw: inst.width(),
                ih: inst.height(),
                tw: image.width(),
                th: image.height(),
            }
            .context(format!("every placement fully occluded an object in {}", s.id))
        })?;

        image = blended.image;
        mask = new_mask;
        labels = new_labels;
        if !cfg.allow_same_category {
            excluded.insert(inst.category);
        }
        placements.push(blended.record);
    }

    Ok(Augmented {
        sample: Sample {
            id: format!("{}+aug", s.id),
            image,
            labels,
            gt_mask: mask,
        },
        placements,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchEntry {
    pub sample: Sample,
    pub placements: Vec<PlacementRecord>,
    /// Index of the source sample in the corpus.
    pub source_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseBatch {
    pub entries: Vec<BatchEntry>,
    pub pairwise: bool,
    /// Samples emitted without augmentation because every draw failed.
    pub skipped: usize,
}

/// The `n` corpus indices a batch draws, without replacement.
pub fn draw_batch_indices(corpus_len: usize, n: usize, rng: &RngStream) -> Vec<usize> {
    rng.child("draw").sample_indices(corpus_len, n)
}

/// Draws `n` samples and augments each one.
///
/// Slot `i` augments with the child stream keyed by `i`, so results do not
/// depend on how the work is scheduled.
pub fn make_batch(
    corpus: &[Sample],
    bank: &InstanceBank,
    n: usize,
    cfg: &AugmentConfig,
    rng: &RngStream,
) -> Result<PairwiseBatch> {
    cfg.validate()?;
    if n == 0 || corpus.len() < n {
        return Err(Error::Config(format!(
            "batch of {n} needs 1..={} samples",
            corpus.len()
        )));
    }
    let indices = draw_batch_indices(corpus.len(), n, rng);
    let slots = rng.child("slot");
    let augmented: Vec<Result<Option<Augmented>>> = indices
        .par_iter()
        .enumerate()
        .map(
            |(slot, &i)| match augment_sample(&corpus[i], bank, cfg, &slots.child_index(slot as u64)) {
                Ok(a) => Ok(Some(a)),
                Err(e) if e.is_exhaustion() || matches!(e.root(), Error::Placement { .. }) => Ok(None),
                Err(e) => Err(e),
            },
        )
        .collect();

    let mut entries = Vec::with_capacity(if cfg.pairwise { 2 * n } else { n });
    let mut skipped = 0;
    for (&i, aug) in indices.iter().zip(augmented) {
        let original = BatchEntry {
            sample: corpus[i].clone(),
            placements: Vec::new(),
            source_index: i,
        };
        let counterpart = match aug? {
            Some(a) => BatchEntry {
                sample: a.sample,
                placements: a.placements,
                source_index: i,
            },
            None => {
                skipped += 1;
                original.clone()
            }
        };
        if cfg.pairwise {
            entries.push(original);
        }
        entries.push(counterpart);
    }
    Ok(PairwiseBatch {
        entries,
        pairwise: cfg.pairwise,
        skipped,
    })
}

/// Trains and predicts for [`run_rounds`].
pub trait RoundTrainer {
    type Model;

    /// Trains from scratch; `bank` is `None` for the plain round 0.
    fn train(&self, round: usize, bank: Option<&InstanceBank>, rng: &RngStream) -> Result<Self::Model>;

    /// Predicted category masks for `corpus`, in order.
    fn predict_masks(&self, model: &Self::Model, corpus: &[Sample]) -> Result<Vec<CategoryMask>>;
}

#[derive(Clone, Debug)]
pub struct RoundArtifacts<M> {
    pub round: usize,
    pub model: M,
    /// Bank harvested from the previous round; `None` in round 0.
    pub bank: Option<InstanceBank>,
}

/// Round 0 trains without augmentation; each later round harvests a fresh
/// bank from the previous round's predictions and trains with it.
pub fn run_rounds<T: RoundTrainer>(
    trainer: &T,
    corpus: &[Sample],
    rounds: usize,
    crit: &HarvestCriteria,
    rng: &RngStream,
) -> Result<Vec<RoundArtifacts<T::Model>>> {
    let round_rng = |r: usize| rng.child("round").child_index(r as u64);
    let base = trainer
        .train(0, None, &round_rng(0))
        .map_err(|e| e.context("round 0: train"))?;
    let mut out = vec![RoundArtifacts {
        round: 0,
        model: base,
        bank: None,
    }];
    for r in 1..=rounds {
        let prev = &out[r - 1].model;
        let masks = trainer
            .predict_masks(prev, corpus)
            .map_err(|e| e.context(format!("round {r}: predict")))?;
        let pairs: Vec<(&Sample, &CategoryMask)> = corpus.iter().zip(masks.iter()).collect();
        let bank =
            harvest(&pairs, crit, &format!("round-{}", r - 1)).map_err(|e| e.context(format!("round {r}: harvest")))?;
        let model = trainer
            .train(r, Some(&bank), &round_rng(r))
            .map_err(|e| e.context(format!("round {r}: train")))?;
        out.push(RoundArtifacts {
            round: r,
            model,
            bank: Some(bank),
        });
    }
    Ok(out)
}
