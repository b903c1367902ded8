//! Instance collecting: keep the simple, well-segmented images and cut
//! their foreground out into an [`InstanceBank`].

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{CategoryMask, ColorImage, Raster};
use crate::sample::{Category, LabelSet, ObjectInstance, Sample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarvestCriteria {
    /// Exclusive lower bound on the foreground pixel ratio.
    pub eps1: f64,
    /// Exclusive upper bound on the foreground pixel ratio.
    pub eps2: f64,
    pub require_single_class: bool,
}

impl Default for HarvestCriteria {
    fn default() -> Self {
        HarvestCriteria {
            eps1: 0.1,
            eps2: 0.7,
            require_single_class: true,
        }
    }
}

impl HarvestCriteria {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.eps1 && self.eps1 < self.eps2 && self.eps2 <= 1.0) {
            return Err(Error::Config(format!(
                "harvest: need 0 <= eps1 < eps2 <= 1, got eps1={} eps2={}",
                self.eps1, self.eps2
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    MultiClass,
    RatioTooSmall,
    RatioTooLarge,
    LabelAbsentInMask,
}

impl RejectReason {
    pub const ALL: [RejectReason; 4] = [
        RejectReason::MultiClass,
        RejectReason::RatioTooSmall,
        RejectReason::RatioTooLarge,
        RejectReason::LabelAbsentInMask,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Accepted(Category),
    Rejected(RejectReason),
}

/// Applies the single-class and `eps1 < m/n < eps2` tests, where `m` counts
/// mask pixels equal to the labeled category and `n` is the pixel count.
///
/// With `require_single_class` off, a multi-label image is judged on its
/// smallest category index.
pub fn qualifies(labels: &LabelSet, pred_mask: &CategoryMask, crit: &HarvestCriteria) -> Decision {
    let category = match (labels.single(), crit.require_single_class) {
        (Some(c), _) => c,
        (None, true) => return Decision::Rejected(RejectReason::MultiClass),
        (None, false) => match labels.iter().next() {
            Some(c) => c,
            None => return Decision::Rejected(RejectReason::LabelAbsentInMask),
        },
    };
    let m = pred_mask.count(|v| v == category);
    let n = pred_mask.pixel_count();
    if m == 0 {
        // nothing to cut out even when eps1 = 0
        return Decision::Rejected(if crit.eps1 > 0.0 {
            RejectReason::RatioTooSmall
        } else {
            RejectReason::LabelAbsentInMask
        });
    }
    let ratio = m as f64 / n as f64;
    if ratio <= crit.eps1 {
        Decision::Rejected(RejectReason::RatioTooSmall)
    } else if ratio >= crit.eps2 {
        Decision::Rejected(RejectReason::RatioTooLarge)
    } else {
        Decision::Accepted(category)
    }
}

/// Cuts the tight box around `category` pixels out of `image`, with a
/// binary alpha marking those pixels. Disconnected pieces stay together.
pub fn extract_instance(
    image: &ColorImage,
    pred_mask: &CategoryMask,
    category: Category,
    source_id: &str,
) -> Result<ObjectInstance> {
    if !image.same_dims(pred_mask) {
        return Err(Error::Shape(format!(
            "image {}x{} vs mask {}x{}",
            image.width(),
            image.height(),
            pred_mask.width(),
            pred_mask.height()
        )));
    }
    let rect = pred_mask
        .tight_bbox(|v| v == category)
        .ok_or(Error::EmptyObject { category })?;
    let cutout = image.crop_rect(rect)?;
    let alpha = Raster::from_fn(rect.w, rect.h, 1, |x, y, _| {
        if pred_mask.get(rect.x0 + x, rect.y0 + y, 0) == category {
            1.0f32
        } else {
            0.0
        }
    });
    ObjectInstance::new(cutout, alpha, category, source_id)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub criteria: HarvestCriteria,
    pub source: String,
    pub examined: usize,
    pub accepted: usize,
    pub rejections: BTreeMap<RejectReason, usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceBank {
    instances: Vec<ObjectInstance>,
    by_category: BTreeMap<Category, Vec<usize>>,
    pub provenance: Provenance,
}

impl InstanceBank {
    pub fn new(instances: Vec<ObjectInstance>, provenance: Provenance) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::EmptyBank(format!(
                "no instance qualified out of {} examined",
                provenance.examined
            )));
        }
        let mut by_category: BTreeMap<Category, Vec<usize>> = BTreeMap::new();
        for (i, inst) in instances.iter().enumerate() {
            inst.validate()?;
            by_category.entry(inst.category).or_default().push(i);
        }
        Ok(InstanceBank {
            instances,
            by_category,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instances(&self) -> &[ObjectInstance] {
        &self.instances
    }

    pub fn get(&self, i: usize) -> &ObjectInstance {
        &self.instances[i]
    }

    pub fn categories(&self) -> impl Iterator<Item = Category> + '_ {
        self.by_category.keys().copied()
    }

    pub fn indices_of(&self, c: Category) -> &[usize] {
        self.by_category.get(&c).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Filters `(sample, predicted mask)` pairs and extracts every accepted
/// foreground. Results keep corpus order regardless of parallelism.
pub fn harvest(corpus: &[(&Sample, &CategoryMask)], crit: &HarvestCriteria, source: &str) -> Result<InstanceBank> {
    crit.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyBank("corpus is empty".into()));
    }
    let outcomes: Vec<Result<std::result::Result<ObjectInstance, RejectReason>>> = corpus
        .par_iter()
        .map(|(sample, mask)| match qualifies(&sample.labels, mask, crit) {
            Decision::Accepted(c) => extract_instance(&sample.image, mask, c, &sample.id).map(Ok),
            Decision::Rejected(r) => Ok(Err(r)),
        })
        .collect();

    let mut provenance = Provenance {
        criteria: crit.clone(),
        source: source.to_string(),
        examined: corpus.len(),
        accepted: 0,
        rejections: RejectReason::ALL.iter().map(|&r| (r, 0)).collect(),
    };
    let mut instances = Vec::new();
    for outcome in outcomes {
        match outcome? {
            Ok(inst) => instances.push(inst),
            Err(reason) => *provenance.rejections.entry(reason).or_default() += 1,
        }
    }
    provenance.accepted = instances.len();
    InstanceBank::new(instances, provenance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Rect;
    use crate::rng::RngStream;

    fn mask_with_square(size: usize, rect: Rect, cat: Category) -> CategoryMask {
        Raster::from_fn(size, size, 1, |x, y, _| if rect.contains(x, y) { cat } else { 0 })
    }

    fn labels(c: &[Category]) -> LabelSet {
        LabelSet::from_categories(c.iter().copied())
    }

    #[test]
    fn ratio_inside_thresholds_is_accepted() {
        // 40 of 100 pixels
        let mask = mask_with_square(10, Rect::new(0, 0, 10, 4), 1);
        let d = qualifies(&labels(&[1]), &mask, &HarvestCriteria::default());
        assert_eq!(d, Decision::Accepted(1));
    }

    #[test]
    fn multi_class_is_rejected() {
        let mask = mask_with_square(10, Rect::new(0, 0, 10, 4), 1);
        let d = qualifies(&labels(&[1, 2]), &mask, &HarvestCriteria::default());
        assert_eq!(d, Decision::Rejected(RejectReason::MultiClass));
    }

    #[test]
    fn all_background_is_too_small() {
        let mask = Raster::filled(64, 64, 1, 0u8);
        let d = qualifies(&labels(&[3]), &mask, &HarvestCriteria::default());
        assert_eq!(d, Decision::Rejected(RejectReason::RatioTooSmall));
    }

    #[test]
    fn thresholds_are_exclusive() {
        let crit = HarvestCriteria::default();
        // exactly 0.1 and exactly 0.7
        let low = mask_with_square(10, Rect::new(0, 0, 10, 1), 1);
        let high = mask_with_square(10, Rect::new(0, 0, 10, 7), 1);
        assert_eq!(
            qualifies(&labels(&[1]), &low, &crit),
            Decision::Rejected(RejectReason::RatioTooSmall)
        );
        assert_eq!(
            qualifies(&labels(&[1]), &high, &crit),
            Decision::Rejected(RejectReason::RatioTooLarge)
        );
    }

    #[test]
    fn other_categories_do_not_count() {
        // label 1 has 5%, category 2 covers another 50%
        let mut mask = mask_with_square(10, Rect::new(0, 0, 5, 1), 1);
        for y in 5..10 {
            for x in 0..10 {
                mask.set(x, y, 0, 2);
            }
        }
        let d = qualifies(&labels(&[1]), &mask, &HarvestCriteria::default());
        assert_eq!(d, Decision::Rejected(RejectReason::RatioTooSmall));
    }

    #[test]
    fn zero_eps1_with_absent_label() {
        let crit = HarvestCriteria {
            eps1: 0.0,
            eps2: 1.0,
            require_single_class: true,
        };
        let mask = Raster::filled(4, 4, 1, 0u8);
        assert_eq!(
            qualifies(&labels(&[1]), &mask, &crit),
            Decision::Rejected(RejectReason::LabelAbsentInMask)
        );
    }

    #[test]
    fn invalid_criteria() {
        let crit = HarvestCriteria {
            eps1: 0.7,
            eps2: 0.1,
            require_single_class: true,
        };
        assert!(crit.validate().is_err());
    }

    #[test]
    fn extract_square_gives_full_alpha() {
        let img = Raster::from_fn(32, 32, 3, |x, y, c| ((x + y + c) % 7) as f32 / 7.0);
        let mask = mask_with_square(32, Rect::new(5, 9, 10, 10), 2);
        let inst = extract_instance(&img, &mask, 2, "s").unwrap();
        assert_eq!((inst.width(), inst.height()), (10, 10));
        assert!(inst.alpha.data().iter().all(|&a| a == 1.0));
        assert_eq!(inst.cutout, img.crop(5, 9, 10, 10).unwrap());
    }

    #[test]
    fn extract_absent_category_fails() {
        let img = Raster::filled(8, 8, 3, 0.0f32);
        let mask = Raster::filled(8, 8, 1, 0u8);
        assert!(matches!(
            extract_instance(&img, &mask, 1, "s"),
            Err(Error::EmptyObject { category: 1 })
        ));
    }

    #[test]
    fn extract_blob_is_tight() {
        let mut rng = RngStream::root(4);
        for _ in 0..50 {
            let mut mask = Raster::filled(16, 16, 1, 0u8);
            let k = rng.range_inclusive(1, 20);
            for _ in 0..k {
                mask.set(rng.below(16), rng.below(16), 0, 1);
            }
            let img = Raster::filled(16, 16, 3, 0.3f32);
            let inst = extract_instance(&img, &mask, 1, "b").unwrap();
            let support = inst.alpha.tight_bbox(|a| a > 0.5).unwrap();
            assert_eq!(support, Rect::new(0, 0, inst.width(), inst.height()));
        }
    }

    #[test]
    fn harvest_all_multiclass_is_empty_bank() {
        let img = Raster::filled(10, 10, 3, 0.5f32);
        let mut mask = mask_with_square(10, Rect::new(0, 0, 3, 3), 1);
        mask.set(9, 9, 0, 2);
        let s = Sample::new("a", img, labels(&[1, 2]), Some(mask.clone())).unwrap();
        let corpus = vec![(&s, &mask); 3];
        let err = harvest(&corpus, &HarvestCriteria::default(), "t").unwrap_err();
        assert!(matches!(err, Error::EmptyBank(_)));
    }

    #[test]
    fn degenerate_thresholds_accept_everything() {
        let crit = HarvestCriteria {
            eps1: 0.0,
            eps2: 1.0,
            require_single_class: true,
        };
        let img = Raster::filled(10, 10, 3, 0.5f32);
        let samples: Vec<(Sample, CategoryMask)> = (1..=9)
            .map(|k| {
                let mask = mask_with_square(10, Rect::new(0, 0, k, k), 1);
                (
                    Sample::new(format!("s{k}"), img.clone(), labels(&[1]), Some(mask.clone())).unwrap(),
                    mask,
                )
            })
            .collect();
        let corpus: Vec<_> = samples.iter().map(|(s, m)| (s, m)).collect();
        let bank = harvest(&corpus, &crit, "t").unwrap();
        assert_eq!(bank.len(), 9);
        assert_eq!(bank.indices_of(1).len(), 9);
    }
}
