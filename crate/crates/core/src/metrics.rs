//! Intersection-over-union scoring of category masks.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::CategoryMask;
use crate::sample::{Category, BACKGROUND};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub miou: f64,
    /// IoU per class; `None` for classes absent from both masks.
    pub per_class: BTreeMap<Category, Option<f64>>,
}

/// Accumulates per-class intersections and unions over many mask pairs.
#[derive(Clone, Debug)]
pub struct IouAccumulator {
    classes: BTreeSet<Category>,
    intersection: BTreeMap<Category, u64>,
    union: BTreeMap<Category, u64>,
}

impl IouAccumulator {
    /// Scores `categories` plus background.
    pub fn new(categories: impl IntoIterator<Item = Category>) -> Self {
        let mut classes: BTreeSet<Category> = categories.into_iter().collect();
        classes.insert(BACKGROUND);
        IouAccumulator {
            intersection: classes.iter().map(|&c| (c, 0)).collect(),
            union: classes.iter().map(|&c| (c, 0)).collect(),
            classes,
        }
    }

    pub fn add(&mut self, pred: &CategoryMask, gt: &CategoryMask) -> Result<()> {
        if !pred.same_dims(gt) || pred.channels() != 1 || gt.channels() != 1 {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.width(),
                pred.height(),
                gt.width(),
                gt.height()
            )));
        }
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if p == g {
                if let Some(i) = self.intersection.get_mut(&p) {
                    *i += 1;
                    *self.union.get_mut(&p).expect("same keys") += 1;
                }
            } else {
                if let Some(u) = self.union.get_mut(&p) {
                    *u += 1;
                }
                if let Some(u) = self.union.get_mut(&g) {
                    *u += 1;
                }
            }
        }
        Ok(())
    }

    pub fn report(&self) -> MiouReport {
        let per_class: BTreeMap<Category, Option<f64>> = self
            .classes
            .iter()
            .map(|c| {
                let u = self.union[c];
                (*c, (u > 0).then(|| self.intersection[c] as f64 / u as f64))
            })
            .collect();
        let present: Vec<f64> = per_class.values().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        MiouReport { miou, per_class }
    }
}

/// Mean IoU over `categories` and background for one mask pair.
pub fn miou(
    pred: &CategoryMask,
    gt: &CategoryMask,
    categories: impl IntoIterator<Item = Category>,
) -> Result<MiouReport> {
    let mut acc = IouAccumulator::new(categories);
    acc.add(pred, gt)?;
    Ok(acc.report())
}
