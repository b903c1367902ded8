//! Labeled samples and object instances.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{CategoryMask, ColorImage, GrayMap};

/// Category index. 0 is background.
pub type Category = u8;

pub const BACKGROUND: Category = 0;

/// Image-level label set. Never contains background.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Category>", into = "Vec<Category>")]
pub struct LabelSet(BTreeSet<Category>);

impl LabelSet {
    pub fn new() -> Self {
        LabelSet(BTreeSet::new())
    }

    /// Builds a set, dropping background and duplicates.
    pub fn from_categories(cats: impl IntoIterator<Item = Category>) -> Self {
        LabelSet(cats.into_iter().filter(|&c| c != BACKGROUND).collect())
    }

    /// Non-background categories present in a mask.
    pub fn from_mask(mask: &CategoryMask) -> Self {
        LabelSet::from_categories(mask.data().iter().copied())
    }

    /// Adds a category; returns false for background or an existing entry.
    pub fn insert(&mut self, c: Category) -> bool {
        c != BACKGROUND && self.0.insert(c)
    }

    pub fn contains(&self, c: Category) -> bool {
        self.0.contains(&c)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Category> + '_ {
        self.0.iter().copied()
    }

    pub fn single(&self) -> Option<Category> {
        match self.0.len() {
            1 => self.0.iter().next().copied(),
            _ => None,
        }
    }

    pub fn union(&self, other: &LabelSet) -> LabelSet {
        LabelSet(self.0.union(&other.0).copied().collect())
    }

    pub fn is_superset(&self, other: &LabelSet) -> bool {
        self.0.is_superset(&other.0)
    }

    pub fn is_disjoint(&self, other: &LabelSet) -> bool {
        self.0.is_disjoint(&other.0)
    }
}

impl TryFrom<Vec<Category>> for LabelSet {
    type Error = String;

    fn try_from(v: Vec<Category>) -> Result<Self, String> {
        let mut set = LabelSet::new();
        for c in v {
            if c == BACKGROUND {
                return Err("label set must not contain background (0)".into());
            }
            if !set.insert(c) {
                return Err(format!("duplicate label {c}"));
            }
        }
        Ok(set)
    }
}

impl From<LabelSet> for Vec<Category> {
    fn from(s: LabelSet) -> Self {
        s.0.into_iter().collect()
    }
}

impl FromIterator<Category> for LabelSet {
    fn from_iter<I: IntoIterator<Item = Category>>(iter: I) -> Self {
        LabelSet::from_categories(iter)
    }
}

/// An image with its image-level labels and an optional evaluation mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: ColorImage,
    pub labels: LabelSet,
    pub gt_mask: Option<CategoryMask>,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        image: ColorImage,
        labels: LabelSet,
        gt_mask: Option<CategoryMask>,
    ) -> Result<Self> {
        let s = Sample {
            id: id.into(),
            image,
            labels,
            gt_mask,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image.channels() != 3 {
            return Err(Error::Shape(format!(
                "sample {}: image has {} channels, expected 3",
                self.id,
                self.image.channels()
            )));
        }
        if let Some(gt) = &self.gt_mask {
            if !gt.same_dims(&self.image) || gt.channels() != 1 {
                return Err(Error::Shape(format!(
                    "sample {}: gt mask {}x{}x{} does not match image {}x{}",
                    self.id,
                    gt.width(),
                    gt.height(),
                    gt.channels(),
                    self.image.width(),
                    self.image.height()
                )));
            }
            if LabelSet::from_mask(gt) != self.labels {
                return Err(Error::Shape(format!(
                    "sample {}: gt mask categories differ from labels {:?}",
                    self.id, self.labels
                )));
            }
        }
        Ok(())
    }
}

/// A tight-cropped object cutout with per-pixel alpha.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectInstance {
    pub cutout: ColorImage,
    pub alpha: GrayMap,
    pub category: Category,
    pub source_id: String,
}

impl ObjectInstance {
    /// Builds an instance, checking dimensions, non-emptiness and the
    /// tight-crop property of the `alpha > 0.5` support.
    pub fn new(cutout: ColorImage, alpha: GrayMap, category: Category, source_id: impl Into<String>) -> Result<Self> {
        let inst = ObjectInstance {
            cutout,
            alpha,
            category,
            source_id: source_id.into(),
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cutout.channels() != 3 || self.alpha.channels() != 1 {
            return Err(Error::Shape(
                "instance needs 3-channel cutout and 1-channel alpha".into(),
            ));
        }
        if !self.cutout.same_dims(&self.alpha) {
            return Err(Error::Shape(format!(
                "cutout {}x{} and alpha {}x{} differ",
                self.cutout.width(),
                self.cutout.height(),
                self.alpha.width(),
                self.alpha.height()
            )));
        }
        if self.category == BACKGROUND {
            return Err(Error::Shape("instance category must not be background".into()));
        }
        match self.alpha.tight_bbox(|a| a > 0.5) {
            None => Err(Error::EmptyObject {
                category: self.category,
            }),
            Some(r) if r.x0 != 0 || r.y0 != 0 || r.w != self.width() || r.h != self.height() => Err(Error::Shape(
                format!("alpha support {r:?} is not tight in {}x{}", self.width(), self.height()),
            )),
            Some(_) => Ok(()),
        }
    }

    pub fn width(&self) -> usize {
        self.alpha.width()
    }

    pub fn height(&self) -> usize {
        self.alpha.height()
    }

    /// Number of pixels with `alpha > 0.5`.
    pub fn support_area(&self) -> usize {
        self.alpha.count(|a| a > 0.5)
    }
}
