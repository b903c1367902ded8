//! Synthetic scenes with a controllable shape/background confound.
//!
//! Each shape category has a fixed color and a paired background style. A
//! scene's background is the style paired with its first shape's category
//! with probability `confound_prob`, otherwise one of the other styles.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{CategoryMask, ColorImage, Raster, Rect};
use crate::rng::RngStream;
use crate::sample::{Category, LabelSet, Sample, BACKGROUND};

const PLACEMENT_RETRIES: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: usize,
    pub shape_categories: usize,
    pub background_styles: usize,
    pub confound_prob: f64,
    /// Inclusive range of objects attempted per scene.
    pub objects_per_scene: (usize, usize),
    /// Shape side as a fraction of the image side.
    pub shape_scale_range: (f64, f64),
    pub noise_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            shape_categories: 4,
            background_styles: 4,
            confound_prob: 0.95,
            objects_per_scene: (1, 2),
            shape_scale_range: (0.25, 0.5),
            noise_sigma: 0.02,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.image_size < 8 {
            return bad("image_size must be at least 8");
        }
        if self.shape_categories == 0 || self.shape_categories > 254 {
            return bad("shape_categories must be in 1..=254");
        }
        if self.background_styles == 0 {
            return bad("background_styles must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.confound_prob) {
            return bad("confound_prob must be in [0, 1]");
        }
        let (lo, hi) = self.objects_per_scene;
        if lo < 1 || hi < lo {
            return bad("objects_per_scene must satisfy 1 <= min <= max");
        }
        let (slo, shi) = self.shape_scale_range;
        if !(slo > 0.0 && slo <= shi && shi <= 1.0) {
            return bad("shape_scale_range must lie in (0, 1] with lo <= hi");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative");
        }
        Ok(())
    }

    /// Background style paired with a category.
    pub fn paired_style(&self, category: Category) -> usize {
        (category as usize - 1) % self.background_styles
    }

    /// Index-to-name table, background first.
    pub fn category_names(&self) -> Vec<String> {
        let mut names = vec!["background".to_string()];
        for k in 0..self.shape_categories {
            let kind = ShapeKind::for_category(k as Category + 1).name();
            if k < ShapeKind::ALL.len() {
                names.push(kind.to_string());
            } else {
                names.push(format!("{kind}_{k}"));
            }
        }
        names
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Disk,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Square,
        ShapeKind::Disk,
        ShapeKind::Triangle,
        ShapeKind::Cross,
    ];

    pub fn for_category(c: Category) -> ShapeKind {
        ShapeKind::ALL[(c as usize - 1) % ShapeKind::ALL.len()]
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Disk => "disk",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
        }
    }

    /// Whether local pixel `(x, y)` of an `s`x`s` box belongs to the shape.
    fn covers(self, x: usize, y: usize, s: usize) -> bool {
        let (fx, fy, fs) = (x as f64 + 0.5, y as f64 + 0.5, s as f64);
        match self {
            ShapeKind::Square => true,
            ShapeKind::Disk => {
                let r = fs / 2.0;
                (fx - r).powi(2) + (fy - r).powi(2) <= r * r
            }
            ShapeKind::Triangle => {
                // apex at top center, base along the bottom edge
                let half_width = 0.5 * fs * fy / fs;
                (fx - fs / 2.0).abs() <= half_width
            }
            ShapeKind::Cross => {
                let lo = fs / 3.0;
                let hi = 2.0 * fs / 3.0;
                (fx >= lo && fx <= hi) || (fy >= lo && fy <= hi)
            }
        }
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Fill color of a shape category.
pub fn shape_color(cfg: &SynthConfig, c: Category) -> [f64; 3] {
    let k = (c as usize - 1) as f64;
    hsv(k / cfg.shape_categories as f64, 0.8, 1.0)
}

/// Flat base color, texture amplitude and texture orientation of a style.
pub fn background_style(cfg: &SynthConfig, style: usize) -> ([f64; 3], f64, f64) {
    let k = style as f64 / cfg.background_styles as f64;
    // dim, weakly tinted, one style step around the hue wheel from its paired class
    let base = hsv(k + 1.0 / cfg.background_styles as f64, 0.2, 0.5);
    (base, 0.04, PI * k)
}

/// A generated scene and its hidden style assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    pub sample: Sample,
    pub background_style: usize,
    pub primary_category: Category,
}

/// Generates one scene from `rng`.
pub fn gen_scene(cfg: &SynthConfig, id: impl Into<String>, rng: &mut RngStream) -> SynthScene {
    let size = cfg.image_size;
    let cats = cfg.shape_categories;
    let n_objects = rng.range_inclusive(cfg.objects_per_scene.0, cfg.objects_per_scene.1);
    let categories: Vec<Category> = (0..n_objects).map(|_| (rng.below(cats) + 1) as Category).collect();
    let primary = categories[0];

    let paired = cfg.paired_style(primary);
    let style = if cfg.background_styles == 1 || rng.bernoulli(cfg.confound_prob) {
        paired
    } else {
        let other = rng.below(cfg.background_styles - 1);
        if other >= paired {
            other + 1
        } else {
            other
        }
    };

    let (base, amp, angle) = background_style(cfg, style);
    let phase = rng.uniform(0.0, 2.0 * PI);
    // one to two periods across the image
    let freq = 2.0 * PI * 1.5 / size as f64;
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut image: ColorImage = Raster::from_fn(size, size, 3, |x, y, c| {
        let t = ((x as f64 * dx + y as f64 * dy) * freq + phase).sin();
        (base[c] + amp * t) as f32
    });

    let mut mask: CategoryMask = Raster::filled(size, size, 1, BACKGROUND);
    let mut labels = LabelSet::new();
    for (i, &cat) in categories.iter().enumerate() {
        let kind = ShapeKind::for_category(cat);
        let tries = if i == 0 { 1 } else { PLACEMENT_RETRIES };
        for _ in 0..tries {
            let scale = rng.uniform(cfg.shape_scale_range.0, cfg.shape_scale_range.1);
            let side = ((scale * size as f64).round() as usize).clamp(2, size);
            let x0 = rng.range_inclusive(0, size - side);
            let y0 = rng.range_inclusive(0, size - side);
            let rect = Rect::new(x0, y0, side, side);
            let overlaps = (0..side)
                .any(|ly| (0..side).any(|lx| kind.covers(lx, ly, side) && mask.get(x0 + lx, y0 + ly, 0) != BACKGROUND));
            if overlaps {
                continue;
            }
            let color = shape_color(cfg, cat);
            for ly in 0..rect.h {
                for lx in 0..rect.w {
                    if kind.covers(lx, ly, side) {
                        mask.set(x0 + lx, y0 + ly, 0, cat);
                        let px = image.pixel_mut(x0 + lx, y0 + ly);
                        for c in 0..3 {
                            px[c] = color[c] as f32;
                        }
                    }
                }
            }
            labels.insert(cat);
            break;
        }
    }

    if cfg.noise_sigma > 0.0 {
        for v in image.data_mut() {
            *v = (*v as f64 + rng.normal(0.0, cfg.noise_sigma)) as f32;
        }
    }
    image.clamp_unit();

    let sample = Sample {
        id: id.into(),
        image,
        labels,
        gt_mask: Some(mask),
    };
    SynthScene {
        sample,
        background_style: style,
        primary_category: primary,
    }
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:05}")
}

/// Scenes `0..n`, scene `i` drawn from the root stream's child `i`.
pub fn gen_scenes(cfg: &SynthConfig, n: usize, seed: u64) -> Result<Vec<SynthScene>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("corpus size must be at least 1".into()));
    }
    let root = RngStream::root(seed).child("synth");
    Ok((0..n)
        .into_par_iter()
        .map(|i| gen_scene(cfg, scene_id(i), &mut root.child_index(i as u64)))
        .collect())
}

pub fn gen_corpus(cfg: &SynthConfig, n: usize, seed: u64) -> Result<Vec<Sample>> {
    Ok(gen_scenes(cfg, n, seed)?.into_iter().map(|s| s.sample).collect())
}
