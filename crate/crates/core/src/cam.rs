//! A small multi-label classifier with class activation maps.
//!
//! Each class scores every pixel linearly from eight handcrafted features;
//! the class logit is the global average of its score map. Because the
//! pooled logit is linear in the pooled features, training only needs the
//! per-image feature means, while the full score maps give the CAMs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{draw_batch_indices, make_batch, AugmentConfig};
use crate::error::{Error, Result};
use crate::harvest::InstanceBank;
use crate::raster::{CategoryMask, ColorImage, Raster};
use crate::rng::RngStream;
use crate::sample::{Category, LabelSet, Sample, BACKGROUND};

/// R, G, B, luma, |d/dx|, |d/dy|, 3x3 mean and 3x3 variance of luma.
pub const FEATURE_DIM: usize = 8;

pub type Heatmap = Raster<f64>;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * FEATURE_DIM {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height}x{FEATURE_DIM} feature map",
                data.len()
            )));
        }
        Ok(FeatureMap { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn feature_dim(&self) -> usize {
        self.data.len() / (self.width * self.height).max(1)
    }

    pub fn at(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * FEATURE_DIM;
        &self.data[i..i + FEATURE_DIM]
    }

    /// Spatial mean of every feature.
    pub fn pooled(&self) -> [f64; FEATURE_DIM] {
        let mut sum = [0.0; FEATURE_DIM];
        for px in self.data.chunks_exact(FEATURE_DIM) {
            for (s, v) in sum.iter_mut().zip(px) {
                *s += v;
            }
        }
        let n = (self.width * self.height) as f64;
        sum.map(|s| s / n)
    }
}

fn luma(px: &[f32]) -> f64 {
    0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64
}

pub fn extract_features(image: &ColorImage) -> FeatureMap {
    let (w, h) = (image.width(), image.height());
    let gray = Raster::from_fn(w, h, 1, |x, y, _| luma(image.pixel(x, y)));
    let mut data = Vec::with_capacity(w * h * FEATURE_DIM);
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            let px = image.pixel(x, y);
            let g = |dx: isize, dy: isize| gray.get_clamped(xi + dx, yi + dy, 0);
            let gx = (g(1, 0) - g(-1, 0)) / 2.0;
            let gy = (g(0, 1) - g(0, -1)) / 2.0;
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let v = g(dx, dy);
                    sum += v;
                    sum_sq += v * v;
                }
            }
            let mean = sum / 9.0;
            let var = (sum_sq / 9.0 - mean * mean).max(0.0);
            data.extend_from_slice(&[
                px[0] as f64,
                px[1] as f64,
                px[2] as f64,
                g(0, 0),
                gx.abs(),
                gy.abs(),
                mean,
                var,
            ]);
        }
    }
    FeatureMap {
        width: w,
        height: h,
        data,
    }
}

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub step_size: f64,
    pub epochs: usize,
    /// Corpus samples drawn per step (`N`; pairwise batches hold `2N`).
    pub batch_size: usize,
    /// CAM threshold for pseudo-masks.
    pub tau: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            step_size: 0.1,
            epochs: 30,
            batch_size: 16,
            tau: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config("model: step_size must be finite and >= 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("model: epochs and batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config("model: tau must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Linear per-pixel scorer; row `c - 1` of `weights` belongs to category `c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub categories: usize,
    pub feature_dim: usize,
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl ToyModel {
    pub fn zeros(categories: usize) -> Self {
        ToyModel {
            categories,
            feature_dim: FEATURE_DIM,
            weights: vec![vec![0.0; FEATURE_DIM]; categories],
            bias: vec![0.0; categories],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims_ok = self.weights.len() == self.categories
            && self.bias.len() == self.categories
            && self.feature_dim == FEATURE_DIM
            && self.weights.iter().all(|r| r.len() == FEATURE_DIM);
        if !dims_ok {
            return Err(Error::Shape(format!(
                "model must be {}x{FEATURE_DIM} with {} biases",
                self.categories, self.categories
            )));
        }
        let finite = self
            .bias
            .iter()
            .chain(self.weights.iter().flatten())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Shape("model has non-finite parameters".into()));
        }
        Ok(())
    }

    fn row(&self, category: Category) -> Result<(&[f64], f64)> {
        let c = category as usize;
        if c == 0 || c > self.categories {
            return Err(Error::Shape(format!(
                "category {category} outside 1..={}",
                self.categories
            )));
        }
        Ok((&self.weights[c - 1], self.bias[c - 1]))
    }

    /// Logits from pooled features.
    pub fn logits_pooled(&self, pooled: &[f64; FEATURE_DIM]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| dot(w, pooled) + b)
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-class score maps and their global averages.
#[derive(Clone, Debug)]
pub struct Forward {
    pub score_maps: Vec<Heatmap>,
    pub logits: Vec<f64>,
}

pub fn forward(m: &ToyModel, f: &FeatureMap) -> Result<Forward> {
    if f.feature_dim() != m.feature_dim {
        return Err(Error::Shape(format!(
            "features have {} channels, model expects {}",
            f.feature_dim(),
            m.feature_dim
        )));
    }
    let n = (f.width * f.height) as f64;
    let mut score_maps = Vec::with_capacity(m.categories);
    let mut logits = Vec::with_capacity(m.categories);
    for (w, b) in m.weights.iter().zip(&m.bias) {
        let scores: Vec<f64> = f.data.chunks_exact(FEATURE_DIM).map(|px| dot(w, px) + b).collect();
        logits.push(scores.iter().sum::<f64>() / n);
        score_maps.push(Raster::from_vec(f.width, f.height, 1, scores)?);
    }
    Ok(Forward { score_maps, logits })
}

/// Gradient of the loss with respect to the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl Gradients {
    fn zeros(categories: usize) -> Self {
        Gradients {
            weights: vec![vec![0.0; FEATURE_DIM]; categories],
            bias: vec![0.0; categories],
        }
    }

    fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.weights.iter_mut().flatten().zip(other.weights.iter().flatten()) {
            *a += scale * b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += scale * b;
        }
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Summed binary cross-entropy over classes, from pooled features.
pub fn loss_and_grad_pooled(m: &ToyModel, pooled: &[f64; FEATURE_DIM], labels: &LabelSet) -> (f64, Gradients) {
    let logits = m.logits_pooled(pooled);
    let mut loss = 0.0;
    let mut grads = Gradients::zeros(m.categories);
    for (i, z) in logits.into_iter().enumerate() {
        let y = if labels.contains((i + 1) as Category) { 1.0 } else { 0.0 };
        // -y ln s(z) - (1 - y) ln(1 - s(z)) = softplus(z) - y z
        loss += softplus(z) - y * z;
        let dz = sigmoid(z) - y;
        for (g, p) in grads.weights[i].iter_mut().zip(pooled) {
            *g = dz * p;
        }
        grads.bias[i] = dz;
    }
    (loss, grads)
}

pub fn loss_and_grad(m: &ToyModel, f: &FeatureMap, labels: &LabelSet) -> Result<(f64, Gradients)> {
    if f.feature_dim() != m.feature_dim {
        return Err(Error::Shape("feature dimension mismatch".into()));
    }
    Ok(loss_and_grad_pooled(m, &f.pooled(), labels))
}

/// Score map of `category`, min-max normalized to `[0, 1]`; a constant map
/// becomes all zeros.
pub fn cam(m: &ToyModel, image: &ColorImage, category: Category) -> Result<Heatmap> {
    cam_from_features(m, &extract_features(image), category)
}

pub fn cam_from_features(m: &ToyModel, f: &FeatureMap, category: Category) -> Result<Heatmap> {
    let (w, b) = m.row(category)?;
    let scores: Vec<f64> = f.data.chunks_exact(FEATURE_DIM).map(|px| dot(w, px) + b).collect();
    let (lo, hi) = scores.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let span = hi - lo;
    let data = if span > 0.0 {
        scores.iter().map(|v| (v - lo) / span).collect()
    } else {
        vec![0.0; scores.len()]
    };
    Raster::from_vec(f.width, f.height, 1, data)
}

/// `category` where `heatmap >= tau`, background elsewhere.
pub fn cam_to_mask(heatmap: &Heatmap, tau: f64, category: Category) -> CategoryMask {
    heatmap.map(|v| if v >= tau { category } else { BACKGROUND })
}

/// Pseudo-mask for an image with known labels: each pixel takes the labeled
/// class with the highest CAM value if that value reaches `tau`.
pub fn predict_mask(m: &ToyModel, image: &ColorImage, labels: &LabelSet, tau: f64) -> Result<CategoryMask> {
    let features = extract_features(image);
    let heatmaps = labels
        .iter()
        .map(|c| Ok((c, cam_from_features(m, &features, c)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(combine_heatmaps(&heatmaps, image.width(), image.height(), tau))
}

pub fn combine_heatmaps(heatmaps: &[(Category, Heatmap)], w: usize, h: usize, tau: f64) -> CategoryMask {
    Raster::from_fn(w, h, 1, |x, y, _| {
        let mut best = (BACKGROUND, f64::NEG_INFINITY);
        for (c, hm) in heatmaps {
            let v = hm.get(x, y, 0);
            if v > best.1 {
                best = (*c, v);
            }
        }
        if best.1 >= tau {
            best.0
        } else {
            BACKGROUND
        }
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-entry loss over each epoch.
    pub epoch_loss: Vec<f64>,
    /// Per-class average precision on held-out scenes.
    pub average_precision: Vec<f64>,
    pub steps: usize,
    pub entries_seen: usize,
    /// Augmentations that fell back to the original sample.
    pub skipped: usize,
}

/// Augmented training source.
#[derive(Clone, Copy, Debug)]
pub struct Augmentation<'a> {
    pub bank: &'a InstanceBank,
    pub cfg: &'a AugmentConfig,
}

/// Average precision of ranking `scores` against binary `truth`.
pub fn average_precision(scores: &[f64], truth: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let positives = truth.iter().filter(|&&t| t).count();
    if positives == 0 {
        return 0.0;
    }
    let mut hits = 0;
    let mut acc = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if truth[i] {
            hits += 1;
            acc += hits as f64 / (rank + 1) as f64;
        }
    }
    acc / positives as f64
}

/// Gradient descent over batches of `batch_size` samples drawn from
/// `corpus`. With augmentation each batch comes from [`make_batch`] and every
/// entry (original or augmented) carries equal weight in the mean loss.
pub fn train(
    corpus: &[Sample],
    holdout: &[Sample],
    categories: usize,
    cfg: &ModelConfig,
    augmentation: Option<Augmentation<'_>>,
    rng: &RngStream,
) -> Result<(ToyModel, TrainReport)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    if let Some(a) = augmentation {
        a.cfg.validate()?;
    }
    let pooled: Vec<[f64; FEATURE_DIM]> = corpus.par_iter().map(|s| extract_features(&s.image).pooled()).collect();

    let n = cfg.batch_size.min(corpus.len());
    let steps_per_epoch = corpus.len().div_ceil(n);
    let mut model = ToyModel::zeros(categories);
    let mut report = TrainReport::default();
    let step_root = rng.child("step");

    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut epoch_entries = 0usize;
        for s in 0..steps_per_epoch {
            let step_rng = step_root.child_index((epoch * steps_per_epoch + s) as u64);
            // (pooled features, labels) per entry
            let entries: Vec<([f64; FEATURE_DIM], LabelSet)> = match augmentation {
                None => draw_batch_indices(corpus.len(), n, &step_rng)
                    .into_iter()
                    .map(|i| (pooled[i], corpus[i].labels.clone()))
                    .collect(),
                Some(a) => {
                    let batch = make_batch(corpus, a.bank, n, a.cfg, &step_rng)?;
                    report.skipped += batch.skipped;
                    batch
                        .entries
                        .into_par_iter()
                        .map(|e| {
                            let p = if e.placements.is_empty() {
                                pooled[e.source_index]
                            } else {
                                extract_features(&e.sample.image).pooled()
                            };
                            (p, e.sample.labels)
                        })
                        .collect()
                }
            };
            let per_entry: Vec<(f64, Gradients)> = entries
                .par_iter()
                .map(|(p, labels)| loss_and_grad_pooled(&model, p, labels))
                .collect();
            let scale = 1.0 / per_entry.len() as f64;
            let mut grad = Gradients::zeros(categories);
            for (loss, g) in &per_entry {
                epoch_loss += loss;
                grad.add_scaled(g, scale);
            }
            epoch_entries += per_entry.len();
            for (w, g) in model.weights.iter_mut().flatten().zip(grad.weights.iter().flatten()) {
                *w -= cfg.step_size * g;
            }
            for (b, g) in model.bias.iter_mut().zip(&grad.bias) {
                *b -= cfg.step_size * g;
            }
            report.steps += 1;
        }
        let mean_loss = epoch_loss / epoch_entries as f64;
        if !mean_loss.is_finite() || model.validate().is_err() {
            return Err(Error::TrainingFailed { epoch });
        }
        report.epoch_loss.push(mean_loss);
        report.entries_seen += epoch_entries;
    }

    if !holdout.is_empty() {
        let logits: Vec<Vec<f64>> = holdout
            .par_iter()
            .map(|s| model.logits_pooled(&extract_features(&s.image).pooled()))
            .collect();
        report.average_precision = (0..categories)
            .map(|c| {
                let scores: Vec<f64> = logits.iter().map(|l| l[c]).collect();
                let truth: Vec<bool> = holdout.iter().map(|s| s.labels.contains((c + 1) as Category)).collect();
                average_precision(&scores, &truth)
            })
            .collect();
    }
    Ok((model, report))
}
