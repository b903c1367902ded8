//! Geometric transforms and alpha compositing of object instances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ColorImage, GrayMap, Raster, Rect};
use crate::rng::RngStream;
use crate::sample::{Category, ObjectInstance};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    UniformInside,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlendConfig {
    /// Target-area fraction the pasted alpha support should occupy.
    pub scale_area_range: (f64, f64),
    /// Applies the random rescale. When off the instance keeps its size
    /// unless it has to shrink to fit.
    pub rescale_enabled: bool,
    pub rotation_range_deg: (f64, f64),
    pub rotation_enabled: bool,
    /// Alpha softening radius in pixels; 0 disables.
    pub gaussian_sigma: f64,
    pub placement: Placement,
}

impl Default for BlendConfig {
    fn default() -> Self {
        BlendConfig {
            scale_area_range: (0.05, 0.30),
            rescale_enabled: true,
            rotation_range_deg: (-45.0, 45.0),
            rotation_enabled: true,
            gaussian_sigma: 0.0,
            placement: Placement::UniformInside,
        }
    }
}

impl BlendConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_area_range;
        // lo == hi is allowed so a fixed scale can be pinned
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "blend: scale_area_range must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"
            )));
        }
        let (rlo, rhi) = self.rotation_range_deg;
        if !(rlo.is_finite() && rhi.is_finite() && rlo <= rhi) {
            return Err(Error::Config(
                "blend: rotation_range_deg must be finite with lo <= hi".into(),
            ));
        }
        if !(self.gaussian_sigma >= 0.0 && self.gaussian_sigma.is_finite()) {
            return Err(Error::Config("blend: gaussian_sigma must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementRecord {
    pub instance_source_id: String,
    pub category: Category,
    pub scale_factor: f64,
    pub rotation_deg: f64,
    pub paste_x: usize,
    pub paste_y: usize,
    pub width: usize,
    pub height: usize,
    /// Fraction of pre-existing ground-truth foreground covered by the
    /// pasted support; 0 when no ground truth is available.
    pub occluded_fraction: f64,
}

impl PlacementRecord {
    pub fn rect(&self) -> Rect {
        Rect::new(self.paste_x, self.paste_y, self.width, self.height)
    }
}

fn binarize(alpha: &mut GrayMap) {
    for a in alpha.data_mut() {
        *a = if *a > 0.5 { 1.0 } else { 0.0 };
    }
}

fn retight(cutout: ColorImage, alpha: GrayMap, template: &ObjectInstance) -> Result<ObjectInstance> {
    let rect = alpha.tight_bbox(|a| a > 0.5).ok_or(Error::TooSmall {
        width: alpha.width(),
        height: alpha.height(),
    })?;
    ObjectInstance::new(
        cutout.crop_rect(rect)?,
        alpha.crop_rect(rect)?,
        template.category,
        template.source_id.clone(),
    )
}

/// Resamples the instance by `factor` with bilinear interpolation; alpha is
/// re-binarized at 0.5 and the result re-cropped to its support.
pub fn rescale_instance(inst: &ObjectInstance, factor: f64) -> Result<ObjectInstance> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::Config(format!("rescale factor must be positive, got {factor}")));
    }
    if factor == 1.0 {
        return Ok(inst.clone());
    }
    let w = (inst.width() as f64 * factor).round() as usize;
    let h = (inst.height() as f64 * factor).round() as usize;
    if w == 0 || h == 0 {
        return Err(Error::TooSmall { width: w, height: h });
    }
    // map output pixel centers back to source pixel centers
    let sx = inst.width() as f64 / w as f64;
    let sy = inst.height() as f64 / h as f64;
    let src = |x: usize, y: usize| ((x as f64 + 0.5) * sx - 0.5, (y as f64 + 0.5) * sy - 0.5);
    let cutout = Raster::from_fn(w, h, 3, |x, y, c| {
        let (u, v) = src(x, y);
        inst.cutout.sample_bilinear(u, v, c).unwrap_or(0.0)
    });
    let mut alpha = Raster::from_fn(w, h, 1, |x, y, _| {
        let (u, v) = src(x, y);
        inst.alpha.sample_bilinear(u, v, 0).unwrap_or(0.0)
    });
    binarize(&mut alpha);
    retight(cutout, alpha, inst)
}

/// Rotates the instance counter-clockwise (in image coordinates with y
/// pointing down, positive angles turn the object clockwise on screen)
/// about its center onto a canvas large enough to hold every corner.
pub fn rotate_instance(inst: &ObjectInstance, degrees: f64) -> Result<ObjectInstance> {
    if degrees == 0.0 {
        return Ok(inst.clone());
    }
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let (w, h) = (inst.width() as f64, inst.height() as f64);
    // trig round-off must not add a pixel at right angles
    let out_w = (w * cos.abs() + h * sin.abs() - 1e-9).ceil().max(1.0) as usize;
    let out_h = (w * sin.abs() + h * cos.abs() - 1e-9).ceil().max(1.0) as usize;
    let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
    let (ocx, ocy) = ((out_w as f64 - 1.0) / 2.0, (out_h as f64 - 1.0) / 2.0);
    // inverse rotation from output to source coordinates
    let src = |x: usize, y: usize| {
        let (dx, dy) = (x as f64 - ocx, y as f64 - ocy);
        (cos * dx + sin * dy + cx, -sin * dx + cos * dy + cy)
    };
    let cutout = Raster::from_fn(out_w, out_h, 3, |x, y, c| {
        let (u, v) = src(x, y);
        inst.cutout.sample_bilinear(u, v, c).unwrap_or(0.0)
    });
    let mut alpha = Raster::from_fn(out_w, out_h, 1, |x, y, _| {
        let (u, v) = src(x, y);
        inst.alpha.sample_bilinear(u, v, 0).unwrap_or(0.0)
    });
    binarize(&mut alpha);
    retight(cutout, alpha, inst)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Convolves alpha with a normalized separable Gaussian of radius
/// `ceil(3σ)`. The kernel is truncated at the raster boundary without
/// renormalizing, so alpha falls off toward the crop edges. Color is
/// untouched.
pub fn smooth_alpha(inst: &ObjectInstance, sigma: f64) -> ObjectInstance {
    if sigma <= 0.0 {
        return inst.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (w, h) = (inst.width() as isize, inst.height() as isize);
    let taps = |center: isize, len: isize| {
        kernel
            .iter()
            .enumerate()
            .map(move |(k, &wt)| (center + k as isize - radius, wt))
            .filter(move |&(i, _)| i >= 0 && i < len)
    };
    let a = &inst.alpha;
    let mut horizontal = vec![0.0f64; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            horizontal[(y * w + x) as usize] = taps(x, w)
                .map(|(xx, wt)| wt * a.get(xx as usize, y as usize, 0) as f64)
                .sum();
        }
    }
    let alpha = Raster::from_fn(w as usize, h as usize, 1, |x, y, _| {
        let v: f64 = taps(y as isize, h)
            .map(|(yy, wt)| wt * horizontal[yy as usize * w as usize + x])
            .sum();
        v.clamp(0.0, 1.0) as f32
    });
    ObjectInstance {
        cutout: inst.cutout.clone(),
        alpha,
        category: inst.category,
        source_id: inst.source_id.clone(),
    }
}

/// Composites the instance onto a copy of `target` with its top-left corner
/// at `(x, y)`: `out = a * cutout + (1 - a) * target`.
pub fn paste(target: &ColorImage, inst: &ObjectInstance, x: i64, y: i64) -> Result<ColorImage> {
    let (w, h) = (inst.width(), inst.height());
    if x < 0 || y < 0 || x as usize + w > target.width() || y as usize + h > target.height() {
        return Err(Error::Bounds {
            x0: x,
            y0: y,
            w,
            h,
            width: target.width(),
            height: target.height(),
        });
    }
    let (x, y) = (x as usize, y as usize);
    let mut out = target.clone();
    for ly in 0..h {
        for lx in 0..w {
            let a = inst.alpha.get(lx, ly, 0);
            if a <= 0.0 {
                continue;
            }
            let src = inst.cutout.pixel(lx, ly);
            let dst = out.pixel_mut(x + lx, y + ly);
            if a >= 1.0 {
                dst.copy_from_slice(src);
            } else {
                for c in 0..3 {
                    dst[c] = a * src[c] + (1.0 - a) * dst[c];
                }
            }
        }
    }
    Ok(out)
}

/// Scale factor so the instance's support covers `area_fraction` of a
/// `target_w`x`target_h` image, shrunk further if needed so that its box
/// fits inside the target.
fn scale_for(inst: &ObjectInstance, area_fraction: f64, target_w: usize, target_h: usize) -> f64 {
    let support = inst.support_area().max(1) as f64;
    let desired = (area_fraction * (target_w * target_h) as f64 / support).sqrt();
    let fit = (target_w as f64 / inst.width() as f64).min(target_h as f64 / inst.height() as f64);
    desired.min(fit)
}

const MAX_SHAPE_CORRECTIONS: usize = 8;

/// Result of [`random_blend`].
#[derive(Clone, Debug, PartialEq)]
pub struct Blended {
    pub image: ColorImage,
    pub record: PlacementRecord,
    /// The transformed instance as pasted.
    pub instance: ObjectInstance,
}

/// Randomly rescales, rotates, optionally softens and places `inst` on
/// `target`. `occupied` (same dims as target, when given) marks existing
/// foreground for the occlusion statistic.
pub fn random_blend(
    target: &ColorImage,
    occupied: Option<&dyn Fn(usize, usize) -> bool>,
    inst: &ObjectInstance,
    cfg: &BlendConfig,
    rng: &mut RngStream,
) -> Result<Blended> {
    let (tw, th) = (target.width(), target.height());
    let area_fraction = rng.uniform(cfg.scale_area_range.0, cfg.scale_area_range.1);
    let rotation = if cfg.rotation_enabled {
        rng.uniform(cfg.rotation_range_deg.0, cfg.rotation_range_deg.1)
    } else {
        0.0
    };

    let target_area = (tw * th) as f64;
    let (area_lo, area_hi) = (
        cfg.scale_area_range.0 * target_area,
        cfg.scale_area_range.1 * target_area,
    );
    let mut factor = if cfg.rescale_enabled {
        scale_for(inst, area_fraction, tw, th)
    } else {
        scale_for(inst, f64::INFINITY, tw, th).min(1.0)
    };
    let transform = |f: f64| rotate_instance(&rescale_instance(inst, f)?, rotation);
    let mut shaped = transform(factor)?;
    // Rotation can push the box past the target, and resampling can move
    // the support area off the drawn value; correct the factor for both.
    // A pinned range (lo == hi) keeps the analytic factor.
    let mut fit_cap = f64::INFINITY;
    for _ in 0..MAX_SHAPE_CORRECTIONS {
        let (w, h) = (shaped.width(), shaped.height());
        if w > tw || h > th {
            let shrink = (tw as f64 / w as f64).min(th as f64 / h as f64);
            factor *= shrink * 0.98;
            fit_cap = factor;
        } else {
            let area = shaped.support_area() as f64;
            let refine = cfg.rescale_enabled && area_lo < area_hi && (area < area_lo || area > area_hi);
            if !refine || factor >= fit_cap {
                break;
            }
            let goal = (area_fraction * target_area).clamp(area_lo + 0.5, area_hi - 0.5);
            factor = (factor * (goal / area).sqrt()).min(fit_cap);
        }
        shaped = transform(factor)?;
    }
    if shaped.width() > tw || shaped.height() > th {
        return Err(Error::Placement {
            iw: shaped.width(),
            ih: shaped.height(),
            tw,
            th,
        });
    }
    let shaped = smooth_alpha(&shaped, cfg.gaussian_sigma);

    let x = rng.range_inclusive(0, tw - shaped.width());
    let y = rng.range_inclusive(0, th - shaped.height());
    let image = paste(target, &shaped, x as i64, y as i64)?;

    let occluded_fraction = occupied
        .map(|is_fg| {
            let mut fg = 0usize;
            let mut covered = 0usize;
            for yy in 0..th {
                for xx in 0..tw {
                    if is_fg(xx, yy) {
                        fg += 1;
                        let inside = xx >= x && yy >= y && xx < x + shaped.width() && yy < y + shaped.height();
                        if inside && shaped.alpha.get(xx - x, yy - y, 0) > 0.5 {
                            covered += 1;
                        }
                    }
                }
            }
            if fg == 0 {
                0.0
            } else {
                covered as f64 / fg as f64
            }
        })
        .unwrap_or(0.0);

    let record = PlacementRecord {
        instance_source_id: inst.source_id.clone(),
        category: inst.category,
        scale_factor: factor,
        rotation_deg: rotation,
        paste_x: x,
        paste_y: y,
        width: shaped.width(),
        height: shaped.height(),
        occluded_fraction,
    };
    Ok(Blended {
        image,
        record,
        instance: shaped,
    })
}
