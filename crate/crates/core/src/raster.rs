//! Fixed-size pixel grids.
//!
//! A [`Raster`] stores row-major, channel-interleaved values. Color and
//! alpha rasters hold `f32` in `[0, 1]`; category masks hold `u8` indices
//! with 0 as background.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Raster<T> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<T>,
}

/// Three-channel color image with values in `[0, 1]`.
pub type ColorImage = Raster<f32>;
/// Single-channel real map: alpha or heatmap.
pub type GrayMap = Raster<f32>;
/// Single-channel category index mask.
pub type CategoryMask = Raster<u8>;

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x0: usize, y0: usize, w: usize, h: usize) -> Self {
        Rect { x0, y0, w, h }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x0 + self.w && y >= self.y0 && y < self.y0 + self.h
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }
}

impl<T: Copy> Raster<T> {
    pub fn filled(width: usize, height: usize, channels: usize, value: T) -> Self {
        Raster {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 || data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{} values do not fill a {width}x{height}x{channels} raster",
                data.len()
            )));
        }
        Ok(Raster {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Raster {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn same_dims<U>(&self, other: &Raster<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    #[inline]
    fn index(&self, x: usize, y: usize, c: usize) -> usize {
        debug_assert!(x < self.width && y < self.height && c < self.channels);
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> T {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: T) {
        let i = self.index(x, y, c);
        self.data[i] = value;
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[T] {
        let i = self.index(x, y, 0);
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [T] {
        let i = self.index(x, y, 0);
        let c = self.channels;
        &mut self.data[i..i + c]
    }

    /// Value at `(x, y, c)` with coordinates clamped to the raster extent.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize, c: usize) -> T {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y, c)
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Raster<U> {
        Raster {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copies out the `w`x`h` sub-raster whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: i64, y0: i64, w: usize, h: usize) -> Result<Self> {
        let fits =
            x0 >= 0 && y0 >= 0 && w >= 1 && h >= 1 && x0 as usize + w <= self.width && y0 as usize + h <= self.height;
        if !fits {
            return Err(Error::Bounds {
                x0,
                y0,
                w,
                h,
                width: self.width,
                height: self.height,
            });
        }
        let (x0, y0) = (x0 as usize, y0 as usize);
        let mut data = Vec::with_capacity(w * h * self.channels);
        for y in y0..y0 + h {
            let start = self.index(x0, y, 0);
            data.extend_from_slice(&self.data[start..start + w * self.channels]);
        }
        Ok(Raster {
            width: w,
            height: h,
            channels: self.channels,
            data,
        })
    }

    pub fn crop_rect(&self, r: Rect) -> Result<Self> {
        self.crop(r.x0 as i64, r.y0 as i64, r.w, r.h)
    }

    /// Smallest rectangle containing every pixel whose first channel
    /// satisfies `pred`, or `None` when no pixel does.
    pub fn tight_bbox(&self, pred: impl Fn(T) -> bool) -> Option<Rect> {
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if pred(self.get(x, y, 0)) {
                    bounds = Some(match bounds {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        bounds.map(|(x0, y0, x1, y1)| Rect::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1))
    }

    pub fn count(&self, pred: impl Fn(T) -> bool) -> usize {
        self.data.iter().filter(|&&v| pred(v)).count()
    }
}

impl Raster<f32> {
    /// Bilinear sample of channel `c` at continuous pixel-center coordinates
    /// (pixel `(i, j)` has its center at `(i, j)`). Returns `None` outside
    /// the half-pixel-padded extent.
    pub fn sample_bilinear(&self, x: f64, y: f64, c: usize) -> Option<f32> {
        let (w, h) = (self.width as f64, self.height as f64);
        if x < -0.5 || y < -0.5 || x > w - 0.5 || y > h - 0.5 {
            return None;
        }
        let x = x.clamp(0.0, w - 1.0);
        let y = y.clamp(0.0, h - 1.0);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = (x - x0 as f64) as f32;
        let fy = (y - y0 as f64) as f32;
        let top = self.get(x0, y0, c) * (1.0 - fx) + self.get(x1, y0, c) * fx;
        let bottom = self.get(x0, y1, c) * (1.0 - fx) + self.get(x1, y1, c) * fx;
        Some(top * (1.0 - fy) + bottom * fy)
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
}
