//! Copy-paste augmentation that decouples objects from their habitual
//! backgrounds, for weakly supervised semantic segmentation.
//!
//! Pipeline: a classifier's pseudo-masks are filtered into an
//! [`InstanceBank`](harvest::InstanceBank) of clean object cutouts
//! ([`harvest`]); during training each drawn image gets a foreign-category
//! object pasted in ([`blend`], [`augment`]) and is fed alongside its
//! original. [`synth`], [`cam`] and [`experiment`] form a desk-scale harness
//! that measures the effect on confounded synthetic scenes.

pub mod augment;
pub mod blend;
pub mod cam;
pub mod cli;
pub mod error;
pub mod experiment;
pub mod harvest;
pub mod io;
pub mod metrics;
pub mod raster;
pub mod rng;
pub mod sample;
pub mod synth;

pub use error::{Error, Result};
pub use raster::{CategoryMask, ColorImage, GrayMap, Raster, Rect};
pub use rng::RngStream;
pub use sample::{Category, LabelSet, ObjectInstance, Sample, BACKGROUND};
