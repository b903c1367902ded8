//! On-disk formats: PNG rasters, the corpus manifest, instance banks,
//! models, reports and the TOML experiment config.
//!
//! Rasters are quantized to 8 bits only here. Color and alpha map `[0, 1]`
//! to `round(v * 255)`; category masks store the index as the gray value.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cam::{Heatmap, ToyModel};
use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;
use crate::harvest::{InstanceBank, Provenance};
use crate::raster::{CategoryMask, ColorImage, GrayMap, Raster};
use crate::sample::{Category, LabelSet, ObjectInstance, Sample};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BANK_FILE: &str = "bank.json";

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(v: u8) -> f32 {
    v as f32 / 255.0
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    create_parent(path)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(data).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

/// Decoded 8-bit pixels with their channel count (1 or 3).
struct Decoded {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

fn read_png(path: &Path) -> Result<Decoded> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| png_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    buf.truncate(info.buffer_size());
    let (width, height) = (info.width as usize, info.height as usize);
    let (channels, data) = match info.color_type {
        png::ColorType::Grayscale => (1, buf),
        png::ColorType::GrayscaleAlpha => (1, buf.chunks_exact(2).map(|p| p[0]).collect()),
        png::ColorType::Rgb => (3, buf),
        png::ColorType::Rgba => (3, buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect()),
        other => return Err(png_err(path, format!("unsupported color type {other:?}"))),
    };
    Ok(Decoded {
        width,
        height,
        channels,
        data,
    })
}

pub fn write_color(path: &Path, image: &ColorImage) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::Shape(format!("color image has {} channels", image.channels())));
    }
    let bytes: Vec<u8> = image.data().iter().map(|&v| quantize(v as f64)).collect();
    write_png(path, image.width(), image.height(), png::ColorType::Rgb, &bytes)
}

/// Reads an RGB image; grayscale files are replicated across channels.
pub fn read_color(path: &Path) -> Result<ColorImage> {
    let d = read_png(path)?;
    let data: Vec<f32> = match d.channels {
        3 => d.data.iter().map(|&v| dequantize(v)).collect(),
        _ => d.data.iter().flat_map(|&v| [dequantize(v); 3]).collect(),
    };
    Raster::from_vec(d.width, d.height, 3, data)
}

pub fn write_mask(path: &Path, mask: &CategoryMask) -> Result<()> {
    if mask.channels() != 1 {
        return Err(Error::Shape(format!("mask has {} channels", mask.channels())));
    }
    write_png(
        path,
        mask.width(),
        mask.height(),
        png::ColorType::Grayscale,
        mask.data(),
    )
}

pub fn read_mask(path: &Path) -> Result<CategoryMask> {
    let d = read_png(path)?;
    if d.channels != 1 {
        return Err(png_err(path, "category mask must be single-channel grayscale"));
    }
    Raster::from_vec(d.width, d.height, 1, d.data)
}

/// Writes a single-channel map with values in `[0, 1]` (alpha, heatmap).
pub fn write_unit<T: Copy + Into<f64>>(path: &Path, map: &Raster<T>) -> Result<()> {
    if map.channels() != 1 {
        return Err(Error::Shape(format!("map has {} channels", map.channels())));
    }
    let bytes: Vec<u8> = map.data().iter().map(|&v| quantize(v.into())).collect();
    write_png(path, map.width(), map.height(), png::ColorType::Grayscale, &bytes)
}

pub fn read_unit(path: &Path) -> Result<GrayMap> {
    let d = read_png(path)?;
    if d.channels != 1 {
        return Err(png_err(path, "expected a single-channel grayscale map"));
    }
    Raster::from_vec(d.width, d.height, 1, d.data.iter().map(|&v| dequantize(v)).collect())
}

pub fn write_heatmap(path: &Path, map: &Heatmap) -> Result<()> {
    write_unit(path, map)
}

/// Pretty JSON with a trailing newline. Struct fields keep declaration
/// order and maps are ordered, so equal values give equal bytes.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    create_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Path relative to the manifest's directory.
    pub image: String,
    pub labels: Vec<Category>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mask: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    /// Index to name; entry 0 is `"background"`.
    pub categories: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Number of non-background categories.
    pub fn category_count(&self) -> usize {
        self.categories.len().saturating_sub(1)
    }

    /// Checks every invariant except file existence.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.version != FORMAT_VERSION {
            return Err(format!("version: expected {FORMAT_VERSION}, found {}", self.version));
        }
        match self.categories.first() {
            Some(n) if n == "background" => {}
            Some(n) => return Err(format!("categories[0]: must be \"background\", found {n:?}")),
            None => return Err("categories: empty name table".into()),
        }
        if self.categories.len() > 256 {
            return Err(format!("categories: {} names exceed 256", self.categories.len()));
        }
        let mut ids = BTreeSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            if e.id.is_empty() {
                return Err(format!("entries[{i}].id: empty"));
            }
            if !ids.insert(e.id.as_str()) {
                return Err(format!("entries[{i}].id: duplicate id {:?}", e.id));
            }
            let mut seen = BTreeSet::new();
            for (j, &c) in e.labels.iter().enumerate() {
                if c == 0 {
                    return Err(format!("entries[{i}].labels[{j}]: background (0) is not a label"));
                }
                if c as usize >= self.categories.len() {
                    return Err(format!(
                        "entries[{i}].labels[{j}]: category {c} not in the name table (1..={})",
                        self.category_count()
                    ));
                }
                if !seen.insert(c) {
                    return Err(format!("entries[{i}].labels[{j}]: duplicate category {c}"));
                }
            }
        }
        Ok(())
    }
}

fn manifest_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Parses and validates a manifest, including that referenced files exist.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| manifest_err(path, e.to_string()))?;
    manifest.validate().map_err(|m| manifest_err(path, m))?;
    let base = path.parent().unwrap_or(Path::new(""));
    for (i, e) in manifest.entries.iter().enumerate() {
        if !base.join(&e.image).is_file() {
            return Err(manifest_err(
                path,
                format!("entries[{i}].image: {} does not exist", e.image),
            ));
        }
        if let Some(m) = &e.gt_mask {
            if !base.join(m).is_file() {
                return Err(manifest_err(path, format!("entries[{i}].gt_mask: {m} does not exist")));
            }
        }
    }
    Ok(manifest)
}

/// A manifest with its decoded samples, in entry order.
pub struct Corpus {
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let manifest = load_manifest(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let samples = manifest
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let image = read_color(&base.join(&e.image))?;
            let gt_mask = e.gt_mask.as_ref().map(|m| read_mask(&base.join(m))).transpose()?;
            if let Some(m) = &gt_mask {
                if let Some(&bad) = m.data().iter().find(|&&v| v as usize >= manifest.categories.len()) {
                    return Err(manifest_err(
                        path,
                        format!("entries[{i}].gt_mask: pixel value {bad} is not a category"),
                    ));
                }
            }
            Sample::new(
                e.id.clone(),
                image,
                LabelSet::from_categories(e.labels.iter().copied()),
                gt_mask,
            )
            .map_err(|err| manifest_err(path, format!("entries[{i}]: {err}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus { manifest, samples })
}

/// Writes `images/<id>.png`, `masks/<id>.png` and the manifest under `dir`.
/// `categories` is the full name table, background first.
pub fn save_corpus(dir: &Path, categories: &[String], samples: &[Sample]) -> Result<Manifest> {
    let categories = categories.to_vec();
    let entries = samples
        .iter()
        .map(|s| {
            let image = format!("images/{}.png", s.id);
            write_color(&dir.join(&image), &s.image)?;
            let gt_mask = match &s.gt_mask {
                Some(m) => {
                    let rel = format!("masks/{}.png", s.id);
                    write_mask(&dir.join(&rel), m)?;
                    Some(rel)
                }
                None => None,
            };
            Ok(ManifestEntry {
                id: s.id.clone(),
                image,
                labels: s.labels.iter().collect(),
                gt_mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        version: FORMAT_VERSION,
        categories,
        entries,
    };
    manifest
        .validate()
        .map_err(|m| manifest_err(&dir.join(MANIFEST_FILE), m))?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankEntry {
    pub id: String,
    pub category: Category,
    pub source_id: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankIndex {
    pub version: u32,
    pub provenance: Provenance,
    pub instances: Vec<BankEntry>,
}

fn bank_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("inst_{id}_rgb.png")),
        dir.join(format!("inst_{id}_alpha.png")),
    )
}

pub fn save_bank(dir: &Path, bank: &InstanceBank) -> Result<BankIndex> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let instances = bank
        .instances()
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let id = format!("{i:05}");
            let (rgb, alpha) = bank_paths(dir, &id);
            write_color(&rgb, &inst.cutout)?;
            write_unit(&alpha, &inst.alpha)?;
            Ok(BankEntry {
                id,
                category: inst.category,
                source_id: inst.source_id.clone(),
                width: inst.width(),
                height: inst.height(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let index = BankIndex {
        version: FORMAT_VERSION,
        provenance: bank.provenance.clone(),
        instances,
    };
    write_json(&dir.join(BANK_FILE), &index)?;
    Ok(index)
}

pub fn load_bank(dir: &Path) -> Result<InstanceBank> {
    let index_path = dir.join(BANK_FILE);
    let index: BankIndex = read_json(&index_path)?;
    if index.version != FORMAT_VERSION {
        return Err(manifest_err(
            &index_path,
            format!("version: expected {FORMAT_VERSION}, found {}", index.version),
        ));
    }
    let instances = index
        .instances
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let (rgb, alpha) = bank_paths(dir, &e.id);
            let cutout = read_color(&rgb)?;
            let alpha = read_unit(&alpha)?;
            if cutout.width() != e.width || cutout.height() != e.height {
                return Err(manifest_err(
                    &index_path,
                    format!(
                        "instances[{i}]: files are {}x{}, index says {}x{}",
                        cutout.width(),
                        cutout.height(),
                        e.width,
                        e.height
                    ),
                ));
            }
            ObjectInstance::new(cutout, alpha, e.category, e.source_id.clone())
                .map_err(|err| manifest_err(&index_path, format!("instances[{i}]: {err}")))
        })
        .collect::<Result<Vec<_>>>()?;
    InstanceBank::new(instances, index.provenance)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub version: u32,
    /// Seed the model was trained under.
    pub seed: u64,
    pub categories: Vec<String>,
    pub model: ToyModel,
}

pub fn save_model(path: &Path, model: &ToyModel, seed: u64, categories: &[String]) -> Result<()> {
    let file = ModelFile {
        version: FORMAT_VERSION,
        seed,
        categories: categories.to_vec(),
        model: model.clone(),
    };
    write_json(path, &file)
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    let file: ModelFile = read_json(path)?;
    if file.version != FORMAT_VERSION {
        return Err(manifest_err(
            path,
            format!("version: expected {FORMAT_VERSION}, found {}", file.version),
        ));
    }
    file.model
        .validate()
        .map_err(|e| manifest_err(path, format!("model: {e}")))?;
    Ok(file)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_corpus, SynthConfig};

    #[test]
    fn color_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = Raster::from_fn(7, 5, 3, |x, y, c| ((x * 31 + y * 17 + c * 7) % 100) as f32 / 99.0);
        let p = dir.path().join("a.png");
        write_color(&p, &img).unwrap();
        let back = read_color(&p).unwrap();
        assert!(back.same_dims(&img));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn mask_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = Raster::from_fn(9, 4, 1, |x, y, _| ((x + y) % 5) as u8);
        let p = dir.path().join("m.png");
        write_mask(&p, &m).unwrap();
        assert_eq!(read_mask(&p).unwrap(), m);
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig::default();
        let corpus = gen_corpus(&cfg, 5, 3).unwrap();
        save_corpus(dir.path(), &cfg.category_names(), &corpus).unwrap();
        let back = load_corpus(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(back.samples.len(), 5);
        for (a, b) in corpus.iter().zip(&back.samples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.gt_mask, b.gt_mask);
        }
    }

    fn manifest() -> Manifest {
        Manifest {
            version: 1,
            categories: vec!["background".into(), "a".into(), "b".into()],
            entries: vec![
                ManifestEntry {
                    id: "x".into(),
                    image: "x.png".into(),
                    labels: vec![1],
                    gt_mask: None,
                },
                ManifestEntry {
                    id: "y".into(),
                    image: "y.png".into(),
                    labels: vec![2, 1],
                    gt_mask: None,
                },
            ],
        }
    }

    #[test]
    fn manifest_violations_name_the_field() {
        assert!(manifest().validate().is_ok());
        let mut m = manifest();
        m.entries[1].id = "x".into();
        assert!(m.validate().unwrap_err().starts_with("entries[1].id"));
        let mut m = manifest();
        m.entries[1].labels = vec![2, 3];
        assert!(m.validate().unwrap_err().starts_with("entries[1].labels[1]"));
        let mut m = manifest();
        m.entries[0].labels = vec![0];
        assert!(m.validate().unwrap_err().starts_with("entries[0].labels[0]"));
        let mut m = manifest();
        m.categories[0] = "bg".into();
        assert!(m.validate().unwrap_err().starts_with("categories[0]"));
        let mut m = manifest();
        m.version = 2;
        assert!(m.validate().unwrap_err().starts_with("version"));
    }

    #[test]
    fn missing_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        write_json(&p, &manifest()).unwrap();
        let err = load_manifest(&p).unwrap_err().to_string();
        assert!(err.contains("entries[0].image"), "{err}");
    }

    #[test]
    fn config_sections_parse() {
        let cfg = parse_config(
            "seed = 3\n[synth]\nconfound_prob = 0.5\n[augment.blend]\ngaussian_sigma = 1.0\n[model]\nepochs = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.synth.confound_prob, 0.5);
        assert_eq!(cfg.augment.blend.gaussian_sigma, 1.0);
        assert_eq!(cfg.model.epochs, 2);
        assert!(matches!(parse_config("bogus = 1"), Err(Error::Config(_))));
    }
}
