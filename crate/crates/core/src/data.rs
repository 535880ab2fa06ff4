//! Dataset ingestion (QaTa-COV19 layout), synthetic confounded data, and batching.
//!
//! On-disk layout shared by both sources:
//!
//! ```text
//! root/
//!   images/<name>.png       8-bit grayscale
//!   masks/<prefix><name>    0/255 (0/1 also accepted)
//!   texts.csv               image_name, description, split
//! ```

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use image::GrayImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::text::{TokenBatch, Tokenizer};

/// Published QaTa-COV19 split sizes (train, val, test).
pub const QATA_SPLIT_SIZES: [usize; 3] = [5716, 1429, 2113];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" | "training" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" | "testing" => Ok(Split::Test),
            other => Err(Error::Dataset(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetRecord {
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub text: String,
    pub split: Split,
}

impl DatasetRecord {
    pub fn name(&self) -> String {
        self.image_path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

/// Reads `texts.csv` under `root` and pairs every row with its image and mask files.
pub fn read_records(root: &Path, cfg: &RunConfig) -> Result<Vec<DatasetRecord>> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("dataset root {} does not exist", root.display())));
    }
    let table = root.join("texts.csv");
    let mut reader = csv::Reader::from_path(&table).map_err(|source| Error::Csv {
        path: table.clone(),
        source,
    })?;
    let headers = reader
        .headers()
        .map_err(|source| Error::Csv {
            path: table.clone(),
            source,
        })?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Dataset(format!("{} has no column {name:?}", table.display())))
    };
    let (ci, ct, cs) = (column(&cfg.column_image)?, column(&cfg.column_text)?, column(&cfg.column_split)?);

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|source| Error::Csv {
            path: table.clone(),
            source,
        })?;
        let name = row.get(ci).unwrap_or("").trim();
        let image_path = root.join("images").join(name);
        if name.is_empty() || !image_path.is_file() {
            return Err(Error::Dataset(format!(
                "text row references missing image {}",
                image_path.display()
            )));
        }
        let mask_path = root.join("masks").join(format!("{}{name}", cfg.mask_prefix));
        if !mask_path.is_file() {
            return Err(Error::Dataset(format!("missing mask {}", mask_path.display())));
        }
        records.push(DatasetRecord {
            image_path,
            mask_path,
            text: row.get(ct).unwrap_or("").trim().to_string(),
            split: row.get(cs).unwrap_or("").parse()?,
        });
    }
    if records.is_empty() {
        return Err(Error::Dataset(format!("{} lists no records", table.display())));
    }
    check_qata_split_sizes(&records)?;
    Ok(records)
}

pub fn split_counts(records: &[DatasetRecord]) -> [usize; 3] {
    let mut counts = [0; 3];
    for r in records {
        counts[r.split as usize] += 1;
    }
    counts
}

/// When the record count equals the full release, the per-split counts must match it too.
pub fn check_qata_split_sizes(records: &[DatasetRecord]) -> Result<()> {
    let counts = split_counts(records);
    if records.len() == QATA_SPLIT_SIZES.iter().sum::<usize>() && counts != QATA_SPLIT_SIZES {
        return Err(Error::Dataset(format!(
            "full dataset split sizes {counts:?} differ from the published {QATA_SPLIT_SIZES:?}"
        )));
    }
    Ok(())
}

/// Converts a 0/255 (or 0/1) mask into booleans; any other value is an error naming `path`.
pub fn binarize_mask(mask: &GrayImage, path: &Path) -> Result<Vec<bool>> {
    let mut seen = [false; 256];
    for &v in mask.as_raw() {
        seen[v as usize] = true;
    }
    let values: Vec<usize> = (0..256).filter(|&v| seen[v]).collect();
    let on = match values.as_slice() {
        [] | [0] => 255,
        [0, 1] | [1] => 1,
        [0, 255] | [255] => 255,
        _ => {
            let bad = values.iter().find(|&&v| v != 0 && v != 255).copied().unwrap_or(0);
            return Err(Error::Dataset(format!(
                "mask {} contains non-binary value {bad}",
                path.display()
            )));
        }
    };
    Ok(mask.as_raw().iter().map(|&v| v as usize == on).collect())
}

/// A preprocessed image/mask/text triple at model resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    /// Normalized intensities, row-major `size × size`.
    pub image: Vec<f32>,
    pub mask: BinaryMask,
    pub text: String,
}

/// Resizes (bilinear image, nearest mask) and normalizes one pair.
pub fn preprocess(
    name: String,
    image: &GrayImage,
    mask: &[bool],
    text: String,
    cfg: &RunConfig,
) -> Result<Sample> {
    let (w, h) = image.dimensions();
    if mask.len() != (w * h) as usize {
        return Err(Error::Dataset(format!("mask of {name} does not match its {w}x{h} image")));
    }
    let n = cfg.image_size as u32;
    let image = if (w, h) == (n, n) {
        image.clone()
    } else {
        image::imageops::resize(image, n, n, FilterType::Triangle)
    };
    let mask_img = GrayImage::from_raw(w, h, mask.iter().map(|&b| b as u8).collect())
        .expect("buffer length checked above");
    let mask_img = if (w, h) == (n, n) {
        mask_img
    } else {
        image::imageops::resize(&mask_img, n, n, FilterType::Nearest)
    };
    let (mean, std) = (cfg.image_mean as f32, cfg.image_std as f32);
    Ok(Sample {
        name,
        image: image.as_raw().iter().map(|&v| (v as f32 / 255.0 - mean) / std).collect(),
        mask: BinaryMask::new(
            n as usize,
            n as usize,
            mask_img.as_raw().iter().map(|&v| v != 0).collect(),
        )?,
        text,
    })
}

pub fn open_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8())
}

/// Reads a mask image as a binary mask at its native resolution.
pub fn open_mask(path: &Path) -> Result<BinaryMask> {
    let img = open_gray(path)?;
    let (w, h) = img.dimensions();
    BinaryMask::new(h as usize, w as usize, binarize_mask(&img, path)?)
}

pub fn load_record(record: &DatasetRecord, cfg: &RunConfig) -> Result<Sample> {
    let image = open_gray(&record.image_path)?;
    let mask_img = open_gray(&record.mask_path)?;
    if mask_img.dimensions() != image.dimensions() {
        return Err(Error::Dataset(format!(
            "mask {} is {:?} but its image is {:?}",
            record.mask_path.display(),
            mask_img.dimensions(),
            image.dimensions()
        )));
    }
    let mask = binarize_mask(&mask_img, &record.mask_path)?;
    preprocess(record.name(), &image, &mask, record.text.clone(), cfg)
}

/// A batch ready for the model.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(B, 1, H, W)` normalized images.
    pub images: Tensor,
    /// `(B, 1, H, W)` ground truth in {0, 1}.
    pub masks: Tensor,
    pub tokens: TokenBatch,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    /// Loads every record of `split`.
    pub fn load(records: &[DatasetRecord], split: Split, cfg: &RunConfig) -> Result<Self> {
        let samples = records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| load_record(r, cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.text.as_str())
    }

    /// Stacks the samples at `indices`. With `flip`, each sample is mirrored left-right and
    /// the words "left"/"right" in its expression are swapped.
    pub fn batch(
        &self,
        indices: &[usize],
        tokenizer: &dyn Tokenizer,
        max_text_len: usize,
        flip: Option<&[bool]>,
        device: &Device,
    ) -> Result<Batch> {
        let first = self
            .samples
            .get(*indices.first().ok_or_else(|| Error::Dataset("empty batch".into()))?)
            .ok_or_else(|| Error::Dataset("batch index out of range".into()))?;
        let (h, w) = (first.mask.height, first.mask.width);
        let mut images = Vec::with_capacity(indices.len() * h * w);
        let mut masks = Vec::with_capacity(indices.len() * h * w);
        let mut queries = Vec::with_capacity(indices.len());
        for (k, &i) in indices.iter().enumerate() {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::Dataset(format!("batch index {i} out of range")))?;
            let flipped = flip.is_some_and(|f| f.get(k).copied().unwrap_or(false));
            for y in 0..h {
                for x in 0..w {
                    let src = y * w + if flipped { w - 1 - x } else { x };
                    images.push(s.image[src]);
                    masks.push(if s.mask.data[src] { 1f32 } else { 0.0 });
                }
            }
            let text = if flipped { swap_left_right(&s.text) } else { s.text.clone() };
            queries.push(tokenizer.tokenize(&text, max_text_len));
        }
        let b = indices.len();
        let refs: Vec<_> = queries.iter().collect();
        Ok(Batch {
            images: Tensor::from_vec(images, (b, 1, h, w), device)?,
            masks: Tensor::from_vec(masks, (b, 1, h, w), device)?,
            tokens: TokenBatch::from_queries(&refs, tokenizer.eos_id(), device)?,
        })
    }
}

fn swap_left_right(text: &str) -> String {
    let re = regex::Regex::new(r"(?i)\b(left|right)\b").unwrap();
    re.replace_all(text, |c: &regex::Captures| {
        let w = &c[1];
        let swapped = if w.eq_ignore_ascii_case("left") { "right" } else { "left" };
        if w.starts_with(|ch: char| ch.is_uppercase()) {
            let mut s = swapped.to_string();
            s[..1].make_ascii_uppercase();
            s
        } else {
            swapped.to_string()
        }
    })
    .into_owned()
}

/// Shuffled sample order for `epoch`, a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

// ---------------------------------------------------------------------------------------------
// Synthetic data

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disc,
    Bar,
    Blob,
}

/// A rendered lesion. Discs and blobs are unions of discs; bars are axis-aligned rectangles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Disc { cx: f64, cy: f64, r: f64 },
    Bar { cx: f64, cy: f64, half_w: f64, half_h: f64 },
    Blob { discs: Vec<(f64, f64, f64)> },
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let in_disc = |cx: f64, cy: f64, r: f64| (x - cx).powi(2) + (y - cy).powi(2) <= r * r;
        match self {
            Shape::Disc { cx, cy, r } => in_disc(*cx, *cy, *r),
            Shape::Bar { cx, cy, half_w, half_h } => (x - cx).abs() <= *half_w && (y - cy).abs() <= *half_h,
            Shape::Blob { discs } => discs.iter().any(|&(cx, cy, r)| in_disc(cx, cy, r)),
        }
    }
}

pub const QUADRANT_NAMES: [&str; 4] = ["upper left", "upper right", "lower left", "lower right"];
const COUNT_WORDS: [&str; 4] = ["one", "two", "three", "four"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub image_size: usize,
    pub shapes: Vec<ShapeKind>,
    /// Probability that a training image's texture map equals its lesion map.
    pub confound_strength: f64,
    pub seed: u64,
    pub background: f64,
    pub lesion_contrast: f64,
    pub texture_amplitude: f64,
    pub noise_std: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_train: 500,
            n_val: 100,
            n_test: 200,
            image_size: 64,
            shapes: vec![ShapeKind::Disc, ShapeKind::Bar, ShapeKind::Blob],
            confound_strength: 0.0,
            seed: 0,
            background: 0.35,
            lesion_contrast: 0.3,
            texture_amplitude: 0.15,
            noise_std: 0.05,
        }
    }
}

impl SyntheticSpec {
    pub fn n_images(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confound_strength) {
            return Err(Error::Config(format!(
                "confound_strength must lie in [0, 1], got {}",
                self.confound_strength
            )));
        }
        if self.image_size < 16 || self.image_size % 2 != 0 {
            return Err(Error::Config("synthetic image_size must be even and at least 16".into()));
        }
        if self.shapes.is_empty() {
            return Err(Error::Config("synthetic shape vocabulary is empty".into()));
        }
        Ok(())
    }

    fn split_of(&self, index: usize) -> (Split, usize) {
        if index < self.n_train {
            (Split::Train, index)
        } else if index < self.n_train + self.n_val {
            (Split::Val, index - self.n_train)
        } else {
            (Split::Test, index - self.n_train - self.n_val)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRecord {
    pub name: String,
    pub split: Split,
    pub image: GrayImage,
    pub mask: GrayImage,
    pub text: String,
    pub shapes: Vec<Shape>,
    /// Quadrants (upper left, upper right, lower left, lower right) holding a lesion.
    pub lesion_quadrants: [bool; 4],
    pub textured_quadrants: [bool; 4],
}

impl SyntheticRecord {
    pub fn mask_bools(&self) -> Vec<bool> {
        self.mask.as_raw().iter().map(|&v| v != 0).collect()
    }
}

/// Expression for lesions in the given quadrants, e.g. "two lesion areas, upper left and lower
/// right region".
pub fn describe(quadrants: &[usize]) -> String {
    let n = quadrants.len();
    let places: Vec<&str> = quadrants.iter().map(|&q| QUADRANT_NAMES[q]).collect();
    let location = match places.as_slice() {
        [one] => one.to_string(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
        [] => String::new(),
    };
    let noun = if n == 1 { "lesion area" } else { "lesion areas" };
    format!("{} {noun}, {location} region", COUNT_WORDS[n - 1])
}

fn record_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn sample_shape(kind: ShapeKind, quadrant: usize, n: f64, rng: &mut ChaCha8Rng) -> Shape {
    let half = n / 2.0;
    let (qx, qy) = ((quadrant % 2) as f64 * half, (quadrant / 2) as f64 * half);
    let margin = 1.0;
    // centers are placed so that the shape's bounding box stays inside its quadrant
    let center = |ex: f64, ey: f64, rng: &mut ChaCha8Rng| {
        let lo_x = qx + margin + ex;
        let hi_x = qx + half - 1.0 - margin - ex;
        let lo_y = qy + margin + ey;
        let hi_y = qy + half - 1.0 - margin - ey;
        (
            rng.random_range(lo_x..=hi_x.max(lo_x)),
            rng.random_range(lo_y..=hi_y.max(lo_y)),
        )
    };
    match kind {
        ShapeKind::Disc => {
            let r = rng.random_range(0.12 * n..=0.2 * n);
            let (cx, cy) = center(r, r, rng);
            Shape::Disc { cx, cy, r }
        }
        ShapeKind::Bar => {
            let long = rng.random_range(0.15 * n..=0.21 * n);
            let short = rng.random_range(0.08 * n..=0.11 * n);
            let (half_w, half_h) = if rng.random_bool(0.5) { (long, short) } else { (short, long) };
            let (cx, cy) = center(half_w, half_h, rng);
            Shape::Bar { cx, cy, half_w, half_h }
        }
        ShapeKind::Blob => {
            let r = rng.random_range(0.09 * n..=0.13 * n);
            let spread = 0.4 * r;
            let extent = r + spread;
            let (cx, cy) = center(extent, extent, rng);
            let discs = (0..3)
                .map(|_| {
                    (
                        cx + rng.random_range(-spread..=spread),
                        cy + rng.random_range(-spread..=spread),
                        r * rng.random_range(0.8..=1.0),
                    )
                })
                .collect();
            Shape::Blob { discs }
        }
    }
}

fn quadrant_of(x: usize, y: usize, n: usize) -> usize {
    (x >= n / 2) as usize + 2 * (y >= n / 2) as usize
}

/// Renders record `index` of the spec; a pure function of `(spec, index)`.
pub fn generate_record(spec: &SyntheticSpec, index: usize) -> SyntheticRecord {
    let (split, local) = spec.split_of(index);
    let mut rng = record_rng(spec.seed, index);
    let n = spec.image_size;
    let nf = n as f64;

    let count = rng.random_range(1..=4usize);
    let mut quadrants = [0usize, 1, 2, 3];
    quadrants.shuffle(&mut rng);
    let mut chosen = quadrants[..count].to_vec();
    chosen.sort_unstable();
    let mut lesion_quadrants = [false; 4];
    let shapes: Vec<Shape> = chosen
        .iter()
        .map(|&q| {
            lesion_quadrants[q] = true;
            let kind = spec.shapes[rng.random_range(0..spec.shapes.len())];
            sample_shape(kind, q, nf, &mut rng)
        })
        .collect();

    let coupled = split == Split::Train && rng.random_bool(spec.confound_strength);
    let mut textured_quadrants = [false; 4];
    for (q, t) in textured_quadrants.iter_mut().enumerate() {
        let independent = rng.random_bool(0.5);
        *t = if coupled { lesion_quadrants[q] } else { independent };
    }

    let phase: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let stripe_period = 6.0;
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("finite std");
    let mut image = GrayImage::new(n as u32, n as u32);
    let mut mask = GrayImage::new(n as u32, n as u32);
    for y in 0..n {
        for x in 0..n {
            let (xf, yf) = (x as f64, y as f64);
            let mut v = spec.background
                + 0.06 * (std::f64::consts::TAU * xf / nf + phase[0]).sin()
                + 0.06 * (std::f64::consts::TAU * yf / nf + phase[1]).sin();
            if textured_quadrants[quadrant_of(x, y, n)] {
                let s = (std::f64::consts::TAU * (xf + yf) / stripe_period + phase[2]).sin();
                v += spec.texture_amplitude * s.signum();
            }
            let inside = shapes.iter().any(|s| s.contains(xf, yf));
            if inside {
                v += spec.lesion_contrast;
                mask.put_pixel(x as u32, y as u32, image::Luma([255]));
            }
            v += noise.sample(&mut rng);
            image.put_pixel(x as u32, y as u32, image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8]));
        }
    }

    SyntheticRecord {
        name: format!("syn_{}_{local:05}.png", split.as_str()),
        split,
        image,
        mask,
        text: describe(&chosen),
        shapes,
        lesion_quadrants,
        textured_quadrants,
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<SyntheticRecord>> {
    spec.validate()?;
    Ok((0..spec.n_images()).map(|i| generate_record(spec, i)).collect())
}

/// Writes records in the on-disk dataset layout (masks use `mask_prefix`).
pub fn write_dataset(records: &[SyntheticRecord], root: &Path, mask_prefix: &str) -> Result<()> {
    let images = root.join("images");
    let masks = root.join("masks");
    for dir in [&images, &masks] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let table = root.join("texts.csv");
    let csv_err = |source| Error::Csv {
        path: table.clone(),
        source,
    };
    let mut writer = csv::Writer::from_path(&table).map_err(csv_err)?;
    writer
        .write_record(["image_name", "description", "split"])
        .map_err(csv_err)?;
    for r in records {
        let save = |img: &GrayImage, path: PathBuf| {
            img.save(&path).map_err(|source| Error::Image { path, source })
        };
        save(&r.image, images.join(&r.name))?;
        save(&r.mask, masks.join(format!("{mask_prefix}{}", r.name)))?;
        writer
            .write_record([r.name.as_str(), r.text.as_str(), r.split.as_str()])
            .map_err(csv_err)?;
    }
    writer.flush().map_err(|e| Error::io(&table, e))?;
    Ok(())
}

/// Preprocesses in-memory synthetic records of one split without touching disk.
pub fn synthetic_split(records: &[SyntheticRecord], split: Split, cfg: &RunConfig) -> Result<Dataset> {
    let samples = records
        .iter()
        .filter(|r| r.split == split)
        .map(|r| preprocess(r.name.clone(), &r.image, &r.mask_bools(), r.text.clone(), cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(samples))
}

/// Counts 4-connected foreground components of a mask.
pub fn connected_components(mask: &BinaryMask) -> usize {
    let (h, w) = (mask.height, mask.width);
    let mut label = vec![false; h * w];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask.data[start] || label[start] {
            continue;
        }
        count += 1;
        label[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if mask.data[q] && !label[q] {
                    label[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
    }
    count
}

/// Index from expression count words back to numbers.
pub fn count_in_text(text: &str) -> Option<usize> {
    let first = text.split_whitespace().next()?;
    let map: HashMap<&str, usize> = COUNT_WORDS.iter().enumerate().map(|(i, w)| (*w, i + 1)).collect();
    map.get(first).copied()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_parsing() {
        assert_eq!("Train".parse::<Split>().unwrap(), Split::Train);
        assert_eq!("validation".parse::<Split>().unwrap(), Split::Val);
        assert!("dev".parse::<Split>().is_err());
    }

    #[test]
    fn descriptions() {
        assert_eq!(describe(&[0]), "one lesion area, upper left region");
        assert_eq!(describe(&[0, 3]), "two lesion areas, upper left and lower right region");
        assert_eq!(
            describe(&[0, 1, 2]),
            "three lesion areas, upper left, upper right and lower left region"
        );
        assert_eq!(count_in_text(&describe(&[0, 1, 2, 3])), Some(4));
    }

    #[test]
    fn left_right_swap() {
        assert_eq!(swap_left_right("upper left and lower right"), "upper right and lower left");
        assert_eq!(swap_left_right("Left lung"), "Right lung");
        assert_eq!(swap_left_right("leftover"), "leftover");
    }

    #[test]
    fn binarize_values() {
        let p = Path::new("m.png");
        let m = GrayImage::from_raw(2, 1, vec![0, 255]).unwrap();
        assert_eq!(binarize_mask(&m, p).unwrap(), vec![false, true]);
        let m = GrayImage::from_raw(2, 1, vec![0, 1]).unwrap();
        assert_eq!(binarize_mask(&m, p).unwrap(), vec![false, true]);
        let m = GrayImage::from_raw(2, 1, vec![0, 137]).unwrap();
        let e = binarize_mask(&m, p).unwrap_err().to_string();
        assert!(e.contains("m.png") && e.contains("137"), "{e}");
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(10, 3, 1);
        let mut s = a.clone();
        s.sort_unstable();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(10, 3, 1));
        assert_ne!(a, epoch_order(10, 3, 2));
    }

    #[test]
    fn components_counted() {
        let m = BinaryMask::from_rows(&[&[1, 0, 1], &[1, 0, 0], &[0, 0, 1]]).unwrap();
        assert_eq!(connected_components(&m), 3);
    }
}
