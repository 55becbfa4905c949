//! Desk-scale datasets and training-time augmentation.
//!
//! The built-in synthetic generator draws small colored geometric patterns
//! (solid fills, splits, stripes, checkers, ...) with per-pixel jitter, one
//! pattern and one palette color per class. Real images load from a
//! directory of binary PPMs plus a labels CSV with header `file,label`.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corruptions::{apply_corruption, CorruptionKind, CorruptionSpec};
use crate::encoders::PixelImage;
use crate::error::{Error, Result};
use crate::io::read_ppm;
use crate::rng;

/// A labeled image set with uniform dimensions.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Vec<PixelImage>,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<PixelImage>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Config("dataset must contain at least one image".into()));
        }
        if images.len() != labels.len() {
            return Err(Error::Config(format!(
                "dataset has {} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if classes < 2 {
            return Err(Error::Config("dataset needs at least 2 classes".into()));
        }
        let (h, w) = (images[0].height(), images[0].width());
        for (i, img) in images.iter().enumerate() {
            if img.height() != h || img.width() != w {
                return Err(Error::Config(format!(
                    "image {i} is {}x{}, expected {h}x{w}",
                    img.height(),
                    img.width()
                )));
            }
        }
        for (i, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(Error::Config(format!(
                    "label {label} at row {i} out of range for {classes} classes"
                )));
            }
        }
        Ok(Dataset {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn image(&self, i: usize) -> &PixelImage {
        &self.images[i]
    }

    pub fn images(&self) -> &[PixelImage] {
        &self.images
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn height(&self) -> usize {
        self.images[0].height()
    }

    pub fn width(&self) -> usize {
        self.images[0].width()
    }

    /// Generates `samples` images of colored geometric patterns, labels
    /// balanced round-robin over `classes`. Supports 4 to 10 classes and
    /// sizes 8 or 16.
    pub fn synthetic(classes: usize, samples: usize, size: usize, seed: u64) -> Result<Self> {
        if !(4..=10).contains(&classes) {
            return Err(Error::Config(format!(
                "synthetic generator supports 4 to 10 classes, got {classes}"
            )));
        }
        if size != 8 && size != 16 {
            return Err(Error::Config(format!(
                "synthetic image size must be 8 or 16, got {size}"
            )));
        }
        if samples == 0 {
            return Err(Error::Config("synthetic sample count must be positive".into()));
        }
        let mut images = Vec::with_capacity(samples);
        let mut labels = Vec::with_capacity(samples);
        for i in 0..samples {
            let class = i % classes;
            let mut rng = rng::stream_indexed(seed, "synthetic", i as u64);
            images.push(pattern(class, size, &mut rng));
            labels.push(class);
        }
        Dataset::new(images, labels, classes)
    }

    /// Loads every row of a `file,label` CSV, resolving file names against
    /// `dir`. The class count is one past the largest label.
    pub fn from_ppm_dir(dir: &Path, labels_csv: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(labels_csv)?;
        let headers = reader.headers()?.clone();
        if headers.len() != 2 || &headers[0] != "file" || &headers[1] != "label" {
            return Err(Error::Config(format!(
                "labels CSV must have header `file,label`, got {:?}",
                headers
            )));
        }
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for record in reader.records() {
            let record = record?;
            let name = &record[0];
            let label: usize = record[1]
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad label `{}` for `{name}`", &record[1])))?;
            images.push(read_ppm(&dir.join(name))?);
            labels.push(label);
        }
        let classes = labels
            .iter()
            .max()
            .map(|&m| m + 1)
            .ok_or_else(|| Error::Config("labels CSV contains no rows".into()))?;
        Dataset::new(images, labels, classes)
    }
}

/// Foreground palette; classes use entries 0..=9.
const PALETTE: [[u8; 3]; 10] = [
    [230, 25, 25],
    [25, 200, 25],
    [25, 60, 230],
    [235, 235, 30],
    [230, 40, 230],
    [40, 230, 230],
    [245, 140, 20],
    [130, 40, 220],
    [20, 150, 90],
    [190, 190, 190],
];

/// Per-pixel jitter half-range for the synthetic generator.
const JITTER: i32 = 18;

fn shape_mask(class: usize, y: usize, x: usize, size: usize) -> bool {
    match class % 10 {
        0 => true,
        1 => y < size / 2,
        2 => x < size / 2,
        3 => x + y < size,
        4 => {
            let inset = size / 4;
            (inset..size - inset).contains(&y) && (inset..size - inset).contains(&x)
        }
        5 => {
            let t = size / 4;
            y < t || y >= size - t || x < t || x >= size - t
        }
        6 => (y / 2) % 2 == 0,
        7 => (x / 2) % 2 == 0,
        8 => (y / 2 + x / 2) % 2 == 0,
        9 => {
            let band = size / 4;
            let mid = size / 2;
            y.abs_diff(mid) < band || x.abs_diff(mid) < band
        }
        _ => unreachable!(),
    }
}

fn pattern(class: usize, size: usize, rng: &mut ChaCha8Rng) -> PixelImage {
    let fg = PALETTE[class];
    let bg = PALETTE[(class + 5) % 10].map(|v| (v as f32 * 0.3) as u8);
    let mut img = PixelImage::filled(size, size, 0).expect("size is positive");
    for y in 0..size {
        for x in 0..size {
            let base = if shape_mask(class, y, x, size) { fg } else { bg };
            for c in 0..3 {
                let jitter = rng.gen_range(-JITTER..=JITTER);
                img.set(c, y, x, (base[c] as i32 + jitter).clamp(0, 255) as u8);
            }
        }
    }
    img
}

/// Applies a random chain of 1 to 3 light distortions (signed brightness,
/// contrast rescale, mild pixelation, small translation), drawing all
/// parameters from `rng`.
pub fn augment(image: &PixelImage, rng: &mut ChaCha8Rng) -> Result<PixelImage> {
    let mut out = image.clone();
    let ops = rng.gen_range(1..=3u32);
    for _ in 0..ops {
        match rng.gen_range(0..4u32) {
            0 => {
                let offset = rng.gen_range(-0.25..=0.25f32);
                brightness_shift(&mut out, offset);
            }
            1 => {
                let factor = rng.gen_range(0.6..=1.4f32);
                contrast_rescale(&mut out, factor);
            }
            2 => {
                let p = rng.gen_range(0.05..=0.4f32);
                let spec = CorruptionSpec::with_parameter(CorruptionKind::Pixelate, 1, p)?;
                out = apply_corruption(&out, &spec, 0)?;
            }
            3 => {
                let dy = rng.gen_range(-2..=2i32);
                let dx = rng.gen_range(-2..=2i32);
                out = translate(&out, dy, dx);
            }
            _ => unreachable!(),
        }
    }
    Ok(out)
}

fn brightness_shift(image: &mut PixelImage, offset: f32) {
    let shift = offset * 255.0;
    for v in image.values_mut() {
        *v = (*v as f32 + shift).round().clamp(0.0, 255.0) as u8;
    }
}

fn contrast_rescale(image: &mut PixelImage, factor: f32) {
    let (h, w) = (image.height(), image.width());
    let area = (h * w) as f64;
    for c in 0..3 {
        let mut sum = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                sum += image.get(c, y, x) as f64;
            }
        }
        let mean = (sum / area) as f32;
        for y in 0..h {
            for x in 0..w {
                let v = image.get(c, y, x) as f32;
                let out = mean + factor * (v - mean);
                image.set(c, y, x, out.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
}

/// Shifts content by (dy, dx), replicating edge pixels into the vacated
/// band.
fn translate(image: &PixelImage, dy: i32, dx: i32) -> PixelImage {
    let (h, w) = (image.height(), image.width());
    let mut out = PixelImage::filled(h, w, 0).expect("dimensions are positive");
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let sy = (y as i32 - dy).clamp(0, h as i32 - 1) as usize;
                let sx = (x as i32 - dx).clamp(0, w as i32 - 1) as usize;
                out.set(c, y, x, image.get(c, sy, sx));
            }
        }
    }
    out
}
