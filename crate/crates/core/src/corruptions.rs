//! Procedural visual corruptions and the normalized robustness metrics.
//!
//! Seven corruption kinds are generated at five severities each; severity
//! ladders are documented defaults and can be overridden. Noisy kinds draw
//! from a seed-derived stream so corrupted datasets are reproducible.
//! Error tables aggregate per-(kind, severity) test errors into CE_c (the
//! per-kind error normalized by a supplied baseline model) and mCE (its
//! mean over kinds), plus the unnormalized grand mean used by CIFAR-style
//! reporting.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::encoders::PixelImage;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    Contrast,
    Brightness,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 7] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::DefocusBlur,
        CorruptionKind::Contrast,
        CorruptionKind::Brightness,
        CorruptionKind::Pixelate,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian-noise",
            CorruptionKind::ShotNoise => "shot-noise",
            CorruptionKind::ImpulseNoise => "impulse-noise",
            CorruptionKind::DefocusBlur => "defocus-blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Pixelate => "pixelate",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .find(|k| k.name() == s)
            .copied()
            .ok_or_else(|| Error::UnknownCorruption(s.to_string()))
    }
}

/// Per-kind severity-indexed distortion parameters. Every ladder must be
/// strictly increasing: stronger severity means larger distortion.
///
/// Parameter meanings: gaussian-noise is sigma in [0,1] pixel units;
/// shot-noise is the inverse photon scale 1/c of the Poisson rate
/// pixel/255 * c; impulse-noise is the fraction of subpixels flipped to 0
/// or 255; defocus-blur is the disk kernel radius in pixels; contrast is
/// the reduction 1 - f of the scaling around the channel mean; brightness
/// is the additive offset in [0,1] units; pixelate is the resolution
/// reduction 1 - s where the image is box-downsampled to scale s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionLadders {
    pub gaussian_noise: [f32; 5],
    pub shot_noise: [f32; 5],
    pub impulse_noise: [f32; 5],
    pub defocus_blur: [f32; 5],
    pub contrast: [f32; 5],
    pub brightness: [f32; 5],
    pub pixelate: [f32; 5],
}

impl Default for CorruptionLadders {
    fn default() -> Self {
        CorruptionLadders {
            gaussian_noise: [0.04, 0.08, 0.12, 0.18, 0.26],
            shot_noise: [1.0 / 60.0, 1.0 / 25.0, 1.0 / 12.0, 1.0 / 5.0, 1.0 / 3.0],
            impulse_noise: [0.03, 0.06, 0.09, 0.17, 0.27],
            defocus_blur: [1.0, 1.5, 2.0, 2.5, 3.0],
            contrast: [0.25, 0.4, 0.55, 0.7, 0.85],
            brightness: [0.1, 0.2, 0.3, 0.4, 0.5],
            pixelate: [0.4, 0.5, 0.6, 0.7, 0.8],
        }
    }
}

impl CorruptionLadders {
    pub fn validate(&self) -> Result<()> {
        for kind in CorruptionKind::ALL {
            let ladder = self.ladder(kind);
            for (s, &v) in ladder.iter().enumerate() {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "{kind} severity {} parameter must be finite and non-negative",
                        s + 1
                    )));
                }
                if s > 0 && v <= ladder[s - 1] {
                    return Err(Error::InvalidArgument(format!(
                        "{kind} ladder must be strictly increasing (severity {} -> {})",
                        s,
                        s + 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn ladder(&self, kind: CorruptionKind) -> &[f32; 5] {
        match kind {
            CorruptionKind::GaussianNoise => &self.gaussian_noise,
            CorruptionKind::ShotNoise => &self.shot_noise,
            CorruptionKind::ImpulseNoise => &self.impulse_noise,
            CorruptionKind::DefocusBlur => &self.defocus_blur,
            CorruptionKind::Contrast => &self.contrast,
            CorruptionKind::Brightness => &self.brightness,
            CorruptionKind::Pixelate => &self.pixelate,
        }
    }
}

/// One corruption instance: a kind, its severity, and the resolved parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub parameter: f32,
}

impl CorruptionSpec {
    /// Looks the parameter up in a severity ladder.
    pub fn new(kind: CorruptionKind, severity: u8, ladders: &CorruptionLadders) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::InvalidArgument(format!("severity {severity} outside 1..=5")));
        }
        Ok(CorruptionSpec {
            kind,
            severity,
            parameter: ladders.ladder(kind)[severity as usize - 1],
        })
    }

    /// Uses an explicit parameter; severity is kept for reporting only.
    pub fn with_parameter(kind: CorruptionKind, severity: u8, parameter: f32) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::InvalidArgument(format!("severity {severity} outside 1..=5")));
        }
        if !parameter.is_finite() || parameter < 0.0 {
            return Err(Error::InvalidArgument("corruption parameter must be finite and non-negative".into()));
        }
        Ok(CorruptionSpec { kind, severity, parameter })
    }
}

fn clamp_u8(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Applies one corruption. Noise kinds draw from a stream derived from
/// `seed` and the kind name; deterministic kinds ignore the seed. Output
/// values are clamped to [0, 255].
pub fn apply_corruption(image: &PixelImage, spec: &CorruptionSpec, seed: u64) -> Result<PixelImage> {
    let p = spec.parameter;
    if p == 0.0 {
        return Ok(image.clone());
    }
    let mut out = image.clone();
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            let mut rng = rng::stream(seed, "corrupt-gaussian-noise");
            let normal = Normal::new(0.0f32, p * 255.0).expect("sigma validated finite");
            for v in out.values_mut() {
                *v = clamp_u8(*v as f32 + normal.sample(&mut rng));
            }
        }
        CorruptionKind::ShotNoise => {
            let mut rng = rng::stream(seed, "corrupt-shot-noise");
            let c = 1.0f64 / p as f64;
            for v in out.values_mut() {
                let lambda = *v as f64 / 255.0 * c;
                let draw = if lambda > 0.0 {
                    Poisson::new(lambda).expect("positive rate").sample(&mut rng)
                } else {
                    0.0
                };
                *v = clamp_u8((draw / c * 255.0) as f32);
            }
        }
        CorruptionKind::ImpulseNoise => {
            let mut rng = rng::stream(seed, "corrupt-impulse-noise");
            for v in out.values_mut() {
                if rng.gen::<f32>() < p {
                    *v = if rng.gen::<bool>() { 255 } else { 0 };
                }
            }
        }
        CorruptionKind::DefocusBlur => {
            defocus_blur(image, &mut out, p);
        }
        CorruptionKind::Contrast => {
            let f = 1.0 - p;
            let (h, w) = (image.height(), image.width());
            let plane = h * w;
            for c in 0..3 {
                let ch = &image.values()[c * plane..(c + 1) * plane];
                let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
                let dst = &mut out.values_mut()[c * plane..(c + 1) * plane];
                for (d, &v) in dst.iter_mut().zip(ch) {
                    *d = clamp_u8((mean + f as f64 * (v as f64 - mean)) as f32);
                }
            }
        }
        CorruptionKind::Brightness => {
            let offset = p * 255.0;
            for v in out.values_mut() {
                *v = clamp_u8(*v as f32 + offset);
            }
        }
        CorruptionKind::Pixelate => {
            pixelate(image, &mut out, 1.0 - p);
        }
    }
    Ok(out)
}

fn reflect(i: isize, len: usize) -> usize {
    let len = len as isize;
    let mut i = i;
    if i < 0 {
        i = -i - 1;
    }
    if i >= len {
        i = 2 * len - 1 - i;
    }
    i.clamp(0, len - 1) as usize
}

fn defocus_blur(src: &PixelImage, dst: &mut PixelImage, radius: f32) {
    let r = radius.ceil() as isize;
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if (dy * dy + dx * dx) as f32 <= radius * radius {
                offsets.push((dy, dx));
            }
        }
    }
    let weight = 1.0f32 / offsets.len() as f32;
    let (h, w) = (src.height(), src.width());
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f32;
                for &(dy, dx) in &offsets {
                    let sy = reflect(y as isize + dy, h);
                    let sx = reflect(x as isize + dx, w);
                    acc += src.get(c, sy, sx) as f32;
                }
                dst.set(c, y, x, clamp_u8(acc * weight));
            }
        }
    }
}

fn pixelate(src: &PixelImage, dst: &mut PixelImage, scale: f32) {
    let (h, w) = (src.height(), src.width());
    let nh = ((h as f32 * scale).round() as usize).max(1);
    let nw = ((w as f32 * scale).round() as usize).max(1);
    // box-downsample over an integer partition, then nearest-neighbor upsample
    let mut small = vec![0.0f32; 3 * nh * nw];
    for c in 0..3 {
        for by in 0..nh {
            let y0 = by * h / nh;
            let y1 = (by + 1) * h / nh;
            for bx in 0..nw {
                let x0 = bx * w / nw;
                let x1 = (bx + 1) * w / nw;
                let mut acc = 0.0f32;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += src.get(c, y, x) as f32;
                    }
                }
                small[(c * nh + by) * nw + bx] = acc / ((y1 - y0) * (x1 - x0)) as f32;
            }
        }
    }
    for c in 0..3 {
        for y in 0..h {
            let by = (y * nh / h).min(nh - 1);
            for x in 0..w {
                let bx = (x * nw / w).min(nw - 1);
                dst.set(c, y, x, clamp_u8(small[(c * nh + by) * nw + bx]));
            }
        }
    }
}

/// Test errors per (kind, severity), with an optional baseline table used
/// to normalize CE_c. Errors are fractions in [0, 1].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ErrorTable {
    model: BTreeMap<(CorruptionKind, u8), f64>,
    baseline: BTreeMap<(CorruptionKind, u8), f64>,
}

fn check_error_fraction(v: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::InvalidArgument(format!("{what} error {v} outside [0,1]")));
    }
    Ok(())
}

impl ErrorTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_model(&mut self, kind: CorruptionKind, severity: u8, error: f64) -> Result<()> {
        check_error_fraction(error, "model")?;
        self.model.insert((kind, severity), error);
        Ok(())
    }

    pub fn insert_baseline(&mut self, kind: CorruptionKind, severity: u8, error: f64) -> Result<()> {
        check_error_fraction(error, "baseline")?;
        self.baseline.insert((kind, severity), error);
        Ok(())
    }

    pub fn set_baseline(&mut self, baseline: BTreeMap<(CorruptionKind, u8), f64>) -> Result<()> {
        for (&(_, _), &v) in &baseline {
            check_error_fraction(v, "baseline")?;
        }
        self.baseline = baseline;
        Ok(())
    }

    pub fn model_entries(&self) -> impl Iterator<Item = (&(CorruptionKind, u8), &f64)> {
        self.model.iter()
    }

    pub fn has_baseline(&self) -> bool {
        !self.baseline.is_empty()
    }

    /// Kinds present in the model table, each listed once.
    pub fn kinds(&self) -> Vec<CorruptionKind> {
        let mut kinds: Vec<CorruptionKind> = self.model.keys().map(|&(k, _)| k).collect();
        kinds.dedup();
        kinds
    }

    /// CE_c: the model's summed error over the five severities of `kind`,
    /// normalized by the baseline's summed error.
    pub fn corruption_error(&self, kind: CorruptionKind) -> Result<f64> {
        let mut model_sum = 0.0f64;
        let mut base_sum = 0.0f64;
        for severity in 1..=5u8 {
            let m = self.model.get(&(kind, severity)).ok_or(Error::IncompleteErrorTable {
                kind: kind.name().to_string(),
                severity,
            })?;
            let b = self.baseline.get(&(kind, severity)).ok_or(Error::IncompleteErrorTable {
                kind: kind.name().to_string(),
                severity,
            })?;
            model_sum += m;
            base_sum += b;
        }
        if base_sum <= 0.0 {
            return Err(Error::ZeroBaseline(kind.name().to_string()));
        }
        Ok(model_sum / base_sum)
    }

    /// mCE: unweighted mean of CE_c over every kind in the model table.
    pub fn mean_corruption_error(&self) -> Result<f64> {
        let kinds = self.kinds();
        if kinds.is_empty() {
            return Err(Error::EmptyErrorTable);
        }
        let mut total = 0.0f64;
        for &kind in &kinds {
            total += self.corruption_error(kind)?;
        }
        Ok(total / kinds.len() as f64)
    }

    /// Unweighted mean of the raw model errors over every (kind, severity)
    /// cell; no baseline involved.
    pub fn mean_error_cifar_style(&self) -> Result<f64> {
        if self.model.is_empty() {
            return Err(Error::EmptyErrorTable);
        }
        Ok(self.model.values().sum::<f64>() / self.model.len() as f64)
    }
}

/// Reads a baseline error CSV with header `kind,severity,error`.
pub fn read_baseline_csv(path: &Path) -> Result<BTreeMap<(CorruptionKind, u8), f64>> {
    let mut reader = csv::Reader::from_path(path)?;
    {
        let headers = reader.headers()?;
        let expected = ["kind", "severity", "error"];
        if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
            return Err(Error::Config(format!(
                "baseline csv header must be `kind,severity,error`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
    }
    let mut out = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let kind: CorruptionKind = record
            .get(0)
            .ok_or_else(|| Error::Config("baseline csv row missing kind".into()))?
            .parse()?;
        let severity: u8 = record
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Config("baseline csv row has a bad severity".into()))?;
        if !(1..=5).contains(&severity) {
            return Err(Error::Config(format!("baseline csv severity {severity} outside 1..=5")));
        }
        let error: f64 = record
            .get(2)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Config("baseline csv row has a bad error".into()))?;
        check_error_fraction(error, "baseline")?;
        out.insert((kind, severity), error);
    }
    Ok(out)
}
