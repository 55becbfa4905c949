//! Logit-space projected gradient ascent on discretized inputs.
//!
//! Pixel-space perturbations cannot pass through a discrete encoder, so the
//! attack relaxes each pixel into a softmax over its feasible discrete
//! levels, ascends the cross-entropy signal on those per-level logits, and
//! anneals the softmax temperature toward a hard selection. Levels outside
//! the epsilon ball carry -inf logits and can never be selected, which
//! makes the budget guarantee structural rather than a projection step.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{bucket_of, BinaryCodebook, PixelImage};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::cross_entropy_with_grad;
use crate::rng;
use crate::tensor::Tensor;

/// Attack hyperparameters. `epsilon` is the pixel budget in [0,1] units;
/// a zero budget degenerates to the identity attack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub steps: usize,
    pub anneal_rate: f32,
    pub step_size: f32,
    pub epsilon: f32,
    pub initial_temperature: f32,
    pub restarts: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            steps: 7,
            anneal_rate: 1.2,
            step_size: 1.0,
            epsilon: 8.0 / 255.0,
            initial_temperature: 1.0,
            restarts: 1,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("attack steps must be >= 1".into()));
        }
        if !(self.anneal_rate.is_finite() && self.anneal_rate > 1.0) {
            return Err(Error::InvalidArgument("anneal rate must be > 1".into()));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::InvalidArgument("step size must be positive".into()));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::InvalidArgument("epsilon must be finite and non-negative".into()));
        }
        if !(self.initial_temperature.is_finite() && self.initial_temperature > 0.0) {
            return Err(Error::InvalidArgument("initial temperature must be positive".into()));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidArgument("restarts must be >= 1".into()));
        }
        Ok(())
    }

    /// Budget in integer pixel levels.
    pub fn pixel_budget(&self) -> i32 {
        (self.epsilon * 255.0).round() as i32
    }
}

/// The discrete levels an attack chooses between, with their bit codes.
/// Bucket encoders expose one level per bucket; a learnable codebook
/// exposes one level per pixel magnitude.
#[derive(Debug, Clone)]
pub struct LevelSet {
    m: usize,
    levels: usize,
    codes: Vec<f32>,          // levels x m
    level_of_pixel: [usize; 256],
    pixel_range: Vec<(u8, u8)>, // per level: lowest/highest pixel mapping to it
}

impl LevelSet {
    pub fn one_hot(m: usize) -> Self {
        let mut codes = vec![0.0f32; m * m];
        for l in 0..m {
            codes[l * m + l] = 1.0;
        }
        Self::bucketed(m, codes)
    }

    pub fn thermometer(m: usize) -> Self {
        let mut codes = vec![0.0f32; m * m];
        for l in 0..m {
            for bit in l..m {
                codes[l * m + bit] = 1.0;
            }
        }
        Self::bucketed(m, codes)
    }

    fn bucketed(m: usize, codes: Vec<f32>) -> Self {
        let mut level_of_pixel = [0usize; 256];
        let mut pixel_range = vec![(255u8, 0u8); m];
        for v in 0..=255u8 {
            let l = bucket_of(v, m);
            level_of_pixel[v as usize] = l;
            let (lo, hi) = &mut pixel_range[l];
            *lo = (*lo).min(v);
            *hi = (*hi).max(v);
        }
        LevelSet { m, levels: m, codes, level_of_pixel, pixel_range }
    }

    /// One level per pixel magnitude, coded by the given codebook.
    pub fn from_codebook(codebook: &BinaryCodebook) -> Self {
        let m = codebook.m();
        let mut codes = Vec::with_capacity(256 * m);
        for k in 0..256 {
            codes.extend(codebook.code(k).iter().map(|&b| b as f32));
        }
        let mut level_of_pixel = [0usize; 256];
        let mut pixel_range = Vec::with_capacity(256);
        for v in 0..=255usize {
            level_of_pixel[v] = v;
            pixel_range.push((v as u8, v as u8));
        }
        LevelSet { m, levels: 256, codes, level_of_pixel, pixel_range }
    }

    pub fn code_length(&self) -> usize {
        self.m
    }

    pub fn level_count(&self) -> usize {
        self.levels
    }

    pub fn code(&self, level: usize) -> &[f32] {
        &self.codes[level * self.m..(level + 1) * self.m]
    }

    pub fn level_of(&self, pixel: u8) -> usize {
        self.level_of_pixel[pixel as usize]
    }

    /// The pixel value representing `level` that sits nearest `orig`
    /// within the budget window.
    fn representative(&self, level: usize, orig: u8, budget: i32) -> u8 {
        let lo = (orig as i32 - budget).max(self.pixel_range[level].0 as i32);
        let hi = (orig as i32 + budget).min(self.pixel_range[level].1 as i32);
        (orig as i32).clamp(lo, hi) as u8
    }
}

/// Per-pixel attack logits over discrete levels, with the feasibility mask
/// baked in as -inf entries. Indexed [3, H, W, L] row-major.
#[derive(Debug, Clone)]
pub struct LogitRelaxation {
    u: Vec<f32>,
    height: usize,
    width: usize,
    levels: usize,
}

impl LogitRelaxation {
    /// Favors the original level with logit 1 and seeds every other
    /// feasible level with Uniform(0, 0.1) noise.
    pub fn init(image: &PixelImage, levels: &LevelSet, budget: i32, rng: &mut ChaCha8Rng) -> Self {
        let (h, w, l) = (image.height(), image.width(), levels.level_count());
        let mut u = vec![f32::NEG_INFINITY; 3 * h * w * l];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let orig = image.get(c, y, x);
                    let own = levels.level_of(orig);
                    let base = ((c * h + y) * w + x) * l;
                    let lo = (orig as i32 - budget).max(0) as u8;
                    let hi = (orig as i32 + budget).min(255) as u8;
                    for v in lo..=hi {
                        let lev = levels.level_of(v);
                        if u[base + lev] == f32::NEG_INFINITY {
                            u[base + lev] = if lev == own { 1.0 } else { rng.gen_range(0.0..0.1) };
                        }
                    }
                }
            }
        }
        LogitRelaxation { u, height: h, width: w, levels: l }
    }

    fn pixel_logits(&self, c: usize, y: usize, x: usize) -> &[f32] {
        let base = ((c * self.height + y) * self.width + x) * self.levels;
        &self.u[base..base + self.levels]
    }

    fn pixel_logits_mut(&mut self, c: usize, y: usize, x: usize) -> &mut [f32] {
        let base = ((c * self.height + y) * self.width + x) * self.levels;
        &mut self.u[base..base + self.levels]
    }

    /// Feasible-level softmax weights of one pixel at a temperature.
    fn weights(&self, c: usize, y: usize, x: usize, temperature: f32) -> Vec<f32> {
        let logits = self.pixel_logits(c, y, x);
        let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut s: Vec<f32> = logits
            .iter()
            .map(|&v| {
                if v == f32::NEG_INFINITY {
                    0.0
                } else {
                    (((v - max) / temperature) as f64).exp() as f32
                }
            })
            .collect();
        let sum: f64 = s.iter().map(|&v| v as f64).sum();
        for v in &mut s {
            *v = (*v as f64 / sum) as f32;
        }
        s
    }

    /// Argmax feasible level of one pixel, lowest index on ties.
    fn argmax(&self, c: usize, y: usize, x: usize) -> usize {
        let logits = self.pixel_logits(c, y, x);
        let mut best = 0usize;
        let mut best_v = f32::NEG_INFINITY;
        for (l, &v) in logits.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = l;
            }
        }
        best
    }
}

/// Relaxed encoding: each pixel's code is the softmax-weighted mixture of
/// its feasible level codes. As temperature goes to zero this approaches
/// the hard encoding of the argmax level.
pub fn soft_encode(relaxation: &LogitRelaxation, temperature: f32, levels: &LevelSet) -> Result<Tensor> {
    if temperature <= 0.0 {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    let (h, w, m) = (relaxation.height, relaxation.width, levels.code_length());
    let mut data = vec![0.0f32; 3 * m * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let s = relaxation.weights(c, y, x, temperature);
                for (l, &sl) in s.iter().enumerate() {
                    if sl == 0.0 {
                        continue;
                    }
                    let code = levels.code(l);
                    for bit in 0..m {
                        data[((m * c + bit) * h + y) * w + x] += sl * code[bit];
                    }
                }
            }
        }
    }
    Tensor::new(vec![3 * m, h, w], data)
}

/// Runs the attack on one image and returns the hardened adversarial image
/// together with the relaxed loss recorded at each step (best restart).
pub fn lspga_attack(
    model: &Graph,
    levels: &LevelSet,
    image: &PixelImage,
    label: usize,
    config: &AttackConfig,
    seed: u64,
) -> Result<(PixelImage, Vec<f64>)> {
    config.validate()?;
    let (h, w, m) = (image.height(), image.width(), levels.code_length());
    if model.input_shape() != [3 * m, h, w] {
        return Err(Error::ShapeMismatch {
            context: "attack model input".into(),
            expected: vec![3 * m, h, w],
            got: model.input_shape().to_vec(),
        });
    }
    let budget = config.pixel_budget();
    let l = levels.level_count();

    let mut best: Option<(f64, PixelImage, Vec<f64>)> = None;
    for restart in 0..config.restarts {
        let mut rng = rng::stream_indexed(seed, "lspga-restart", restart as u64);
        let mut relax = LogitRelaxation::init(image, levels, budget, &mut rng);
        let mut temperature = config.initial_temperature;
        let mut trace = Vec::with_capacity(config.steps);

        for _ in 0..config.steps {
            let soft = soft_encode(&relax, temperature, levels)?;
            let batched = Tensor::new(vec![1, 3 * m, h, w], soft.data().to_vec())?;
            let exec = model.forward_traced(&batched)?;
            let (loss, grad_logits) = cross_entropy_with_grad(exec.output(), &[label])?;
            trace.push(loss);
            let grads = model.backward_traced(&exec, &grad_logits)?;
            let gin = grads.input.data();

            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let s = relax.weights(c, y, x, temperature);
                        let mut g = vec![0.0f32; l];
                        for (lev, gv) in g.iter_mut().enumerate() {
                            if s[lev] == 0.0 && relax.pixel_logits(c, y, x)[lev] == f32::NEG_INFINITY {
                                continue;
                            }
                            let code = levels.code(lev);
                            let mut acc = 0.0f32;
                            for bit in 0..m {
                                acc += gin[((m * c + bit) * h + y) * w + x] * code[bit];
                            }
                            *gv = acc;
                        }
                        let dot: f64 = g.iter().zip(&s).map(|(&gv, &sv)| gv as f64 * sv as f64).sum();
                        let logits = relax.pixel_logits_mut(c, y, x);
                        for lev in 0..l {
                            if logits[lev] == f32::NEG_INFINITY {
                                continue;
                            }
                            let du = s[lev] as f64 * (g[lev] as f64 - dot) / temperature as f64;
                            let step = if du > 0.0 {
                                config.step_size
                            } else if du < 0.0 {
                                -config.step_size
                            } else {
                                0.0
                            };
                            logits[lev] += step;
                        }
                    }
                }
            }
            temperature /= config.anneal_rate;
        }

        let mut adv = image.clone();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let lev = relax.argmax(c, y, x);
                    adv.set(c, y, x, levels.representative(lev, image.get(c, y, x), budget));
                }
            }
        }
        let hard_loss = {
            let bits = hard_encode(&adv, levels);
            let batched = Tensor::new(vec![1, 3 * m, h, w], bits.into_data())?;
            let exec = model.forward_traced(&batched)?;
            cross_entropy_with_grad(exec.output(), &[label])?.0
        };
        if best.as_ref().map_or(true, |(b, _, _)| hard_loss > *b) {
            best = Some((hard_loss, adv, trace));
        }
    }

    let (_, adv, trace) = best.expect("restarts >= 1");
    Ok((adv, trace))
}

/// Hard encoding of an image through a level set; agrees with the
/// codebook's own embedding for every pixel.
pub fn hard_encode(image: &PixelImage, levels: &LevelSet) -> Tensor {
    let (h, w, m) = (image.height(), image.width(), levels.code_length());
    let mut data = vec![0.0f32; 3 * m * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let code = levels.code(levels.level_of(image.get(c, y, x)));
                for bit in 0..m {
                    data[((m * c + bit) * h + y) * w + x] = code[bit];
                }
            }
        }
    }
    Tensor::new(vec![3 * m, h, w], data).expect("constructed with matching length")
}
