//! Pixel-to-binary encodings.
//!
//! Three codebooks map each 8-bit magnitude to an M-bit code: hand-coded
//! one-hot and thermometer rules, and a learnable table binarized through a
//! sign function. Images become [3M, H, W] bit-plane tensors where channel
//! M*c + m holds bit m of input channel c. The learnable path trains through
//! an approximate-sign surrogate whose derivative is nonzero only on (-1, 1).

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// An RGB image stored planar: values[(c*H + y)*W + x], each in 0..=255.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelImage {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl PixelImage {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("image dimensions must be positive".into()));
        }
        if values.len() != 3 * height * width {
            return Err(Error::ShapeMismatch {
                context: "pixel image".into(),
                expected: vec![3, height, width],
                got: vec![values.len()],
            });
        }
        Ok(PixelImage { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Result<Self> {
        Self::new(height, width, vec![value; 3 * height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.values[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: u8) {
        self.values[(c * self.height + y) * self.width + x] = v;
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [u8] {
        &mut self.values
    }

    /// Channels scaled to [0,1] floats, shape [3, H, W]; the no-encoding path.
    pub fn to_float_tensor(&self) -> Tensor {
        let data = self.values.iter().map(|&v| v as f32 / 255.0).collect();
        Tensor::new(vec![3, self.height, self.width], data).expect("length checked at construction")
    }
}

/// Bucket index of a magnitude: j such that j/M <= x/255 < (j+1)/M, with
/// x = 255 clamped into the top bucket.
pub fn bucket_of(x: u8, m: usize) -> usize {
    assert!(m >= 1, "bucket count must be positive");
    ((x as usize * m) / 255).min(m - 1)
}

/// One-hot code of length `m`: a single 1 in the magnitude's bucket.
pub fn encode_one_hot(x: u8, m: usize) -> Vec<u8> {
    let mut code = vec![0u8; m];
    code[bucket_of(x, m)] = 1;
    code
}

/// Thermometer code of length `m`: zeros up to the bucket, ones after,
/// so codes of nearby magnitudes overlap.
pub fn encode_thermometer(x: u8, m: usize) -> Vec<u8> {
    let j = bucket_of(x, m);
    let mut code = vec![0u8; m];
    for bit in code.iter_mut().skip(j) {
        *bit = 1;
    }
    code
}

/// Piecewise-quadratic surrogate for sign: clamped smooth ramp through 0.
pub fn approx_sign(x: f32) -> f32 {
    if x < -1.0 {
        -1.0
    } else if x < 0.0 {
        2.0 * x + x * x
    } else if x < 1.0 {
        2.0 * x - x * x
    } else {
        1.0
    }
}

/// Derivative of [`approx_sign`]: 2+2x on [-1,0), 2-2x on [0,1), 0 outside.
pub fn approx_sign_derivative(x: f32) -> f32 {
    if x < -1.0 {
        0.0
    } else if x < 0.0 {
        2.0 + 2.0 * x
    } else if x < 1.0 {
        2.0 - 2.0 * x
    } else {
        0.0
    }
}

/// Learnable 256 x M embedding table, one row per pixel magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    m: usize,
    w: Vec<f32>,
}

impl EmbeddingTable {
    /// Standard-normal initialization from the `embedding-init` stream.
    pub fn init_normal(m: usize, seed: u64) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be positive".into()));
        }
        let mut rng = rng::stream(seed, "embedding-init");
        let w = (0..256 * m).map(|_| StandardNormal.sample(&mut rng)).collect();
        Ok(EmbeddingTable { m, w })
    }

    pub fn from_values(m: usize, w: Vec<f32>) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be positive".into()));
        }
        if w.len() != 256 * m {
            return Err(Error::ShapeMismatch {
                context: "embedding table".into(),
                expected: vec![256, m],
                got: vec![w.len()],
            });
        }
        if !w.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("embedding table".into()));
        }
        Ok(EmbeddingTable { m, w })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn row(&self, k: usize) -> &[f32] {
        &self.w[k * self.m..(k + 1) * self.m]
    }

    pub fn values(&self) -> &[f32] {
        &self.w
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.w
    }
}

/// Fixed 256 x M binary codebook; rows index pixel magnitudes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryCodebook {
    m: usize,
    e: Vec<u8>,
}

impl BinaryCodebook {
    pub fn one_hot(m: usize) -> Self {
        let mut e = Vec::with_capacity(256 * m);
        for k in 0..=255u8 {
            e.extend_from_slice(&encode_one_hot(k, m));
        }
        BinaryCodebook { m, e }
    }

    pub fn thermometer(m: usize) -> Self {
        let mut e = Vec::with_capacity(256 * m);
        for k in 0..=255u8 {
            e.extend_from_slice(&encode_thermometer(k, m));
        }
        BinaryCodebook { m, e }
    }

    /// Binarizes a table: bit = 1 where the entry is >= 0 (sign(0) = +1).
    pub fn from_table(table: &EmbeddingTable) -> Result<Self> {
        if !table.values().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("embedding table".into()));
        }
        let e = table.values().iter().map(|&v| u8::from(v >= 0.0)).collect();
        Ok(BinaryCodebook { m: table.m(), e })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn code(&self, k: usize) -> &[u8] {
        &self.e[k * self.m..(k + 1) * self.m]
    }

    /// 256 x 256 pairwise cosine similarities between code rows, row-major.
    /// Rows with zero norm get 0 in their whole row and column; a warning
    /// reports how many such rows exist.
    pub fn cosine_similarity_matrix(&self) -> Vec<f32> {
        let norms: Vec<f64> = (0..256)
            .map(|k| (self.code(k).iter().map(|&b| b as u32).sum::<u32>() as f64).sqrt())
            .collect();
        let zero_rows = norms.iter().filter(|&&n| n == 0.0).count();
        if zero_rows > 0 {
            log::warn!("cosine similarity: {zero_rows} all-zero code rows, their cells are reported as 0");
        }
        let mut out = vec![0.0f32; 256 * 256];
        for i in 0..256 {
            if norms[i] == 0.0 {
                continue;
            }
            for j in i..256 {
                if norms[j] == 0.0 {
                    continue;
                }
                let dot: u32 = self
                    .code(i)
                    .iter()
                    .zip(self.code(j))
                    .map(|(&a, &b)| (a & b) as u32)
                    .sum();
                let cos = (dot as f64 / (norms[i] * norms[j])) as f32;
                out[i * 256 + j] = cos;
                out[j * 256 + i] = cos;
            }
        }
        out
    }
}

/// Encodes an image into its [3M, H, W] bit-plane tensor.
pub fn embed_image(image: &PixelImage, codebook: &BinaryCodebook) -> Tensor {
    let (m, h, w) = (codebook.m(), image.height(), image.width());
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * m * plane];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let code = codebook.code(image.get(c, y, x) as usize);
                for (bit, &b) in code.iter().enumerate() {
                    data[((m * c + bit) * h + y) * w + x] = b as f32;
                }
            }
        }
    }
    Tensor::new(vec![3 * m, h, w], data).expect("constructed with matching length")
}

/// Stacks encoded images into a [B, 3M, H, W] batch tensor.
pub fn embed_batch(images: &[PixelImage], codebook: &BinaryCodebook) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (m, h, w) = (codebook.m(), first.height(), first.width());
    let per = 3 * m * h * w;
    let mut data = Vec::with_capacity(images.len() * per);
    for img in images {
        if img.height() != h || img.width() != w {
            return Err(Error::ShapeMismatch {
                context: "embed_batch image sizes".into(),
                expected: vec![h, w],
                got: vec![img.height(), img.width()],
            });
        }
        data.extend_from_slice(embed_image(img, codebook).data());
    }
    Tensor::new(vec![images.len(), 3 * m, h, w], data)
}

/// Surrogate backward pass: routes the bit-plane gradient into the table.
/// Each pixel occurrence of magnitude k adds
/// 0.5 * upstream * approx_sign_derivative(w[k][m]) into row k.
pub fn p2be_backward(image: &PixelImage, upstream: &Tensor, table: &EmbeddingTable) -> Result<Tensor> {
    let (m, h, w) = (table.m(), image.height(), image.width());
    if upstream.shape() != [3 * m, h, w] {
        return Err(Error::ShapeMismatch {
            context: "p2be_backward upstream".into(),
            expected: vec![3 * m, h, w],
            got: upstream.shape().to_vec(),
        });
    }
    let mut grad = Tensor::zeros(vec![256, m]);
    accumulate_table_gradient(image, upstream.data(), table, grad.data_mut());
    Ok(grad)
}

/// Batch variant: upstream is [B, 3M, H, W]; contributions accumulate in
/// batch order so results are bit-reproducible.
pub fn p2be_backward_batch(images: &[PixelImage], upstream: &Tensor, table: &EmbeddingTable) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (m, h, w) = (table.m(), first.height(), first.width());
    if upstream.shape() != [images.len(), 3 * m, h, w] {
        return Err(Error::ShapeMismatch {
            context: "p2be_backward upstream".into(),
            expected: vec![images.len(), 3 * m, h, w],
            got: upstream.shape().to_vec(),
        });
    }
    let per = 3 * m * h * w;
    let mut grad = Tensor::zeros(vec![256, m]);
    for (bi, img) in images.iter().enumerate() {
        accumulate_table_gradient(img, &upstream.data()[bi * per..(bi + 1) * per], table, grad.data_mut());
    }
    Ok(grad)
}

fn accumulate_table_gradient(image: &PixelImage, upstream: &[f32], table: &EmbeddingTable, grad: &mut [f32]) {
    let (m, h, w) = (table.m(), image.height(), image.width());
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let k = image.get(c, y, x) as usize;
                let row = table.row(k);
                let out = &mut grad[k * m..(k + 1) * m];
                for bit in 0..m {
                    let up = upstream[((m * c + bit) * h + y) * w + x];
                    out[bit] += 0.5 * up * approx_sign_derivative(row[bit]);
                }
            }
        }
    }
}
