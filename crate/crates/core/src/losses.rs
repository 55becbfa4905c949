//! Classification, consistency, and smoothness losses.
//!
//! Cross-entropy drives classification; Jensen-Shannon consistency terms
//! tie predictions on clean, augmented, and adversarial views together; the
//! smoothness term pushes neighboring embedding-table rows toward the same
//! direction. All reductions run in f64, and every loss ships its analytic
//! gradient so training never needs numeric differentiation.

use crate::encoders::EmbeddingTable;
use crate::error::{Error, Result};
use crate::graph::softmax_rows;
use crate::tensor::Tensor;

/// Probabilities below this floor are clamped inside logarithms.
const PROB_FLOOR: f64 = 1e-12;

/// Norm-product guard in the smoothness denominator.
const NORM_EPS: f64 = 1e-12;

/// Coefficients of the two auxiliary loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Consistency coefficient.
    pub alpha: f32,
    /// Smoothness coefficient.
    pub lambda: f32,
}

impl LossWeights {
    pub fn new(alpha: f32, lambda: f32) -> Result<Self> {
        if !(alpha.is_finite() && lambda.is_finite()) || alpha < 0.0 || lambda < 0.0 {
            return Err(Error::InvalidArgument("loss weights must be finite and non-negative".into()));
        }
        Ok(LossWeights { alpha, lambda })
    }
}

/// Individual terms plus their weighted sum, for per-step logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub consistency: f64,
    pub smooth: f64,
    pub total: f64,
}

/// Weighted total: ce + alpha * consistency + lambda * smooth.
pub fn total_loss(ce: f64, consistency: f64, smooth: f64, weights: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        ce,
        consistency,
        smooth,
        total: ce + weights.alpha as f64 * consistency + weights.lambda as f64 * smooth,
    }
}

/// Stable row-wise softmax of [B, K] logits.
pub fn softmax(logits: &Tensor) -> Tensor {
    softmax_rows(logits)
}

/// Chains a gradient on probabilities back through softmax:
/// dL/dz_i = p_i * (g_i - <g, p>).
pub fn softmax_backward(probs: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if probs.shape() != upstream.shape() {
        return Err(Error::ShapeMismatch {
            context: "softmax_backward".into(),
            expected: probs.shape().to_vec(),
            got: upstream.shape().to_vec(),
        });
    }
    let k = *probs.shape().last().expect("non-empty shape");
    let mut out = Tensor::zeros(probs.shape().to_vec());
    for ((dst, p), g) in out
        .data_mut()
        .chunks_mut(k)
        .zip(probs.data().chunks(k))
        .zip(upstream.data().chunks(k))
    {
        let dot: f64 = g.iter().zip(p).map(|(&gv, &pv)| gv as f64 * pv as f64).sum();
        for i in 0..k {
            dst[i] = p[i] * (g[i] - dot as f32);
        }
    }
    Ok(out)
}

fn check_batch_shape(logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let (b, k) = match *logits.shape() {
        [b, k] => (b, k),
        _ => {
            return Err(Error::ShapeMismatch {
                context: "cross_entropy logits".into(),
                expected: vec![0, 0],
                got: logits.shape().to_vec(),
            })
        }
    };
    if labels.len() != b {
        return Err(Error::ShapeMismatch {
            context: "cross_entropy labels".into(),
            expected: vec![b],
            got: vec![labels.len()],
        });
    }
    for &label in labels {
        if label >= k {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
    }
    Ok((b, k))
}

/// Mean over the batch of -log softmax(logits)[label], via log-sum-exp.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (b, k) = check_batch_shape(logits, labels)?;
    let mut total = 0.0f64;
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[label] as f64;
    }
    Ok(total / b as f64)
}

/// Cross-entropy plus its gradient on the logits: (softmax - onehot) / B.
pub fn cross_entropy_with_grad(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, k) = check_batch_shape(logits, labels)?;
    let value = cross_entropy(logits, labels)?;
    let probs = softmax_rows(logits);
    let mut grad = probs;
    for (bi, row) in grad.data_mut().chunks_mut(k).enumerate() {
        row[labels[bi]] -= 1.0;
        for v in row.iter_mut() {
            *v /= b as f32;
        }
    }
    Ok((value, grad))
}

fn check_distribution(p: &[f32], what: &str) -> Result<()> {
    let mut sum = 0.0f64;
    for &v in p {
        if v < 0.0 || !v.is_finite() {
            return Err(Error::InvalidArgument(format!("{what} has a negative or non-finite entry")));
        }
        sum += v as f64;
    }
    if (sum - 1.0).abs() > 1e-5 {
        return Err(Error::InvalidArgument(format!("{what} sums to {sum}, expected 1")));
    }
    Ok(())
}

/// KL(p || q) with q clamped below by 1e-12 and 0 * log 0 = 0.
pub fn kl_divergence(p: &[f32], q: &[f32]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch {
            context: "kl_divergence".into(),
            expected: vec![p.len()],
            got: vec![q.len()],
        });
    }
    check_distribution(p, "kl p")?;
    check_distribution(q, "kl q")?;
    Ok(kl_unchecked(p, q))
}

fn kl_unchecked(p: &[f32], q: &[f32]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pv, &qv)| {
            let pv = pv as f64;
            if pv == 0.0 {
                0.0
            } else {
                pv * (pv / (qv as f64).max(PROB_FLOOR)).ln()
            }
        })
        .sum()
}

fn check_same_shape(tensors: &[&Tensor], context: &str) -> Result<(usize, usize)> {
    let (b, k) = match *tensors[0].shape() {
        [b, k] => (b, k),
        _ => {
            return Err(Error::ShapeMismatch {
                context: context.into(),
                expected: vec![0, 0],
                got: tensors[0].shape().to_vec(),
            })
        }
    };
    for t in &tensors[1..] {
        if t.shape() != tensors[0].shape() {
            return Err(Error::ShapeMismatch {
                context: context.into(),
                expected: tensors[0].shape().to_vec(),
                got: t.shape().to_vec(),
            });
        }
    }
    for t in tensors {
        for row in t.data().chunks(k) {
            check_distribution(row, context)?;
        }
    }
    Ok((b, k))
}

fn jsd_rows(rows: &[&[f32]]) -> f64 {
    let n = rows.len() as f64;
    let k = rows[0].len();
    let mixture: Vec<f64> = (0..k)
        .map(|i| rows.iter().map(|r| r[i] as f64).sum::<f64>() / n)
        .collect();
    let mut total = 0.0f64;
    for r in rows {
        for (&pv, &v) in r.iter().zip(&mixture) {
            let pv = pv as f64;
            if pv > 0.0 {
                total += pv * (pv / v.max(PROB_FLOOR)).ln();
            }
        }
    }
    total / n
}

/// Three-way Jensen-Shannon divergence between predictions on a sample and
/// its two augmented views, averaged over the batch. Bounded by ln 3.
pub fn augmix_jsd(p: &Tensor, p1: &Tensor, p2: &Tensor) -> Result<f64> {
    let (b, k) = check_same_shape(&[p, p1, p2], "augmix_jsd")?;
    let mut total = 0.0f64;
    for bi in 0..b {
        let r = &p.data()[bi * k..(bi + 1) * k];
        let r1 = &p1.data()[bi * k..(bi + 1) * k];
        let r2 = &p2.data()[bi * k..(bi + 1) * k];
        total += jsd_rows(&[r, r1, r2]);
    }
    Ok(total / b as f64)
}

/// Three-way JSD plus gradients on each probability tensor:
/// d/dp_i = (1/3) ln(p_i / V_i), batch-mean included.
pub fn augmix_jsd_with_grads(p: &Tensor, p1: &Tensor, p2: &Tensor) -> Result<(f64, Tensor, Tensor, Tensor)> {
    let (b, k) = check_same_shape(&[p, p1, p2], "augmix_jsd")?;
    let value = augmix_jsd(p, p1, p2)?;
    let mut grads = [
        Tensor::zeros(vec![b, k]),
        Tensor::zeros(vec![b, k]),
        Tensor::zeros(vec![b, k]),
    ];
    let inputs = [p, p1, p2];
    for bi in 0..b {
        for i in 0..k {
            let idx = bi * k + i;
            let v = (inputs.iter().map(|t| t.data()[idx] as f64).sum::<f64>() / 3.0).max(PROB_FLOOR);
            for (g, t) in grads.iter_mut().zip(inputs) {
                let pv = (t.data()[idx] as f64).max(PROB_FLOOR);
                g.data_mut()[idx] = (((pv / v).ln() / 3.0) / b as f64) as f32;
            }
        }
    }
    let [g, g1, g2] = grads;
    Ok((value, g, g1, g2))
}

/// Two-way Jensen-Shannon divergence between predictions on a sample and
/// its adversarial view, averaged over the batch. Bounded by ln 2.
pub fn contrain_jsd(p: &Tensor, p_adv: &Tensor) -> Result<f64> {
    let (b, k) = check_same_shape(&[p, p_adv], "contrain_jsd")?;
    let mut total = 0.0f64;
    for bi in 0..b {
        let r = &p.data()[bi * k..(bi + 1) * k];
        let r2 = &p_adv.data()[bi * k..(bi + 1) * k];
        total += jsd_rows(&[r, r2]);
    }
    Ok(total / b as f64)
}

/// Two-way JSD plus gradients: d/dp_i = (1/2) ln(p_i / V_i), batch-mean included.
pub fn contrain_jsd_with_grads(p: &Tensor, p_adv: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    let (b, k) = check_same_shape(&[p, p_adv], "contrain_jsd")?;
    let value = contrain_jsd(p, p_adv)?;
    let mut g = Tensor::zeros(vec![b, k]);
    let mut g_adv = Tensor::zeros(vec![b, k]);
    for idx in 0..b * k {
        let v = ((p.data()[idx] as f64 + p_adv.data()[idx] as f64) / 2.0).max(PROB_FLOOR);
        let pv = (p.data()[idx] as f64).max(PROB_FLOOR);
        let av = (p_adv.data()[idx] as f64).max(PROB_FLOOR);
        g.data_mut()[idx] = (((pv / v).ln() / 2.0) / b as f64) as f32;
        g_adv.data_mut()[idx] = (((av / v).ln() / 2.0) / b as f64) as f32;
    }
    Ok((value, g, g_adv))
}

/// Sum over adjacent magnitude pairs of (1 - cosine similarity) of the
/// continuous table rows.
pub fn smoothness_value(table: &EmbeddingTable) -> f64 {
    let mut total = 0.0f64;
    for k in 0..255 {
        let (dot, na, nb) = dot_and_norms(table.row(k), table.row(k + 1));
        total += 1.0 - dot / (na * nb + NORM_EPS);
    }
    total
}

/// Smoothness value plus its exact gradient on every table entry. The
/// gradient is taken on the continuous rows directly; the sign surrogate
/// plays no part here.
pub fn smoothness_loss(table: &EmbeddingTable) -> (f64, Tensor) {
    let m = table.m();
    let mut grad = Tensor::zeros(vec![256, m]);
    let mut total = 0.0f64;
    for k in 0..255 {
        let a = table.row(k);
        let b = table.row(k + 1);
        let (dot, na, nb) = dot_and_norms(a, b);
        let denom = na * nb + NORM_EPS;
        total += 1.0 - dot / denom;
        // d(1 - dot/D)/da_i = -b_i/D + dot * (nb * a_i / na) / D^2
        let inv_na = if na > 0.0 { 1.0 / na } else { 0.0 };
        let inv_nb = if nb > 0.0 { 1.0 / nb } else { 0.0 };
        let gd = grad.data_mut();
        for i in 0..m {
            let ai = a[i] as f64;
            let bi = b[i] as f64;
            gd[k * m + i] += (-bi / denom + dot * nb * ai * inv_na / (denom * denom)) as f32;
            gd[(k + 1) * m + i] += (-ai / denom + dot * na * bi * inv_nb / (denom * denom)) as f32;
        }
    }
    (total, grad)
}

fn dot_and_norms(a: &[f32], b: &[f32]) -> (f64, f64, f64) {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    (dot, na.sqrt(), nb.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn distro(raw: &[f32]) -> Vec<f32> {
        let sum: f32 = raw.iter().sum();
        raw.iter().map(|&v| v / sum).collect()
    }

    fn random_probs(b: usize, k: usize, seed: u64) -> Tensor {
        let mut rng = crate::rng::stream(seed, "probs");
        let mut data = Vec::with_capacity(b * k);
        for _ in 0..b {
            let raw: Vec<f32> = (0..k).map(|_| rng.gen_range(0.01f32..1.0)).collect();
            data.extend(distro(&raw));
        }
        Tensor::new(vec![b, k], data).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor::filled(vec![2, 10], 0.7);
        let v = cross_entropy(&logits, &[3, 9]).unwrap();
        assert!((v - 10.0f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn dominant_correct_class_gives_near_zero() {
        let mut logits = Tensor::zeros(vec![1, 4]);
        logits.data_mut()[2] = 50.0;
        let v = cross_entropy(&logits, &[2]).unwrap();
        assert!(v < 1e-10);
    }

    #[test]
    fn three_class_hand_value() {
        let logits = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let v = cross_entropy(&logits, &[2]).unwrap();
        let want = (1.0f64 + (-1.0f64).exp() + (-2.0f64).exp()).ln();
        assert!((v - want).abs() < 1e-9);
        assert!((v - 0.4076).abs() < 1e-4);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let logits = Tensor::zeros(vec![1, 3]);
        let err = cross_entropy(&logits, &[3]).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 3, classes: 3 }));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = crate::rng::stream(8, "ce-fd");
        let data: Vec<f32> = (0..3 * 5).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
        let logits = Tensor::new(vec![3, 5], data).unwrap();
        let labels = [4usize, 0, 2];
        let (_, grad) = cross_entropy_with_grad(&logits, &labels).unwrap();
        let eps = 1e-3f32;
        for idx in 0..15 {
            let mut up = logits.clone();
            up.data_mut()[idx] += eps;
            let mut down = logits.clone();
            down.data_mut()[idx] -= eps;
            let fd = (cross_entropy(&up, &labels).unwrap() - cross_entropy(&down, &labels).unwrap())
                / (up.data()[idx] as f64 - down.data()[idx] as f64);
            let ana = grad.data()[idx] as f64;
            assert!((fd - ana).abs() < 1e-4, "idx {idx}: fd {fd} vs {ana}");
        }
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let p = [0.2f32, 0.5, 0.3];
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_hand_value_and_asymmetry() {
        let v = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - 2.0f64.ln()).abs() < 1e-9);
        let a = kl_divergence(&[0.9, 0.1], &[0.5, 0.5]).unwrap();
        let b = kl_divergence(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        assert!((a - b).abs() > 1e-3);
    }

    #[test]
    fn kl_rejects_negative_and_unnormalized() {
        assert!(kl_divergence(&[-0.1, 1.1], &[0.5, 0.5]).is_err());
        assert!(kl_divergence(&[0.3, 0.3], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn augmix_jsd_zero_on_equal_inputs() {
        let p = random_probs(4, 6, 1);
        let v = augmix_jsd(&p, &p.clone(), &p.clone()).unwrap();
        assert!(v.abs() <= 1e-10);
    }

    #[test]
    fn augmix_jsd_is_permutation_invariant() {
        let (p, p1, p2) = (random_probs(3, 5, 2), random_probs(3, 5, 3), random_probs(3, 5, 4));
        let a = augmix_jsd(&p, &p1, &p2).unwrap();
        let b = augmix_jsd(&p2, &p, &p1).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn augmix_jsd_extreme_case_respects_bound() {
        let p = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let p1 = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let p2 = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let v = augmix_jsd(&p, &p1, &p2).unwrap();
        // brute-force substitution: V = (1/2, 1/2); KL terms ln 2, ln 2, 0
        assert!((v - 2.0 * 2.0f64.ln() / 3.0).abs() < 1e-9);
        assert!(v <= 3.0f64.ln() + 1e-9);
    }

    #[test]
    fn contrain_jsd_hand_values() {
        let p = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let q = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let v = contrain_jsd(&p, &q).unwrap();
        assert!((v - 2.0f64.ln()).abs() < 1e-9);
        assert_eq!(contrain_jsd(&p, &p.clone()).unwrap(), 0.0);
        let r = random_probs(2, 4, 9);
        let s = random_probs(2, 4, 10);
        assert!((contrain_jsd(&r, &s).unwrap() - contrain_jsd(&s, &r).unwrap()).abs() < 1e-12);
    }

    fn jsd3_brute(rows: &[Vec<f64>]) -> f64 {
        let k = rows[0].len();
        let v: Vec<f64> = (0..k).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / rows.len() as f64).collect();
        rows.iter()
            .map(|r| {
                r.iter()
                    .zip(&v)
                    .map(|(&p, &q)| if p == 0.0 { 0.0 } else { p * (p / q.max(1e-12)).ln() })
                    .sum::<f64>()
            })
            .sum::<f64>()
            / rows.len() as f64
    }

    #[test]
    fn augmix_gradients_match_finite_differences() {
        let (p, p1, p2) = (random_probs(2, 4, 5), random_probs(2, 4, 6), random_probs(2, 4, 7));
        let (_, g, _, _) = augmix_jsd_with_grads(&p, &p1, &p2).unwrap();
        let eps = 1e-5f64;
        for idx in 0..8 {
            let bi = idx / 4;
            let make = |delta: f64| -> f64 {
                let mut rows: Vec<Vec<f64>> = [&p, &p1, &p2]
                    .iter()
                    .map(|t| t.data()[bi * 4..(bi + 1) * 4].iter().map(|&v| v as f64).collect())
                    .collect();
                rows[0][idx % 4] += delta;
                jsd3_brute(&rows)
            };
            let fd = (make(eps) - make(-eps)) / (2.0 * eps) / 2.0; // batch mean over B=2
            let ana = g.data()[idx] as f64;
            assert!((fd - ana).abs() < 1e-5, "idx {idx}: fd {fd} vs {ana}");
        }
    }

    #[test]
    fn contrain_gradients_match_finite_differences() {
        let (p, q) = (random_probs(2, 3, 11), random_probs(2, 3, 12));
        let (_, g, g_adv) = contrain_jsd_with_grads(&p, &q).unwrap();
        let eps = 1e-5f64;
        for idx in 0..6 {
            let bi = idx / 3;
            let make = |which: usize, delta: f64| -> f64 {
                let mut rows: Vec<Vec<f64>> = [&p, &q]
                    .iter()
                    .map(|t| t.data()[bi * 3..(bi + 1) * 3].iter().map(|&v| v as f64).collect())
                    .collect();
                rows[which][idx % 3] += delta;
                jsd3_brute(&rows)
            };
            for (which, grad) in [(0usize, &g), (1, &g_adv)] {
                let fd = (make(which, eps) - make(which, -eps)) / (2.0 * eps) / 2.0;
                let ana = grad.data()[idx] as f64;
                assert!((fd - ana).abs() < 1e-5, "idx {idx} arg {which}: fd {fd} vs {ana}");
            }
        }
    }

    #[test]
    fn identical_rows_have_zero_smoothness() {
        let table = EmbeddingTable::from_values(4, vec![0.3; 256 * 4]).unwrap();
        let (v, grad) = smoothness_loss(&table);
        assert!(v.abs() < 1e-6);
        assert!(grad.data().iter().all(|&g| g.abs() < 1e-6));
    }

    #[test]
    fn orthogonal_neighbors_score_one_per_pair() {
        let m = 4;
        let mut w = vec![0.0f32; 256 * m];
        for k in 0..256 {
            w[k * m + (k % 2)] = 1.0;
        }
        let table = EmbeddingTable::from_values(m, w).unwrap();
        let (v, _) = smoothness_loss(&table);
        assert_eq!(v, 255.0);
    }

    #[test]
    fn smoothness_gradient_matches_finite_differences() {
        let mut rng = crate::rng::stream(13, "smooth-fd");
        let m = 8;
        let w: Vec<f32> = (0..256 * m).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let table = EmbeddingTable::from_values(m, w).unwrap();
        let (_, grad) = smoothness_loss(&table);
        let eps = 1e-3f32;
        for _ in 0..50 {
            let idx = rng.gen_range(0..256 * m);
            let mut probe = table.clone();
            probe.values_mut()[idx] += eps;
            let up = smoothness_value(&probe);
            probe.values_mut()[idx] = table.values()[idx] - eps;
            let down = smoothness_value(&probe);
            let denom = (table.values()[idx] + eps) as f64 - (table.values()[idx] - eps) as f64;
            let fd = (up - down) / denom;
            let ana = grad.data()[idx] as f64;
            let rel = (fd - ana).abs() / fd.abs().max(ana.abs()).max(1e-8);
            assert!(rel < 1e-4, "idx {idx}: fd {fd} vs {ana} rel {rel}");
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut rng = crate::rng::stream(14, "sm-fd");
        let z: Vec<f32> = (0..6).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
        let upstream: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let logits = Tensor::new(vec![2, 3], z.clone()).unwrap();
        let probs = softmax(&logits);
        let up = Tensor::new(vec![2, 3], upstream.clone()).unwrap();
        let grad = softmax_backward(&probs, &up).unwrap();
        let loss = |zd: &[f64]| -> f64 {
            let mut total = 0.0;
            for bi in 0..2 {
                let row = &zd[bi * 3..(bi + 1) * 3];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for i in 0..3 {
                    total += upstream[bi * 3 + i] as f64 * exps[i] / sum;
                }
            }
            total
        };
        let eps = 1e-6f64;
        for idx in 0..6 {
            let mut zu: Vec<f64> = z.iter().map(|&v| v as f64).collect();
            zu[idx] += eps;
            let mut zd: Vec<f64> = z.iter().map(|&v| v as f64).collect();
            zd[idx] -= eps;
            let fd = (loss(&zu) - loss(&zd)) / (2.0 * eps);
            assert!((fd - grad.data()[idx] as f64).abs() < 1e-5);
        }
    }

    #[test]
    fn total_loss_is_linear_in_weights() {
        let w0 = LossWeights::new(0.0, 0.0).unwrap();
        let b = total_loss(1.5, 0.7, 2.0, &w0);
        assert_eq!(b.total, 1.5);
        let w = LossWeights::new(12.0, 1.0).unwrap();
        let b = total_loss(1.5, 0.7, 2.0, &w);
        assert!((b.total - (1.5 + 12.0 * 0.7 + 2.0)).abs() < 1e-12);
        let w2 = LossWeights::new(24.0, 2.0).unwrap();
        let b2 = total_loss(1.5, 0.7, 2.0, &w2);
        assert!(((b2.total - b.ce) - 2.0 * (b.total - b.ce)).abs() < 1e-12);
    }

    #[test]
    fn negative_weights_are_rejected() {
        assert!(LossWeights::new(-1.0, 0.0).is_err());
        assert!(LossWeights::new(0.0, f32::NAN).is_err());
    }
}
