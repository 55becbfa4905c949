//! Desk-scale training and evaluation.
//!
//! The loop pairs two optimizers: momentum SGD with a cosine-annealed
//! learning rate for the network, and constant-rate AdamW for the
//! embedding table (p2be only). Three modes are supported:
//!
//! - `clean-consistency`: every step runs the clean batch plus two
//!   augmented views and regularizes with the three-way JSD.
//! - `adversarial-consistency`: the second view is an LS-PGA adversarial
//!   image and the regularizer is the two-way JSD.
//! - `advtrain`: trains on adversarial images only.
//!
//! The codebook is re-derived from the table once per step, after the
//! embedding update. All randomness flows from the config seed through
//! labeled streams, so a run is fully determined by its config.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attack::{lspga_attack, AttackConfig, LevelSet};
use crate::corruptions::{apply_corruption, CorruptionSpec, ErrorTable};
use crate::encoders::{
    embed_batch, p2be_backward_batch, BinaryCodebook, EmbeddingTable, PixelImage,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, GraphBuilder};
use crate::losses::{
    augmix_jsd_with_grads, contrain_jsd_with_grads, cross_entropy_with_grad, smoothness_loss,
    smoothness_value, softmax, softmax_backward, LossWeights,
};
use crate::rng;
use crate::tensor::Tensor;

pub mod checkpoint;
pub mod data;
pub mod optim;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use data::{augment, Dataset};
pub use optim::{cosine_lr, AdamW, AdamWState, SgdMomentum, ADAM_EPSILON};

/// Evaluation forward passes run over chunks of this many images.
const EVAL_CHUNK: usize = 64;

/// Training objective variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    CleanConsistency,
    AdversarialConsistency,
    #[serde(rename = "advtrain")]
    AdvTrain,
}

impl TrainMode {
    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::CleanConsistency => "clean-consistency",
            TrainMode::AdversarialConsistency => "adversarial-consistency",
            TrainMode::AdvTrain => "advtrain",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Input representation fed to the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Rgb,
    OneHot,
    Thermometer,
    P2be,
}

impl EncoderKind {
    pub fn name(&self) -> &'static str {
        match self {
            EncoderKind::Rgb => "rgb",
            EncoderKind::OneHot => "one-hot",
            EncoderKind::Thermometer => "thermometer",
            EncoderKind::P2be => "p2be",
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(EncoderKind::Rgb),
            "one-hot" => Ok(EncoderKind::OneHot),
            "thermometer" => Ok(EncoderKind::Thermometer),
            "p2be" => Ok(EncoderKind::P2be),
            other => Err(Error::Config(format!(
                "unknown encoder `{other}` (expected rgb, one-hot, thermometer, or p2be)"
            ))),
        }
    }
}

/// Hyperparameters for one training run. Every field has a default, so a
/// JSON config may specify any subset; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub net_lr_start: f32,
    pub net_lr_end: f32,
    pub net_momentum: f32,
    pub net_weight_decay: f32,
    pub emb_lr: f32,
    pub emb_beta1: f32,
    pub emb_beta2: f32,
    pub emb_weight_decay: f32,
    pub m: usize,
    pub alpha: f32,
    pub lambda: f32,
    pub mode: TrainMode,
    pub encoder: EncoderKind,
    pub freeze_embedding: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            net_lr_start: 0.1,
            net_lr_end: 1e-5,
            net_momentum: 0.9,
            net_weight_decay: 5e-4,
            emb_lr: 1e-4,
            emb_beta1: 0.999,
            emb_beta2: 0.999,
            emb_weight_decay: 1e-4,
            m: 64,
            alpha: 12.0,
            lambda: 1.0,
            mode: TrainMode::CleanConsistency,
            encoder: EncoderKind::P2be,
            freeze_embedding: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.m == 0 {
            return Err(Error::Config("m must be positive".into()));
        }
        for (name, value) in [
            ("net_lr_start", self.net_lr_start),
            ("net_lr_end", self.net_lr_end),
            ("emb_lr", self.emb_lr),
        ] {
            if !value.is_finite() || value <= 0.0 {
                return Err(Error::Config(format!("{name} must be a positive real, got {value}")));
            }
        }
        for (name, value) in [
            ("net_momentum", self.net_momentum),
            ("emb_beta1", self.emb_beta1),
            ("emb_beta2", self.emb_beta2),
        ] {
            if !value.is_finite() || !(0.0..1.0).contains(&value) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {value}")));
            }
        }
        for (name, value) in [
            ("net_weight_decay", self.net_weight_decay),
            ("emb_weight_decay", self.emb_weight_decay),
        ] {
            if !value.is_finite() || value < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be a non-negative real, got {value}"
                )));
            }
        }
        LossWeights::new(self.alpha, self.lambda)?;
        Ok(())
    }
}

/// Per-epoch training log row. Loss columns are raw (unweighted)
/// components averaged over the epoch's steps.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f32,
    pub l_ce: f64,
    pub l_consistency: f64,
    pub l_smooth: f64,
    pub train_acc: f64,
    pub clean_test_err: f64,
}

pub const METRICS_CSV_HEADER: &str = "epoch,lr,L_ce,L_consistency,L_smooth,train_acc,clean_test_err";

/// Renders the per-epoch log in a stable format suitable for byte-level
/// reproducibility checks.
pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::with_capacity(64 * (metrics.len() + 1));
    out.push_str(METRICS_CSV_HEADER);
    out.push('\n');
    for m in metrics {
        out.push_str(&format!(
            "{},{:.8},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            m.epoch, m.lr, m.l_ce, m.l_consistency, m.l_smooth, m.train_acc, m.clean_test_err
        ));
    }
    out
}

/// A finished run: final state plus the per-epoch log.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

/// Builds the reference classifier: two padded 3x3 convolutions, a global
/// average pool, and a dense head.
pub fn build_network(
    in_channels: usize,
    height: usize,
    width: usize,
    classes: usize,
    seed: u64,
) -> Result<Graph> {
    let mut builder = GraphBuilder::new(vec![in_channels, height, width]);
    builder.conv2d("conv1", 16, 3, 1)?;
    builder.relu("relu1");
    builder.conv2d("conv2", 32, 3, 1)?;
    builder.relu("relu2");
    builder.global_avg_pool("pool")?;
    builder.dense("head", classes)?;
    Ok(builder.build(seed))
}

fn derive_codebook(
    encoder: EncoderKind,
    m: usize,
    table: Option<&EmbeddingTable>,
) -> Result<Option<BinaryCodebook>> {
    match encoder {
        EncoderKind::Rgb => Ok(None),
        EncoderKind::OneHot => Ok(Some(BinaryCodebook::one_hot(m))),
        EncoderKind::Thermometer => Ok(Some(BinaryCodebook::thermometer(m))),
        EncoderKind::P2be => {
            let table = table.ok_or_else(|| {
                Error::Config("the p2be encoder needs an embedding table".into())
            })?;
            Ok(Some(BinaryCodebook::from_table(table)?))
        }
    }
}

/// Codebook in effect for a checkpoint; `None` for the rgb encoder.
pub fn checkpoint_codebook(checkpoint: &Checkpoint) -> Result<Option<BinaryCodebook>> {
    derive_codebook(
        checkpoint.config.encoder,
        checkpoint.config.m,
        checkpoint.table.as_ref(),
    )
}

fn encode_images(images: &[PixelImage], codebook: Option<&BinaryCodebook>) -> Result<Tensor> {
    match codebook {
        Some(cb) => embed_batch(images, cb),
        None => {
            let first = images
                .first()
                .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
            let (h, w) = (first.height(), first.width());
            let mut data = Vec::with_capacity(images.len() * 3 * h * w);
            for img in images {
                if img.height() != h || img.width() != w {
                    return Err(Error::ShapeMismatch {
                        context: "rgb batch image sizes".into(),
                        expected: vec![h, w],
                        got: vec![img.height(), img.width()],
                    });
                }
                data.extend(img.to_float_tensor().into_data());
            }
            Tensor::new(vec![images.len(), 3, h, w], data)
        }
    }
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    let mut correct = 0;
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct
}

fn images_error(
    network: &Graph,
    codebook: Option<&BinaryCodebook>,
    images: &[PixelImage],
    labels: &[usize],
) -> Result<f64> {
    let mut correct = 0usize;
    for (imgs, lbls) in images.chunks(EVAL_CHUNK).zip(labels.chunks(EVAL_CHUNK)) {
        let x = encode_images(imgs, codebook)?;
        let exec = network.forward_traced(&x)?;
        correct += count_correct(exec.output(), lbls);
    }
    Ok(1.0 - correct as f64 / images.len() as f64)
}

fn attack_levels(
    encoder: EncoderKind,
    m: usize,
    codebook: Option<&BinaryCodebook>,
) -> Result<LevelSet> {
    match encoder {
        EncoderKind::OneHot => Ok(LevelSet::one_hot(m)),
        EncoderKind::Thermometer => Ok(LevelSet::thermometer(m)),
        EncoderKind::P2be => {
            let cb = codebook.ok_or_else(|| {
                Error::Config("the p2be encoder needs a codebook for attacks".into())
            })?;
            Ok(LevelSet::from_codebook(cb))
        }
        EncoderKind::Rgb => Err(Error::EncoderMismatch {
            checkpoint: "rgb".into(),
            requested: "lspga attack".into(),
        }),
    }
}

fn add_grad_maps(
    into: &mut BTreeMap<String, Tensor>,
    other: &BTreeMap<String, Tensor>,
) -> Result<()> {
    for (name, grad) in other {
        into.get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.clone()))?
            .add_in_place(grad)?;
    }
    Ok(())
}

/// One step's losses, predictions, and gradients. `encoder_grads` pairs
/// each forward pass's images with dL/d(bits) for the table backward.
struct StepOutcome {
    ce: f64,
    consistency: f64,
    correct: usize,
    net_grads: BTreeMap<String, Tensor>,
    encoder_grads: Vec<(Vec<PixelImage>, Tensor)>,
}

fn ce_only_outcome(
    network: &Graph,
    images: Vec<PixelImage>,
    exec: crate::graph::Execution,
    labels: &[usize],
) -> Result<StepOutcome> {
    let (ce, g_ce) = cross_entropy_with_grad(exec.output(), labels)?;
    let correct = count_correct(exec.output(), labels);
    let gs = network.backward_traced(&exec, &g_ce)?;
    Ok(StepOutcome {
        ce,
        consistency: 0.0,
        correct,
        net_grads: gs.params,
        encoder_grads: vec![(images, gs.input)],
    })
}

fn attack_batch(
    network: &Graph,
    codebook: Option<&BinaryCodebook>,
    batch: &[PixelImage],
    labels: &[usize],
    config: &TrainConfig,
    attack: &AttackConfig,
    global_step: usize,
) -> Result<Vec<PixelImage>> {
    let levels = attack_levels(config.encoder, config.m, codebook)?;
    let mut adv = Vec::with_capacity(batch.len());
    for (bi, img) in batch.iter().enumerate() {
        let seed = rng::child_seed(
            config.seed,
            "train-attack",
            (global_step * config.batch_size + bi) as u64,
        );
        let (image, _) = lspga_attack(network, &levels, img, labels[bi], attack, seed)?;
        adv.push(image);
    }
    Ok(adv)
}

fn run_step(
    network: &Graph,
    codebook: Option<&BinaryCodebook>,
    batch: &[PixelImage],
    labels: &[usize],
    config: &TrainConfig,
    attack: &AttackConfig,
    global_step: usize,
) -> Result<StepOutcome> {
    match config.mode {
        TrainMode::CleanConsistency => {
            let exec0 = network.forward_traced(&encode_images(batch, codebook)?)?;
            if config.alpha == 0.0 {
                return ce_only_outcome(network, batch.to_vec(), exec0, labels);
            }
            let (ce, g_ce) = cross_entropy_with_grad(exec0.output(), labels)?;
            let correct = count_correct(exec0.output(), labels);

            let mut aug_rng = rng::stream_indexed(config.seed, "augment", global_step as u64);
            let mut aug1 = Vec::with_capacity(batch.len());
            let mut aug2 = Vec::with_capacity(batch.len());
            for img in batch {
                aug1.push(augment(img, &mut aug_rng)?);
                aug2.push(augment(img, &mut aug_rng)?);
            }
            let exec1 = network.forward_traced(&encode_images(&aug1, codebook)?)?;
            let exec2 = network.forward_traced(&encode_images(&aug2, codebook)?)?;

            let p0 = softmax(exec0.output());
            let p1 = softmax(exec1.output());
            let p2 = softmax(exec2.output());
            let (jsd, gp0, gp1, gp2) = augmix_jsd_with_grads(&p0, &p1, &p2)?;

            let mut up0 = softmax_backward(&p0, &gp0)?;
            up0.scale_in_place(config.alpha);
            up0.add_in_place(&g_ce)?;
            let mut up1 = softmax_backward(&p1, &gp1)?;
            up1.scale_in_place(config.alpha);
            let mut up2 = softmax_backward(&p2, &gp2)?;
            up2.scale_in_place(config.alpha);

            let gs0 = network.backward_traced(&exec0, &up0)?;
            let gs1 = network.backward_traced(&exec1, &up1)?;
            let gs2 = network.backward_traced(&exec2, &up2)?;
            let mut net_grads = gs0.params;
            add_grad_maps(&mut net_grads, &gs1.params)?;
            add_grad_maps(&mut net_grads, &gs2.params)?;
            Ok(StepOutcome {
                ce,
                consistency: jsd,
                correct,
                net_grads,
                encoder_grads: vec![
                    (batch.to_vec(), gs0.input),
                    (aug1, gs1.input),
                    (aug2, gs2.input),
                ],
            })
        }
        TrainMode::AdversarialConsistency => {
            let exec0 = network.forward_traced(&encode_images(batch, codebook)?)?;
            if config.alpha == 0.0 {
                return ce_only_outcome(network, batch.to_vec(), exec0, labels);
            }
            let (ce, g_ce) = cross_entropy_with_grad(exec0.output(), labels)?;
            let correct = count_correct(exec0.output(), labels);

            let adv = attack_batch(network, codebook, batch, labels, config, attack, global_step)?;
            let exec1 = network.forward_traced(&encode_images(&adv, codebook)?)?;

            let p0 = softmax(exec0.output());
            let p1 = softmax(exec1.output());
            let (jsd, gp0, gp1) = contrain_jsd_with_grads(&p0, &p1)?;

            let mut up0 = softmax_backward(&p0, &gp0)?;
            up0.scale_in_place(config.alpha);
            up0.add_in_place(&g_ce)?;
            let mut up1 = softmax_backward(&p1, &gp1)?;
            up1.scale_in_place(config.alpha);

            let gs0 = network.backward_traced(&exec0, &up0)?;
            let gs1 = network.backward_traced(&exec1, &up1)?;
            let mut net_grads = gs0.params;
            add_grad_maps(&mut net_grads, &gs1.params)?;
            Ok(StepOutcome {
                ce,
                consistency: jsd,
                correct,
                net_grads,
                encoder_grads: vec![(batch.to_vec(), gs0.input), (adv, gs1.input)],
            })
        }
        TrainMode::AdvTrain => {
            let adv = attack_batch(network, codebook, batch, labels, config, attack, global_step)?;
            let exec = network.forward_traced(&encode_images(&adv, codebook)?)?;
            ce_only_outcome(network, adv, exec, labels)
        }
    }
}

/// Runs the full training loop. `initial_table` seeds the embedding
/// (p2be only), enabling transfer of a previously trained table; combine
/// with `freeze_embedding` to keep it fixed throughout.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    attack: &AttackConfig,
    initial_table: Option<&EmbeddingTable>,
) -> Result<TrainOutput> {
    config.validate()?;
    let needs_attack = matches!(
        config.mode,
        TrainMode::AdversarialConsistency | TrainMode::AdvTrain
    );
    if needs_attack {
        attack.validate()?;
        if config.encoder == EncoderKind::Rgb {
            return Err(Error::Config(
                "adversarial training needs a discrete encoder; rgb input has no attack levels"
                    .into(),
            ));
        }
    }
    if config.encoder == EncoderKind::P2be && config.mode == TrainMode::AdvTrain {
        log::warn!(
            "advtrain with the p2be encoder is frequently unstable; prefer adversarial-consistency"
        );
    }
    if config.freeze_embedding && config.encoder != EncoderKind::P2be {
        log::warn!(
            "freeze_embedding has no effect with the {} encoder",
            config.encoder
        );
    }
    if let Some(t) = initial_table {
        if config.encoder != EncoderKind::P2be {
            return Err(Error::Config(
                "an imported embedding table requires the p2be encoder".into(),
            ));
        }
        if t.m() != config.m {
            return Err(Error::Config(format!(
                "imported table has M={}, config has M={}",
                t.m(),
                config.m
            )));
        }
    }

    let in_channels = match config.encoder {
        EncoderKind::Rgb => 3,
        _ => 3 * config.m,
    };
    let mut network = build_network(
        in_channels,
        dataset.height(),
        dataset.width(),
        dataset.classes(),
        config.seed,
    )?;
    let mut table = match config.encoder {
        EncoderKind::P2be => Some(match initial_table {
            Some(t) => t.clone(),
            None => EmbeddingTable::init_normal(config.m, config.seed)?,
        }),
        _ => None,
    };
    let mut codebook = derive_codebook(config.encoder, config.m, table.as_ref())?;

    let update_table = config.encoder == EncoderKind::P2be && !config.freeze_embedding;
    let mut sgd = SgdMomentum::new(config.net_momentum, config.net_weight_decay);
    let mut adamw = if update_table {
        Some(AdamW::new(
            config.emb_lr,
            config.emb_beta1,
            config.emb_beta2,
            config.emb_weight_decay,
            256 * config.m,
        ))
    } else {
        None
    };

    let n = dataset.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = config.epochs * steps_per_epoch;
    let mut global_step = 0usize;
    let mut metrics = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream_indexed(config.seed, "shuffle", epoch as u64));
        let lr_epoch = cosine_lr(global_step, total_steps, config.net_lr_start, config.net_lr_end);
        let mut ce_sum = 0.0;
        let mut cons_sum = 0.0;
        let mut smooth_sum = 0.0;
        let mut correct = 0usize;

        for chunk in order.chunks(config.batch_size) {
            let lr = cosine_lr(global_step, total_steps, config.net_lr_start, config.net_lr_end);
            let batch: Vec<PixelImage> = chunk.iter().map(|&i| dataset.image(i).clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| dataset.label(i)).collect();

            let step = run_step(
                &network,
                codebook.as_ref(),
                &batch,
                &labels,
                config,
                attack,
                global_step,
            )?;
            ce_sum += step.ce;
            cons_sum += step.consistency;
            correct += step.correct;

            sgd.step(network.params_mut(), &step.net_grads, lr)?;

            if let Some(tbl) = table.as_mut() {
                if update_table {
                    let mut tg = Tensor::zeros(vec![256, config.m]);
                    for (imgs, gin) in &step.encoder_grads {
                        tg.add_in_place(&p2be_backward_batch(imgs, gin, tbl)?)?;
                    }
                    if config.lambda > 0.0 {
                        let (sv, mut sg) = smoothness_loss(tbl);
                        smooth_sum += sv;
                        sg.scale_in_place(config.lambda);
                        tg.add_in_place(&sg)?;
                    } else {
                        smooth_sum += smoothness_value(tbl);
                    }
                    adamw
                        .as_mut()
                        .expect("table updates imply an optimizer")
                        .step(tbl.values_mut(), tg.data())?;
                    codebook = Some(BinaryCodebook::from_table(tbl)?);
                } else {
                    smooth_sum += smoothness_value(tbl);
                }
            }
            global_step += 1;
        }

        let steps = steps_per_epoch as f64;
        let clean_test_err =
            images_error(&network, codebook.as_ref(), dataset.images(), dataset.labels())?;
        metrics.push(EpochMetrics {
            epoch: epoch + 1,
            lr: lr_epoch,
            l_ce: ce_sum / steps,
            l_consistency: cons_sum / steps,
            l_smooth: smooth_sum / steps,
            train_acc: correct as f64 / n as f64,
            clean_test_err,
        });
    }

    let checkpoint = Checkpoint {
        config: config.clone(),
        step: global_step as u64,
        network: network.params().clone(),
        table,
        velocity: sgd.velocity().clone(),
        adamw: adamw.map(|opt| opt.state()),
    };
    Ok(TrainOutput { checkpoint, metrics })
}

/// Rebuilds the classifier a checkpoint was trained with, sized for the
/// given image dimensions. The class count comes from the stored head.
pub fn rebuild_network(checkpoint: &Checkpoint, height: usize, width: usize) -> Result<Graph> {
    let head = checkpoint
        .network
        .get("head.bias")
        .ok_or_else(|| Error::Config("checkpoint lacks a `head.bias` parameter".into()))?;
    let classes = head.len();
    let in_channels = match checkpoint.config.encoder {
        EncoderKind::Rgb => 3,
        _ => 3 * checkpoint.config.m,
    };
    let mut network = build_network(in_channels, height, width, classes, 0)?;
    if checkpoint.network.len() != network.params().len() {
        return Err(Error::Config(format!(
            "checkpoint stores {} parameters, the reference network has {}",
            checkpoint.network.len(),
            network.params().len()
        )));
    }
    for (name, tensor) in &checkpoint.network {
        network.set_param(name, tensor.clone())?;
    }
    Ok(network)
}

/// Evaluation results; optional pieces mirror the requested extras.
/// `corrupted` holds model-side error cells awaiting baseline data.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub clean_error: f64,
    pub corrupted: Option<ErrorTable>,
    pub attacked_error: Option<f64>,
}

/// Measures clean error and, when requested, per-corruption and attacked
/// errors. Deterministic: corruption and attack seeds derive from the
/// checkpoint's config seed.
pub fn evaluate(
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    corruptions: Option<&[CorruptionSpec]>,
    attack: Option<&AttackConfig>,
) -> Result<EvalReport> {
    let network = rebuild_network(checkpoint, dataset.height(), dataset.width())?;
    let classes = network.output_shape()[0];
    if dataset.classes() != classes {
        return Err(Error::Config(format!(
            "checkpoint classifies {classes} classes, dataset has {}",
            dataset.classes()
        )));
    }
    let codebook = checkpoint_codebook(checkpoint)?;
    let clean_error = images_error(&network, codebook.as_ref(), dataset.images(), dataset.labels())?;
    let seed = checkpoint.config.seed;

    let corrupted = match corruptions {
        Some(specs) => {
            let mut table = ErrorTable::new();
            for (ci, spec) in specs.iter().enumerate() {
                let mut images = Vec::with_capacity(dataset.len());
                for i in 0..dataset.len() {
                    let s = rng::child_seed(seed, "eval-corrupt", (ci * dataset.len() + i) as u64);
                    images.push(apply_corruption(dataset.image(i), spec, s)?);
                }
                let err = images_error(&network, codebook.as_ref(), &images, dataset.labels())?;
                table.insert_model(spec.kind, spec.severity, err)?;
            }
            Some(table)
        }
        None => None,
    };

    let attacked_error = match attack {
        Some(cfg) => {
            cfg.validate()?;
            let levels = attack_levels(checkpoint.config.encoder, checkpoint.config.m, codebook.as_ref())?;
            let mut adv = Vec::with_capacity(dataset.len());
            for i in 0..dataset.len() {
                let s = rng::child_seed(seed, "eval-attack", i as u64);
                let (image, _) =
                    lspga_attack(&network, &levels, dataset.image(i), dataset.label(i), cfg, s)?;
                adv.push(image);
            }
            Some(images_error(&network, codebook.as_ref(), &adv, dataset.labels())?)
        }
        None => None,
    };

    Ok(EvalReport {
        clean_error,
        corrupted,
        attacked_error,
    })
}
