//! Training: one-stage or two-stage pre-training of the two-branch model,
//! checkpoint transfer into a segmentation U-Net, and supervised
//! fine-tuning with cross-entropy.
//!
//! Runs are deterministic for a given seed: all randomness (sampling,
//! augmentation, initialization, shuffling) flows from labeled child seeds,
//! and every numeric kernel is single-threaded.

use std::collections::BTreeMap;

use ndarray::{Array3, Array4, ArrayD};
use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_slice, lambda_for_blocks, FixAugmentCfg, VarAugmentRanges};
use crate::checkpoint::{Checkpoint, LossScalars, RngState};
use crate::error::{config_err, Error, Result};
use crate::losses::{multi_level_loss_grad, LossBreakdown, LossWeights};
use crate::metrics::{evaluate, RunMeta};
use crate::model::{ConnectionMode, MaclModel, ModelConfig, SegModel};
use crate::nn::{grads_all_finite, restore, snapshot, zero_grads, Param, ParamModule};
use crate::real::{c, Real};
use crate::synthdata::{sample_batch, PairLabelMatrix, SliceSample, Volume, VolumeId};
use crate::util::{csv_row, derive_seed, rng_from};

/// Cosine schedule from lr0 down to lr_min over total_steps.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    if total_steps == 0 {
        return config_err("cosine schedule needs total_steps > 0");
    }
    if step > total_steps {
        return config_err(format!("step {step} beyond total {total_steps}"));
    }
    let t = step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageMode {
    One,
    Two,
}

// ---------------------------------------------------------------------------
// Optimizers. State vectors align with the module's parameter traversal
// order; a name filter freezes parameters without disturbing that order.
// ---------------------------------------------------------------------------

pub struct Sgd {
    momentum: f32,
    velocity: Vec<ArrayD<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum: momentum as f32,
            velocity: Vec::new(),
        }
    }

    pub fn step<M: ParamModule<f32>>(
        &mut self,
        model: &mut M,
        lr: f64,
        filter: &dyn Fn(&str) -> bool,
    ) {
        let lr = lr as f32;
        let m = self.momentum;
        if self.velocity.is_empty() {
            model.visit_params("", &mut |_, p: &mut Param<f32>| {
                self.velocity.push(ArrayD::zeros(p.data.raw_dim()));
            });
        }
        let mut idx = 0usize;
        let vel = &mut self.velocity;
        model.visit_params("", &mut |name, p| {
            let v = &mut vel[idx];
            idx += 1;
            if !filter(name) {
                return;
            }
            v.zip_mut_with(&p.grad, |vv, &g| *vv = m * *vv + g);
            p.data.zip_mut_with(v, |d, &vv| *d -= lr * vv);
        });
        assert_eq!(idx, vel.len(), "parameter count changed between steps");
    }
}

pub struct Adam {
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
}

impl Adam {
    pub fn new() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step<M: ParamModule<f32>>(
        &mut self,
        model: &mut M,
        lr: f64,
        filter: &dyn Fn(&str) -> bool,
    ) {
        let lr = lr as f32;
        if self.m.is_empty() {
            model.visit_params("", &mut |_, p: &mut Param<f32>| {
                self.m.push(ArrayD::zeros(p.data.raw_dim()));
                self.v.push(ArrayD::zeros(p.data.raw_dim()));
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let mut idx = 0usize;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_params("", &mut |name, p| {
            let m = &mut ms[idx];
            let v = &mut vs[idx];
            idx += 1;
            if !filter(name) {
                return;
            }
            m.zip_mut_with(&p.grad, |mm, &g| *mm = b1 * *mm + (1.0 - b1) * g);
            v.zip_mut_with(&p.grad, |vv, &g| *vv = b2 * *vv + (1.0 - b2) * g * g);
            ndarray::Zip::from(&mut p.data)
                .and(&*m)
                .and(&*v)
                .for_each(|d, &mm, &vv| {
                    let mhat = mm / bc1;
                    let vhat = vv / bc2;
                    *d -= lr * mhat / (vhat.sqrt() + eps);
                });
        });
        assert_eq!(idx, ms.len(), "parameter count changed between steps");
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------------------
// Pre-training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Source slices per step; the effective batch holds 2N augmented samples.
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub weights: LossWeights,
    /// Positive-pair position threshold.
    pub theta_pos: f64,
    pub connection: ConnectionMode,
    pub stages: StageMode,
    /// Downsample scale; defaults to 2^-N and must equal it when given.
    pub lambda: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 8,
            lr0: 0.1,
            lr_min: 0.0,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            weights: LossWeights::default(),
            theta_pos: 0.05,
            connection: ConnectionMode::Shared,
            stages: StageMode::One,
            lambda: None,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return config_err("pretrain epochs and batch size must be positive");
        }
        if !(self.lr0 > self.lr_min && self.lr_min >= 0.0) {
            return config_err("pretrain needs lr0 > lr_min >= 0");
        }
        if self.theta_pos < 0.0 {
            return config_err("theta_pos must be >= 0");
        }
        self.weights.validate()?;
        let expected = lambda_for_blocks(model.decoder_blocks);
        if let Some(l) = self.lambda {
            if (l - expected).abs() > 1e-12 {
                return config_err(format!(
                    "lambda {l} must equal 2^-N = {expected} for N = {}",
                    model.decoder_blocks
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepLog {
    pub step: usize,
    pub lg: f32,
    pub ld: f32,
    pub ler: f32,
    pub total: f32,
    pub lr: f64,
}

pub fn loss_csv(log: &[StepLog]) -> String {
    let mut out = String::from("step,lg,ld,ler,total,lr\n");
    for l in log {
        out.push_str(&csv_row(&[
            l.step.to_string(),
            l.lg.to_string(),
            l.ld.to_string(),
            l.ler.to_string(),
            l.total.to_string(),
            l.lr.to_string(),
        ]));
    }
    out
}

pub struct PretrainResult {
    pub model: MaclModel<f32>,
    pub log: Vec<StepLog>,
    pub final_loss: LossBreakdown<f32>,
    pub total_steps: usize,
}

impl PretrainResult {
    pub fn final_loss_scalars(&self) -> LossScalars {
        LossScalars {
            total: self.final_loss.total as f64,
            lg: self.final_loss.lg as f64,
            ld: self.final_loss.ld as f64,
            ler: self.final_loss.ler as f64,
        }
    }
}

/// Assemble the 2N-sample augmented batch: rows 2i and 2i+1 carry the two
/// augmentations of source slice i, for both augmentation families.
fn build_augmented_batch(
    dataset: &[SliceSample],
    indices: &[usize],
    fix: &FixAugmentCfg,
    var: &VarAugmentRanges,
    rng: &mut impl rand::Rng,
) -> Result<(Array4<f32>, Array4<f32>)> {
    let n = indices.len();
    let (h, w) = dataset[indices[0]].image.dim();
    let mut xf = Array4::<f32>::zeros((2 * n, 1, h, w));
    let mut xv = Array4::<f32>::zeros((2 * n, 1, h, w));
    for (i, &idx) in indices.iter().enumerate() {
        let quad = augment_slice(&dataset[idx], idx, fix, var, rng)?;
        for (row, img) in [(2 * i, &quad.i1), (2 * i + 1, &quad.i2)] {
            xf.index_axis_mut(ndarray::Axis(0), row)
                .index_axis_mut(ndarray::Axis(0), 0)
                .assign(img);
        }
        for (row, img) in [(2 * i, &quad.v1), (2 * i + 1, &quad.v2)] {
            xv.index_axis_mut(ndarray::Axis(0), row)
                .index_axis_mut(ndarray::Axis(0), 0)
                .assign(img);
        }
    }
    Ok((xf, xv))
}

fn stage_filter(stage: usize, stages: StageMode) -> Box<dyn Fn(&str) -> bool> {
    match (stages, stage) {
        (StageMode::One, _) => Box::new(|_| true),
        // Stage one trains the encoder path (encoders + image heads).
        (StageMode::Two, 0) => Box::new(|name: &str| {
            name.starts_with("encoder") || name.starts_with("proj_img")
        }),
        // Stage two freezes the encoder and trains the decoder path.
        (StageMode::Two, _) => Box::new(|name: &str| {
            name.starts_with("decoder") || name.starts_with("proj_pix")
        }),
    }
}

fn stage_weights(stage: usize, stages: StageMode, w: &LossWeights) -> LossWeights {
    match (stages, stage) {
        (StageMode::One, _) => *w,
        (StageMode::Two, 0) => LossWeights {
            lambda2: 0.0,
            lambda3: 0.0,
            ..*w
        },
        (StageMode::Two, _) => LossWeights {
            lambda1: 0.0,
            lambda3: 0.0,
            ..*w
        },
    }
}

/// Pre-train the two-branch model on unlabeled slices.
pub fn pretrain(
    model_cfg: &ModelConfig,
    fix: &FixAugmentCfg,
    var: &VarAugmentRanges,
    cfg: &PretrainConfig,
    dataset: &[SliceSample],
    seed: u64,
) -> Result<PretrainResult> {
    model_cfg.validate()?;
    cfg.validate(model_cfg)?;
    if dataset.is_empty() {
        return config_err("pretrain dataset is empty");
    }
    if cfg.batch_size > dataset.len() {
        return Err(Error::Sampling(format!(
            "batch size {} exceeds dataset of {} slices",
            cfg.batch_size,
            dataset.len()
        )));
    }
    let lambda = cfg.lambda.unwrap_or_else(|| model_cfg.lambda());
    let mut model = MaclModel::<f32>::init(model_cfg, cfg.connection, derive_seed(seed, "pretrain/model"))?;
    let mut sample_rng = rng_from(derive_seed(seed, "pretrain/sample"));
    let mut aug_rng = rng_from(derive_seed(seed, "pretrain/aug"));

    let steps_per_epoch = (dataset.len() / cfg.batch_size).max(1);
    let stage_epochs: Vec<usize> = match cfg.stages {
        StageMode::One => vec![cfg.epochs],
        StageMode::Two => {
            let first = cfg.epochs.div_ceil(2);
            vec![first, cfg.epochs - first]
        }
    };

    let mut log = Vec::new();
    let mut final_loss = None;
    let mut global_step = 0usize;
    for (stage, &epochs) in stage_epochs.iter().enumerate() {
        if epochs == 0 {
            continue;
        }
        let weights = stage_weights(stage, cfg.stages, &cfg.weights);
        let filter = stage_filter(stage, cfg.stages);
        let stage_steps = epochs * steps_per_epoch;
        // Each stage runs its own cosine schedule.
        let mut sgd = Sgd::new(cfg.momentum);
        let mut adam = Adam::new();
        for local_step in 0..stage_steps {
            let batch = sample_batch(dataset, cfg.batch_size, &mut sample_rng)?;
            let (xf, xv) = build_augmented_batch(dataset, &batch.indices, fix, var, &mut aug_rng)?;
            let labels = PairLabelMatrix::build(&batch.expanded_meta(dataset), cfg.theta_pos)?;
            let (outputs, cache) = model.forward(&xf, &xv, lambda)?;
            let (breakdown, grads) = multi_level_loss_grad(&outputs, &labels, &weights)
                .map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!(
                        "{msg}; step {global_step}, batch indices {:?}, seed {seed}",
                        batch.indices
                    )),
                    other => other,
                })?;
            if !breakdown.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at step {global_step}; batch indices {:?}, seed {seed}",
                    batch.indices
                )));
            }
            zero_grads(&mut model);
            model.backward(&cache, &grads);
            if !grads_all_finite(&model) {
                return Err(Error::Numeric(format!(
                    "non-finite gradients at step {global_step}; batch indices {:?}, seed {seed}",
                    batch.indices
                )));
            }
            let lr = cosine_lr(local_step, stage_steps, cfg.lr0, cfg.lr_min)?;
            match cfg.optimizer {
                OptimizerKind::Sgd => sgd.step(&mut model, lr, filter.as_ref()),
                OptimizerKind::Adam => adam.step(&mut model, lr, filter.as_ref()),
            }
            model.ema_step();
            log.push(StepLog {
                step: global_step,
                lg: breakdown.lg,
                ld: breakdown.ld,
                ler: breakdown.ler,
                total: breakdown.total,
                lr,
            });
            final_loss = Some(breakdown);
            global_step += 1;
        }
    }
    Ok(PretrainResult {
        model,
        final_loss: final_loss.expect("at least one step ran"),
        log,
        total_steps: global_step,
    })
}

// ---------------------------------------------------------------------------
// Transfer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Copied,
    Fresh,
}

pub struct TransferOutcome {
    pub model: SegModel<f32>,
    /// Per-tensor record of copied-vs-fresh; partitions the model exactly.
    pub provenance: BTreeMap<String, Provenance>,
}

fn decoder_block_index(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("decoder.block")?;
    let end = rest.find('.')?;
    rest[..end].parse().ok()
}

/// Fields of the pretraining model architecture that the fine-tuning model
/// must agree on for parameters to be portable.
fn encoder_compat_errors(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    let mut diffs = Vec::new();
    if a.levels != b.levels {
        diffs.push(format!("levels {} vs {}", a.levels, b.levels));
    }
    if a.base_channels != b.base_channels {
        diffs.push(format!("base_channels {} vs {}", a.base_channels, b.base_channels));
    }
    if a.in_channels != b.in_channels {
        diffs.push(format!("in_channels {} vs {}", a.in_channels, b.in_channels));
    }
    if a.channel_cap != b.channel_cap {
        diffs.push(format!("channel_cap {} vs {}", a.channel_cap, b.channel_cap));
    }
    if a.uses_skips != b.uses_skips {
        diffs.push(format!("uses_skips {} vs {}", a.uses_skips, b.uses_skips));
    }
    if a.activation != b.activation {
        diffs.push("activation differs".to_string());
    }
    if a.norm != b.norm {
        diffs.push("norm differs".to_string());
    }
    diffs
}

/// Build a segmentation model initialized from a pre-training checkpoint:
/// the encoder and the first N decoder blocks are copied, the remaining
/// decoder blocks and the head are freshly initialized from `seed`.
pub fn transfer(
    ckpt: &Checkpoint,
    seg_cfg: &ModelConfig,
    classes: usize,
    seed: u64,
) -> Result<TransferOutcome> {
    let ckpt_model: ModelConfig = serde_json::from_value(
        ckpt.config
            .get("model")
            .cloned()
            .ok_or_else(|| Error::Transfer("checkpoint lacks a model config snapshot".into()))?,
    )?;
    let diffs = encoder_compat_errors(&ckpt_model, seg_cfg);
    if !diffs.is_empty() {
        return Err(Error::Transfer(format!(
            "architecture mismatch: {}",
            diffs.join("; ")
        )));
    }
    let n_copy = ckpt_model.decoder_blocks;
    let mut model = SegModel::<f32>::init(seg_cfg, classes, seed)?;
    let map = ckpt.tensor_map();
    let mut provenance = BTreeMap::new();
    let mut problems = Vec::new();
    model.visit_params("", &mut |name, p| {
        let copy = name.starts_with("encoder.")
            || decoder_block_index(name).is_some_and(|j| j < n_copy);
        if !copy {
            provenance.insert(name.to_string(), Provenance::Fresh);
            return;
        }
        match map.get(name) {
            None => problems.push(format!("missing tensor {name}")),
            Some(t) => {
                if t.shape != p.data.shape() {
                    problems.push(format!(
                        "{name}: checkpoint {:?} vs model {:?}",
                        t.shape,
                        p.data.shape()
                    ));
                } else {
                    p.data = ArrayD::from_shape_vec(ndarray::IxDyn(&t.shape), t.data.clone())
                        .expect("validated shape");
                    provenance.insert(name.to_string(), Provenance::Copied);
                }
            }
        }
    });
    if !problems.is_empty() {
        return Err(Error::Transfer(problems.join("; ")));
    }
    Ok(TransferOutcome { model, provenance })
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_min: f64,
    /// Fraction of training volumes whose labels are used, in (0, 1].
    pub label_fraction: f64,
    /// Holdout evaluation cadence in epochs.
    pub eval_every: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 5,
            lr0: 5e-4,
            lr_min: 5e-6,
            label_fraction: 1.0,
            eval_every: 1,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return config_err("finetune epochs, batch size, eval cadence must be positive");
        }
        if !(self.lr0 > self.lr_min && self.lr_min >= 0.0) {
            return config_err("finetune needs lr0 > lr_min >= 0");
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return config_err("label_fraction must be in (0, 1]");
        }
        Ok(())
    }
}

/// Mean per-pixel cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy_loss_grad<F: Real>(
    logits: &Array4<F>,
    targets: &Array3<u8>,
) -> Result<(F, Array4<F>)> {
    let (b, k, h, w) = logits.dim();
    if targets.dim() != (b, h, w) {
        return Err(Error::Shape(format!(
            "targets {:?} do not match logits {:?}",
            targets.dim(),
            logits.dim()
        )));
    }
    let count = c::<F>((b * h * w) as f64);
    let mut loss = F::zero();
    let mut grad = Array4::<F>::zeros((b, k, h, w));
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let t = targets[(bi, y, x)] as usize;
                if t >= k {
                    return Err(Error::Contract(format!(
                        "target class {t} outside logit range {k}"
                    )));
                }
                let mut m = F::neg_infinity();
                for ci in 0..k {
                    m = m.max(logits[(bi, ci, y, x)]);
                }
                let mut denom = F::zero();
                for ci in 0..k {
                    denom = denom + (logits[(bi, ci, y, x)] - m).exp();
                }
                let lse = m + denom.ln();
                loss = loss + (lse - logits[(bi, t, y, x)]);
                for ci in 0..k {
                    let p = (logits[(bi, ci, y, x)] - lse).exp();
                    let y_i = if ci == t { F::one() } else { F::zero() };
                    grad[(bi, ci, y, x)] = (p - y_i) / count;
                }
            }
        }
    }
    loss = loss / count;
    if !loss.is_finite() {
        return Err(Error::Numeric("cross entropy diverged".into()));
    }
    Ok((loss, grad))
}

/// Deterministic volume-granularity label selection: shuffle the volume ids
/// with a seeded RNG, keep the first ceil(fraction * n).
pub fn select_labeled_volumes(ids: &[VolumeId], fraction: f64, seed: u64) -> Vec<VolumeId> {
    let mut order: Vec<VolumeId> = ids.to_vec();
    let mut rng = rng_from(derive_seed(seed, "labels/select"));
    // Fisher-Yates.
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let keep = ((fraction * ids.len() as f64).ceil() as usize).clamp(1, ids.len());
    order.truncate(keep);
    order
}

/// Split volumes into train/holdout pools at volume granularity.
pub fn split_volumes(volumes: &[Volume], train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n = volumes.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_from(derive_seed(seed, "split/volumes"));
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let train = order[..n_train].to_vec();
    let holdout = order[n_train..].to_vec();
    (train, holdout)
}

#[derive(Debug, Clone, Copy)]
pub struct FtStepLog {
    pub step: usize,
    pub ce: f32,
    pub lr: f64,
}

pub fn finetune_csv(log: &[FtStepLog]) -> String {
    let mut out = String::from("step,ce,lr\n");
    for l in log {
        out.push_str(&csv_row(&[
            l.step.to_string(),
            l.ce.to_string(),
            l.lr.to_string(),
        ]));
    }
    out
}

pub struct FinetuneResult {
    /// Best-on-holdout parameters.
    pub model: SegModel<f32>,
    pub best_dsc: f64,
    pub best_epoch: usize,
    pub log: Vec<FtStepLog>,
    pub warnings: Vec<String>,
}

fn stack_batch(slices: &[&SliceSample]) -> (Array4<f32>, Array3<u8>) {
    let (h, w) = slices[0].image.dim();
    let b = slices.len();
    let mut x = Array4::<f32>::zeros((b, 1, h, w));
    let mut t = Array3::<u8>::zeros((b, h, w));
    for (i, s) in slices.iter().enumerate() {
        x.index_axis_mut(ndarray::Axis(0), i)
            .index_axis_mut(ndarray::Axis(0), 0)
            .assign(&s.image);
        t.index_axis_mut(ndarray::Axis(0), i).assign(&s.mask);
    }
    (x, t)
}

/// Supervised fine-tuning with Adam and cosine decay; returns the
/// best-on-holdout parameters (mean foreground DSC).
pub fn finetune(
    mut model: SegModel<f32>,
    labeled: &[SliceSample],
    holdout: &[SliceSample],
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneResult> {
    cfg.validate()?;
    if labeled.is_empty() {
        return config_err("finetune needs labeled slices");
    }
    if holdout.is_empty() {
        return config_err("finetune needs a holdout split for model selection");
    }
    let classes = model.classes;
    let mut warnings = Vec::new();
    {
        let mut seen = std::collections::BTreeSet::new();
        for s in labeled {
            for &v in s.mask.iter() {
                seen.insert(v);
            }
        }
        if seen.len() <= 1 {
            warnings.push(format!(
                "labeled data is single-class (classes seen: {seen:?}); training proceeds"
            ));
        }
    }

    let mut shuffle_rng = rng_from(derive_seed(seed, "finetune/shuffle"));
    let steps_per_epoch = labeled.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut adam = Adam::new();
    let mut log = Vec::new();
    let mut best_dsc = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params = snapshot(&model);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SliceSample> = chunk.iter().map(|&i| &labeled[i]).collect();
            let (x, t) = stack_batch(&batch);
            let (logits, cache) = model.forward(&x)?;
            let (ce, d_logits) = cross_entropy_loss_grad(&logits, &t)?;
            if !ce.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite cross entropy at step {step}, seed {seed}"
                )));
            }
            zero_grads(&mut model);
            model.backward(&cache, &d_logits);
            if !grads_all_finite(&model) {
                return Err(Error::Numeric(format!(
                    "non-finite gradients at finetune step {step}, seed {seed}"
                )));
            }
            let lr = cosine_lr(step, total_steps, cfg.lr0, cfg.lr_min)?;
            adam.step(&mut model, lr, &|_| true);
            log.push(FtStepLog { step, ce, lr });
            step += 1;
        }
        if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs {
            let report = evaluate(&model, holdout, classes, RunMeta::default())?;
            if report.mean.dsc > best_dsc {
                best_dsc = report.mean.dsc;
                best_epoch = epoch;
                best_params = snapshot(&model);
            }
        }
    }
    restore(&mut model, &best_params);
    Ok(FinetuneResult {
        model,
        best_dsc,
        best_epoch,
        log,
        warnings,
    })
}

/// RNG bookkeeping stored in checkpoints.
pub fn rng_state(seed: u64, steps: usize) -> RngState {
    RngState {
        seed,
        steps: steps as u64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use ndarray::IxDyn;

    #[test]
    fn cosine_schedule_hand_points() {
        assert_eq!(cosine_lr(0, 100, 0.1, 0.0).unwrap(), 0.1);
        let end = cosine_lr(100, 100, 0.1, 0.0).unwrap();
        assert!(end.abs() < 1e-17);
        let mid = cosine_lr(50, 100, 0.1, 0.02).unwrap();
        assert!((mid - 0.06).abs() < 1e-12);
        assert!(cosine_lr(0, 0, 0.1, 0.0).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = rng_from(9);
        let logits = Array4::<f64>::from_shape_fn((2, 3, 4, 4), |_| {
            rng.random_range(-1.0f64..1.0)
        });
        let targets = Array3::<u8>::from_shape_fn((2, 4, 4), |_| rng.random_range(0..3u8));
        let (_, grad) = cross_entropy_loss_grad(&logits, &targets).unwrap();
        let fd = oracle::finite_diff_gradient(
            |x| {
                let l = x.clone().into_dimensionality().unwrap();
                cross_entropy_loss_grad(&l, &targets).unwrap().0
            },
            &logits.clone().into_dyn(),
            1e-6,
        )
        .unwrap();
        assert!(oracle::max_rel_err(&grad.into_dyn(), &fd) < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_bad_targets() {
        let logits = Array4::<f32>::zeros((1, 2, 2, 2));
        let targets = Array3::<u8>::from_elem((1, 2, 2), 5);
        assert!(cross_entropy_loss_grad(&logits, &targets).is_err());
    }

    /// One-parameter module for optimizer smoke tests.
    struct Quad {
        p: Param<f32>,
    }

    impl ParamModule<f32> for Quad {
        fn visit_params(&mut self, _: &str, f: &mut dyn FnMut(&str, &mut Param<f32>)) {
            f("p", &mut self.p);
        }
        fn visit_params_ref(&self, _: &str, f: &mut dyn FnMut(&str, &Param<f32>)) {
            f("p", &self.p);
        }
    }

    #[test]
    fn optimizers_descend_a_quadratic() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut q = Quad {
                p: Param::new(ArrayD::from_elem(IxDyn(&[3]), 2.0f32)),
            };
            let mut sgd = Sgd::new(0.9);
            let mut adam = Adam::new();
            for _ in 0..200 {
                let data = q.p.data.clone();
                q.p.grad.assign(&data.mapv(|v| 2.0 * v));
                match kind {
                    OptimizerKind::Sgd => sgd.step(&mut q, 0.05, &|_| true),
                    OptimizerKind::Adam => adam.step(&mut q, 0.05, &|_| true),
                }
            }
            assert!(
                q.p.data.iter().all(|v| v.abs() < 0.05),
                "{kind:?}: {:?}",
                q.p.data
            );
        }
    }

    #[test]
    fn optimizer_filter_freezes_parameters() {
        struct TwoParams {
            a: Param<f32>,
            b: Param<f32>,
        }
        impl ParamModule<f32> for TwoParams {
            fn visit_params(&mut self, _: &str, f: &mut dyn FnMut(&str, &mut Param<f32>)) {
                f("a", &mut self.a);
                f("b", &mut self.b);
            }
            fn visit_params_ref(&self, _: &str, f: &mut dyn FnMut(&str, &Param<f32>)) {
                f("a", &self.a);
                f("b", &self.b);
            }
        }
        let mut m = TwoParams {
            a: Param::new(ArrayD::from_elem(IxDyn(&[2]), 1.0f32)),
            b: Param::new(ArrayD::from_elem(IxDyn(&[2]), 1.0f32)),
        };
        m.a.grad.fill(1.0);
        m.b.grad.fill(1.0);
        let mut sgd = Sgd::new(0.0);
        sgd.step(&mut m, 0.5, &|name| name == "a");
        assert!(m.a.data.iter().all(|&v| (v - 0.5).abs() < 1e-7));
        assert!(m.b.data.iter().all(|&v| v == 1.0), "b is frozen");
    }

    #[test]
    fn label_selection_is_deterministic_and_volume_granular() {
        let ids: Vec<VolumeId> = (0..10).map(VolumeId).collect();
        let a = select_labeled_volumes(&ids, 0.3, 7);
        let b = select_labeled_volumes(&ids, 0.3, 7);
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        let c = select_labeled_volumes(&ids, 0.05, 7);
        assert_eq!(c.len(), 1, "at least one volume is always kept");
        let d = select_labeled_volumes(&ids, 1.0, 7);
        assert_eq!(d.len(), 10);
    }

    use crate::util::rng_from;
    use rand::RngExt;
}
