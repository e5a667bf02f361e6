//! Training loop: paired self-distillation with patch swap, SGD with
//! momentum and weight decay, stepped learning-rate decay, per-epoch
//! metrics, and binary checkpoints that let an interrupted run resume
//! bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{baseline_augment, flip_labels, intra_patch_swap, AugKind, AugParams};
use crate::data::{mix_seed, Dataset};
use crate::distill::{
    cross_entropy, cross_entropy_soft, kd_logit_gradient, total_loss, DistillConfig,
};
use crate::error::{Error, Result};
use crate::eval::{aurc, brier, confidence_gap_from_probs, ece, top_k_accuracy, PredictionSet};
use crate::model::{build_model_seeded, Model, ModelSpec, Param};
use crate::pairing::{build_class_index, sample_pair_batches, sample_plain_batches};
use crate::tape::Tape;
use crate::tensor::Tensor;

// Independent deterministic RNG streams derived from the run seed.
const TAG_INIT: u64 = 0x11;
const TAG_NOISE: u64 = 0x22;
const TAG_EPOCH: u64 = 0x33;

/// Swap-probability schedule: either a fixed value or the progressive ramp
/// 0.1 / 0.2 / 0.3 / 0.5 with breakpoints at 30, 80, and 120 out of 240
/// epochs, scaled proportionally to the actual budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrSchedule {
    Constant(f64),
    Progressive,
}

pub fn p_r_at(schedule: PrSchedule, epoch: usize, total_epochs: usize) -> Result<f64> {
    if epoch == 0 || epoch > total_epochs {
        return Err(Error::Contract(format!(
            "epoch {epoch} outside [1, {total_epochs}]"
        )));
    }
    match schedule {
        PrSchedule::Constant(v) => {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("p_r must be in [0,1], got {v}")));
            }
            Ok(v)
        }
        PrSchedule::Progressive => {
            let bp = |b: f64| (b * total_epochs as f64 / 240.0).round() as usize;
            Ok(if epoch <= bp(30.0) {
                0.1
            } else if epoch <= bp(80.0) {
                0.2
            } else if epoch <= bp(120.0) {
                0.3
            } else {
                0.5
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    SelfDistill,
    HardLabel,
    Mixup,
    Cutmix,
    Cutout,
}

impl TrainMode {
    fn baseline_kind(self) -> Option<AugKind> {
        match self {
            TrainMode::Mixup => Some(AugKind::Mixup),
            TrainMode::Cutmix => Some(AugKind::Cutmix),
            TrainMode::Cutout => Some(AugKind::Cutout),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    /// Linear learning-rate ramp over the first `warmup_epochs` epochs
    /// (epoch k of w runs at lr * k / (w + 1)); guards the first steps
    /// against driving the network into a dead-ReLU state.
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub distill: DistillConfig,
    /// Patch side length for the swap grid.
    pub patch: usize,
    pub p_r: PrSchedule,
    pub seed: u64,
    pub drop_last: bool,
    /// Fraction of training labels flipped to a uniformly random other class
    /// before training starts.
    pub label_noise: f64,
    /// Test-set forward-pass chunk size.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::SelfDistill,
            epochs: 30,
            batch_size: 64,
            lr: 0.05,
            lr_decay_epochs: vec![18, 24],
            lr_decay_factor: 0.1,
            warmup_epochs: 0,
            momentum: 0.9,
            weight_decay: 5e-4,
            distill: DistillConfig::default(),
            patch: 4,
            p_r: PrSchedule::Constant(0.5),
            seed: 0,
            drop_last: false,
            label_noise: 0.0,
            eval_batch: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.distill.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) && self.momentum != 0.0 {
            return Err(Error::Config(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay_factor must be in (0,1], got {}",
                self.lr_decay_factor
            )));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "lr_decay_epochs must be strictly increasing".into(),
            ));
        }
        if self.patch == 0 {
            return Err(Error::Config("patch must be >= 1".into()));
        }
        if let PrSchedule::Constant(v) = self.p_r {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("p_r must be in [0,1], got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::Config(format!(
                "label_noise must be in [0,1], got {}",
                self.label_noise
            )));
        }
        if self.eval_batch == 0 {
            return Err(Error::Config("eval_batch must be >= 1".into()));
        }
        Ok(())
    }

    /// Learning rate for a 1-based epoch: the base rate decayed once for
    /// every decay epoch already passed.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&d| epoch > d).count();
        let base = self.lr * self.lr_decay_factor.powi(decays as i32);
        if epoch <= self.warmup_epochs {
            base * epoch as f64 / (self.warmup_epochs + 1) as f64
        } else {
            base
        }
    }
}

/// One SGD update with classic momentum and decoupled-from-nothing L2
/// weight decay folded into the gradient:
/// v <- momentum * v + g + weight_decay * p; p <- p - lr * v.
pub fn sgd_step(
    params: &mut [Param],
    velocity: &mut [Tensor],
    grads: &[Tensor],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != velocity.len() || params.len() != grads.len() {
        return Err(Error::Dim(format!(
            "{} params, {} velocities, {} grads",
            params.len(),
            velocity.len(),
            grads.len()
        )));
    }
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        if !g.all_finite() {
            return Err(Error::Eval(format!(
                "non-finite gradient for parameter '{}'",
                p.name
            )));
        }
        let update = v
            .scale(momentum)
            .add(g)?
            .add(&p.value.scale(weight_decay))?;
        p.value = p.value.sub(&update.scale(lr))?;
        *v = update;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub p_r: f64,
    pub loss_ce: f64,
    pub loss_kd: f64,
    pub train_top1: f64,
    pub test_top1: f64,
    pub test_top5: f64,
    pub ece: f64,
    pub brier: f64,
    pub aurc: f64,
    pub kd_grad_l1: f64,
    pub conf_gap: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
}

pub const REPORT_HEADER: &str =
    "epoch,lr,p_r,loss_ce,loss_kd,train_top1,test_top1,test_top5,ece,brier,aurc,kd_grad_l1,conf_gap";

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.records {
            writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.epoch,
                r.lr,
                r.p_r,
                r.loss_ce,
                r.loss_kd,
                r.train_top1,
                r.test_top1,
                r.test_top5,
                r.ece,
                r.brier,
                r.aurc,
                r.kd_grad_l1,
                r.conf_gap
            )
            .expect("writing to String cannot fail");
        }
        out
    }
}

/// Batched T=1 predictions over a whole tensor of images.
pub fn predict_dataset(
    model: &Model,
    images: &Tensor,
    labels: &[usize],
    chunk: usize,
) -> Result<PredictionSet> {
    let n = images.shape()[0];
    if n != labels.len() {
        return Err(Error::Dim(format!("{} images but {} labels", n, labels.len())));
    }
    let per: usize = images.shape()[1..].iter().product();
    let c = model.spec.num_classes;
    let mut probs = Vec::with_capacity(n * c);
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let mut shape = vec![end - start];
        shape.extend_from_slice(&images.shape()[1..]);
        let x = Tensor::new(shape, images.data()[start * per..end * per].to_vec())?;
        probs.extend_from_slice(model.predict_probs(&x)?.data());
        start = end;
    }
    PredictionSet::new(Tensor::new(vec![n, c], probs)?, labels.to_vec())
}

struct EpochStats {
    loss_ce: f64,
    loss_kd: f64,
    train_top1: f64,
    kd_grad_l1: f64,
    conf_gap: f64,
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

fn top1_of_logits(logits: &Tensor, y: &[usize]) -> f64 {
    let c = logits.shape()[1];
    let hits = y
        .iter()
        .enumerate()
        .filter(|&(i, &yi)| argmax_row(&logits.data()[i * c..(i + 1) * c]) == yi)
        .count();
    hits as f64 / y.len() as f64
}

fn param_grads(
    tape: &Tape,
    loss: &crate::tape::Var,
    pvars: &[crate::tape::Var],
) -> Result<Vec<Tensor>> {
    let grads = tape.backward(loss)?;
    Ok(pvars
        .iter()
        .map(|v| {
            grads
                .wrt(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(v.value.shape()))
        })
        .collect())
}

fn swap_pair_batch<R: Rng>(
    x_a: &Tensor,
    x_b: &Tensor,
    m: usize,
    p_r: f64,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    let s = x_a.shape();
    let per: usize = s[1..].iter().product();
    let mut out_a = Vec::with_capacity(x_a.len());
    let mut out_b = Vec::with_capacity(x_b.len());
    for i in 0..s[0] {
        let a = Tensor::new(s[1..].to_vec(), x_a.data()[i * per..(i + 1) * per].to_vec())?;
        let b = Tensor::new(s[1..].to_vec(), x_b.data()[i * per..(i + 1) * per].to_vec())?;
        let (sa, sb) = intra_patch_swap(&a, &b, m, p_r, rng)?;
        out_a.extend_from_slice(sa.data());
        out_b.extend_from_slice(sb.data());
    }
    Ok((Tensor::new(s.to_vec(), out_a)?, Tensor::new(s.to_vec(), out_b)?))
}

fn train_epoch_paired(
    cfg: &TrainConfig,
    model: &mut Model,
    velocity: &mut [Tensor],
    images: &Tensor,
    labels: &[usize],
    lr: f64,
    p_r: f64,
    rng: &mut ChaCha8Rng,
) -> Result<EpochStats> {
    let index = build_class_index(labels);
    let batches = sample_pair_batches(images, labels, &index, cfg.batch_size, cfg.drop_last, rng)?;
    let t = cfg.distill.t;
    let mut seen = 0usize;
    let mut acc = EpochStats {
        loss_ce: 0.0,
        loss_kd: 0.0,
        train_top1: 0.0,
        kd_grad_l1: 0.0,
        conf_gap: 0.0,
    };
    for batch in &batches {
        let n = batch.len();
        let (xa, xb) = swap_pair_batch(&batch.x_a, &batch.x_b, cfg.patch, p_r, rng)?;
        let tape = Tape::new();
        let pvars = model.bind(&tape);
        let fa = model.forward(&tape, &pvars, &xa)?;
        let fb = model.forward(&tape, &pvars, &xb)?;
        let lb = total_loss(&tape, &fa, &fb, &batch.y, &cfg.distill)?;
        if !lb.total_value().is_finite() {
            return Err(Error::Eval(format!(
                "non-finite loss (ce {}/{}, kd {}/{})",
                lb.l_c1, lb.l_c2, lb.l_kd1, lb.l_kd2
            )));
        }

        let c = model.spec.num_classes;
        let kd_g = kd_logit_gradient(&fa.value, &fb.value, t)?;
        let pa = fa.value.softmax_rows(t)?;
        let pb = fb.value.softmax_rows(t)?;
        acc.loss_ce += 0.5 * (lb.l_c1 + lb.l_c2) * n as f64;
        acc.loss_kd += 0.5 * (lb.l_kd1 + lb.l_kd2) * n as f64;
        acc.train_top1 += top1_of_logits(&fa.value, &batch.y) * n as f64;
        acc.kd_grad_l1 += kd_g.l1_norm() / c as f64;
        acc.conf_gap += confidence_gap_from_probs(&pa, &pb, &batch.y) * n as f64;
        seen += n;

        let grads = param_grads(&tape, &lb.total, &pvars)?;
        sgd_step(&mut model.params, velocity, &grads, lr, cfg.momentum, cfg.weight_decay)?;
    }
    let n = seen as f64;
    acc.loss_ce /= n;
    acc.loss_kd /= n;
    acc.train_top1 /= n;
    acc.kd_grad_l1 /= n;
    acc.conf_gap /= n;
    Ok(acc)
}

fn train_epoch_plain(
    cfg: &TrainConfig,
    model: &mut Model,
    velocity: &mut [Tensor],
    images: &Tensor,
    labels: &[usize],
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<EpochStats> {
    let batches = sample_plain_batches(images, labels, cfg.batch_size, cfg.drop_last, rng)?;
    let kind = cfg.mode.baseline_kind();
    let params_aug = AugParams::new(model.spec.num_classes);
    let mut seen = 0usize;
    let mut loss_sum = 0.0;
    let mut top1_sum = 0.0;
    for (x, y) in &batches {
        let n = y.len();
        let tape = Tape::new();
        let pvars = model.bind(&tape);
        let (loss, logits) = match kind {
            None => {
                let logits = model.forward(&tape, &pvars, x)?;
                (cross_entropy(&tape, &logits, y)?, logits)
            }
            Some(kind) => {
                // pair each sample with a random partner inside the batch
                let s = x.shape();
                let per: usize = s[1..].iter().product();
                let sample = |i: usize| {
                    Tensor::new(s[1..].to_vec(), x.data()[i * per..(i + 1) * per].to_vec())
                };
                let mut xd = Vec::with_capacity(x.len());
                let mut soft = Vec::with_capacity(n * model.spec.num_classes);
                for i in 0..n {
                    let j = rng.gen_range(0..n);
                    let (xm, ym) =
                        baseline_augment(kind, &sample(i)?, &sample(j)?, y[i], y[j], &params_aug, rng)?;
                    xd.extend_from_slice(xm.data());
                    soft.extend_from_slice(&ym);
                }
                let xm = Tensor::new(s.to_vec(), xd)?;
                let soft = Tensor::new(vec![n, model.spec.num_classes], soft)?;
                let logits = model.forward(&tape, &pvars, &xm)?;
                (cross_entropy_soft(&tape, &logits, &soft)?, logits)
            }
        };
        if !loss.value.item().is_finite() {
            return Err(Error::Eval(format!("non-finite loss {}", loss.value.item())));
        }
        loss_sum += loss.value.item() * n as f64;
        top1_sum += top1_of_logits(&logits.value, y) * n as f64;
        seen += n;
        let grads = param_grads(&tape, &loss, &pvars)?;
        sgd_step(&mut model.params, velocity, &grads, lr, cfg.momentum, cfg.weight_decay)?;
    }
    Ok(EpochStats {
        loss_ce: loss_sum / seen as f64,
        loss_kd: 0.0,
        train_top1: top1_sum / seen as f64,
        kd_grad_l1: 0.0,
        conf_gap: 0.0,
    })
}

pub struct TrainOutcome {
    pub model: Model,
    pub velocity: Vec<Tensor>,
    pub report: TrainReport,
}

/// Trains a freshly initialized model.
pub fn fit(
    cfg: &TrainConfig,
    spec: &ModelSpec,
    train: &Dataset,
    test: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    fit_from(cfg, spec, train, test, out_dir, None)
}

/// Trains from an optional checkpoint; with one, continues at the next
/// epoch and reproduces the uninterrupted run exactly.
pub fn fit_from(
    cfg: &TrainConfig,
    spec: &ModelSpec,
    train: &Dataset,
    test: &Dataset,
    out_dir: Option<&Path>,
    start: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    spec.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config("train and test sets must be non-empty".into()));
    }
    if train.num_classes() > spec.num_classes || test.num_classes() > spec.num_classes {
        return Err(Error::Config(format!(
            "labels exceed the {} model classes",
            spec.num_classes
        )));
    }

    let (mut model, mut velocity, start_epoch) = match start {
        None => {
            let model = build_model_seeded(spec, mix_seed(cfg.seed, TAG_INIT, 0))?;
            let velocity: Vec<Tensor> =
                model.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            (model, velocity, 1usize)
        }
        Some(ckpt) => {
            if ckpt.model.spec != *spec {
                return Err(Error::Config("checkpoint was built for a different model".into()));
            }
            if ckpt.seed != cfg.seed {
                return Err(Error::Config(format!(
                    "checkpoint seed {} differs from configured seed {}",
                    ckpt.seed, cfg.seed
                )));
            }
            (ckpt.model, ckpt.velocity, ckpt.epoch as usize + 1)
        }
    };

    let labels: Vec<usize> = if cfg.label_noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, TAG_NOISE, 0));
        flip_labels(&train.labels, cfg.label_noise, spec.num_classes, &mut rng)?
    } else {
        train.labels.clone()
    };

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }

    let mut report = TrainReport::default();
    let mut best_top1 = f64::NEG_INFINITY;
    for epoch in start_epoch..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let paired = cfg.mode == TrainMode::SelfDistill;
        let p_r = if paired {
            p_r_at(cfg.p_r, epoch, cfg.epochs)?
        } else {
            0.0
        };
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, TAG_EPOCH, epoch as u64));
        let stats_res = if paired {
            train_epoch_paired(
                cfg, &mut model, &mut velocity, &train.images, &labels, lr, p_r, &mut rng,
            )
        } else {
            train_epoch_plain(cfg, &mut model, &mut velocity, &train.images, &labels, lr, &mut rng)
        };
        let stats = match stats_res {
            Ok(s) => s,
            Err(e) => {
                // keep the last finished epoch on disk for post-mortems
                if let Some(dir) = out_dir {
                    fs::write(dir.join("report.csv"), report.to_csv())
                        .map_err(|err| Error::io(dir.display().to_string(), err))?;
                }
                return Err(e);
            }
        };

        let pred = predict_dataset(&model, &test.images, &test.labels, cfg.eval_batch)?;
        let k5 = 5.min(spec.num_classes);
        let rec = EpochRecord {
            epoch,
            lr,
            p_r,
            loss_ce: stats.loss_ce,
            loss_kd: stats.loss_kd,
            train_top1: stats.train_top1,
            test_top1: top_k_accuracy(&pred, 1)?,
            test_top5: top_k_accuracy(&pred, k5)?,
            ece: ece(&pred, 15)?,
            brier: brier(&pred),
            aurc: aurc(&pred),
            kd_grad_l1: stats.kd_grad_l1,
            conf_gap: stats.conf_gap,
        };
        report.records.push(rec);

        if let Some(dir) = out_dir {
            fs::write(dir.join("report.csv"), report.to_csv())
                .map_err(|e| Error::io(dir.display().to_string(), e))?;
            save_checkpoint(
                &model,
                &velocity,
                epoch as u64,
                cfg.seed,
                &dir.join("ckpt_final.psd"),
            )?;
            if rec.test_top1 > best_top1 {
                best_top1 = rec.test_top1;
                save_checkpoint(
                    &model,
                    &velocity,
                    epoch as u64,
                    cfg.seed,
                    &dir.join("ckpt_best.psd"),
                )?;
            }
        }
    }

    if let Some(dir) = out_dir {
        // degenerate budgets still leave a valid report and checkpoint
        fs::write(dir.join("report.csv"), report.to_csv()).map_err(|e| Error::io(dir.display().to_string(), e))?;
        if cfg.epochs < start_epoch {
            save_checkpoint(
                &model,
                &velocity,
                start_epoch as u64 - 1,
                cfg.seed,
                &dir.join("ckpt_final.psd"),
            )?;
        }
    }
    Ok(TrainOutcome {
        model,
        velocity,
        report,
    })
}

// ---------------------------------------------------------------------------
// Binary tensor container and checkpoints
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"PSD1";
const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Serializes named tensors: magic, version, count, then per tensor the
/// name, rank, dims, dtype tag, and little-endian payload, followed by a
/// 64-bit FNV-1a checksum of everything before it.
pub fn write_tensors(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        buf.push(DTYPE_F64);
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let ck = fnv1a64(&buf);
    buf.extend_from_slice(&ck.to_le_bytes());
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let buf = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if buf.len() < 20 {
        return Err(Error::Format(format!("{}: file too short", path.display())));
    }
    let (body, tail) = buf.split_at(buf.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8-byte tail"));
    if fnv1a64(body) != stored {
        return Err(Error::Format(format!("{}: checksum mismatch", path.display())));
    }
    if &body[..4] != MAGIC {
        return Err(Error::Format(format!("{}: bad magic", path.display())));
    }
    let mut pos = 4usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > body.len() {
            return Err(Error::Format(format!(
                "{}: truncated at byte {}",
                path.display(),
                pos
            )));
        }
        let s = &body[pos..pos + n];
        pos += n;
        Ok(s)
    };
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec())
            .map_err(|_| Error::Format(format!("{}: tensor name is not UTF-8", path.display())))?;
        let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        let dtype = take(1)?[0];
        if dtype != DTYPE_F64 {
            return Err(Error::Format(format!(
                "{}: unsupported dtype tag {dtype}",
                path.display()
            )));
        }
        let n: usize = shape.iter().product();
        let raw = take(n * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    if pos != body.len() {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes",
            path.display(),
            body.len() - pos
        )));
    }
    Ok(entries)
}

pub struct Checkpoint {
    pub model: Model,
    pub velocity: Vec<Tensor>,
    pub epoch: u64,
    pub seed: u64,
}

fn u64_tensor(v: u64) -> Tensor {
    Tensor::scalar(f64::from_bits(v))
}

fn tensor_u64(t: &Tensor) -> Result<u64> {
    if t.len() != 1 {
        return Err(Error::Format("expected a scalar meta tensor".into()));
    }
    Ok(t.data()[0].to_bits())
}

pub fn save_checkpoint(
    model: &Model,
    velocity: &[Tensor],
    epoch: u64,
    seed: u64,
    path: &Path,
) -> Result<()> {
    let mut entries: Vec<(String, Tensor)> = vec![
        ("meta.epoch".into(), u64_tensor(epoch)),
        ("meta.seed".into(), u64_tensor(seed)),
        ("meta.in_channels".into(), u64_tensor(model.spec.in_channels as u64)),
        ("meta.num_classes".into(), u64_tensor(model.spec.num_classes as u64)),
        (
            "meta.widths".into(),
            Tensor::new(
                vec![model.spec.widths.len()],
                model.spec.widths.iter().map(|&w| w as f64).collect(),
            )?,
        ),
    ];
    for (p, v) in model.params.iter().zip(velocity) {
        entries.push((format!("param.{}", p.name), p.value.clone()));
        entries.push((format!("vel.{}", p.name), v.clone()));
    }
    write_tensors(path, &entries)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let entries = read_tensors(path)?;
    let find = |name: &str| -> Result<&Tensor> {
        entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("{}: missing '{name}'", path.display())))
    };
    let epoch = tensor_u64(find("meta.epoch")?)?;
    let seed = tensor_u64(find("meta.seed")?)?;
    let spec = ModelSpec {
        in_channels: tensor_u64(find("meta.in_channels")?)? as usize,
        num_classes: tensor_u64(find("meta.num_classes")?)? as usize,
        widths: find("meta.widths")?
            .data()
            .iter()
            .map(|&w| w as usize)
            .collect(),
    };
    spec.validate()?;
    let mut params = Vec::new();
    let mut velocity = Vec::new();
    for (name, t) in &entries {
        if let Some(pname) = name.strip_prefix("param.") {
            let v = find(&format!("vel.{pname}"))?;
            if v.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "{}: velocity shape differs for '{pname}'",
                    path.display()
                )));
            }
            params.push(Param {
                name: pname.to_string(),
                value: t.clone(),
            });
            velocity.push(v.clone());
        }
    }
    let model = Model {
        spec: spec.clone(),
        params,
    };
    let reference = build_model_seeded(&spec, 0)?;
    if model.params.len() != reference.params.len()
        || model
            .params
            .iter()
            .zip(&reference.params)
            .any(|(a, b)| a.name != b.name || a.value.shape() != b.value.shape())
    {
        return Err(Error::Format(format!(
            "{}: parameter set does not match the declared architecture",
            path.display()
        )));
    }
    Ok(Checkpoint {
        model,
        velocity,
        epoch,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_two_part_glyphs, GlyphSpec};

    #[test]
    fn progressive_schedule_table() {
        let cases = [
            (1, 0.1),
            (30, 0.1),
            (31, 0.2),
            (80, 0.2),
            (81, 0.3),
            (120, 0.3),
            (121, 0.5),
            (240, 0.5),
        ];
        for (epoch, want) in cases {
            assert_eq!(p_r_at(PrSchedule::Progressive, epoch, 240).unwrap(), want);
        }
    }

    #[test]
    fn progressive_schedule_scales() {
        // 24-epoch budget: breakpoints 3, 8, 12
        assert_eq!(p_r_at(PrSchedule::Progressive, 3, 24).unwrap(), 0.1);
        assert_eq!(p_r_at(PrSchedule::Progressive, 4, 24).unwrap(), 0.2);
        assert_eq!(p_r_at(PrSchedule::Progressive, 8, 24).unwrap(), 0.2);
        assert_eq!(p_r_at(PrSchedule::Progressive, 9, 24).unwrap(), 0.3);
        assert_eq!(p_r_at(PrSchedule::Progressive, 13, 24).unwrap(), 0.5);
    }

    #[test]
    fn schedule_rejects_bad_epochs() {
        assert!(p_r_at(PrSchedule::Progressive, 0, 240).is_err());
        assert!(p_r_at(PrSchedule::Progressive, 241, 240).is_err());
        assert!(p_r_at(PrSchedule::Constant(1.5), 1, 10).is_err());
        assert_eq!(p_r_at(PrSchedule::Constant(0.5), 7, 10).unwrap(), 0.5);
    }

    #[test]
    fn lr_decay_steps() {
        let cfg = TrainConfig {
            lr: 0.05,
            lr_decay_epochs: vec![150, 180, 210],
            lr_decay_factor: 0.1,
            ..TrainConfig::default()
        };
        assert!((cfg.lr_at(1) - 0.05).abs() < 1e-15);
        assert!((cfg.lr_at(150) - 0.05).abs() < 1e-15);
        assert!((cfg.lr_at(151) - 0.005).abs() < 1e-15);
        assert!((cfg.lr_at(181) - 5e-4).abs() < 1e-15);
        assert!((cfg.lr_at(211) - 5e-5).abs() < 1e-15);
    }

    #[test]
    fn lr_warmup_ramp() {
        let cfg = TrainConfig {
            lr: 0.04,
            lr_decay_epochs: vec![10],
            warmup_epochs: 3,
            ..TrainConfig::default()
        };
        assert!((cfg.lr_at(1) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at(2) - 0.02).abs() < 1e-15);
        assert!((cfg.lr_at(3) - 0.03).abs() < 1e-15);
        assert!((cfg.lr_at(4) - 0.04).abs() < 1e-15);
        assert!((cfg.lr_at(11) - 0.004).abs() < 1e-15);
    }

    fn one_param(v: f64) -> (Vec<Param>, Vec<Tensor>) {
        (
            vec![Param {
                name: "w".into(),
                value: Tensor::scalar(v),
            }],
            vec![Tensor::scalar(0.0)],
        )
    }

    #[test]
    fn sgd_plain_step() {
        let (mut p, mut v) = one_param(1.0);
        sgd_step(&mut p, &mut v, &[Tensor::scalar(0.5)], 0.1, 0.0, 0.0).unwrap();
        assert!((p[0].value.item() - 0.95).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_lr_is_identity() {
        let (mut p, mut v) = one_param(1.0);
        sgd_step(&mut p, &mut v, &[Tensor::scalar(3.0)], 0.0, 0.9, 5e-4).unwrap();
        assert_eq!(p[0].value.item(), 1.0);
    }

    #[test]
    fn sgd_matches_scalar_simulation() {
        // minimize f(p) = 0.5 p^2 (gradient p) with momentum + weight decay
        let (lr, mu, wd) = (0.1, 0.9, 0.01);
        let mut sp = 2.0f64;
        let mut sv = 0.0f64;
        let (mut p, mut v) = one_param(2.0);
        for _ in 0..10 {
            let g = sp;
            sv = mu * sv + g + wd * sp;
            sp -= lr * sv;
            let gt = Tensor::scalar(p[0].value.item());
            sgd_step(&mut p, &mut v, &[gt], lr, mu, wd).unwrap();
        }
        assert_eq!(p[0].value.item().to_bits(), sp.to_bits());
        assert_eq!(v[0].item().to_bits(), sv.to_bits());
    }

    #[test]
    fn sgd_rejects_non_finite_grad() {
        let (mut p, mut v) = one_param(1.0);
        let err = sgd_step(&mut p, &mut v, &[Tensor::scalar(f64::NAN)], 0.1, 0.9, 0.0);
        assert!(matches!(err, Err(Error::Eval(_))));
    }

    #[test]
    fn tensorfile_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.psd");
        let entries = vec![
            ("a".to_string(), Tensor::new(vec![2, 3], vec![1.5, -0.0, f64::MIN_POSITIVE, 3.0, 4.0, 5.0]).unwrap()),
            ("b.nested.name".to_string(), Tensor::scalar(-7.25)),
        ];
        write_tensors(&path, &entries).unwrap();
        let back = read_tensors(&path).unwrap();
        assert_eq!(back.len(), 2);
        for ((n1, t1), (n2, t2)) in entries.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert!(t1.bit_eq(t2));
        }
    }

    #[test]
    fn tensorfile_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.psd");
        write_tensors(&path, &[("a".to_string(), Tensor::scalar(1.0))]).unwrap();
        let mut bytes = fs::read(&path).unwrap();

        // flipped payload byte: checksum catches it
        let mut corrupt = bytes.clone();
        corrupt[20] ^= 0xff;
        fs::write(&path, &corrupt).unwrap();
        assert!(matches!(read_tensors(&path), Err(Error::Format(_))));

        // bad magic with a recomputed checksum: magic check catches it
        bytes[0] = b'X';
        let body_len = bytes.len() - 8;
        let ck = fnv1a64(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&ck.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_tensors(&path), Err(Error::Format(_))));

        // truncation
        fs::write(&path, &bytes[..10]).unwrap();
        assert!(matches!(read_tensors(&path), Err(Error::Format(_))));
    }

    fn tiny_data() -> (Dataset, Dataset) {
        let spec = GlyphSpec {
            num_classes: 2,
            image_size: 8,
            cell: 4,
            train_per_class: 6,
            test_per_class: 4,
            ..GlyphSpec::default()
        };
        gen_two_part_glyphs(&spec).unwrap()
    }

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            in_channels: 1,
            num_classes: 2,
            widths: vec![2],
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = build_model_seeded(&tiny_spec(), 9).unwrap();
        let vel: Vec<Tensor> = model.params.iter().map(|p| p.value.scale(0.25)).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.psd");
        save_checkpoint(&model, &vel, 17, 42, &path).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.epoch, 17);
        assert_eq!(ck.seed, 42);
        assert_eq!(ck.model.spec, model.spec);
        for (a, b) in model.params.iter().zip(&ck.model.params) {
            assert_eq!(a.name, b.name);
            assert!(a.value.bit_eq(&b.value));
        }
        for (a, b) in vel.iter().zip(&ck.velocity) {
            assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let (train, test) = tiny_data();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            patch: 4,
            eval_batch: 8,
            ..TrainConfig::default()
        };
        let a = fit(&cfg, &tiny_spec(), &train, &test, None).unwrap();
        let b = fit(&cfg, &tiny_spec(), &train, &test, None).unwrap();
        assert_eq!(a.report.to_csv(), b.report.to_csv());
        for (pa, pb) in a.model.params.iter().zip(&b.model.params) {
            assert!(pa.value.bit_eq(&pb.value));
        }
    }

    #[test]
    fn report_header_and_shape() {
        let (train, test) = tiny_data();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            patch: 4,
            ..TrainConfig::default()
        };
        let out = fit(&cfg, &tiny_spec(), &train, &test, None).unwrap();
        let csv = out.report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), REPORT_HEADER);
        let row = lines.next().unwrap();
        assert_eq!(row.split(',').count(), 13);
        assert!(row.starts_with("1,"));
    }

    #[test]
    fn zero_epochs_yields_initial_model() {
        let (train, test) = tiny_data();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = fit(&cfg, &tiny_spec(), &train, &test, None).unwrap();
        assert!(out.report.records.is_empty());
        let fresh = build_model_seeded(&tiny_spec(), mix_seed(cfg.seed, TAG_INIT, 0)).unwrap();
        for (a, b) in out.model.params.iter().zip(&fresh.params) {
            assert!(a.value.bit_eq(&b.value));
        }
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let (train, test) = tiny_data();
        let mk_cfg = |epochs| TrainConfig {
            epochs,
            batch_size: 4,
            patch: 4,
            ..TrainConfig::default()
        };
        let full = fit(&mk_cfg(3), &tiny_spec(), &train, &test, None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        fit(&mk_cfg(2), &tiny_spec(), &train, &test, Some(dir.path())).unwrap();
        let ckpt = load_checkpoint(&dir.path().join("ckpt_final.psd")).unwrap();
        assert_eq!(ckpt.epoch, 2);
        let resumed =
            fit_from(&mk_cfg(3), &tiny_spec(), &train, &test, None, Some(ckpt)).unwrap();

        assert_eq!(resumed.report.records.len(), 1);
        assert_eq!(resumed.report.records[0], full.report.records[2]);
        for (a, b) in full.model.params.iter().zip(&resumed.model.params) {
            assert!(a.value.bit_eq(&b.value));
        }
        for (a, b) in full.velocity.iter().zip(&resumed.velocity) {
            assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn hard_label_and_baseline_modes_run() {
        let (train, test) = tiny_data();
        for mode in [TrainMode::HardLabel, TrainMode::Mixup, TrainMode::Cutmix, TrainMode::Cutout]
        {
            let cfg = TrainConfig {
                mode,
                epochs: 1,
                batch_size: 4,
                ..TrainConfig::default()
            };
            let out = fit(&cfg, &tiny_spec(), &train, &test, None).unwrap();
            let r = &out.report.records[0];
            assert_eq!(r.loss_kd, 0.0);
            assert_eq!(r.kd_grad_l1, 0.0);
            assert_eq!(r.conf_gap, 0.0);
            assert!(r.loss_ce.is_finite());
        }
    }

    #[test]
    fn label_noise_changes_training() {
        let (train, test) = tiny_data();
        let base = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let noisy_cfg = TrainConfig {
            label_noise: 0.4,
            ..base.clone()
        };
        let clean = fit(&base, &tiny_spec(), &train, &test, None).unwrap();
        let noisy = fit(&noisy_cfg, &tiny_spec(), &train, &test, None).unwrap();
        let differ = clean
            .model
            .params
            .iter()
            .zip(&noisy.model.params)
            .any(|(a, b)| !a.value.bit_eq(&b.value));
        assert!(differ);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr_decay_epochs: vec![10, 10],
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
