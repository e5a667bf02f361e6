//! Accuracy, calibration, selective-risk, and adversarial-robustness metrics,
//! plus the gradient and confidence diagnostics tracked during training.

use rand::Rng;

use crate::augment::intra_patch_swap;
use crate::distill::{total_loss, DistillConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::pairing::PairBatch;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// T=1 predictive distributions with ground-truth labels.
#[derive(Clone, Debug)]
pub struct PredictionSet {
    probs: Tensor,
    labels: Vec<usize>,
}

impl PredictionSet {
    pub fn new(probs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if probs.shape().len() != 2 || probs.shape()[0] != labels.len() {
            return Err(Error::Dim(format!(
                "probs {:?} with {} labels",
                probs.shape(),
                labels.len()
            )));
        }
        let c = probs.shape()[1];
        for i in 0..labels.len() {
            let row = &probs.data()[i * c..(i + 1) * c];
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < 0.0) {
                return Err(Error::Contract(format!(
                    "row {i} is not a probability vector (sum {s})"
                )));
            }
            if labels[i] >= c {
                return Err(Error::Contract(format!(
                    "label {} out of range for {} classes",
                    labels[i], c
                )));
            }
        }
        Ok(PredictionSet { probs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn row(&self, i: usize) -> &[f64] {
        let c = self.num_classes();
        &self.probs.data()[i * c..(i + 1) * c]
    }

    /// Max probability and argmax class (ties broken by lowest class id).
    fn confidence(&self, i: usize) -> (f64, usize) {
        let row = self.row(i);
        let mut best = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        (row[best], best)
    }

    fn correct(&self, i: usize) -> bool {
        self.confidence(i).1 == self.labels[i]
    }
}

/// Fraction of samples whose true label is among the k highest-probability
/// classes; probability ties are broken by lowest class id.
pub fn top_k_accuracy(pred: &PredictionSet, k: usize) -> Result<f64> {
    let c = pred.num_classes();
    if k == 0 || k > c {
        return Err(Error::Contract(format!("k={k} out of range [1, {c}]")));
    }
    let mut hits = 0usize;
    for i in 0..pred.len() {
        let row = pred.row(i);
        let y = pred.labels()[i];
        // rank of the true class: classes strictly better, plus equal-prob
        // classes with a lower id
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > row[y] || (v == row[y] && j < y))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / pred.len() as f64)
}

/// Expected calibration error over equal-width confidence bins.
pub fn ece(pred: &PredictionSet, bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::Contract("bins must be >= 1".into()));
    }
    let n = pred.len();
    let mut bin_n = vec![0usize; bins];
    let mut bin_conf = vec![0.0; bins];
    let mut bin_acc = vec![0.0; bins];
    for i in 0..n {
        let (conf, _) = pred.confidence(i);
        let b = ((conf * bins as f64) as usize).min(bins - 1);
        bin_n[b] += 1;
        bin_conf[b] += conf;
        if pred.correct(i) {
            bin_acc[b] += 1.0;
        }
    }
    let mut e = 0.0;
    for b in 0..bins {
        if bin_n[b] == 0 {
            continue;
        }
        let nb = bin_n[b] as f64;
        e += (nb / n as f64) * ((bin_acc[b] / nb) - (bin_conf[b] / nb)).abs();
    }
    Ok(e)
}

/// Mean squared distance between the probability vector and the one-hot
/// target, summed over classes (range [0, 2]).
pub fn brier(pred: &PredictionSet) -> f64 {
    let c = pred.num_classes();
    let mut acc = 0.0;
    for i in 0..pred.len() {
        let row = pred.row(i);
        for k in 0..c {
            let target = if k == pred.labels()[i] { 1.0 } else { 0.0 };
            acc += (row[k] - target) * (row[k] - target);
        }
    }
    acc / pred.len() as f64
}

/// Area under the risk-coverage curve: accept samples in decreasing
/// confidence order (ties by original index) and average the running error
/// rate over all coverage levels.
pub fn aurc(pred: &PredictionSet) -> f64 {
    let n = pred.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        pred.confidence(b)
            .0
            .partial_cmp(&pred.confidence(a).0)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut errors = 0usize;
    let mut acc = 0.0;
    for (i, &idx) in order.iter().enumerate() {
        if !pred.correct(idx) {
            errors += 1;
        }
        acc += errors as f64 / (i + 1) as f64;
    }
    acc / n as f64
}

/// FPR at the requested TPR for misclassification detection: correct
/// classifications are positives scored by max probability. Sweeps observed
/// scores from high to low and reports the false-positive rate at the first
/// threshold whose true-positive rate reaches the target.
pub fn fpr_at_tpr(pred: &PredictionSet, tpr: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&tpr) {
        return Err(Error::Contract(format!("tpr must be in [0,1], got {tpr}")));
    }
    let mut pos: Vec<f64> = Vec::new();
    let mut neg: Vec<f64> = Vec::new();
    for i in 0..pred.len() {
        let (conf, _) = pred.confidence(i);
        if pred.correct(i) {
            pos.push(conf);
        } else {
            neg.push(conf);
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Eval(
            "fpr_at_tpr undefined: needs both correct and incorrect samples".into(),
        ));
    }
    let mut thresholds: Vec<f64> = pos.iter().chain(neg.iter()).copied().collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    for t in thresholds {
        let tp = pos.iter().filter(|&&s| s >= t).count() as f64 / pos.len() as f64;
        if tp >= tpr {
            let fp = neg.iter().filter(|&&s| s >= t).count() as f64 / neg.len() as f64;
            return Ok(fp);
        }
    }
    Ok(1.0)
}

/// FGSM (steps = 1) and I-FGSM (steps > 1, per-step size epsilon/steps) on
/// the cross-entropy loss. The result stays inside both the epsilon ball
/// around the input and the [lo, hi] pixel range; model parameters are
/// untouched.
pub fn fgsm(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    epsilon: f64,
    steps: usize,
    clamp: (f64, f64),
) -> Result<Tensor> {
    if epsilon < 0.0 {
        return Err(Error::Domain(format!("epsilon must be >= 0, got {epsilon}")));
    }
    if steps == 0 {
        return Err(Error::Domain("steps must be >= 1".into()));
    }
    if epsilon == 0.0 {
        return Ok(x.clone());
    }
    let step = epsilon / steps as f64;
    let mut adv = x.clone();
    for _ in 0..steps {
        let tape = Tape::new();
        let pvars = model.bind(&tape);
        let xv = tape.leaf(adv.clone());
        let logits = model.forward_var(&tape, &pvars, &xv)?;
        let loss = crate::distill::cross_entropy(&tape, &logits, y)?;
        let grads = tape.backward(&loss)?;
        let gx = grads
            .wrt(&xv)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape()));
        let stepped = adv.zip(&gx, |a, g| a + step * g.signum())?;
        // project to the epsilon ball and the valid range
        adv = stepped.zip(x, |s, orig| {
            s.clamp(orig - epsilon, orig + epsilon)
                .clamp(clamp.0, clamp.1)
        })?;
    }
    Ok(adv)
}

/// One backward pass of the joint loss on a pair batch; mean absolute
/// gradient per named parameter tensor, in depth order.
pub fn layer_grad_magnitudes(
    model: &Model,
    batch: &PairBatch,
    cfg: &DistillConfig,
) -> Result<Vec<(String, f64)>> {
    let tape = Tape::new();
    let pvars = model.bind(&tape);
    let fa = model.forward(&tape, &pvars, &batch.x_a)?;
    let fb = model.forward(&tape, &pvars, &batch.x_b)?;
    let lb = total_loss(&tape, &fa, &fb, &batch.y, cfg)?;
    let grads = tape.backward(&lb.total)?;
    Ok(model
        .params
        .iter()
        .zip(&pvars)
        .map(|(p, v)| {
            let mag = grads.wrt(v).map(|g| g.abs_mean()).unwrap_or(0.0);
            (p.name.clone(), mag)
        })
        .collect())
}

/// Mean over pairs of |p_target(x_a_hat) - p_target(x_b_hat)| at the given
/// temperature, after applying the swap policy.
pub fn target_confidence_gap<R: Rng>(
    model: &Model,
    batch: &PairBatch,
    m: usize,
    p_r: f64,
    t: f64,
    rng: &mut R,
) -> Result<f64> {
    let n = batch.len();
    let s = batch.x_a.shape();
    let per = s[1] * s[2] * s[3];
    let mut xa = Vec::with_capacity(n * per);
    let mut xb = Vec::with_capacity(n * per);
    for i in 0..n {
        let a = Tensor::new(
            s[1..].to_vec(),
            batch.x_a.data()[i * per..(i + 1) * per].to_vec(),
        )?;
        let b = Tensor::new(
            s[1..].to_vec(),
            batch.x_b.data()[i * per..(i + 1) * per].to_vec(),
        )?;
        let (sa, sb) = intra_patch_swap(&a, &b, m, p_r, rng)?;
        xa.extend_from_slice(sa.data());
        xb.extend_from_slice(sb.data());
    }
    let xa = Tensor::new(s.to_vec(), xa)?;
    let xb = Tensor::new(s.to_vec(), xb)?;
    let pa = model.forward_logits(&xa)?.softmax_rows(t)?;
    let pb = model.forward_logits(&xb)?.softmax_rows(t)?;
    Ok(confidence_gap_from_probs(&pa, &pb, &batch.y))
}

pub(crate) fn confidence_gap_from_probs(pa: &Tensor, pb: &Tensor, y: &[usize]) -> f64 {
    let c = pa.shape()[1];
    let mut acc = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        acc += (pa.data()[i * c + yi] - pb.data()[i * c + yi]).abs();
    }
    acc / y.len() as f64
}
