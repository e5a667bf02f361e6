//! The training objective: paired cross-entropy, symmetric temperature-scaled
//! KL between the two branches, the joint weighted loss, and the closed-form
//! KD logit gradient used as a training diagnostic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Softmax temperature for the KD terms.
    pub t: f64,
    /// Cross-entropy weight.
    pub gamma: f64,
    /// KD weight.
    pub alpha: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            t: 4.0,
            gamma: 1.0,
            alpha: 1.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t <= 0.0 {
            return Err(Error::Domain(format!("temperature must be > 0, got {}", self.t)));
        }
        if !(self.gamma.is_finite() && self.alpha.is_finite())
            || self.gamma < 0.0
            || self.alpha < 0.0
        {
            return Err(Error::Config(
                "gamma and alpha must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Scalar components of one joint-loss evaluation. `total` stays on the tape
/// and is the quantity the optimizer differentiates.
pub struct LossBreakdown {
    pub l_c1: f64,
    pub l_c2: f64,
    pub l_kd1: f64,
    pub l_kd2: f64,
    pub total: Var,
}

impl LossBreakdown {
    pub fn total_value(&self) -> f64 {
        self.total.value.item()
    }
}

/// Mean over the batch of -log softmax(logits)[y]. Both loss reductions in
/// this crate use means so the loss weights are batch-size independent.
pub fn cross_entropy(tape: &Tape, logits: &Var, y: &[usize]) -> Result<Var> {
    let lsm = tape.log_softmax_temp(logits, 1.0)?;
    tape.nll_mean(&lsm, y)
}

/// Soft-label cross entropy: mean over rows of -sum_k q_k log p_k.
pub fn cross_entropy_soft(tape: &Tape, logits: &Var, soft: &Tensor) -> Result<Var> {
    if logits.value.shape() != soft.shape() {
        return Err(Error::Dim(format!(
            "soft labels {:?} do not match logits {:?}",
            soft.shape(),
            logits.value.shape()
        )));
    }
    let n = soft.shape()[0] as f64;
    let lsm = tape.log_softmax_temp(logits, 1.0)?;
    let q = tape.leaf(soft.clone());
    let prod = tape.mul(&lsm, &q)?;
    let s = tape.sum(&prod);
    Ok(tape.scale(&s, -1.0 / n))
}

/// KL(p || q) for explicit probability rows, mean over rows. Zero-probability
/// entries of p contribute nothing. Validation tolerance on row sums is 1e-6.
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    if p.shape() != q.shape() || p.shape().len() != 2 {
        return Err(Error::Dim(format!(
            "kl_divergence expects matching 2-D inputs, got {:?} / {:?}",
            p.shape(),
            q.shape()
        )));
    }
    let (n, c) = (p.shape()[0], p.shape()[1]);
    for (name, t) in [("p", p), ("q", q)] {
        for i in 0..n {
            let row = &t.data()[i * c..(i + 1) * c];
            if row.iter().any(|&v| v < 0.0) {
                return Err(Error::Contract(format!("{name} row {i} has negative entries")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!(
                    "{name} row {i} sums to {s}, not a probability vector"
                )));
            }
        }
    }
    let mut acc = 0.0;
    for i in 0..n {
        for k in 0..c {
            let pv = p.data()[i * c + k];
            if pv > 0.0 {
                acc += pv * (pv.ln() - q.data()[i * c + k].ln());
            }
        }
    }
    Ok(Tensor::scalar(acc / n as f64))
}

/// The two symmetric KD terms: T^2-scaled tempered KL between the branches,
/// mean over the batch. Gradients flow into both logit tensors.
pub fn kd_loss_pair(tape: &Tape, f_a: &Var, f_b: &Var, t: f64) -> Result<(Var, Var)> {
    if t <= 0.0 {
        return Err(Error::Domain(format!("temperature must be > 0, got {t}")));
    }
    if f_a.value.shape() != f_b.value.shape() {
        return Err(Error::Dim(format!(
            "logit shapes differ: {:?} vs {:?}",
            f_a.value.shape(),
            f_b.value.shape()
        )));
    }
    let n = f_a.value.shape()[0] as f64;
    let la = tape.log_softmax_temp(f_a, t)?;
    let lb = tape.log_softmax_temp(f_b, t)?;
    // KL(sigma(a/T) || sigma(b/T)) in log space: sum p_a * (la - lb)
    let kd = |lx: &Var, ly: &Var| -> Result<Var> {
        let px = tape.exp(lx);
        let diff = tape.sub(lx, ly)?;
        let prod = tape.mul(&px, &diff)?;
        let s = tape.sum(&prod);
        Ok(tape.scale(&s, t * t / n))
    };
    Ok((kd(&la, &lb)?, kd(&lb, &la)?))
}

/// Joint loss: 0.5*gamma*(CE_a + CE_b) + 0.5*alpha*(KD_1 + KD_2).
pub fn total_loss(
    tape: &Tape,
    f_a: &Var,
    f_b: &Var,
    y: &[usize],
    cfg: &DistillConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let ce_a = cross_entropy(tape, f_a, y)?;
    let ce_b = cross_entropy(tape, f_b, y)?;
    let (kd1, kd2) = kd_loss_pair(tape, f_a, f_b, cfg.t)?;
    let ce_sum = tape.add(&ce_a, &ce_b)?;
    let kd_sum = tape.add(&kd1, &kd2)?;
    let ce_part = tape.scale(&ce_sum, 0.5 * cfg.gamma);
    let kd_part = tape.scale(&kd_sum, 0.5 * cfg.alpha);
    let total = tape.add(&ce_part, &kd_part)?;
    Ok(LossBreakdown {
        l_c1: ce_a.value.item(),
        l_c2: ce_b.value.item(),
        l_kd1: kd1.value.item(),
        l_kd2: kd2.value.item(),
        total,
    })
}

/// Closed-form per-sample gradient of the unaveraged first KD term with
/// respect to the second branch's logits: T * (sigma(f_b/T) - sigma(f_a/T)).
/// At T=1 this is exactly p_b - p_a.
pub fn kd_logit_gradient(f_a: &Tensor, f_b: &Tensor, t: f64) -> Result<Tensor> {
    if t <= 0.0 {
        return Err(Error::Domain(format!("temperature must be > 0, got {t}")));
    }
    let pa = f_a.softmax_rows(t)?;
    let pb = f_b.softmax_rows(t)?;
    Ok(pb.sub(&pa)?.scale(t))
}
