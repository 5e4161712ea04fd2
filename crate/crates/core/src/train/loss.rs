//! Cross-entropy, soft-target KL and the self-distillation objective.

use crate::error::{Error, Result};
use crate::tensor::{kernels, Graph, Tensor, Var};

/// Weighting of the per-exit loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Share of cross-entropy in every early exit's loss; the rest is distillation.
    pub alpha: f64,
    /// Mass spread uniformly over classes in the CE targets. Never applied to KL targets.
    pub label_smoothing: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.5, label_smoothing: 0.1, temperature: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha", format!("must lie in [0, 1], got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("label_smoothing", format!("must lie in [0, 1), got {}", self.label_smoothing)));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::config("temperature", format!("must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

fn rows(g: &Graph, logits: Var) -> Result<(usize, usize)> {
    match g.shape(logits) {
        &[b, c] if b > 0 && c > 0 => Ok((b, c)),
        s => Err(Error::shape(format!("expected [batch, classes] logits, got {s:?}"))),
    }
}

/// Batch-mean cross-entropy against `(1 - s)·onehot + s/C` targets.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
    let (b, c) = rows(g, logits)?;
    if labels.len() != b {
        return Err(Error::contract(format!("{} labels for a batch of {b}", labels.len())));
    }
    let mut target = vec![smoothing / c as f64; b * c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::contract(format!("label {y} out of range for {c} classes")));
        }
        target[i * c + y] += 1.0 - smoothing;
    }
    let lsm = g.log_softmax(logits)?;
    let t = g.constant(Tensor::new(vec![b, c], target)?);
    let picked = g.mul(lsm, t)?;
    let total = g.sum_all(picked);
    Ok(g.scale(total, -1.0 / b as f64))
}

/// Batch-mean `KL(teacher ∥ student)` of the tempered softmaxes. The teacher
/// enters as a constant, so no gradient reaches it.
pub fn kl_soft(g: &mut Graph, student: Var, teacher: Var, temperature: f64) -> Result<Var> {
    let (b, c) = rows(g, student)?;
    if g.shape(teacher) != [b, c] {
        return Err(Error::shapes("kl_soft", g.shape(student), g.shape(teacher)));
    }
    if g.value(student).iter().chain(g.value(teacher)).any(|v| v.is_nan()) {
        return Err(Error::numerical("NaN logits in kl_soft"));
    }
    let inv_t = 1.0 / temperature;
    let mut log_pt = vec![0.0; b * c];
    let scaled: Vec<f64> = g.value(teacher).iter().map(|v| v * inv_t).collect();
    for (src, dst) in scaled.chunks(c).zip(log_pt.chunks_mut(c)) {
        kernels::log_softmax_row(src, dst);
    }
    let pt: Vec<f64> = log_pt.iter().map(|v| v.exp()).collect();
    let s = if temperature == 1.0 { student } else { g.scale(student, inv_t) };
    let log_ps = g.log_softmax(s)?;
    let log_pt = g.constant(Tensor::new(vec![b, c], log_pt)?);
    let pt = g.constant(Tensor::new(vec![b, c], pt)?);
    let diff = g.sub(log_pt, log_ps)?;
    let weighted = g.mul(pt, diff)?;
    let total = g.sum_all(weighted);
    Ok(g.scale(total, 1.0 / b as f64))
}

/// The last present exit is the teacher K. Every earlier present exit adds
/// `alpha·CE_k + (1 - alpha)·KL(exit_k ∥ exit_K)`; exit K adds `CE_K`.
pub fn total_loss(g: &mut Graph, logits: &[Option<Var>; 4], labels: &[usize], w: &LossWeights) -> Result<Var> {
    w.validate()?;
    let last = logits.iter().rposition(Option::is_some).ok_or_else(|| Error::contract("no exit logits present"))?;
    let teacher = logits[last].expect("present");
    let mut loss = cross_entropy(g, teacher, labels, w.label_smoothing)?;
    for &student in logits[..last].iter().flatten() {
        let ce = cross_entropy(g, student, labels, w.label_smoothing)?;
        let kd = kl_soft(g, student, teacher, w.temperature)?;
        let ce = g.scale(ce, w.alpha);
        let kd = g.scale(kd, 1.0 - w.alpha);
        loss = g.add(loss, ce)?;
        loss = g.add(loss, kd)?;
    }
    Ok(loss)
}
