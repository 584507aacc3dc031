//! Pretext and downstream objectives with closed-form input gradients.
//!
//! Every loss here is a plain function of its inputs; training code splices
//! the value and gradient into a [`Tape`](crate::nn::Tape) through
//! `custom_scalar`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Raw decoder output for one step: coordinates plus pre-softmax pen logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointPrediction {
    pub x: f64,
    pub y: f64,
    pub pen_logits: [f64; 3],
}

impl PointPrediction {
    pub fn from_row(r: &[f64]) -> Self {
        Self {
            x: r[0],
            y: r[1],
            pen_logits: [r[2], r[3], r[4]],
        }
    }

    pub fn to_row(&self) -> [f64; 5] {
        [self.x, self.y, self.pen_logits[0], self.pen_logits[1], self.pen_logits[2]]
    }

    pub fn pen_probabilities(&self) -> [f64; 3] {
        let p = crate::nn::tape::softmax(&self.pen_logits);
        [p[0], p[1], p[2]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub coord_term: f64,
    pub pen_term: f64,
    pub valid_steps: usize,
}

/// Per-coordinate penalty of the vectorization loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordPenalty {
    #[default]
    Squared,
    Absolute,
}

fn log_softmax(logits: &[f64; 3]) -> [f64; 3] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    [logits[0] - lse, logits[1] - lse, logits[2] - lse]
}

/// Mean coordinate error plus pen-state cross-entropy over masked steps.
///
/// `targets` are five-element rows whose last three entries are the one-hot
/// pen state. Steps with `mask == false` contribute nothing.
pub fn vectorization_loss(
    preds: &[PointPrediction],
    targets: &[[f64; 5]],
    mask: &[bool],
    penalty: CoordPenalty,
) -> Result<LossBreakdown> {
    vectorization_loss_with_grad(preds, targets, mask, penalty).map(|(b, _)| b)
}

/// As [`vectorization_loss`], also returning `d total / d pred` rows.
pub fn vectorization_loss_with_grad(
    preds: &[PointPrediction],
    targets: &[[f64; 5]],
    mask: &[bool],
    penalty: CoordPenalty,
) -> Result<(LossBreakdown, Vec<[f64; 5]>)> {
    if preds.len() != targets.len() || preds.len() != mask.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions, {} targets, {} mask entries",
            preds.len(),
            targets.len(),
            mask.len()
        )));
    }
    let valid = mask.iter().filter(|&&m| m).count();
    if valid == 0 {
        return Err(Error::EmptyMask);
    }
    let inv = 1.0 / valid as f64;
    let mut coord = 0.0;
    let mut pen = 0.0;
    let mut grads = vec![[0.0; 5]; preds.len()];
    for (t, ((p, y), &m)) in preds.iter().zip(targets).zip(mask).enumerate() {
        if !m {
            continue;
        }
        let (ex, ey) = (p.x - y[0], p.y - y[1]);
        match penalty {
            CoordPenalty::Squared => {
                coord += ex * ex + ey * ey;
                grads[t][0] = 2.0 * ex * inv;
                grads[t][1] = 2.0 * ey * inv;
            }
            CoordPenalty::Absolute => {
                coord += ex.abs() + ey.abs();
                grads[t][0] = sign(ex) * inv;
                grads[t][1] = sign(ey) * inv;
            }
        }
        let ls = log_softmax(&p.pen_logits);
        let q = [y[2], y[3], y[4]];
        let qsum: f64 = q.iter().sum();
        for i in 0..3 {
            pen -= q[i] * ls[i];
            grads[t][2 + i] = (ls[i].exp() * qsum - q[i]) * inv;
        }
    }
    let coord_term = coord * inv;
    let pen_term = pen * inv;
    Ok((
        LossBreakdown {
            total: coord_term + pen_term,
            coord_term,
            pen_term,
            valid_steps: valid,
        },
        grads,
    ))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

/// Mean squared difference over every pixel and channel.
pub fn rasterization_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    rasterization_loss_with_grad(pred, target).map(|(v, _)| v)
}

pub fn rasterization_loss_with_grad(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    same_shape(pred, target, "rasterization loss")?;
    let n = pred.len() as f64;
    let mut sum = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (p, t) in pred.data.iter().zip(&target.data) {
        let d = p - t;
        sum += d * d;
        grad.push(2.0 * d / n);
    }
    Ok((sum / n, Tensor::new(pred.shape.clone(), grad)))
}

/// Softmax cross-entropy of `logits[N, K]` averaged over the batch.
pub fn classification_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    classification_loss_with_grad(logits, labels).map(|(v, _)| v)
}

pub fn classification_loss_with_grad(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.shape.len() != 2 || logits.rows() != labels.len() {
        return Err(Error::LengthMismatch(format!(
            "logits {:?} for {} labels",
            logits.shape,
            labels.len()
        )));
    }
    let (n, k) = (labels.len(), logits.cols());
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    let mut grad = vec![0.0; n * k];
    for (i, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[label];
        for j in 0..k {
            grad[i * k + j] = ((row[j] - lse).exp() - if j == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((total / n as f64, Tensor::new(logits.shape.clone(), grad)))
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean over rows of `max(0, |a - p| - |a - n| + margin)`.
pub fn triplet_loss(anchor: &Tensor, positive: &Tensor, negative: &Tensor, margin: f64) -> Result<f64> {
    triplet_loss_with_grad(anchor, positive, negative, margin).map(|(v, _)| v)
}

/// Gradients are returned for anchor, positive and negative in that order.
/// A zero distance contributes a zero subgradient.
pub fn triplet_loss_with_grad(
    anchor: &Tensor,
    positive: &Tensor,
    negative: &Tensor,
    margin: f64,
) -> Result<(f64, [Tensor; 3])> {
    same_shape(anchor, positive, "triplet positive")?;
    same_shape(anchor, negative, "triplet negative")?;
    if !(margin >= 0.0) {
        return Err(Error::InvalidConfig(format!("triplet margin {margin} must be >= 0")));
    }
    let n = anchor.rows();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let d = anchor.cols();
    let mut total = 0.0;
    let mut ga = vec![0.0; n * d];
    let mut gp = vec![0.0; n * d];
    let mut gn = vec![0.0; n * d];
    for i in 0..n {
        let (a, p, q) = (anchor.row(i), positive.row(i), negative.row(i));
        let (dp, dn) = (euclidean(a, p), euclidean(a, q));
        let h = dp - dn + margin;
        if h <= 0.0 {
            continue;
        }
        total += h;
        for j in 0..d {
            let up = if dp > 0.0 { (a[j] - p[j]) / dp } else { 0.0 };
            let un = if dn > 0.0 { (a[j] - q[j]) / dn } else { 0.0 };
            ga[i * d + j] = (up - un) / n as f64;
            gp[i * d + j] = -up / n as f64;
            gn[i * d + j] = un / n as f64;
        }
    }
    let shape = anchor.shape.clone();
    Ok((
        total / n as f64,
        [
            Tensor::new(shape.clone(), ga),
            Tensor::new(shape.clone(), gp),
            Tensor::new(shape, gn),
        ],
    ))
}
