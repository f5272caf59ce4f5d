//! Metric supervision: symmetric batch-hard triplet and classification-form
//! circle loss.

use alloc::format;
use alloc::vec::Vec;

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

use super::baselines::hinge;
use super::{batch_hard, cross_entropy, Mining};

pub const DEFAULT_MARGIN: f64 = 0.3;
pub const DEFAULT_CIRCLE_MARGIN: f64 = 0.25;
pub const DEFAULT_CIRCLE_SCALE: f64 = 64.0;

/// Batch-hard triplet over a single embedding set; an anchor is never its own
/// positive.
pub fn triplet_loss(
    tape: &mut Tape,
    embeddings: Var,
    labels: &[usize],
    margin: f64,
) -> Result<Var> {
    if tape.value(embeddings).rows() != labels.len() {
        return Err(Error::shape(
            "triplet_loss",
            format!(
                "{} rows vs {} labels",
                tape.value(embeddings).rows(),
                labels.len()
            ),
        ));
    }
    let d = tape.euclidean_dist(embeddings, embeddings)?;
    let dist = tape.value(d).clone();
    let mut pos = Vec::with_capacity(labels.len());
    let mut neg = Vec::with_capacity(labels.len());
    for (i, &y) in labels.iter().enumerate() {
        let (p, n) = batch_hard(dist.row(i), i, |j| labels[j] == y, Mining::ExcludeSelf)?;
        pos.push((i, p));
        neg.push((i, n));
    }
    hinge(tape, d, pos, neg, margin)
}

/// Circle loss over cosine logits `[n × C]`, written as softmax cross-entropy
/// on `z_p = γ·α_p·(s_p − (1−m))` at the target and `z_n = γ·α_n·(s_n − m)`
/// elsewhere, with `α_p = relu(1 + m − s_p)` and `α_n = relu(s_n + m)`.
pub fn circle_loss(
    tape: &mut Tape,
    cosine_logits: Var,
    targets: &[usize],
    margin: f64,
    scale: f64,
) -> Result<Var> {
    let s = tape.value(cosine_logits);
    if !s.is_matrix() || s.rows() != targets.len() {
        return Err(Error::shape("circle_loss", format!("{:?}", s.shape())));
    }
    if s.data().iter().any(|v| !(v.abs() <= 1.0 + 1e-6)) {
        return Err(Error::invalid(
            "circle loss expects cosine logits in [-1, 1]",
        ));
    }
    let (n, c) = (s.rows(), s.cols());
    let mut pos_mask = Tensor::zeros(&[n, c]);
    for (i, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(Error::LabelOutOfRange {
                label: t,
                classes: c,
            });
        }
        pos_mask.row_mut(i)[t] = 1.0;
    }
    let neg_mask = pos_mask.map(|v| 1.0 - v);

    let a_n = tape.add_scalar(cosine_logits, margin);
    let a_n = tape.relu(a_n);
    let d_n = tape.add_scalar(cosine_logits, -margin);
    let z_n = tape.mul(a_n, d_n)?;

    let a_p = tape.scale(cosine_logits, -1.0);
    let a_p = tape.add_scalar(a_p, 1.0 + margin);
    let a_p = tape.relu(a_p);
    let d_p = tape.add_scalar(cosine_logits, margin - 1.0);
    let z_p = tape.mul(a_p, d_p)?;

    let nm = tape.constant(neg_mask);
    let pm = tape.constant(pos_mask);
    let z_n = tape.mul(z_n, nm)?;
    let z_p = tape.mul(z_p, pm)?;
    let z = tape.add(z_n, z_p)?;
    let z = tape.scale(z, scale);
    cross_entropy(tape, z, targets)
}
