//! Training objectives built on the tape.

mod baselines;
mod metric;
mod prototype;
mod structural;

pub use baselines::{
    asymmetric_center_loss, asymmetric_triplet_loss, kl_distill_loss, l2_compat_loss,
    softened_probs,
};
pub use metric::{
    circle_loss, triplet_loss, DEFAULT_CIRCLE_MARGIN, DEFAULT_CIRCLE_SCALE, DEFAULT_MARGIN,
};
pub use prototype::{
    class_means, mix_prototypes, old_prototypes, prototype_loss, MemoryBank, PrototypeKind,
    PrototypeSet,
};
pub use structural::{bct_loss, n2o_term, o2n_term, structural_reg, BoundHead, StructuralMode};

use alloc::format;
use alloc::vec::Vec;

use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};

/// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let lv = tape.value(logits);
    if !lv.is_matrix() || lv.rows() != targets.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {:?} vs {} targets", lv.shape(), targets.len()),
        ));
    }
    let classes = lv.cols();
    if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes,
        });
    }
    let logp = tape.log_softmax(logits)?;
    let picked = tape.gather(logp, targets.iter().copied().enumerate().collect())?;
    let m = tape.mean(picked);
    Ok(tape.neg(m))
}

/// Whether an anchor may serve as its own positive during hard mining.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Mining {
    IncludeSelf,
    ExcludeSelf,
}

/// Hardest positive (largest distance) and hardest negative (smallest
/// distance) in one distance row. Ties go to the lowest index.
pub(crate) fn batch_hard(
    row: &[f64],
    anchor: usize,
    is_positive: impl Fn(usize) -> bool,
    mining: Mining,
) -> Result<(usize, usize)> {
    let mut pos: Option<usize> = None;
    let mut neg: Option<usize> = None;
    for (j, &d) in row.iter().enumerate() {
        if is_positive(j) {
            if mining == Mining::ExcludeSelf && j == anchor {
                continue;
            }
            if pos.is_none_or(|p| d > row[p]) {
                pos = Some(j);
            }
        } else if neg.is_none_or(|n| d < row[n]) {
            neg = Some(j);
        }
    }
    let pos = pos.ok_or(Error::MissingPair {
        anchor,
        kind: "positive",
    })?;
    let neg = neg.ok_or(Error::MissingPair {
        anchor,
        kind: "negative",
    })?;
    Ok((pos, neg))
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct LossWeights {
    pub proto: f64,
    pub stru: f64,
    pub ce: f64,
    /// Softmax temperature for the prototype loss.
    pub temperature: f64,
    /// Probability of taking a class prototype from the memory bank.
    pub rho: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            proto: 1.0,
            stru: 1.0,
            ce: 1.0,
            temperature: 1.0,
            rho: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("proto", self.proto), ("stru", self.stru), ("ce", self.ce)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::invalid(format!(
                    "loss weight {name} must be finite and >= 0"
                )));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("temperature must be positive"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::invalid("rho must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Separately evaluated components of the combined objective.
#[derive(Clone, Copy, Debug)]
pub struct DualTuningTerms {
    pub proto: Var,
    /// `None` when the old model has no head; the term is then dropped.
    pub stru: Option<Var>,
    /// The new model's own supervision loss (softmax CE, circle, ...).
    pub supervision: Var,
}

/// `w_proto·proto + w_stru·stru + w_ce·supervision`, summed left to right.
pub fn dual_tuning_loss(
    tape: &mut Tape,
    weights: &LossWeights,
    terms: DualTuningTerms,
) -> Result<Var> {
    let mut parts: Vec<Var> = Vec::with_capacity(3);
    parts.push(tape.scale(terms.proto, weights.proto));
    if let Some(s) = terms.stru {
        parts.push(tape.scale(s, weights.stru));
    }
    parts.push(tape.scale(terms.supervision, weights.ce));
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = tape.add(total, p)?;
    }
    Ok(total)
}
