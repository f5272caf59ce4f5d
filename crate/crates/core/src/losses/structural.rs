//! Cross-model component swaps: new backbone through the old head (N2O) and
//! old features through the new head (O2N).

use alloc::vec::Vec;

use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Bound, ClassifierHead};

use super::cross_entropy;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StructuralMode {
    /// Both terms.
    Mutual,
    /// Old head supervises the new backbone; identical to BCT.
    NewToOld,
    /// Old features supervise the new head.
    OldToNew,
}

/// A head together with the variables it was bound to on the current tape.
#[derive(Clone, Copy)]
pub struct BoundHead<'a> {
    pub head: &'a ClassifierHead,
    pub bound: &'a Bound,
}

/// Cross-entropy of `old_head(new_embeddings)` over the batch rows whose
/// class the old head knows; an empty subset contributes exactly zero.
pub fn n2o_term(
    tape: &mut Tape,
    new_embeddings: Var,
    labels: &[usize],
    old_head: BoundHead<'_>,
) -> Result<Var> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if let Some(col) = old_head.head.column_of(l) {
            rows.push(i);
            targets.push(col);
        }
    }
    if rows.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let subset = if rows.len() == labels.len() {
        new_embeddings
    } else {
        tape.select_rows(new_embeddings, rows)?
    };
    let logits = old_head.head.forward(tape, old_head.bound, subset)?;
    cross_entropy(tape, logits, &targets)
}

/// Cross-entropy of `new_head(old_features)` over the full batch.
pub fn o2n_term(
    tape: &mut Tape,
    old_features: Var,
    labels: &[usize],
    new_head: BoundHead<'_>,
) -> Result<Var> {
    let targets = labels
        .iter()
        .map(|&l| {
            new_head.head.column_of(l).ok_or(Error::LabelOutOfRange {
                label: l,
                classes: new_head.head.classes().len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let logits = new_head.head.forward(tape, new_head.bound, old_features)?;
    cross_entropy(tape, logits, &targets)
}

/// Mutual structural regularization or one of its halves.
///
/// `old_features` must be a constant (precomputed old embeddings), so the O2N
/// term only trains the new head.
pub fn structural_reg(
    tape: &mut Tape,
    mode: StructuralMode,
    new_embeddings: Var,
    old_features: Var,
    labels: &[usize],
    new_head: BoundHead<'_>,
    old_head: Option<BoundHead<'_>>,
) -> Result<Var> {
    let old_head = old_head.ok_or(Error::StructuralRegUnavailable)?;
    match mode {
        StructuralMode::NewToOld => n2o_term(tape, new_embeddings, labels, old_head),
        StructuralMode::OldToNew => o2n_term(tape, old_features, labels, new_head),
        StructuralMode::Mutual => {
            let a = n2o_term(tape, new_embeddings, labels, old_head)?;
            let b = o2n_term(tape, old_features, labels, new_head)?;
            tape.add(a, b)
        }
    }
}

/// The BCT baseline: the N2O term alone. Inapplicable without an old head.
pub fn bct_loss(
    tape: &mut Tape,
    new_embeddings: Var,
    labels: &[usize],
    old_head: Option<BoundHead<'_>>,
) -> Result<Var> {
    let old_head = old_head.ok_or_else(|| Error::Inapplicable {
        method: "bct".into(),
        reason: "old model has no classifier head".into(),
    })?;
    n2o_term(tape, new_embeddings, labels, old_head)
}
