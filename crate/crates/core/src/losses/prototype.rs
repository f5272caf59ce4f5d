//! Class prototypes from frozen old features and from a FIFO memory of
//! recent new embeddings, and the similarity-softmax prototype loss.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::data::TrainSet;
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::EmbeddingBackbone;

use super::cross_entropy;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrototypeKind {
    OldCenters,
    Memory,
    Mixed,
}

/// Class id → prototype vector, all of one dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    kind: PrototypeKind,
    dim: usize,
    protos: BTreeMap<usize, Vec<f64>>,
}

impl PrototypeSet {
    pub fn new(kind: PrototypeKind, protos: BTreeMap<usize, Vec<f64>>) -> Result<Self> {
        let dim = protos.values().next().map_or(0, Vec::len);
        if let Some((c, v)) = protos.iter().find(|(_, v)| v.len() != dim) {
            return Err(Error::shape(
                "prototypes",
                format!("class {c} has dim {}, expected {dim}", v.len()),
            ));
        }
        Ok(PrototypeSet { kind, dim, protos })
    }

    pub fn kind(&self) -> PrototypeKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.protos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.protos.is_empty()
    }

    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.protos.get(&class).map(Vec::as_slice)
    }

    /// Sorted class ids.
    pub fn classes(&self) -> Vec<usize> {
        self.protos.keys().copied().collect()
    }

    /// Prototypes stacked in class-id order, zero-padded to `width` columns.
    pub fn matrix(&self, width: usize) -> Result<Tensor> {
        if self.protos.is_empty() {
            return Err(Error::shape("prototypes", "empty set"));
        }
        let rows: Vec<&[f64]> = self.protos.values().map(Vec::as_slice).collect();
        Tensor::from_rows(&rows)?.pad_cols(width)
    }
}

/// Per-class means of `features` rows, one prototype per listed class.
pub fn class_means(
    features: &Tensor,
    labels: &[usize],
    classes: &[usize],
    kind: PrototypeKind,
) -> Result<PrototypeSet> {
    if features.rows() != labels.len() {
        return Err(Error::shape(
            "class_means",
            "feature rows and labels differ",
        ));
    }
    let d = features.cols();
    let mut protos = BTreeMap::new();
    for &c in classes {
        let mut sum = alloc::vec![0.0; d];
        let mut count = 0usize;
        for (i, &l) in labels.iter().enumerate() {
            if l == c {
                for (s, v) in sum.iter_mut().zip(features.row(i)) {
                    *s += v;
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptyClass { class: c });
        }
        for s in &mut sum {
            *s /= count as f64;
        }
        protos.insert(c, sum);
    }
    PrototypeSet::new(kind, protos)
}

/// Old-feature centers for every class of the new training set, including
/// classes the old model never saw.
pub fn old_prototypes(old: &EmbeddingBackbone, train: &TrainSet) -> Result<PrototypeSet> {
    let feats = old.embed(&train.features)?;
    class_means(
        &feats,
        &train.labels,
        &train.classes,
        PrototypeKind::OldCenters,
    )
}

/// Fixed-capacity FIFO of detached `(embedding, label)` snapshots.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    queue: VecDeque<(Vec<f64>, usize)>,
}

impl MemoryBank {
    pub const DEFAULT_CAPACITY: usize = 4096;

    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("memory bank capacity must be positive"));
        }
        Ok(MemoryBank {
            capacity,
            queue: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    /// Oldest first.
    pub fn entries(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.queue.iter().map(|(v, l)| (v.as_slice(), *l))
    }

    /// Enqueues every row of `embeddings`, evicting the oldest entries beyond capacity.
    pub fn enqueue(&mut self, embeddings: &Tensor, labels: &[usize]) -> Result<()> {
        if embeddings.rows() != labels.len() {
            return Err(Error::shape(
                "memory_update",
                "embedding rows and labels differ",
            ));
        }
        if let Some((v, _)) = self.queue.front() {
            if v.len() != embeddings.cols() {
                return Err(Error::shape(
                    "memory_update",
                    format!("dim {} into bank of dim {}", embeddings.cols(), v.len()),
                ));
            }
        }
        for (i, &l) in labels.iter().enumerate() {
            if self.queue.len() == self.capacity {
                self.queue.pop_front();
            }
            self.queue.push_back((embeddings.row(i).to_vec(), l));
        }
        Ok(())
    }

    /// Means over the queue entries of each class currently present.
    pub fn prototypes(&self) -> PrototypeSet {
        let mut acc: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
        for (v, l) in &self.queue {
            let e = acc
                .entry(*l)
                .or_insert_with(|| (alloc::vec![0.0; v.len()], 0));
            for (s, x) in e.0.iter_mut().zip(v) {
                *s += x;
            }
            e.1 += 1;
        }
        let protos = acc
            .into_iter()
            .map(|(c, (mut s, n))| {
                for x in &mut s {
                    *x /= n as f64;
                }
                (c, s)
            })
            .collect();
        PrototypeSet::new(PrototypeKind::Memory, protos).expect("bank rows share one dim")
    }
}

/// Per class, one Bernoulli(`rho`) draw picks the memory prototype when the
/// class is in the bank; otherwise the old center is kept. Every class of
/// `old` consumes exactly one draw, so the generator stream does not depend
/// on bank contents. Both sides are zero-padded to a common width.
pub fn mix_prototypes<R: Rng>(
    old: &PrototypeSet,
    memory: &PrototypeSet,
    rho: f64,
    rng: &mut R,
) -> Result<PrototypeSet> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::invalid(format!(
            "mix probability {rho} outside [0, 1]"
        )));
    }
    let width = old.dim().max(memory.dim());
    let pad = |v: &[f64]| {
        let mut out = v.to_vec();
        out.resize(width, 0.0);
        out
    };
    let mut protos = BTreeMap::new();
    for (&c, v) in &old.protos {
        let take_memory = rng.random::<f64>() < rho;
        let chosen = match memory.get(c) {
            Some(m) if take_memory => pad(m),
            _ => pad(v),
        };
        protos.insert(c, chosen);
    }
    PrototypeSet::new(PrototypeKind::Mixed, protos)
}

/// Mean over the batch of `-log softmax_c'(cos(f, m_c') / T)` at the true class.
///
/// Prototypes enter as constants, so gradients reach only `embeddings`.
pub fn prototype_loss(
    tape: &mut Tape,
    embeddings: Var,
    labels: &[usize],
    prototypes: &PrototypeSet,
    temperature: f64,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let classes = prototypes.classes();
    let targets = labels
        .iter()
        .map(|&l| {
            classes
                .binary_search(&l)
                .map_err(|_| Error::MissingPrototype { class: l })
        })
        .collect::<Result<Vec<_>>>()?;
    let width = tape.value(embeddings).cols().max(prototypes.dim());
    let f = tape.pad_cols(embeddings, width)?;
    let m = tape.constant(prototypes.matrix(width)?);
    let sims = tape.cosine_sim(f, m)?;
    let logits = if temperature == 1.0 {
        sims
    } else {
        tape.scale(sims, 1.0 / temperature)
    };
    cross_entropy(tape, logits, &targets)
}
