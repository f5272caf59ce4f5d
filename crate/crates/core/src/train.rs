//! Adam, the step learning-rate schedule and the training drivers: independent
//! models, compatible models against a frozen predecessor, and sequential
//! chains.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::data::{
    class_split, derive_seed, iterate_batches, rng_for, LabeledDataset, Sampler, TrainSet,
};
use crate::diffcore::{Parameter, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{
    asymmetric_center_loss, asymmetric_triplet_loss, bct_loss, circle_loss, class_means,
    cross_entropy, dual_tuning_loss, kl_distill_loss, l2_compat_loss, mix_prototypes,
    prototype_loss, softened_probs, structural_reg, triplet_loss, BoundHead, DualTuningTerms,
    LossWeights, MemoryBank, PrototypeKind, PrototypeSet, StructuralMode,
};
use crate::model::{CheckpointMeta, ClassifierHead, EmbeddingBackbone, Model};

const STREAM_BACKBONE: u64 = 1;
const STREAM_BATCHES: u64 = 2;
const STREAM_MIX: u64 = 3;
const STREAM_HEAD: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Supervision {
    Softmax,
    Triplet,
    SoftmaxTriplet,
    Circle,
}

impl Supervision {
    pub const ALL: [Supervision; 4] = [
        Supervision::Softmax,
        Supervision::Triplet,
        Supervision::SoftmaxTriplet,
        Supervision::Circle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Supervision::Softmax => "softmax",
            Supervision::Triplet => "triplet",
            Supervision::SoftmaxTriplet => "softmax-triplet",
            Supervision::Circle => "circle",
        }
    }

    /// Whether the trained model carries a classifier head.
    pub fn has_head(self) -> bool {
        self != Supervision::Triplet
    }

    pub fn uses_triplet(self) -> bool {
        matches!(self, Supervision::Triplet | Supervision::SoftmaxTriplet)
    }
}

impl fmt::Display for Supervision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Supervision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = if s == "softmax+triplet" {
            "softmax-triplet"
        } else {
            s
        };
        Supervision::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown supervision {s:?}")))
    }
}

/// How the new model is tied to the old one.
///
/// `CenterProto`, `CompatProto` and `Mutual` are the ablation rows between
/// the plain baselines and full Dual-Tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum CompatMethod {
    None,
    DualTuning,
    Bct,
    L2,
    Kl,
    AsymTriplet,
    AsymCenter,
    N2oOnly,
    O2nOnly,
    CenterProto,
    CompatProto,
    Mutual,
}

impl CompatMethod {
    pub const ALL: [CompatMethod; 12] = [
        CompatMethod::None,
        CompatMethod::DualTuning,
        CompatMethod::Bct,
        CompatMethod::L2,
        CompatMethod::Kl,
        CompatMethod::AsymTriplet,
        CompatMethod::AsymCenter,
        CompatMethod::N2oOnly,
        CompatMethod::O2nOnly,
        CompatMethod::CenterProto,
        CompatMethod::CompatProto,
        CompatMethod::Mutual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CompatMethod::None => "none",
            CompatMethod::DualTuning => "dual-tuning",
            CompatMethod::Bct => "bct",
            CompatMethod::L2 => "l2",
            CompatMethod::Kl => "kl",
            CompatMethod::AsymTriplet => "asym-triplet",
            CompatMethod::AsymCenter => "asym-center",
            CompatMethod::N2oOnly => "n2o-only",
            CompatMethod::O2nOnly => "o2n-only",
            CompatMethod::CenterProto => "center-proto",
            CompatMethod::CompatProto => "compat-proto",
            CompatMethod::Mutual => "mutual",
        }
    }

    fn uses_memory(self) -> bool {
        matches!(self, CompatMethod::DualTuning | CompatMethod::CompatProto)
    }

    fn uses_old_centers(self) -> bool {
        matches!(
            self,
            CompatMethod::DualTuning
                | CompatMethod::CompatProto
                | CompatMethod::CenterProto
                | CompatMethod::AsymCenter
        )
    }

    fn structural_mode(self) -> Option<StructuralMode> {
        match self {
            CompatMethod::DualTuning | CompatMethod::Mutual => Some(StructuralMode::Mutual),
            CompatMethod::N2oOnly => Some(StructuralMode::NewToOld),
            CompatMethod::O2nOnly => Some(StructuralMode::OldToNew),
            _ => None,
        }
    }
}

impl fmt::Display for CompatMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CompatMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CompatMethod::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown compat method {s:?}")))
    }
}

/// Hidden widths and embedding dim of an MLP backbone.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct Arch {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl Arch {
    pub fn new(hidden: &[usize], embed_dim: usize) -> Self {
        Arch {
            hidden: hidden.to_vec(),
            embed_dim,
        }
    }

    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(&self.hidden);
        dims.push(self.embed_dim);
        dims
    }
}

impl Default for Arch {
    fn default() -> Self {
        Arch::new(&[128], 32)
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub batch_size: usize,
    /// Samples per class in identity-balanced batches.
    pub instances_per_class: usize,
    pub queue_capacity: usize,
    pub seed: u64,
    pub supervision: Supervision,
    pub compat_method: CompatMethod,
    pub weights: LossWeights,
    /// Weight on the single compatibility term of the non-Dual-Tuning baselines.
    pub compat_weight: f64,
    pub triplet_margin: f64,
    pub circle_margin: f64,
    pub circle_scale: f64,
    pub kl_temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 120,
            base_lr: 3.5e-4,
            decay_epochs: alloc::vec![40, 70],
            decay_factor: 0.1,
            batch_size: 64,
            instances_per_class: 4,
            queue_capacity: MemoryBank::DEFAULT_CAPACITY,
            seed: 0,
            supervision: Supervision::Softmax,
            compat_method: CompatMethod::None,
            weights: LossWeights::default(),
            compat_weight: 1.0,
            triplet_margin: crate::losses::DEFAULT_MARGIN,
            circle_margin: crate::losses::DEFAULT_CIRCLE_MARGIN,
            circle_scale: crate::losses::DEFAULT_CIRCLE_SCALE,
            kl_temperature: 1.0,
        }
    }
}

impl TrainConfig {
    /// Shortened schedule and queue for the synthetic benchmark.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 60,
            base_lr: 1e-3,
            decay_epochs: alloc::vec![20, 35],
            queue_capacity: 256,
            circle_scale: 16.0,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid("base_lr must be > 0"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::invalid("decay_factor must lie in (0, 1)"));
        }
        if self.batch_size == 0 || self.instances_per_class == 0 || self.queue_capacity == 0 {
            return Err(Error::invalid(
                "batch_size, instances_per_class and queue_capacity must be > 0",
            ));
        }
        self.weights.validate()?;
        for (name, v) in [
            ("compat_weight", self.compat_weight),
            ("triplet_margin", self.triplet_margin),
            ("circle_margin", self.circle_margin),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.circle_scale > 0.0 && self.kl_temperature > 0.0) {
            return Err(Error::invalid(
                "circle_scale and kl_temperature must be > 0",
            ));
        }
        Ok(())
    }

    fn needs_identity_batches(&self) -> bool {
        self.supervision.uses_triplet() || self.compat_method == CompatMethod::AsymTriplet
    }

    fn sampler(&self, class_count: usize) -> Sampler {
        if self.needs_identity_batches() {
            let k = self.instances_per_class;
            let p = (self.batch_size / k).clamp(2, class_count.max(2));
            Sampler::IdentityBalanced {
                p: p.min(class_count),
                k,
            }
        } else {
            Sampler::Shuffled {
                batch_size: self.batch_size,
            }
        }
    }
}

/// `base_lr · decay_factor^(number of decay epochs ≤ epoch)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let n = cfg.decay_epochs.iter().filter(|&&e| e <= epoch).count();
    cfg.base_lr * libm::pow(cfg.decay_factor, n as f64)
}

/// Adam moments for an ordered parameter list.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over `params`, which must come in the same
/// order on every call.
pub fn adam_step(params: &mut [&mut Parameter], state: &mut AdamState, lr: f64) -> Result<()> {
    if state.m.is_empty() {
        state.m = params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} moment slots for {} parameters",
                state.m.len(),
                params.len()
            ),
        ));
    }
    for (p, m) in params.iter().zip(&state.m) {
        if p.value.shape() != m.shape() || p.grad.shape() != m.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("parameter {:?} vs moment {:?}", p.value.shape(), m.shape()),
            ));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - libm::pow(AdamState::BETA1, t);
    let c2 = 1.0 - libm::pow(AdamState::BETA2, t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let g = p.grad.data().to_vec();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (k, w) in p.value.data_mut().iter_mut().enumerate() {
            md[k] = AdamState::BETA1 * md[k] + (1.0 - AdamState::BETA1) * g[k];
            vd[k] = AdamState::BETA2 * vd[k] + (1.0 - AdamState::BETA2) * g[k] * g[k];
            let mhat = md[k] / c1;
            let vhat = vd[k] / c2;
            *w -= lr * mhat / (libm::sqrt(vhat) + AdamState::EPS);
        }
    }
    Ok(())
}

/// Per-epoch means of the loss components.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub batches: usize,
    pub total: f64,
    pub supervision: f64,
    pub proto: f64,
    pub stru: f64,
    pub compat: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
}

/// Metadata recorded alongside a trained model.
pub fn checkpoint_meta(
    cfg: &TrainConfig,
    classes: &[usize],
    split: impl Into<String>,
) -> CheckpointMeta {
    CheckpointMeta {
        seed: cfg.seed,
        supervision: cfg.supervision.name().to_string(),
        compat_method: cfg.compat_method.name().to_string(),
        split: split.into(),
        classes: classes.to_vec(),
    }
}

/// Fresh backbone (and head, if the supervision uses one) for `classes`.
pub fn init_model(
    input_dim: usize,
    arch: &Arch,
    classes: &[usize],
    supervision: Supervision,
    seed: u64,
) -> Result<Model> {
    let backbone = EmbeddingBackbone::init(
        &arch.layer_dims(input_dim),
        derive_seed(seed, STREAM_BACKBONE),
    )?;
    let head = if supervision.has_head() {
        Some(ClassifierHead::init(
            arch.embed_dim,
            classes,
            supervision == Supervision::Circle,
            derive_seed(seed, STREAM_HEAD),
        )?)
    } else {
        None
    };
    Ok(Model { backbone, head })
}

pub fn train_independent(train: &TrainSet, arch: &Arch, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.compat_method != CompatMethod::None {
        return Err(Error::invalid(format!(
            "independent training with compat_method {}",
            cfg.compat_method
        )));
    }
    run(train, arch, cfg, None)
}

/// Trains a new model against a frozen `old` model. The old model is only
/// read; its features over `train` and its class centers are computed once.
pub fn train_compatible(
    old: &Model,
    train: &TrainSet,
    arch: &Arch,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    run(train, arch, cfg, Some(old))
}

/// `φ1` independent on the first fraction of classes, then each later model
/// compatible to its immediate predecessor on a growing class prefix.
pub fn train_sequential(
    ds: &LabeledDataset,
    fractions: &[f64],
    archs: &[Arch],
    cfg: &TrainConfig,
) -> Result<Vec<TrainOutcome>> {
    if fractions.is_empty() || fractions.len() != archs.len() {
        return Err(Error::invalid("need one architecture per stage"));
    }
    if fractions.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid("stage fractions must increase"));
    }
    let mut out: Vec<TrainOutcome> = Vec::with_capacity(fractions.len());
    for (stage, (&f, arch)) in fractions.iter().zip(archs).enumerate() {
        let classes = class_split(ds.class_count(), f, cfg.seed)?.old_classes;
        let train = TrainSet::from_dataset(ds, &classes)?;
        let mut stage_cfg = cfg.clone();
        stage_cfg.seed = derive_seed(cfg.seed, 0x5e9 + stage as u64);
        let outcome = match out.last() {
            None => {
                stage_cfg.compat_method = CompatMethod::None;
                train_independent(&train, arch, &stage_cfg)?
            }
            Some(prev) => train_compatible(&prev.model, &train, arch, &stage_cfg)?,
        };
        out.push(outcome);
    }
    Ok(out)
}

/// Frozen predecessor plus everything precomputed from it.
struct OldContext {
    model: Model,
    features: Tensor,
    centers: Option<PrototypeSet>,
    probs: Option<Tensor>,
}

fn inapplicable(method: CompatMethod, reason: &str) -> Error {
    Error::Inapplicable {
        method: method.name().to_string(),
        reason: reason.to_string(),
    }
}

fn prepare_old(
    old: &Model,
    train: &TrainSet,
    arch: &Arch,
    cfg: &TrainConfig,
) -> Result<OldContext> {
    let method = cfg.compat_method;
    let needs_old_head = matches!(
        method,
        CompatMethod::Bct
            | CompatMethod::Kl
            | CompatMethod::N2oOnly
            | CompatMethod::O2nOnly
            | CompatMethod::Mutual
    );
    if needs_old_head && old.head.is_none() {
        return Err(inapplicable(method, "old model has no classifier head"));
    }
    let stru_active = method.structural_mode().is_some() && old.head.is_some();
    let needs_new_head = stru_active
        && matches!(
            method.structural_mode(),
            Some(StructuralMode::Mutual | StructuralMode::OldToNew)
        );
    if needs_new_head && !cfg.supervision.has_head() {
        return Err(inapplicable(method, "new model has no classifier head"));
    }
    if method == CompatMethod::L2 && old.backbone.embed_dim() != arch.embed_dim {
        return Err(inapplicable(method, "embedding dims differ"));
    }
    if old.backbone.input_dim() != train.features.cols() {
        return Err(Error::shape(
            "train_compatible",
            format!(
                "old model input {} vs data {}",
                old.backbone.input_dim(),
                train.features.cols()
            ),
        ));
    }
    let mut model = old.clone();
    model.freeze();
    let features = model.embed(&train.features)?;
    let centers = if method.uses_old_centers() {
        Some(class_means(
            &features,
            &train.labels,
            &train.classes,
            PrototypeKind::OldCenters,
        )?)
    } else {
        None
    };
    let probs = match (&model.head, method) {
        (Some(h), CompatMethod::Kl) => {
            Some(softened_probs(&h.logits(&features)?, cfg.kl_temperature))
        }
        _ => None,
    };
    Ok(OldContext {
        model,
        features,
        centers,
        probs,
    })
}

#[derive(Default)]
struct Terms {
    supervision: f64,
    proto: f64,
    stru: f64,
    compat: f64,
}

fn run(
    train: &TrainSet,
    arch: &Arch,
    cfg: &TrainConfig,
    old: Option<&Model>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let method = cfg.compat_method;
    let old = match (old, method) {
        (_, CompatMethod::None) => None,
        (None, _) => return Err(inapplicable(method, "no old model given")),
        (Some(m), _) => Some(prepare_old(m, train, arch, cfg)?),
    };

    let mut model = init_model(
        train.features.cols(),
        arch,
        &train.classes,
        cfg.supervision,
        cfg.seed,
    )?;
    let mut adam = AdamState::new();
    let mut memory = MemoryBank::new(cfg.queue_capacity)?;
    let mut mix_rng = rng_for(cfg.seed, STREAM_MIX);
    let sampler = cfg.sampler(train.classes.len());
    let batch_seed = derive_seed(cfg.seed, STREAM_BATCHES);
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let batches = iterate_batches(&train.labels, sampler, batch_seed, epoch)?;
        let mut entry = EpochLog {
            epoch,
            lr,
            ..EpochLog::default()
        };
        for idx in &batches {
            let (x, labels) = train.batch(idx)?;
            let targets: Vec<usize> = labels
                .iter()
                .map(|&l| {
                    train
                        .column_of(l)
                        .expect("batch labels come from the train set")
                })
                .collect();

            let mut tape = Tape::new();
            let nb = model.backbone.bind(&mut tape);
            let nh_bound = model.head.as_ref().map(|h| h.bind(&mut tape));
            let xv = tape.constant(x);
            let emb = model.backbone.forward(&mut tape, &nb, xv)?;

            let new_head = model
                .head
                .as_ref()
                .zip(nh_bound.as_ref())
                .map(|(head, bound)| BoundHead { head, bound });
            let sup = supervision_loss(&mut tape, cfg, emb, &labels, &targets, new_head)?;
            let mut terms = Terms {
                supervision: tape.value(sup).item().unwrap_or(0.0),
                ..Terms::default()
            };
            let total = match &old {
                None => sup,
                Some(ctx) => {
                    let old_feats = ctx.features.select_rows(idx)?;
                    compat_loss(
                        &mut tape,
                        cfg,
                        ctx,
                        Batch {
                            emb,
                            labels: &labels,
                            idx,
                            old_feats,
                        },
                        new_head,
                        sup,
                        &memory,
                        &mut mix_rng,
                        &mut terms,
                    )?
                }
            };

            let value = tape.value(total).item().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            let grads = tape.backward(total)?;
            model.backbone.accumulate_grads(&nb, &grads);
            if let (Some(h), Some(b)) = (model.head.as_mut(), nh_bound.as_ref()) {
                h.accumulate_grads(b, &grads);
            }
            adam_step(&mut model.parameters_mut(), &mut adam, lr)?;
            model.zero_grad();
            if method.uses_memory() {
                memory.enqueue(tape.value(emb), &labels)?;
            }

            entry.batches += 1;
            entry.total += value;
            entry.supervision += terms.supervision;
            entry.proto += terms.proto;
            entry.stru += terms.stru;
            entry.compat += terms.compat;
        }
        let n = entry.batches.max(1) as f64;
        entry.total /= n;
        entry.supervision /= n;
        entry.proto /= n;
        entry.stru /= n;
        entry.compat /= n;
        log.push(entry);
    }
    Ok(TrainOutcome { model, log })
}

fn supervision_loss(
    tape: &mut Tape,
    cfg: &TrainConfig,
    emb: Var,
    labels: &[usize],
    targets: &[usize],
    head: Option<BoundHead<'_>>,
) -> Result<Var> {
    let logits = match head {
        Some(h) => Some(h.head.forward(tape, h.bound, emb)?),
        None => None,
    };
    let need_logits = || Error::invalid("supervision needs a classifier head");
    match cfg.supervision {
        Supervision::Softmax => cross_entropy(tape, logits.ok_or_else(need_logits)?, targets),
        Supervision::Triplet => triplet_loss(tape, emb, labels, cfg.triplet_margin),
        Supervision::SoftmaxTriplet => {
            let ce = cross_entropy(tape, logits.ok_or_else(need_logits)?, targets)?;
            let tri = triplet_loss(tape, emb, labels, cfg.triplet_margin)?;
            tape.add(ce, tri)
        }
        Supervision::Circle => circle_loss(
            tape,
            logits.ok_or_else(need_logits)?,
            targets,
            cfg.circle_margin,
            cfg.circle_scale,
        ),
    }
}

struct Batch<'a> {
    emb: Var,
    labels: &'a [usize],
    idx: &'a [usize],
    old_feats: Tensor,
}

#[allow(clippy::too_many_arguments)]
fn compat_loss<R: rand::Rng>(
    tape: &mut Tape,
    cfg: &TrainConfig,
    ctx: &OldContext,
    batch: Batch<'_>,
    new_head: Option<BoundHead<'_>>,
    sup: Var,
    memory: &MemoryBank,
    rng: &mut R,
    terms: &mut Terms,
) -> Result<Var> {
    let method = cfg.compat_method;
    let w = &cfg.weights;
    let Batch {
        emb,
        labels,
        idx,
        old_feats,
    } = batch;
    let old_bound = ctx.model.head.as_ref().map(|h| (h, h.bind(tape)));
    let old_head = old_bound
        .as_ref()
        .map(|(h, b)| BoundHead { head: h, bound: b });

    let single = |tape: &mut Tape, term: Var, terms: &mut Terms| -> Result<Var> {
        terms.compat = tape.value(term).item().unwrap_or(0.0);
        let scaled = tape.scale(term, cfg.compat_weight);
        tape.add(sup, scaled)
    };

    match method {
        CompatMethod::None => Ok(sup),
        CompatMethod::Bct => {
            let t = bct_loss(tape, emb, labels, old_head)?;
            single(tape, t, terms)
        }
        CompatMethod::L2 => {
            let o = tape.constant(old_feats);
            let t = l2_compat_loss(tape, emb, o)?;
            single(tape, t, terms)
        }
        CompatMethod::Kl => {
            let h =
                old_head.ok_or_else(|| inapplicable(method, "old model has no classifier head"))?;
            let probs = ctx
                .probs
                .as_ref()
                .expect("prepared for kl")
                .select_rows(idx)?;
            let logits = h.head.forward(tape, h.bound, emb)?;
            let t = kl_distill_loss(tape, logits, &probs, cfg.kl_temperature)?;
            single(tape, t, terms)
        }
        CompatMethod::AsymTriplet => {
            let o = tape.constant(old_feats);
            let t = asymmetric_triplet_loss(tape, emb, o, labels, labels, cfg.triplet_margin)?;
            single(tape, t, terms)
        }
        CompatMethod::AsymCenter => {
            let centers = ctx.centers.as_ref().expect("prepared for asym-center");
            let t = asymmetric_center_loss(tape, emb, labels, centers, cfg.triplet_margin)?;
            single(tape, t, terms)
        }
        CompatMethod::DualTuning
        | CompatMethod::CenterProto
        | CompatMethod::CompatProto
        | CompatMethod::Mutual
        | CompatMethod::N2oOnly
        | CompatMethod::O2nOnly => {
            let proto = match method {
                CompatMethod::CenterProto => {
                    let centers = ctx.centers.as_ref().expect("prepared centers");
                    Some(prototype_loss(tape, emb, labels, centers, w.temperature)?)
                }
                CompatMethod::DualTuning | CompatMethod::CompatProto => {
                    let centers = ctx.centers.as_ref().expect("prepared centers");
                    let mixed = mix_prototypes(centers, &memory.prototypes(), w.rho, rng)?;
                    Some(prototype_loss(tape, emb, labels, &mixed, w.temperature)?)
                }
                _ => None,
            };
            let stru = match (method.structural_mode(), old_head) {
                (Some(mode), Some(_)) => {
                    let new_head = new_head
                        .ok_or_else(|| inapplicable(method, "new model has no classifier head"))?;
                    let o = tape.constant(old_feats);
                    Some(structural_reg(
                        tape, mode, emb, o, labels, new_head, old_head,
                    )?)
                }
                (Some(_), None) if method != CompatMethod::DualTuning => {
                    return Err(Error::StructuralRegUnavailable);
                }
                _ => None,
            };
            terms.proto = proto.map_or(0.0, |p| tape.value(p).item().unwrap_or(0.0));
            terms.stru = stru.map_or(0.0, |s| tape.value(s).item().unwrap_or(0.0));
            let proto = match proto {
                Some(p) => p,
                None => {
                    // Zero-weight placeholder keeps the combination order fixed.
                    tape.scalar(0.0)
                }
            };
            let proto_weights = if method.uses_old_centers() {
                *w
            } else {
                LossWeights { proto: 0.0, ..*w }
            };
            dual_tuning_loss(
                tape,
                &proto_weights,
                DualTuningTerms {
                    proto,
                    stru,
                    supervision: sup,
                },
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use alloc::vec;

    fn small_set(seed: u64) -> (LabeledDataset, TrainSet) {
        let ds = generate_synthetic(&SyntheticSpec {
            class_count: 6,
            samples_per_class: 12,
            input_dim: 8,
            seed,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let ts = TrainSet::from_dataset(&ds, &[0, 1, 2, 3, 4, 5]).unwrap();
        (ds, ts)
    }

    fn quick(method: CompatMethod) -> TrainConfig {
        TrainConfig {
            epochs: 3,
            base_lr: 1e-3,
            decay_epochs: vec![2],
            batch_size: 16,
            queue_capacity: 32,
            compat_method: method,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, &c), 3.5e-4);
        assert!((lr_at(39, &c) - 3.5e-4).abs() < 1e-18);
        assert!((lr_at(40, &c) - 3.5e-5).abs() < 1e-18);
        assert!((lr_at(119, &c) - 3.5e-6).abs() < 1e-18);
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        for g in [0.5, -3.0, 1e-3] {
            let mut p = Parameter::new(Tensor::scalar(1.0));
            p.grad = Tensor::scalar(g);
            let mut st = AdamState::new();
            adam_step(&mut [&mut p], &mut st, 0.1).unwrap();
            let expect = 1.0 - 0.1 * g / (g.abs() + 1e-8);
            assert!((p.value.item().unwrap() - expect).abs() < 1e-15);
            assert_eq!(st.step(), 1);
        }
        let mut p = Parameter::new(Tensor::from_rows(&[[1.0, -2.0]]).unwrap());
        let mut st = AdamState::new();
        for _ in 0..50 {
            adam_step(&mut [&mut p], &mut st, 0.1).unwrap();
        }
        assert_eq!(p.value.data(), &[1.0, -2.0]);
        let mut q = Parameter::new(Tensor::zeros(&[3]));
        assert!(adam_step(&mut [&mut p, &mut q], &mut st, 0.1).is_err());
    }

    #[test]
    fn config_validation_and_names() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            epochs: 0,
            ..Default::default()
        }
        .validate()
        .is_ok());
        assert!(TrainConfig {
            decay_factor: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            base_lr: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        for m in CompatMethod::ALL {
            assert_eq!(m.name().parse::<CompatMethod>().unwrap(), m);
        }
        for s in Supervision::ALL {
            assert_eq!(s.name().parse::<Supervision>().unwrap(), s);
        }
        assert_eq!(
            "softmax+triplet".parse::<Supervision>().unwrap(),
            Supervision::SoftmaxTriplet
        );
        assert!("bogus".parse::<CompatMethod>().is_err());
    }

    #[test]
    fn zero_epochs_is_rejected_but_init_matches() {
        let (_, ts) = small_set(1);
        let cfg = quick(CompatMethod::None);
        let init = init_model(
            8,
            &Arch::new(&[10], 4),
            &ts.classes,
            cfg.supervision,
            cfg.seed,
        )
        .unwrap();
        let again = init_model(
            8,
            &Arch::new(&[10], 4),
            &ts.classes,
            cfg.supervision,
            cfg.seed,
        )
        .unwrap();
        assert_eq!(init, again);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let (_, ts) = small_set(2);
        let cfg = TrainConfig {
            epochs: 15,
            ..quick(CompatMethod::None)
        };
        let arch = Arch::new(&[16], 6);
        let a = train_independent(&ts, &arch, &cfg).unwrap();
        let b = train_independent(&ts, &arch, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.log.last().unwrap().total < a.log[0].total);
        assert!(a.log.iter().all(|e| e.total.is_finite()));
    }

    #[test]
    fn none_matches_independent_and_old_is_untouched() {
        let (_, ts) = small_set(3);
        let arch = Arch::new(&[32], 5);
        let old = train_independent(&ts, &arch, &quick(CompatMethod::None))
            .unwrap()
            .model;
        let sum = old.checksum();
        let cfg = TrainConfig {
            seed: 77,
            ..quick(CompatMethod::None)
        };
        let a = train_independent(&ts, &arch, &cfg).unwrap();
        let b = train_compatible(&old, &ts, &arch, &cfg).unwrap();
        assert_eq!(a, b);
        for m in CompatMethod::ALL {
            let r = train_compatible(&old, &ts, &arch, &quick(m));
            assert!(r.is_ok(), "{m}: {r:?}");
            assert!(r.unwrap().log.iter().all(|e| e.total.is_finite()));
        }
        assert_eq!(old.checksum(), sum);
    }

    #[test]
    fn headless_old_model_is_inapplicable_for_head_methods() {
        let (_, ts) = small_set(4);
        let arch = Arch::new(&[32], 5);
        let old_cfg = TrainConfig {
            supervision: Supervision::Triplet,
            ..quick(CompatMethod::None)
        };
        let old = train_independent(&ts, &arch, &old_cfg).unwrap().model;
        assert!(old.head.is_none());
        for m in [
            CompatMethod::Bct,
            CompatMethod::Kl,
            CompatMethod::N2oOnly,
            CompatMethod::Mutual,
        ] {
            assert!(matches!(
                train_compatible(&old, &ts, &arch, &quick(m)),
                Err(Error::Inapplicable { .. })
            ));
        }
        assert!(train_compatible(&old, &ts, &arch, &quick(CompatMethod::DualTuning)).is_ok());
        let l2 = train_compatible(&old, &ts, &Arch::new(&[32], 7), &quick(CompatMethod::L2));
        assert!(matches!(l2, Err(Error::Inapplicable { .. })));
    }

    #[test]
    fn every_supervision_trains() {
        let (_, ts) = small_set(5);
        let arch = Arch::new(&[32], 5);
        for s in Supervision::ALL {
            let cfg = TrainConfig {
                supervision: s,
                ..quick(CompatMethod::None)
            };
            let out = train_independent(&ts, &arch, &cfg).unwrap();
            assert_eq!(out.model.head.is_some(), s.has_head());
        }
    }

    #[test]
    fn sequential_chain_shapes() {
        let (ds, _) = small_set(6);
        let arch = vec![Arch::new(&[32], 5); 3];
        let outs = train_sequential(
            &ds,
            &[0.34, 0.5, 1.0],
            &arch,
            &quick(CompatMethod::DualTuning),
        )
        .unwrap();
        let sizes: Vec<usize> = outs
            .iter()
            .map(|o| o.model.head.as_ref().unwrap().classes().len())
            .collect();
        assert_eq!(sizes, vec![2, 3, 6]);
        assert!(
            train_sequential(&ds, &[0.5, 0.5], &arch[..2], &quick(CompatMethod::None)).is_err()
        );
    }
}
