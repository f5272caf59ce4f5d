//! Self-verification suites: gradient checks, the metric oracle and the
//! pipeline invariants.

use std::collections::BTreeMap;

use dualtune_core::diffcore::check_gradients;
use dualtune_core::eval::{
    cross_test, evaluate, mixed_gallery_test, oracle, self_test, zero_pad_align,
};
use dualtune_core::losses::{
    asymmetric_center_loss, asymmetric_triplet_loss, circle_loss, cross_entropy, dual_tuning_loss,
    kl_distill_loss, l2_compat_loss, mix_prototypes, prototype_loss, softened_probs,
    structural_reg, triplet_loss, BoundHead, DualTuningTerms, LossWeights, MemoryBank,
    PrototypeKind, PrototypeSet, StructuralMode,
};
use dualtune_core::model::ClassifierHead;
use dualtune_core::scenario::Benchmark;
use dualtune_core::train::{train_compatible, Arch, CompatMethod};
use dualtune_core::{Result as CoreResult, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub const GRAD_TOLERANCE: f64 = 1e-6;
pub const GRAD_SEEDS: u64 = 20;
pub const ORACLE_CASES: u64 = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Gradcheck,
    MetricOracle,
    Invariants,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Gradcheck, Suite::MetricOracle, Suite::Invariants];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Gradcheck => "gradcheck",
            Suite::MetricOracle => "metric-oracle",
            Suite::Invariants => "invariants",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn check(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.into(),
        passed,
        detail: detail.into(),
    }
}

pub fn run(suite: Suite, tamper: bool) -> SuiteReport {
    let checks = match suite {
        Suite::Gradcheck => gradcheck(tamper),
        Suite::MetricOracle => metric_oracle(),
        Suite::Invariants => invariants(),
    };
    SuiteReport { suite, checks }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor::matrix(rows, cols, data).expect("sized to fit")
}

type Loss = Box<dyn Fn(&mut Tape, &[Var]) -> CoreResult<Var>>;

struct Instance {
    name: &'static str,
    loss: Loss,
    inputs: Vec<Tensor>,
}

/// `2·stop_gradient(L) − L`: the value of `L` with its gradient negated.
fn sign_flipped(loss: Loss) -> Loss {
    Box::new(move |t, v| {
        let l = loss(t, v)?;
        let frozen = t.constant(t.value(l).clone());
        let twice = t.scale(frozen, 2.0);
        t.sub(twice, l)
    })
}

fn instances(seed: u64) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9c4e + seed);
    let labels = vec![0, 1, 2, 3, 1, 2];
    let emb = random_matrix(&mut rng, 6, 3);
    let old_feat = random_matrix(&mut rng, 6, 3);
    let cm = random_matrix(&mut rng, 4, 3);
    let centers: BTreeMap<usize, Vec<f64>> = (0..4).map(|c| (c, cm.row(c).to_vec())).collect();
    let centers = PrototypeSet::new(PrototypeKind::OldCenters, centers).expect("uniform dims");
    let mut bank = MemoryBank::new(8).expect("positive capacity");
    bank.enqueue(&random_matrix(&mut rng, 5, 3), &[0, 1, 3, 3, 1])
        .expect("matching rows");
    let mixed = mix_prototypes(&centers, &bank.prototypes(), 0.5, &mut rng).expect("valid rho");
    let mut old_head = ClassifierHead::init(3, &[0, 1], false, seed).expect("valid head");
    old_head.freeze();
    let new_head = ClassifierHead::init(3, &[0, 1, 2, 3], false, seed + 1).expect("valid head");
    let old_probs = softened_probs(&random_matrix(&mut rng, 6, 4), 2.0);
    let kl_logits = random_matrix(&mut rng, 6, 4);
    let gallery = random_matrix(&mut rng, 6, 4);
    let cos = Tensor::matrix(
        4,
        5,
        random_matrix(&mut rng, 4, 5)
            .data()
            .iter()
            .map(|v| 0.9 * v)
            .collect(),
    )
    .expect("sized to fit");
    let weights = LossWeights {
        proto: 0.7,
        stru: 1.3,
        ce: 0.4,
        temperature: 0.5,
        rho: 0.5,
    };

    let structural = {
        let (nh, oh, of, l) = (
            new_head.clone(),
            old_head.clone(),
            old_feat.clone(),
            labels.clone(),
        );
        move |t: &mut Tape, e: Var| {
            let nb = nh.bind(t);
            let ob = oh.bind(t);
            let of = t.constant(of.clone());
            let new = BoundHead {
                head: &nh,
                bound: &nb,
            };
            structural_reg(
                t,
                StructuralMode::Mutual,
                e,
                of,
                &l,
                new,
                Some(BoundHead {
                    head: &oh,
                    bound: &ob,
                }),
            )
        }
    };
    let structural_in_sum = structural.clone();
    let l = labels.clone();
    let (l1, l2, l3, l4, l5) = (l.clone(), l.clone(), l.clone(), l.clone(), l.clone());
    let (c1, c2, m1, m2) = (centers.clone(), centers, mixed.clone(), mixed);
    let nh = new_head;

    vec![
        Instance {
            name: "prototype (old centers)",
            loss: Box::new(move |t, v| prototype_loss(t, v[0], &l1, &c1, 0.5)),
            inputs: vec![emb.clone()],
        },
        Instance {
            name: "prototype (mixed)",
            loss: Box::new(move |t, v| prototype_loss(t, v[0], &l2, &m1, 0.5)),
            inputs: vec![emb.clone()],
        },
        Instance {
            name: "cross-entropy",
            loss: Box::new(move |t, v| cross_entropy(t, v[0], &l3)),
            inputs: vec![emb.pad_cols(4).expect("wider")],
        },
        Instance {
            name: "structural",
            loss: Box::new(move |t, v| structural(t, v[0])),
            inputs: vec![emb.clone()],
        },
        Instance {
            name: "combined",
            loss: Box::new(move |t, v| {
                let proto = prototype_loss(t, v[0], &l4, &m2, weights.temperature)?;
                let stru = structural_in_sum(t, v[0])?;
                let nb = nh.bind(t);
                let logits = nh.forward(t, &nb, v[0])?;
                let supervision = cross_entropy(t, logits, &l4)?;
                dual_tuning_loss(
                    t,
                    &weights,
                    DualTuningTerms {
                        proto,
                        stru: Some(stru),
                        supervision,
                    },
                )
            }),
            inputs: vec![emb.clone()],
        },
        Instance {
            name: "l2",
            loss: Box::new(|t, v| l2_compat_loss(t, v[0], v[1])),
            inputs: vec![emb.clone(), old_feat],
        },
        Instance {
            name: "kl",
            loss: Box::new(move |t, v| kl_distill_loss(t, v[0], &old_probs, 2.0)),
            inputs: vec![kl_logits],
        },
        Instance {
            name: "asymmetric triplet",
            loss: Box::new(move |t, v| asymmetric_triplet_loss(t, v[0], v[1], &l5, &l5, 1.0)),
            inputs: vec![emb.clone(), gallery],
        },
        Instance {
            name: "asymmetric center",
            loss: Box::new(move |t, v| asymmetric_center_loss(t, v[0], &l, &c2, 1.0)),
            inputs: vec![emb.clone()],
        },
        Instance {
            name: "batch-hard triplet",
            loss: Box::new(|t, v| triplet_loss(t, v[0], &[0, 1, 2, 0, 1, 2], 1.0)),
            inputs: vec![emb],
        },
        Instance {
            name: "circle",
            loss: Box::new(|t, v| circle_loss(t, v[0], &[0, 4, 2, 2], 0.25, 4.0)),
            inputs: vec![cos],
        },
    ]
}

/// Every loss against central differences on [`GRAD_SEEDS`] instances. With
/// `tamper`, the L2 loss gets its gradient sign flipped as a negative control.
pub fn gradcheck(tamper: bool) -> Vec<Check> {
    let mut worst: Vec<(&'static str, f64, Option<String>)> = Vec::new();
    for seed in 0..GRAD_SEEDS {
        for (i, mut inst) in instances(seed).into_iter().enumerate() {
            if tamper && inst.name == "l2" {
                inst.loss = sign_flipped(inst.loss);
            }
            if worst.len() <= i {
                worst.push((inst.name, 0.0, None));
            }
            let loss = &inst.loss;
            match check_gradients(|t, v| loss(t, v), &inst.inputs) {
                Ok(rep) => worst[i].1 = worst[i].1.max(rep.max_rel_error),
                Err(e) => worst[i].2 = Some(format!("seed {seed}: {e}")),
            }
        }
    }
    worst
        .into_iter()
        .map(|(name, err, failure)| match failure {
            Some(f) => check(name, false, f),
            None => check(
                name,
                err <= GRAD_TOLERANCE,
                format!("max relative error {err:.2e} over {GRAD_SEEDS} seeds"),
            ),
        })
        .collect()
}

/// `evaluate` against the definitional oracle on small random instances
/// with coarse values, so distance ties occur.
pub fn metric_oracle() -> Vec<Check> {
    let ks = [1, 3, 5];
    let mut mismatches = Vec::new();
    for seed in 0..ORACLE_CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(0x0eac + seed);
        let (qn, gn, dim, classes) = (
            rng.random_range(1..=8),
            rng.random_range(1..=20),
            rng.random_range(1..=4),
            rng.random_range(1..=5),
        );
        let mut grid = |r: usize| {
            let data = (0..r * dim)
                .map(|_| rng.random_range(-2i32..=2) as f64 * 0.5)
                .collect();
            Tensor::matrix(r, dim, data).expect("sized to fit")
        };
        let (q, g) = (grid(qn), grid(gn));
        let ql: Vec<usize> = (0..qn).map(|_| rng.random_range(0..classes)).collect();
        let gl: Vec<usize> = (0..gn).map(|_| rng.random_range(0..classes)).collect();
        let Ok(got) = evaluate(&q, &ql, &g, &gl, &ks, None) else {
            mismatches.push(seed);
            continue;
        };
        let (map, top_k, valid, excluded) = oracle::metrics(&q, &ql, &g, &gl, &ks);
        let same = got.map.to_bits() == map.to_bits()
            && got
                .top_k
                .iter()
                .zip(&top_k)
                .all(|(a, b)| a.to_bits() == b.to_bits())
            && (got.num_queries, got.num_excluded) == (valid, excluded);
        if !same {
            mismatches.push(seed);
        }
    }
    vec![check(
        "evaluate == oracle",
        mismatches.is_empty(),
        format!("{ORACLE_CASES} cases, mismatching seeds {mismatches:?}"),
    )]
}

/// A reduced benchmark for quick end-to-end invariant runs.
pub fn small_benchmark() -> Benchmark {
    let mut b = Benchmark::fixed();
    b.data.class_count = 6;
    b.data.samples_per_class = 24;
    b.data.input_dim = 12;
    b.test_per_class = 8;
    b.query_per_class = 3;
    b.old_arch = Arch::new(&[16], 8);
    b.new_arch = Arch::new(&[16], 8);
    for cfg in [&mut b.old_train, &mut b.new_train] {
        cfg.epochs = 4;
        cfg.batch_size = 16;
        cfg.queue_capacity = 32;
    }
    b
}

pub fn invariants() -> Vec<Check> {
    match pipeline_invariants() {
        Ok(c) => c,
        Err(e) => vec![check("pipeline", false, e.to_string())],
    }
}

fn pipeline_invariants() -> CoreResult<Vec<Check>> {
    let mut out = Vec::new();
    let b = small_benchmark();
    let p = b.prepare()?;
    let old = b.train_old(&p, 3)?.model;
    let mut frozen = old.clone();
    frozen.freeze();
    let before = frozen.checksum();
    let cfg = b.new_config(CompatMethod::DualTuning, 3);
    let first = train_compatible(&frozen, &p.new_set, &b.new_arch, &cfg)?;
    out.push(check(
        "old-parameter freeze",
        frozen.checksum() == before,
        format!("checksum {before:016x}"),
    ));
    let second = train_compatible(&frozen, &p.new_set, &b.new_arch, &cfg)?;
    out.push(check(
        "determinism per seed",
        first.model == second.model && first.log == second.log,
        format!("checksum {:016x}", first.model.checksum()),
    ));

    let mut bank = MemoryBank::new(3)?;
    bank.enqueue(
        &Tensor::matrix(5, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0])?,
        &[0, 1, 0, 1, 0],
    )?;
    let kept: Vec<f64> = bank.entries().map(|(v, _)| v[0]).collect();
    out.push(check(
        "memory-bank FIFO",
        kept == [3.0, 4.0, 5.0],
        format!("kept {kept:?}"),
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (a, g) = (random_matrix(&mut rng, 4, 3), random_matrix(&mut rng, 2, 5));
    let (pa, _) = zero_pad_align(&a, &g)?;
    let d = |m: &Tensor, i: usize, j: usize| {
        m.row(i)
            .iter()
            .zip(m.row(j))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
    };
    let kept = (0..4).all(|i| (0..4).all(|j| d(&a, i, j) == d(&pa, i, j)));
    out.push(check(
        "zero-padding distances",
        kept,
        "pairwise squared distances unchanged",
    ));

    let new = &first.model.backbone;
    let s = self_test(new, &p.test, &p.eval)?;
    let same = |x: &dualtune_core::eval::RetrievalReport,
                y: &dualtune_core::eval::RetrievalReport| {
        (x.map, x.top1, x.top5, x.num_queries) == (y.map, y.top1, y.top5, y.num_queries)
    };
    out.push(check(
        "cross_test(m, m) == self_test(m)",
        same(&cross_test(new, new, &p.test, &p.eval)?, &s),
        "",
    ));
    let c = cross_test(new, &old.backbone, &p.test, &p.eval)?;
    let mixed = mixed_gallery_test(new, &old.backbone, &p.test, &p.eval, &[0.0, 1.0], 3)?;
    out.push(check("fraction 0 == self", same(&mixed[0], &s), ""));
    out.push(check("fraction 1 == cross", same(&mixed[1], &c), ""));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass() {
        for suite in Suite::ALL {
            let r = run(suite, false);
            assert!(r.passed(), "{:?}", r);
        }
    }

    #[test]
    fn tampered_gradient_is_caught() {
        let r = run(Suite::Gradcheck, true);
        assert!(!r.passed());
        let failed: Vec<&str> = r
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        assert_eq!(failed, ["l2"]);
    }
}
