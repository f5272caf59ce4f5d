//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero if any fails.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use dualtune_core::data::EvalMode;
use dualtune_core::diffcore::check_gradients;
use dualtune_core::eval::{
    center_replacement_test, chance_map_for, compatibility_violation_rate, cross_test, evaluate,
    extract, mixed_gallery_test, oracle, self_test, zero_pad_align, Audit,
};
use dualtune_core::losses::{
    asymmetric_center_loss, asymmetric_triplet_loss, circle_loss, cross_entropy, dual_tuning_loss,
    kl_distill_loss, l2_compat_loss, mix_prototypes, prototype_loss, softened_probs,
    structural_reg, triplet_loss, BoundHead, DualTuningTerms, LossWeights, MemoryBank,
    PrototypeKind, PrototypeSet, StructuralMode,
};
use dualtune_core::model::{ClassifierHead, Model};
use dualtune_core::scenario::{
    sequential_chain, Benchmark, Prepared, CHANCE_PERMUTATIONS, MIXED_FRACTIONS,
};
use dualtune_core::train::{train_compatible, CompatMethod};
use dualtune_core::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
const GRAD_TOL: f64 = 1e-6;
const GRAD_INSTANCES: u64 = 20;
const ORACLE_INSTANCES: u64 = 200;
const AUDIT_BUDGET: usize = 10_000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn random_protos(
    rng: &mut ChaCha8Rng,
    classes: usize,
    dim: usize,
    kind: PrototypeKind,
) -> PrototypeSet {
    let m = random_matrix(rng, classes, dim);
    let protos: BTreeMap<usize, Vec<f64>> = (0..classes).map(|c| (c, m.row(c).to_vec())).collect();
    PrototypeSet::new(kind, protos).unwrap()
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Every loss as a function of its differentiable inputs, on one seeded instance.
fn loss_instances(seed: u64) -> Vec<(&'static str, Build, Vec<Tensor>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xacc0 + seed);
    let n = 6;
    let labels = vec![0, 1, 2, 3, 1, 2];
    let emb = random_matrix(&mut rng, n, 3);
    let old_feat = random_matrix(&mut rng, n, 3);
    let centers = random_protos(&mut rng, 4, 3, PrototypeKind::OldCenters);
    let mut bank = MemoryBank::new(8).unwrap();
    bank.enqueue(&random_matrix(&mut rng, 6, 3), &[0, 1, 1, 3, 0, 3])
        .unwrap();
    let mixed = mix_prototypes(&centers, &bank.prototypes(), 0.5, &mut rng).unwrap();
    let mut old_head = ClassifierHead::init(3, &[0, 1], false, seed).unwrap();
    old_head.freeze();
    let new_head = ClassifierHead::init(3, &[0, 1, 2, 3], false, seed + 1).unwrap();
    let old_probs = softened_probs(&random_matrix(&mut rng, n, 4), 2.0);
    let cos = random_matrix(&mut rng, 4, 5)
        .data()
        .iter()
        .map(|v| 0.9 * v)
        .collect::<Vec<_>>();
    let cos = Tensor::matrix(4, 5, cos).unwrap();
    let gallery = random_matrix(&mut rng, n, 4);
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
        move |t: &mut Tape, e: Var| -> Result<Var> {
            let nb = nh.bind(t);
            let ob = oh.bind(t);
            let of = t.constant(of.clone());
            structural_reg(
                t,
                StructuralMode::Mutual,
                e,
                of,
                &l,
                BoundHead {
                    head: &nh,
                    bound: &nb,
                },
                Some(BoundHead {
                    head: &oh,
                    bound: &ob,
                }),
            )
        }
    };
    let structural_c = structural.clone();

    let mut out: Vec<(&'static str, Build, Vec<Tensor>)> = Vec::new();
    {
        let (p, l) = (centers.clone(), labels.clone());
        out.push((
            "prototype/centers",
            Box::new(move |t, v| prototype_loss(t, v[0], &l, &p, 0.5)),
            vec![emb.clone()],
        ));
    }
    {
        let (p, l) = (mixed.clone(), labels.clone());
        out.push((
            "prototype/mixed",
            Box::new(move |t, v| prototype_loss(t, v[0], &l, &p, 0.5)),
            vec![emb.clone()],
        ));
    }
    {
        let l = labels.clone();
        out.push((
            "cross-entropy",
            Box::new(move |t, v| cross_entropy(t, v[0], &l)),
            vec![emb.pad_cols(4).unwrap()],
        ));
    }
    out.push((
        "structural",
        Box::new(move |t, v| structural(t, v[0])),
        vec![emb.clone()],
    ));
    {
        let (p, l, nh) = (mixed.clone(), labels.clone(), new_head.clone());
        out.push((
            "combined",
            Box::new(move |t, v| {
                let proto = prototype_loss(t, v[0], &l, &p, weights.temperature)?;
                let stru = structural_c(t, v[0])?;
                let nb = nh.bind(t);
                let logits = nh.forward(t, &nb, v[0])?;
                let supervision = cross_entropy(t, logits, &l)?;
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
            vec![emb.clone()],
        ));
    }
    out.push((
        "l2",
        Box::new(|t, v| l2_compat_loss(t, v[0], v[1])),
        vec![emb.clone(), old_feat.clone()],
    ));
    out.push((
        "kl",
        Box::new(move |t, v| kl_distill_loss(t, v[0], &old_probs, 2.0)),
        vec![random_matrix(&mut rng, n, 4)],
    ));
    {
        let l = labels.clone();
        out.push((
            "asymmetric-triplet",
            Box::new(move |t, v| asymmetric_triplet_loss(t, v[0], v[1], &l, &l, 1.0)),
            vec![emb.clone(), gallery],
        ));
    }
    {
        let (p, l) = (centers.clone(), labels.clone());
        out.push((
            "asymmetric-center",
            Box::new(move |t, v| asymmetric_center_loss(t, v[0], &l, &p, 1.0)),
            vec![emb.clone()],
        ));
    }
    out.push((
        "batch-hard-triplet",
        Box::new(|t, v| triplet_loss(t, v[0], &[0, 1, 2, 0, 1, 2], 1.0)),
        vec![emb.clone()],
    ));
    out.push((
        "circle",
        Box::new(|t, v| circle_loss(t, v[0], &[0, 4, 2, 2], 0.25, 4.0)),
        vec![cos],
    ));
    out
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut worst: BTreeMap<&'static str, f64> = BTreeMap::new();
    let mut errors = Vec::new();
    for seed in 0..GRAD_INSTANCES {
        for (name, build, inputs) in loss_instances(seed) {
            match check_gradients(|t, v| build(t, v), &inputs) {
                Ok(rep) => {
                    let w = worst.entry(name).or_insert(0.0);
                    *w = w.max(rep.max_rel_error);
                }
                Err(e) => errors.push(format!("{name} seed {seed}: {e}")),
            }
        }
    }
    let elapsed = start.elapsed();
    let max = worst.values().copied().fold(0.0, f64::max);
    let pass = errors.is_empty() && worst.len() == 11 && max <= GRAD_TOL && within(elapsed, 60);
    let losses: Vec<String> = worst.iter().map(|(k, v)| format!("{k}={v:.1e}")).collect();
    outcome(
        pass,
        format!(
            "{} losses x {GRAD_INSTANCES} seeds, max rel err {max:.2e}; {}{}",
            worst.len(),
            losses.join(" "),
            if errors.is_empty() {
                String::new()
            } else {
                format!("; errors: {}", errors.join(", "))
            }
        ),
    )
}

fn criterion_metric_oracle() -> Outcome {
    let start = Instant::now();
    let ks = [1, 3, 5];
    let mut mismatches = 0;
    for seed in 0..ORACLE_INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(0x0ac1e + seed);
        let gn = rng.random_range(1..=20);
        let qn = rng.random_range(1..=8);
        let dim = rng.random_range(1..=4);
        let classes = rng.random_range(1..=5);
        // Coarse grid values so that distance ties occur.
        let mut grid = |r: usize| {
            let data = (0..r * dim)
                .map(|_| rng.random_range(-2i32..=2) as f64 * 0.5)
                .collect();
            Tensor::matrix(r, dim, data).unwrap()
        };
        let q = grid(qn);
        let g = grid(gn);
        let ql: Vec<usize> = (0..qn).map(|_| rng.random_range(0..classes)).collect();
        let gl: Vec<usize> = (0..gn).map(|_| rng.random_range(0..classes)).collect();
        let got = evaluate(&q, &ql, &g, &gl, &ks, None).unwrap();
        let (map, topk, valid, excluded) = oracle::metrics(&q, &ql, &g, &gl, &ks);
        let same = got.map.to_bits() == map.to_bits()
            && got
                .top_k
                .iter()
                .zip(&topk)
                .all(|(a, b)| a.to_bits() == b.to_bits())
            && got.num_queries == valid
            && got.num_excluded == excluded;
        if !same {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        mismatches == 0 && within(elapsed, 10),
        format!(
            "{ORACLE_INSTANCES} instances, {mismatches} mismatches, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

/// Models trained once per seed and shared by the trend criteria.
struct SeedRun {
    seed: u64,
    old: Model,
    old_self: f64,
    independent: Model,
    dual: Model,
    n2o: Model,
    proto_only: Model,
    asym_triplet: Model,
    times: BTreeMap<&'static str, Duration>,
}

fn train_seed(bench: &Benchmark, p: &Prepared, seed: u64) -> SeedRun {
    let mut times = BTreeMap::new();
    let t = Instant::now();
    let old = bench.train_old(p, seed).unwrap().model;
    times.insert("old", t.elapsed());
    let mut train = |name: &'static str, m: CompatMethod| {
        let t = Instant::now();
        let model = bench.train_new(p, &old, m, seed).unwrap().model;
        times.insert(name, t.elapsed());
        model
    };
    let independent = train("independent", CompatMethod::None);
    let dual = train("dual", CompatMethod::DualTuning);
    let n2o = train("n2o", CompatMethod::N2oOnly);
    let proto_only = train("proto", CompatMethod::CompatProto);
    let asym_triplet = train("asym-triplet", CompatMethod::AsymTriplet);
    let old_self = self_test(&old.backbone, &p.test, &p.eval).unwrap().map;
    SeedRun {
        seed,
        old,
        old_self,
        independent,
        dual,
        n2o,
        proto_only,
        asym_triplet,
        times,
    }
}

impl SeedRun {
    fn cost(&self, names: &[&str]) -> Duration {
        names.iter().map(|n| self.times[n]).sum()
    }
}

fn cross(p: &Prepared, new: &Model, old: &Model) -> f64 {
    cross_test(&new.backbone, &old.backbone, &p.test, &p.eval)
        .unwrap()
        .map
}

fn criterion_incompatibility(p: &Prepared, runs: &[SeedRun]) -> Outcome {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    let mut cost = Duration::ZERO;
    for r in runs {
        let x = cross(p, &r.independent, &r.old);
        let chance = chance_map_for(
            &r.independent.backbone,
            &r.old.backbone,
            &p.test,
            &p.eval,
            CHANCE_PERMUTATIONS,
            r.seed,
        )
        .unwrap();
        pass &= x <= 2.0 * chance;
        parts.push(format!(
            "seed {}: cross {x:.3} vs 2x chance {:.3}",
            r.seed,
            2.0 * chance
        ));
        cost += r.cost(&["old", "independent"]);
    }
    let elapsed = cost + start.elapsed();
    outcome(
        pass && within(elapsed, 300),
        format!("{}; {:.1}s", parts.join(", "), elapsed.as_secs_f64()),
    )
}

fn criterion_compatibility(p: &Prepared, runs: &[SeedRun]) -> Outcome {
    let start = Instant::now();
    let r = &runs[0];
    let x = cross(p, &r.dual, &r.old);
    let s = self_test(&r.dual.backbone, &p.test, &p.eval).unwrap().map;
    let ind = self_test(&r.independent.backbone, &p.test, &p.eval)
        .unwrap()
        .map;

    // The pipeline figure is checked against the definitional metric once.
    let feats = |m: &Model, idx: &[usize]| {
        extract(&m.backbone, &p.test.features().select_rows(idx).unwrap()).unwrap()
    };
    let labels = |idx: &[usize]| idx.iter().map(|&i| p.test.labels()[i]).collect::<Vec<_>>();
    let (q, g) = zero_pad_align(
        &feats(&r.dual, &p.eval.queries),
        &feats(&r.old, &p.eval.gallery),
    )
    .unwrap();
    assert_eq!(p.eval.mode, EvalMode::HeldOut);
    let (oracle_map, ..) = oracle::metrics(
        &q,
        &labels(&p.eval.queries),
        &g,
        &labels(&p.eval.gallery),
        &[1, 5],
    );
    let oracle_ok = oracle_map.to_bits() == x.to_bits();

    let elapsed = r.cost(&["old", "independent", "dual"]) + start.elapsed();
    let pass = x >= r.old_self && s >= 0.95 * ind && oracle_ok && within(elapsed, 600);
    outcome(
        pass,
        format!(
            "cross {x:.3} vs old self {:.3}; self {s:.3} vs 0.95 x independent {:.3}; oracle {}; {:.1}s",
            r.old_self,
            0.95 * ind,
            if oracle_ok { "agrees" } else { "disagrees" },
            elapsed.as_secs_f64()
        ),
    )
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn criterion_ablation(p: &Prepared, runs: &[SeedRun]) -> Outcome {
    let dual: Vec<f64> = runs.iter().map(|r| cross(p, &r.dual, &r.old)).collect();
    let mut pass = true;
    let mut parts = vec![format!("dual-tuning {}", fmt_list(&dual))];
    for (name, pick) in [
        ("n2o-only", (|r: &SeedRun| &r.n2o) as fn(&SeedRun) -> &Model),
        ("prototype-only", |r: &SeedRun| &r.proto_only),
    ] {
        let other: Vec<f64> = runs.iter().map(|r| cross(p, pick(r), &r.old)).collect();
        let margins: Vec<f64> = dual.iter().zip(&other).map(|(a, b)| a - b).collect();
        let tol = mean_std(&dual).1.max(mean_std(&other).1);
        let (mean_margin, _) = mean_std(&margins);
        pass &= mean_margin >= -tol;
        parts.push(format!(
            "{name} {} margin {mean_margin:+.3} tol {tol:.3}",
            fmt_list(&other)
        ));
    }
    outcome(pass, parts.join("; "))
}

fn fmt_list(v: &[f64]) -> String {
    let s: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", s.join(" "))
}

fn criterion_mixed_gallery(p: &Prepared, runs: &[SeedRun]) -> Outcome {
    let min_map = |m: &Model, old: &Model, seed: u64| {
        mixed_gallery_test(
            &m.backbone,
            &old.backbone,
            &p.test,
            &p.eval,
            &MIXED_FRACTIONS,
            seed,
        )
        .unwrap()
        .iter()
        .map(|r| r.map)
        .fold(f64::INFINITY, f64::min)
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for r in runs {
        let d = min_map(&r.dual, &r.old, r.seed);
        let a = min_map(&r.asym_triplet, &r.old, r.seed);
        pass &= d > a;
        parts.push(format!(
            "seed {}: min {d:.3} vs asym-triplet {a:.3}",
            r.seed
        ));
    }
    outcome(pass, parts.join(", "))
}

fn criterion_sequential(bench: &Benchmark, p: &Prepared) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let chain = sequential_chain(bench, p, CompatMethod::DualTuning, seed).unwrap();
        let (phi1, phi3) = (&chain[0].model.backbone, &chain[2].model.backbone);
        let x = cross_test(phi3, phi1, &p.test, &p.eval).unwrap().map;
        let chance =
            chance_map_for(phi3, phi1, &p.test, &p.eval, CHANCE_PERMUTATIONS, seed).unwrap();
        pass &= x >= 5.0 * chance;
        parts.push(format!(
            "seed {seed}: cross(phi3, phi1) {x:.3} vs 5x chance {:.3}",
            5.0 * chance
        ));
    }
    outcome(pass, parts.join(", "))
}

fn criterion_center_replacement() -> Outcome {
    let bench = Benchmark::noisy();
    let p = bench.prepare().unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let old = bench.train_old(&p, seed).unwrap().model;
        let (raw, center) = center_replacement_test(&old.backbone, &p.test, &p.eval).unwrap();
        pass &= center.map > raw.map;
        parts.push(format!(
            "seed {seed}: center {:.3} vs raw {:.3}",
            center.map, raw.map
        ));
    }
    outcome(pass, parts.join(", "))
}

fn criterion_invariants(bench: &Benchmark, p: &Prepared, runs: &[SeedRun]) -> Outcome {
    let start = Instant::now();
    let r = &runs[0];
    let mut failed = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failed.push(name.to_string());
        }
    };

    let mut old = r.old.clone();
    old.freeze();
    let before = old.checksum();
    let cfg = bench.new_config(CompatMethod::DualTuning, r.seed);
    let again = train_compatible(&old, &p.new_set, &bench.new_arch, &cfg).unwrap();
    check("old-parameter freeze", old.checksum() == before);
    check(
        "full-run determinism",
        again.model.checksum() == r.dual.checksum() && again.model == r.dual,
    );
    let again_old = bench.train_old(p, r.seed).unwrap();
    check("old-run determinism", again_old.model == r.old);

    let mut bank = MemoryBank::new(3).unwrap();
    let rows = Tensor::from_rows(&[[1.0], [2.0], [3.0], [4.0], [5.0]]).unwrap();
    bank.enqueue(&rows, &[0, 1, 0, 1, 0]).unwrap();
    let kept: Vec<(f64, usize)> = bank.entries().map(|(v, l)| (v[0], l)).collect();
    check(
        "memory-bank FIFO",
        kept == vec![(3.0, 0), (4.0, 1), (5.0, 0)],
    );

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random_matrix(&mut rng, 5, 3);
    let b = random_matrix(&mut rng, 4, 6);
    let (pa, pb) = zero_pad_align(&a, &b).unwrap();
    let dist_ok = (0..5).all(|i| {
        (0..5).all(|j| {
            let d =
                |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
            d(a.row(i), a.row(j)) == d(pa.row(i), pa.row(j))
        })
    });
    check(
        "zero-padding distance preservation",
        pa.cols() == 6 && pb == b && dist_ok,
    );

    let m = &r.dual.backbone;
    let same = |x: &dualtune_core::eval::RetrievalReport,
                y: &dualtune_core::eval::RetrievalReport| {
        x.map == y.map && x.top1 == y.top1 && x.top5 == y.top5 && x.num_queries == y.num_queries
    };
    let selfr = self_test(m, &p.test, &p.eval).unwrap();
    let crossr = cross_test(m, &r.old.backbone, &p.test, &p.eval).unwrap();
    check(
        "cross_test(m, m) == self_test(m)",
        same(&cross_test(m, m, &p.test, &p.eval).unwrap(), &selfr),
    );
    let mixed =
        mixed_gallery_test(m, &r.old.backbone, &p.test, &p.eval, &[0.0, 1.0], r.seed).unwrap();
    check(
        "fraction-0 degeneration",
        same(&mixed[0], &selfr) && mixed[0].gallery_old == 0,
    );
    check(
        "fraction-1 degeneration",
        same(&mixed[1], &crossr) && mixed[1].gallery_old == p.eval.gallery.len(),
    );

    let elapsed = start.elapsed();
    let pass = failed.is_empty() && within(elapsed, 120);
    outcome(
        pass,
        if failed.is_empty() {
            format!("9 invariants hold; {:.1}s", elapsed.as_secs_f64())
        } else {
            format!("violated: {}", failed.join(", "))
        },
    )
}

fn criterion_audit(p: &Prepared, runs: &[SeedRun]) -> Outcome {
    let rate = |new: &Model, old: &Model, seed: u64| {
        let nf = extract(&new.backbone, p.test.features()).unwrap();
        let of = extract(&old.backbone, p.test.features()).unwrap();
        compatibility_violation_rate(
            &nf,
            &of,
            p.test.labels(),
            Audit::Sampled {
                budget: AUDIT_BUDGET,
                seed,
            },
        )
        .unwrap()
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for r in runs {
        let d = rate(&r.dual, &r.old, r.seed);
        let i = rate(&r.independent, &r.old, r.seed);
        pass &= i >= 3.0 * d;
        parts.push(format!(
            "seed {}: dual-tuning {d:.4} vs independent {i:.4}",
            r.seed
        ));
    }
    outcome(pass, parts.join(", "))
}

fn main() {
    let bench = Benchmark::fixed();
    let p = bench.prepare().unwrap();

    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    results.push((1, "gradient correctness", criterion_gradients()));
    results.push((2, "metric oracle", criterion_metric_oracle()));

    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| train_seed(&bench, &p, s)).collect();
    results.push((
        3,
        "incompatibility baseline",
        criterion_incompatibility(&p, &runs),
    ));
    results.push((4, "compatibility trend", criterion_compatibility(&p, &runs)));
    results.push((5, "ablation ordering", criterion_ablation(&p, &runs)));
    results.push((
        6,
        "mixed-gallery robustness",
        criterion_mixed_gallery(&p, &runs),
    ));
    results.push((
        7,
        "sequential compatibility",
        criterion_sequential(&bench, &p),
    ));
    results.push((8, "center replacement", criterion_center_replacement()));
    results.push((
        9,
        "invariant suite",
        criterion_invariants(&bench, &p, &runs),
    ));
    results.push((10, "violation audit", criterion_audit(&p, &runs)));

    let mut failures = 0;
    for (n, name, o) in &results {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {name}: {tag} ({})", o.detail);
        failures += usize::from(!o.pass);
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
