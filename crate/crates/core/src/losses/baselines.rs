//! Comparison objectives: feature regression, probability distillation and
//! the asymmetric (new anchor, old gallery) metric losses.

use alloc::format;
use alloc::vec::Vec;

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

use super::prototype::PrototypeSet;
use super::{batch_hard, Mining};

/// Mean squared Euclidean distance between paired rows. Undefined across
/// embedding widths.
pub fn l2_compat_loss(tape: &mut Tape, new_embeds: Var, old_embeds: Var) -> Result<Var> {
    let (a, b) = (tape.value(new_embeds), tape.value(old_embeds));
    if a.shape() != b.shape() {
        return Err(Error::Inapplicable {
            method: "l2".into(),
            reason: format!(
                "embedding shapes differ: {:?} vs {:?}",
                a.shape(),
                b.shape()
            ),
        });
    }
    let n = a.rows() as f64;
    let diff = tape.sub(new_embeds, old_embeds)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / n))
}

/// Temperature-softened `KL(old ‖ new)` averaged over rows and scaled by `T²`.
///
/// `old_probs` are already softened at `temperature`; `new_logits` are raw.
pub fn kl_distill_loss(
    tape: &mut Tape,
    new_logits: Var,
    old_probs: &Tensor,
    temperature: f64,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let nl = tape.value(new_logits);
    if nl.shape() != old_probs.shape() || !nl.is_matrix() {
        return Err(Error::shape(
            "kl_distill",
            format!("{:?} vs {:?}", nl.shape(), old_probs.shape()),
        ));
    }
    let mut neg_entropy = 0.0;
    for i in 0..old_probs.rows() {
        let row = old_probs.row(i);
        let total: f64 = row.iter().sum();
        if row.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDistribution { row: i });
        }
        neg_entropy += row
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * libm::log(p))
            .sum::<f64>();
    }
    let n = old_probs.rows() as f64;
    let soft = if temperature == 1.0 {
        new_logits
    } else {
        tape.scale(new_logits, 1.0 / temperature)
    };
    let log_q = tape.log_softmax(soft)?;
    let p = tape.constant(old_probs.clone());
    let cross = tape.mul(p, log_q)?;
    let cross = tape.sum(cross);
    let kl = tape.neg(cross);
    let kl = tape.add_scalar(kl, neg_entropy);
    Ok(tape.scale(kl, temperature * temperature / n))
}

/// Row-wise softmax of `logits / temperature`, for preparing `old_probs`.
pub fn softened_probs(logits: &Tensor, temperature: f64) -> Tensor {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp((*v - max) / temperature);
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// Batch-hard triplet with new-model anchors against old-model gallery
/// features: `mean(max(0, margin + d(a, p*) - d(a, n*)))`.
///
/// A sample's own old feature counts as a positive.
pub fn asymmetric_triplet_loss(
    tape: &mut Tape,
    anchors: Var,
    gallery: Var,
    anchor_labels: &[usize],
    gallery_labels: &[usize],
    margin: f64,
) -> Result<Var> {
    let width = tape.value(anchors).cols().max(tape.value(gallery).cols());
    let a = tape.pad_cols(anchors, width)?;
    let g = tape.pad_cols(gallery, width)?;
    let d = tape.euclidean_dist(a, g)?;
    let dist = tape.value(d).clone();
    let mut pos = Vec::with_capacity(anchor_labels.len());
    let mut neg = Vec::with_capacity(anchor_labels.len());
    for (i, &y) in anchor_labels.iter().enumerate() {
        let (p, n) = batch_hard(
            dist.row(i),
            i,
            |j| gallery_labels[j] == y,
            Mining::IncludeSelf,
        )?;
        pos.push((i, p));
        neg.push((i, n));
    }
    hinge(tape, d, pos, neg, margin)
}

/// Batch-hard triplet against old class centers: the positive is the own-class
/// prototype and the negative the nearest other-class prototype.
pub fn asymmetric_center_loss(
    tape: &mut Tape,
    embeddings: Var,
    labels: &[usize],
    prototypes: &PrototypeSet,
    margin: f64,
) -> Result<Var> {
    let classes = prototypes.classes();
    let width = tape.value(embeddings).cols().max(prototypes.dim());
    let f = tape.pad_cols(embeddings, width)?;
    let m = tape.constant(prototypes.matrix(width)?);
    let d = tape.euclidean_dist(f, m)?;
    let dist = tape.value(d).clone();
    let mut pos = Vec::with_capacity(labels.len());
    let mut neg = Vec::with_capacity(labels.len());
    for (i, &y) in labels.iter().enumerate() {
        let own = classes
            .binary_search(&y)
            .map_err(|_| Error::MissingPrototype { class: y })?;
        let (_, n) = batch_hard(dist.row(i), i, |j| j == own, Mining::IncludeSelf)?;
        pos.push((i, own));
        neg.push((i, n));
    }
    hinge(tape, d, pos, neg, margin)
}

/// `mean(relu(margin + d[pos] - d[neg]))` over gathered distance pairs.
pub(super) fn hinge(
    tape: &mut Tape,
    dist: Var,
    pos: Vec<(usize, usize)>,
    neg: Vec<(usize, usize)>,
    margin: f64,
) -> Result<Var> {
    let dp = tape.gather(dist, pos)?;
    let dn = tape.gather(dist, neg)?;
    let gap = tape.sub(dp, dn)?;
    let gap = tape.add_scalar(gap, margin);
    let h = tape.relu(gap);
    Ok(tape.mean(h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::check_gradients;
    use crate::diffcore::tests::random_matrix;
    use crate::losses::prototype::PrototypeKind;
    use alloc::collections::BTreeMap;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eval(build: impl Fn(&mut Tape) -> Result<Var>) -> Result<f64> {
        let mut t = Tape::new();
        let l = build(&mut t)?;
        Ok(t.value(l).item().unwrap())
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len().max(b.len());
        (0..n)
            .map(|k| {
                let x = a.get(k).copied().unwrap_or(0.0);
                let y = b.get(k).copied().unwrap_or(0.0);
                (x - y) * (x - y)
            })
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn l2_cases() {
        let a = Tensor::from_rows(&[[1.0, 2.0], [0.0, -1.0]]).unwrap();
        assert_eq!(
            eval(|t| {
                let (x, y) = (t.constant(a.clone()), t.constant(a.clone()));
                l2_compat_loss(t, x, y)
            })
            .unwrap(),
            0.0
        );
        let b = Tensor::from_rows(&[[1.0, 3.0], [-1.0, -1.0]]).unwrap();
        assert_eq!(
            eval(|t| {
                let (x, y) = (t.constant(a.clone()), t.constant(b.clone()));
                l2_compat_loss(t, x, y)
            })
            .unwrap(),
            1.0
        );
        let c = Tensor::from_rows(&[[1.0, 3.0, 0.0], [-1.0, -1.0, 0.0]]).unwrap();
        assert!(matches!(
            eval(|t| {
                let (x, y) = (t.constant(a.clone()), t.constant(c.clone()));
                l2_compat_loss(t, x, y)
            }),
            Err(Error::Inapplicable { .. })
        ));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x, y) = (random_matrix(&mut rng, 5, 3), random_matrix(&mut rng, 5, 3));
        let oracle: f64 = (0..5)
            .map(|i| dist(x.row(i), y.row(i)).powi(2))
            .sum::<f64>()
            / 5.0;
        let got = eval(|t| {
            let (u, v) = (t.constant(x.clone()), t.constant(y.clone()));
            l2_compat_loss(t, u, v)
        })
        .unwrap();
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn kl_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for seed in 0..10 {
            let _ = seed;
            let logits = random_matrix(&mut rng, 4, 5);
            let other = random_matrix(&mut rng, 4, 5);
            for temp in [1.0, 2.5] {
                let p = softened_probs(&logits, temp);
                let same = eval(|t| {
                    let l = t.constant(logits.clone());
                    kl_distill_loss(t, l, &p, temp)
                })
                .unwrap();
                assert!(same.abs() < 1e-12);

                let got = eval(|t| {
                    let l = t.constant(other.clone());
                    kl_distill_loss(t, l, &p, temp)
                })
                .unwrap();
                let q = softened_probs(&other, temp);
                let mut oracle = 0.0;
                for i in 0..4 {
                    for j in 0..5 {
                        let (pp, qq) = (p.get(i, j), q.get(i, j));
                        oracle += pp * (pp.ln() - qq.ln());
                    }
                }
                oracle *= temp * temp / 4.0;
                assert!(got >= 0.0);
                assert!((got - oracle).abs() < 1e-12);
            }
        }
        let bad = Tensor::from_rows(&[[0.5, 0.6]]).unwrap();
        assert!(matches!(
            eval(|t| {
                let l = t.constant(Tensor::from_rows(&[[0.0, 0.0]]).unwrap());
                kl_distill_loss(t, l, &bad, 1.0)
            }),
            Err(Error::InvalidDistribution { row: 0 })
        ));
    }

    /// Exhaustive search for the hardest old positive/negative per anchor.
    fn asym_triplet_oracle(a: &Tensor, g: &Tensor, la: &[usize], lg: &[usize], margin: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..a.rows() {
            let mut hp = f64::NEG_INFINITY;
            let mut hn = f64::INFINITY;
            for j in 0..g.rows() {
                let d = dist(a.row(i), g.row(j));
                if lg[j] == la[i] {
                    hp = hp.max(d);
                } else {
                    hn = hn.min(d);
                }
            }
            total += (margin + hp - hn).max(0.0);
        }
        total / a.rows() as f64
    }

    #[test]
    fn asymmetric_triplet_cases() {
        // d(a,p) = 0, d(a,n) = 2·margin → 0
        let a = Tensor::from_rows(&[[0.0, 0.0]]).unwrap();
        let g = Tensor::from_rows(&[[0.0, 0.0], [0.6, 0.0]]).unwrap();
        let v = eval(|t| {
            let (x, y) = (t.constant(a.clone()), t.constant(g.clone()));
            asymmetric_triplet_loss(t, x, y, &[0], &[0, 1], 0.3)
        })
        .unwrap();
        assert_eq!(v, 0.0);
        // d(a,p) = d(a,n) → margin
        let g = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let v = eval(|t| {
            let (x, y) = (t.constant(a.clone()), t.constant(g.clone()));
            asymmetric_triplet_loss(t, x, y, &[0], &[0, 1], 0.3)
        })
        .unwrap();
        assert!((v - 0.3).abs() < 1e-15);
        assert!(matches!(
            eval(|t| {
                let (x, y) = (t.constant(a.clone()), t.constant(g.clone()));
                asymmetric_triplet_loss(t, x, y, &[0], &[0, 0], 0.3)
            }),
            Err(Error::MissingPair {
                kind: "negative",
                ..
            })
        ));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let a = random_matrix(&mut rng, 6, 3);
            let g = random_matrix(&mut rng, 6, 4);
            let labels = [0, 1, 2, 0, 1, 2];
            let got = eval(|t| {
                let (x, y) = (t.constant(a.clone()), t.constant(g.clone()));
                asymmetric_triplet_loss(t, x, y, &labels, &labels, 0.3)
            })
            .unwrap();
            let oracle = asym_triplet_oracle(&a, &g, &labels, &labels, 0.3);
            assert!((got - oracle).abs() < 1e-12);
        }
    }

    fn protos(rows: &[&[f64]]) -> PrototypeSet {
        let map: BTreeMap<usize, Vec<f64>> = rows
            .iter()
            .enumerate()
            .map(|(c, r)| (c, r.to_vec()))
            .collect();
        PrototypeSet::new(PrototypeKind::OldCenters, map).unwrap()
    }

    #[test]
    fn asymmetric_center_cases() {
        let single = protos(&[&[0.0, 0.0]]);
        let f = Tensor::from_rows(&[[0.0, 0.0]]).unwrap();
        assert!(eval(|t| {
            let x = t.constant(f.clone());
            asymmetric_center_loss(t, x, &[0], &single, 0.3)
        })
        .is_err());

        let two = protos(&[&[0.0, 0.0], &[0.0, 0.6]]);
        let v = eval(|t| {
            let x = t.constant(f.clone());
            asymmetric_center_loss(t, x, &[0], &two, 0.3)
        })
        .unwrap();
        assert_eq!(v, 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let pm = random_matrix(&mut rng, 4, 3);
            let p = protos(&[pm.row(0), pm.row(1), pm.row(2), pm.row(3)]);
            let e = random_matrix(&mut rng, 5, 3);
            let labels = [0, 3, 1, 1, 2];
            let got = eval(|t| {
                let x = t.constant(e.clone());
                asymmetric_center_loss(t, x, &labels, &p, 0.3)
            })
            .unwrap();
            let mut oracle = 0.0;
            for i in 0..5 {
                let dp = dist(e.row(i), pm.row(labels[i]));
                let dn = (0..4)
                    .filter(|&c| c != labels[i])
                    .map(|c| dist(e.row(i), pm.row(c)))
                    .fold(f64::INFINITY, f64::min);
                oracle += (0.3 + dp - dn).max(0.0);
            }
            assert!((got - oracle / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn baseline_gradchecks() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let a = random_matrix(&mut rng, 5, 3);
            let old = random_matrix(&mut rng, 5, 3);
            let logits = random_matrix(&mut rng, 5, 4);
            let p = softened_probs(&random_matrix(&mut rng, 5, 4), 2.0);
            let pm = random_matrix(&mut rng, 3, 4);
            let ps = protos(&[pm.row(0), pm.row(1), pm.row(2)]);
            let labels = [0, 1, 2, 0, 1];

            let cases: Vec<(&str, f64)> = vec![
                (
                    "l2",
                    check_gradients(
                        |t, v| {
                            let o = t.constant(old.clone());
                            l2_compat_loss(t, v[0], o)
                        },
                        std::slice::from_ref(&a),
                    )
                    .unwrap()
                    .max_rel_error,
                ),
                (
                    "kl",
                    check_gradients(
                        |t, v| kl_distill_loss(t, v[0], &p, 2.0),
                        std::slice::from_ref(&logits),
                    )
                    .unwrap()
                    .max_rel_error,
                ),
                (
                    "asym_triplet",
                    check_gradients(
                        |t, v| {
                            let o = t.constant(old.clone());
                            asymmetric_triplet_loss(t, v[0], o, &labels, &labels, 0.5)
                        },
                        std::slice::from_ref(&a),
                    )
                    .unwrap()
                    .max_rel_error,
                ),
                (
                    "asym_center",
                    check_gradients(
                        |t, v| asymmetric_center_loss(t, v[0], &labels, &ps, 1.0),
                        std::slice::from_ref(&a),
                    )
                    .unwrap()
                    .max_rel_error,
                ),
            ];
            for (name, err) in cases {
                assert!(err <= 1e-6, "{name} seed {seed}: {err}");
            }
        }
    }
}
