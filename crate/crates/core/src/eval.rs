//! Retrieval metrics and the evaluation protocols: self-test, cross-test,
//! mixed galleries, the compatibility-criterion audit and center replacement.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{rng_for, EvalSplit, LabeledDataset};
use crate::diffcore::{distance_matrix, Tensor};
use crate::error::{Error, Result};
use crate::model::EmbeddingBackbone;

/// Exhaustive enumeration is used for the violation audit up to this many samples.
pub const EXACT_AUDIT_LIMIT: usize = 30;

/// Embeddings for `x`, without gradients.
pub fn extract(backbone: &EmbeddingBackbone, x: &Tensor) -> Result<Tensor> {
    backbone.embed(x)
}

/// Right-pads the narrower of two feature sets with zeros.
pub fn zero_pad_align(a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    let width = a.cols().max(b.cols());
    Ok((a.pad_cols(width)?, b.pad_cols(width)?))
}

/// Gallery positions sorted by ascending distance, ties by position.
pub fn rank_gallery(distances: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&i, &j| distances[i].total_cmp(&distances[j]).then(i.cmp(&j)));
    order
}

/// Full-ranking AP of a relevance list in rank order; `None` without positives.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &rel) in relevant.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Raw outcome of one ranking evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub map: f64,
    /// Top-K accuracy for each requested K, same order.
    pub top_k: Vec<f64>,
    pub num_queries: usize,
    /// Queries with no positive in their gallery.
    pub num_excluded: usize,
}

/// Ranks the gallery for every query by Euclidean distance and scores it.
///
/// `skip[q]`, when set, names a gallery position hidden from query `q`.
pub fn evaluate(
    queries: &Tensor,
    query_labels: &[usize],
    gallery: &Tensor,
    gallery_labels: &[usize],
    ks: &[usize],
    skip: Option<&[Option<usize>]>,
) -> Result<Evaluation> {
    if gallery_labels.is_empty() {
        return Err(Error::invalid("empty gallery"));
    }
    if queries.rows() != query_labels.len() || gallery.rows() != gallery_labels.len() {
        return Err(Error::shape("evaluate", "feature rows and labels differ"));
    }
    if queries.cols() != gallery.cols() {
        return Err(Error::shape(
            "evaluate",
            format!(
                "query dim {} vs gallery dim {}",
                queries.cols(),
                gallery.cols()
            ),
        ));
    }
    if let Some(s) = skip {
        if s.len() != query_labels.len() {
            return Err(Error::shape("evaluate", "skip list length"));
        }
    }
    let dist = distance_matrix(queries, gallery);
    let mut ap_sum = 0.0;
    let mut hits = vec![0usize; ks.len()];
    let mut valid = 0usize;
    let mut excluded = 0usize;
    for (q, &ql) in query_labels.iter().enumerate() {
        let hidden = skip.and_then(|s| s[q]);
        let relevant: Vec<bool> = rank_gallery(dist.row(q))
            .into_iter()
            .filter(|&g| Some(g) != hidden)
            .map(|g| gallery_labels[g] == ql)
            .collect();
        let Some(ap) = average_precision(&relevant) else {
            excluded += 1;
            continue;
        };
        valid += 1;
        ap_sum += ap;
        let first = relevant.iter().position(|&r| r).expect("has a positive");
        for (h, &k) in hits.iter_mut().zip(ks) {
            if first < k {
                *h += 1;
            }
        }
    }
    let denom = valid.max(1) as f64;
    Ok(Evaluation {
        map: if valid == 0 { 0.0 } else { ap_sum / denom },
        top_k: hits.iter().map(|&h| h as f64 / denom).collect(),
        num_queries: valid,
        num_excluded: excluded,
    })
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RetrievalReport {
    pub test_mode: String,
    pub map: f64,
    pub top1: f64,
    pub top5: f64,
    pub num_queries: usize,
    pub num_excluded: usize,
    pub gallery_size: usize,
    /// Gallery items embedded by the old model.
    pub gallery_old: usize,
    pub old_fraction: Option<f64>,
}

impl RetrievalReport {
    fn from_eval(mode: &str, e: Evaluation, gallery_size: usize, gallery_old: usize) -> Self {
        RetrievalReport {
            test_mode: mode.to_string(),
            map: e.map,
            top1: e.top_k[0],
            top5: e.top_k[1],
            num_queries: e.num_queries,
            num_excluded: e.num_excluded,
            gallery_size,
            gallery_old,
            old_fraction: None,
        }
    }
}

/// Query/gallery feature blocks of an evaluation split.
struct Views {
    query_x: Tensor,
    query_labels: Vec<usize>,
    gallery_x: Tensor,
    gallery_labels: Vec<usize>,
    skip: Vec<Option<usize>>,
}

fn views(data: &LabeledDataset, split: &EvalSplit) -> Result<Views> {
    let pick = |idx: &[usize]| -> Result<(Tensor, Vec<usize>)> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= data.len()) {
            return Err(Error::invalid(format!("split index {bad} outside dataset")));
        }
        Ok((
            data.features().select_rows(idx)?,
            idx.iter().map(|&i| data.labels()[i]).collect(),
        ))
    };
    let (query_x, query_labels) = pick(&split.queries)?;
    let (gallery_x, gallery_labels) = pick(&split.gallery)?;
    let skip = (0..split.queries.len())
        .map(|q| split.excluded_gallery_item(q))
        .collect();
    Ok(Views {
        query_x,
        query_labels,
        gallery_x,
        gallery_labels,
        skip,
    })
}

const KS: [usize; 2] = [1, 5];

fn report(
    mode: &str,
    v: &Views,
    q: &Tensor,
    g: &Tensor,
    gallery_old: usize,
) -> Result<RetrievalReport> {
    let (q, g) = zero_pad_align(q, g)?;
    let e = evaluate(
        &q,
        &v.query_labels,
        &g,
        &v.gallery_labels,
        &KS,
        Some(&v.skip),
    )?;
    Ok(RetrievalReport::from_eval(
        mode,
        e,
        v.gallery_labels.len(),
        gallery_old,
    ))
}

/// Queries and gallery from the same model.
pub fn self_test(
    model: &EmbeddingBackbone,
    data: &LabeledDataset,
    split: &EvalSplit,
) -> Result<RetrievalReport> {
    let v = views(data, split)?;
    let q = extract(model, &v.query_x)?;
    let g = extract(model, &v.gallery_x)?;
    report("self", &v, &q, &g, 0)
}

/// Queries from `new`, gallery from `old`, zero-padded to a common width.
pub fn cross_test(
    new: &EmbeddingBackbone,
    old: &EmbeddingBackbone,
    data: &LabeledDataset,
    split: &EvalSplit,
) -> Result<RetrievalReport> {
    let v = views(data, split)?;
    let q = extract(new, &v.query_x)?;
    let g = extract(old, &v.gallery_x)?;
    report("cross", &v, &q, &g, v.gallery_labels.len())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Extractor {
    Old,
    New,
}

/// Per-gallery-item extractor choice for a mixed gallery.
#[derive(Clone, Debug, PartialEq)]
pub struct GallerySpec {
    pub assignment: Vec<Extractor>,
    pub old_fraction: f64,
    pub seed: u64,
}

impl GallerySpec {
    /// One uniform draw per item, shared across fractions, so that galleries
    /// for increasing fractions are nested.
    pub fn draw(size: usize, old_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&old_fraction) {
            return Err(Error::invalid(format!(
                "old_fraction {old_fraction} outside [0, 1]"
            )));
        }
        let mut rng = rng_for(seed, 0x6a11);
        let assignment = (0..size)
            .map(|_| {
                if rng.random::<f64>() < old_fraction {
                    Extractor::Old
                } else {
                    Extractor::New
                }
            })
            .collect();
        Ok(GallerySpec {
            assignment,
            old_fraction,
            seed,
        })
    }

    pub fn old_count(&self) -> usize {
        self.assignment
            .iter()
            .filter(|&&e| e == Extractor::Old)
            .count()
    }
}

/// New-model queries against galleries whose items are embedded by the old
/// model with probability `old_fraction`, one report per fraction.
pub fn mixed_gallery_test(
    new: &EmbeddingBackbone,
    old: &EmbeddingBackbone,
    data: &LabeledDataset,
    split: &EvalSplit,
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<RetrievalReport>> {
    let v = views(data, split)?;
    let q = extract(new, &v.query_x)?;
    let g_new = extract(new, &v.gallery_x)?;
    let g_old = extract(old, &v.gallery_x)?;
    let width = g_new.cols().max(g_old.cols());
    let (g_new, g_old) = (g_new.pad_cols(width)?, g_old.pad_cols(width)?);
    fractions
        .iter()
        .map(|&f| {
            let spec = GallerySpec::draw(v.gallery_labels.len(), f, seed)?;
            let mut g = g_new.clone();
            for (i, e) in spec.assignment.iter().enumerate() {
                if *e == Extractor::Old {
                    g.row_mut(i).copy_from_slice(g_old.row(i));
                }
            }
            let mut r = report("mixed", &v, &q, &g, spec.old_count())?;
            r.old_fraction = Some(f);
            Ok(r)
        })
        .collect()
}

/// Raw-query report and a report whose queries are replaced by the mean
/// query feature of their class.
pub fn center_replacement_test(
    model: &EmbeddingBackbone,
    data: &LabeledDataset,
    split: &EvalSplit,
) -> Result<(RetrievalReport, RetrievalReport)> {
    let v = views(data, split)?;
    let q = extract(model, &v.query_x)?;
    let g = extract(model, &v.gallery_x)?;
    let raw = report("self", &v, &q, &g, 0)?;
    let centers = class_centers(&q, &v.query_labels)?;
    let mut cq = q.clone();
    for (i, l) in v.query_labels.iter().enumerate() {
        cq.row_mut(i).copy_from_slice(&centers[l]);
    }
    let center = report("center", &v, &cq, &g, 0)?;
    Ok((raw, center))
}

fn class_centers(x: &Tensor, labels: &[usize]) -> Result<BTreeMap<usize, Vec<f64>>> {
    let mut acc: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        let e = acc.entry(l).or_insert_with(|| (vec![0.0; x.cols()], 0));
        for (s, v) in e.0.iter_mut().zip(x.row(i)) {
            *s += v;
        }
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(c, (mut s, n))| {
            if n < 2 {
                return Err(Error::invalid(format!("class {c} has a single query")));
            }
            for v in &mut s {
                *v /= n as f64;
            }
            Ok((c, s))
        })
        .collect()
}

/// Mean mAP over `permutations` random relabelings of the gallery: the
/// retrieval score of features that carry no label information.
pub fn chance_map(
    queries: &Tensor,
    query_labels: &[usize],
    gallery: &Tensor,
    gallery_labels: &[usize],
    permutations: usize,
    seed: u64,
) -> Result<f64> {
    let (q, g) = zero_pad_align(queries, gallery)?;
    Ok(chance_evaluation(
        &q,
        query_labels,
        &g,
        gallery_labels,
        &[1],
        None,
        permutations,
        seed,
    )?
    .map)
}

/// Every metric averaged over gallery relabelings.
#[allow(clippy::too_many_arguments)]
fn chance_evaluation(
    q: &Tensor,
    query_labels: &[usize],
    g: &Tensor,
    gallery_labels: &[usize],
    ks: &[usize],
    skip: Option<&[Option<usize>]>,
    permutations: usize,
    seed: u64,
) -> Result<Evaluation> {
    if permutations == 0 {
        return Err(Error::invalid("permutations must be positive"));
    }
    let mut rng = rng_for(seed, 0xc4a2);
    let mut labels = gallery_labels.to_vec();
    let mut acc: Option<Evaluation> = None;
    for _ in 0..permutations {
        labels.shuffle(&mut rng);
        let e = evaluate(q, query_labels, g, &labels, ks, skip)?;
        acc = Some(match acc {
            None => e,
            Some(mut a) => {
                a.map += e.map;
                a.top_k.iter_mut().zip(&e.top_k).for_each(|(x, y)| *x += y);
                a
            }
        });
    }
    let mut a = acc.expect("at least one permutation");
    let n = permutations as f64;
    a.map /= n;
    a.top_k.iter_mut().for_each(|x| *x /= n);
    Ok(a)
}

/// Chance-level report for a cross-test of `new` against `old`: the same
/// features with gallery labels shuffled, averaged over `permutations`.
pub fn chance_test(
    new: &EmbeddingBackbone,
    old: &EmbeddingBackbone,
    data: &LabeledDataset,
    split: &EvalSplit,
    permutations: usize,
    seed: u64,
) -> Result<RetrievalReport> {
    let v = views(data, split)?;
    let q = extract(new, &v.query_x)?;
    let g = extract(old, &v.gallery_x)?;
    let (q, g) = zero_pad_align(&q, &g)?;
    let e = chance_evaluation(
        &q,
        &v.query_labels,
        &g,
        &v.gallery_labels,
        &KS,
        Some(&v.skip),
        permutations,
        seed,
    )?;
    Ok(RetrievalReport::from_eval(
        "chance",
        e,
        v.gallery_labels.len(),
        v.gallery_labels.len(),
    ))
}

/// mAP of [`chance_test`].
pub fn chance_map_for(
    new: &EmbeddingBackbone,
    old: &EmbeddingBackbone,
    data: &LabeledDataset,
    split: &EvalSplit,
    permutations: usize,
    seed: u64,
) -> Result<f64> {
    Ok(chance_test(new, old, data, split, permutations, seed)?.map)
}

/// How triplets are drawn for the violation audit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Audit {
    /// Seeded random triplets.
    Sampled { budget: usize, seed: u64 },
    /// Every `(a, p, n)` and both gallery extractors.
    Exact,
}

/// Fraction of triplets `(a, p, n)` with `y_a = y_p ≠ y_n`, `p ≠ a`, where the
/// new-model anchor is at least as close to the negative as to the positive.
/// Positive and negative share one gallery extractor per triplet, old or new.
pub fn compatibility_violation_rate(
    new_feats: &Tensor,
    old_feats: &Tensor,
    labels: &[usize],
    audit: Audit,
) -> Result<f64> {
    let n = labels.len();
    if new_feats.rows() != n || old_feats.rows() != n {
        return Err(Error::shape(
            "violation_rate",
            "feature rows and labels differ",
        ));
    }
    let (nf, of) = zero_pad_align(new_feats, old_feats)?;
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let anchors: Vec<usize> = (0..n)
        .filter(|&i| by_class[&labels[i]].len() >= 2)
        .collect();
    if anchors.is_empty() || by_class.len() < 2 {
        return Err(Error::invalid(
            "violation audit needs two classes and a class with two samples",
        ));
    }
    let d = |a: usize, g: &Tensor, j: usize| crate::diffcore::squared_distance(nf.row(a), g.row(j));
    match audit {
        Audit::Exact => {
            if n > EXACT_AUDIT_LIMIT {
                return Err(Error::invalid(format!(
                    "exact audit limited to {EXACT_AUDIT_LIMIT} samples"
                )));
            }
            let (mut bad, mut total) = (0u64, 0u64);
            for &a in &anchors {
                for &p in &by_class[&labels[a]] {
                    if p == a {
                        continue;
                    }
                    for neg in (0..n).filter(|&k| labels[k] != labels[a]) {
                        for g in [&nf, &of] {
                            total += 1;
                            if d(a, g, p) >= d(a, g, neg) {
                                bad += 1;
                            }
                        }
                    }
                }
            }
            Ok(bad as f64 / total as f64)
        }
        Audit::Sampled { budget, seed } => {
            if budget == 0 {
                return Err(Error::invalid("audit budget must be positive"));
            }
            let mut rng = rng_for(seed, 0xa0d1);
            let mut bad = 0usize;
            for _ in 0..budget {
                let a = anchors[rng.random_range(0..anchors.len())];
                let same = &by_class[&labels[a]];
                let p = loop {
                    let p = same[rng.random_range(0..same.len())];
                    if p != a {
                        break p;
                    }
                };
                let neg = loop {
                    let k = rng.random_range(0..n);
                    if labels[k] != labels[a] {
                        break k;
                    }
                };
                let g = if rng.random::<bool>() { &of } else { &nf };
                if d(a, g, p) >= d(a, g, neg) {
                    bad += 1;
                }
            }
            Ok(bad as f64 / budget as f64)
        }
    }
}

/// Definitional metrics for cross-checking [`evaluate`]: ranks come from
/// pairwise counting instead of sorting.
pub mod oracle {
    use alloc::vec::Vec;

    use crate::diffcore::{squared_distance, Tensor};

    /// 1-based rank of every gallery item: items strictly closer, or equally
    /// close with a lower index, come first.
    pub fn ranks(distances: &[f64]) -> Vec<usize> {
        (0..distances.len())
            .map(|j| {
                1 + (0..distances.len())
                    .filter(|&i| {
                        distances[i] < distances[j] || (distances[i] == distances[j] && i < j)
                    })
                    .count()
            })
            .collect()
    }

    /// `(mAP, top-K per K, valid queries, excluded queries)`.
    pub fn metrics(
        queries: &Tensor,
        query_labels: &[usize],
        gallery: &Tensor,
        gallery_labels: &[usize],
        ks: &[usize],
    ) -> (f64, Vec<f64>, usize, usize) {
        let mut ap_sum = 0.0;
        let mut hits = alloc::vec![0usize; ks.len()];
        let (mut valid, mut excluded) = (0usize, 0usize);
        for (q, &ql) in query_labels.iter().enumerate() {
            let dist: Vec<f64> = (0..gallery.rows())
                .map(|g| libm::sqrt(squared_distance(queries.row(q), gallery.row(g))))
                .collect();
            let r = ranks(&dist);
            let mut pos: Vec<usize> = (0..gallery.rows())
                .filter(|&g| gallery_labels[g] == ql)
                .map(|g| r[g])
                .collect();
            if pos.is_empty() {
                excluded += 1;
                continue;
            }
            pos.sort_unstable();
            // precision@rank at each positive
            let mut s = 0.0;
            for (i, &rank) in pos.iter().enumerate() {
                s += (i + 1) as f64 / rank as f64;
            }
            ap_sum += s / pos.len() as f64;
            valid += 1;
            for (h, &k) in hits.iter_mut().zip(ks) {
                if pos[0] <= k {
                    *h += 1;
                }
            }
        }
        let denom = valid.max(1) as f64;
        let map = if valid == 0 { 0.0 } else { ap_sum / denom };
        (
            map,
            hits.iter().map(|&h| h as f64 / denom).collect(),
            valid,
            excluded,
        )
    }
}
