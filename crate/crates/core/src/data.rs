//! Synthetic labeled features, class splits, query/gallery partitions and
//! batch sampling.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// splitmix64 of `seed` and a stream id; used to give every consumer of the
/// global seed its own independent generator.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    features: Tensor,
    labels: Vec<usize>,
    class_count: usize,
}

impl LabeledDataset {
    /// Checks that every class in `[0, class_count)` occurs and row counts agree.
    pub fn new(features: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if !features.is_matrix() || features.rows() != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!(
                    "{:?} features for {} labels",
                    features.shape(),
                    labels.len()
                ),
            ));
        }
        let mut seen = alloc::vec![false; class_count];
        for &l in &labels {
            if l >= class_count {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    classes: class_count,
                });
            }
            seen[l] = true;
        }
        if let Some(class) = seen.iter().position(|s| !s) {
            return Err(Error::EmptyClass { class });
        }
        Ok(LabeledDataset {
            features,
            labels,
            class_count,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        indices_of(&self.labels, class)
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = alloc::vec![0; self.class_count];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

fn indices_of(labels: &[usize], class: usize) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == class)
        .map(|(i, _)| i)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub cluster_center_scale: f64,
    pub within_class_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            class_count: 20,
            samples_per_class: 50,
            input_dim: 64,
            cluster_center_scale: 1.0,
            within_class_std: 0.5,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.samples_per_class == 0 || self.input_dim == 0 {
            return Err(Error::invalid(
                "class_count, samples_per_class and input_dim must be positive",
            ));
        }
        if !(self.within_class_std >= 0.0) || !self.within_class_std.is_finite() {
            return Err(Error::invalid(
                "within_class_std must be finite and non-negative",
            ));
        }
        if !(self.cluster_center_scale > 0.0) || !self.cluster_center_scale.is_finite() {
            return Err(Error::invalid(
                "cluster_center_scale must be finite and positive",
            ));
        }
        Ok(())
    }
}

/// Gaussian clusters around uniformly drawn class centers, samples ordered by class.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.input_dim;
    let s = spec.cluster_center_scale;
    let centers: Vec<f64> = (0..spec.class_count * d)
        .map(|_| rng.random_range(-s..=s))
        .collect();
    let n = spec.class_count * spec.samples_per_class;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for c in 0..spec.class_count {
        let center = &centers[c * d..(c + 1) * d];
        for _ in 0..spec.samples_per_class {
            for &m in center {
                let z: f64 = rng.sample(StandardNormal);
                data.push(m + spec.within_class_std * z);
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(Tensor::matrix(n, d, data)?, labels, spec.class_count)
}

/// Per class, moves `test_per_class` seeded-random samples into a test set.
pub fn train_test_split(
    ds: &LabeledDataset,
    test_per_class: usize,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let mut rng = rng_for(seed, 0x7e57);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..ds.class_count() {
        let mut idx = ds.class_indices(c);
        if idx.len() <= test_per_class {
            return Err(Error::invalid(format!(
                "class {c} has {} samples, cannot hold out {test_per_class}",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        test.extend_from_slice(&idx[..test_per_class]);
        train.extend_from_slice(&idx[test_per_class..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    let pick = |idx: &[usize]| -> Result<LabeledDataset> {
        let labels = idx.iter().map(|&i| ds.labels[i]).collect();
        LabeledDataset::new(ds.features.select_rows(idx)?, labels, ds.class_count)
    };
    Ok((pick(&train)?, pick(&test)?))
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassSplit {
    pub old_classes: Vec<usize>,
    pub new_classes: Vec<usize>,
}

impl ClassSplit {
    /// `old ∩ new`, sorted.
    pub fn overlap(&self) -> Vec<usize> {
        let new: BTreeSet<usize> = self.new_classes.iter().copied().collect();
        self.old_classes
            .iter()
            .copied()
            .filter(|c| new.contains(c))
            .collect()
    }
}

/// Takes `⌊old_fraction·C⌋` classes after a seeded shuffle as the old set; the
/// new set is every class.
pub fn split_old_new(ds: &LabeledDataset, old_fraction: f64, seed: u64) -> Result<ClassSplit> {
    class_split(ds.class_count(), old_fraction, seed)
}

pub fn class_split(class_count: usize, old_fraction: f64, seed: u64) -> Result<ClassSplit> {
    if !(old_fraction > 0.0 && old_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "old_fraction {old_fraction} outside (0, 1]"
        )));
    }
    let take = fraction_count(class_count, old_fraction);
    if take == 0 {
        return Err(Error::invalid("old class set would be empty"));
    }
    let mut ids: Vec<usize> = (0..class_count).collect();
    ids.shuffle(&mut rng_for(seed, 0xc1a55));
    let mut old_classes = ids[..take].to_vec();
    old_classes.sort_unstable();
    Ok(ClassSplit {
        old_classes,
        new_classes: (0..class_count).collect(),
    })
}

/// `⌊fraction · count⌋`, tolerant of decimal fractions that are not exact in binary.
pub fn fraction_count(count: usize, fraction: f64) -> usize {
    libm::floor(fraction * count as f64 + 1e-9) as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum EvalMode {
    HeldOut,
    LeaveOneOut,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalSplit {
    pub queries: Vec<usize>,
    pub gallery: Vec<usize>,
    pub mode: EvalMode,
}

impl EvalSplit {
    /// In leave-one-out mode the query's own sample is skipped in its gallery.
    pub fn excluded_gallery_item(&self, query_pos: usize) -> Option<usize> {
        match self.mode {
            EvalMode::HeldOut => None,
            EvalMode::LeaveOneOut => {
                let q = self.queries[query_pos];
                self.gallery.binary_search(&q).ok()
            }
        }
    }
}

pub fn make_eval_split(
    ds: &LabeledDataset,
    query_per_class: usize,
    mode: EvalMode,
    seed: u64,
) -> Result<EvalSplit> {
    match mode {
        EvalMode::LeaveOneOut => {
            if let Some(c) = ds.class_sizes().iter().position(|&s| s < 2) {
                return Err(Error::invalid(format!(
                    "class {c} needs at least two samples for leave-one-out"
                )));
            }
            let all: Vec<usize> = (0..ds.len()).collect();
            Ok(EvalSplit {
                queries: all.clone(),
                gallery: all,
                mode,
            })
        }
        EvalMode::HeldOut => {
            if query_per_class == 0 {
                return Err(Error::invalid("query_per_class must be positive"));
            }
            let mut rng = rng_for(seed, 0xe5a1);
            let mut queries = Vec::new();
            let mut gallery = Vec::new();
            for c in 0..ds.class_count() {
                let mut idx = ds.class_indices(c);
                if idx.len() <= query_per_class {
                    return Err(Error::invalid(format!(
                        "class {c} has {} samples, needs more than {query_per_class}",
                        idx.len()
                    )));
                }
                idx.shuffle(&mut rng);
                queries.extend_from_slice(&idx[..query_per_class]);
                gallery.extend_from_slice(&idx[query_per_class..]);
            }
            queries.sort_unstable();
            gallery.sort_unstable();
            Ok(EvalSplit {
                queries,
                gallery,
                mode,
            })
        }
    }
}

/// Rows of a dataset restricted to a class subset, with head columns
/// assigned in ascending class-id order.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSet {
    pub features: Tensor,
    /// Global class ids.
    pub labels: Vec<usize>,
    /// Sorted global class ids; position = classifier column.
    pub classes: Vec<usize>,
}

impl TrainSet {
    pub fn from_dataset(ds: &LabeledDataset, classes: &[usize]) -> Result<Self> {
        let mut classes = classes.to_vec();
        classes.sort_unstable();
        classes.dedup();
        let idx: Vec<usize> = (0..ds.len())
            .filter(|&i| classes.binary_search(&ds.labels[i]).is_ok())
            .collect();
        for &c in &classes {
            if !idx.iter().any(|&i| ds.labels[i] == c) {
                return Err(Error::EmptyClass { class: c });
            }
        }
        Ok(TrainSet {
            features: ds.features.select_rows(&idx)?,
            labels: idx.iter().map(|&i| ds.labels[i]).collect(),
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn column_of(&self, class: usize) -> Option<usize> {
        self.classes.binary_search(&class).ok()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        Ok((
            self.features.select_rows(idx)?,
            idx.iter().map(|&i| self.labels[i]).collect(),
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampler {
    Shuffled {
        batch_size: usize,
    },
    /// `p` distinct classes with `k` samples each per batch.
    IdentityBalanced {
        p: usize,
        k: usize,
    },
}

/// Index batches for one epoch, deterministic per `(seed, epoch)`.
pub fn iterate_batches(
    labels: &[usize],
    sampler: Sampler,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut rng = rng_for(derive_seed(seed, 0xba7c), epoch as u64);
    let n = labels.len();
    if n == 0 {
        return Err(Error::invalid("cannot batch an empty set"));
    }
    match sampler {
        Sampler::Shuffled { batch_size } => {
            if batch_size == 0 {
                return Err(Error::invalid("batch_size must be positive"));
            }
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            Ok(perm.chunks(batch_size).map(<[usize]>::to_vec).collect())
        }
        Sampler::IdentityBalanced { p, k } => {
            let classes: BTreeSet<usize> = labels.iter().copied().collect();
            let classes: Vec<usize> = classes.into_iter().collect();
            if p == 0 || k == 0 || p > classes.len() {
                return Err(Error::invalid(format!(
                    "P={p}, K={k} invalid for {} classes",
                    classes.len()
                )));
            }
            let mut pools: Vec<Vec<usize>> =
                classes.iter().map(|&c| indices_of(labels, c)).collect();
            if let Some(small) = pools.iter().map(Vec::len).min() {
                if k > small {
                    return Err(Error::invalid(format!(
                        "K={k} exceeds smallest class size {small}"
                    )));
                }
            }
            for pool in &mut pools {
                pool.shuffle(&mut rng);
            }
            let mut cursors = alloc::vec![0usize; pools.len()];
            let mut order: Vec<usize> = Vec::new();
            let count = (n / (p * k)).max(1);
            let mut batches = Vec::with_capacity(count);
            for _ in 0..count {
                let mut chosen: Vec<usize> = Vec::with_capacity(p);
                while chosen.len() < p {
                    if order.is_empty() {
                        order = (0..pools.len()).collect();
                        order.shuffle(&mut rng);
                    }
                    let c = order.pop().expect("refilled above");
                    if !chosen.contains(&c) {
                        chosen.push(c);
                    }
                }
                let mut batch = Vec::with_capacity(p * k);
                for c in chosen {
                    if cursors[c] + k > pools[c].len() {
                        pools[c].shuffle(&mut rng);
                        cursors[c] = 0;
                    }
                    batch.extend_from_slice(&pools[c][cursors[c]..cursors[c] + k]);
                    cursors[c] += k;
                }
                batches.push(batch);
            }
            Ok(batches)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn spec(c: usize, per: usize) -> SyntheticSpec {
        SyntheticSpec {
            class_count: c,
            samples_per_class: per,
            input_dim: 8,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn zero_noise_collapses_classes() {
        let ds = generate_synthetic(&SyntheticSpec {
            within_class_std: 0.0,
            ..spec(3, 4)
        })
        .unwrap();
        for c in 0..3 {
            let idx = ds.class_indices(c);
            for &i in &idx[1..] {
                assert_eq!(ds.features().row(i), ds.features().row(idx[0]));
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_counts_match() {
        let s = SyntheticSpec::default();
        let a = generate_synthetic(&s).unwrap();
        let b = generate_synthetic(&s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 1000);
        assert_eq!(a.input_dim(), 64);
        assert!(a.class_sizes().iter().all(|&k| k == 50));
        assert!(generate_synthetic(&spec(0, 5)).is_err());
    }

    #[test]
    fn class_means_converge_to_centers() {
        let s = SyntheticSpec {
            class_count: 2,
            samples_per_class: 500,
            input_dim: 4,
            within_class_std: 0.5,
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic(&s).unwrap();
        // Recreate the centers from the same stream: they are the first draws.
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        let centers: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let bound = 3.0 * 0.5 / libm::sqrt(500.0);
        for c in 0..2 {
            let idx = ds.class_indices(c);
            for j in 0..4 {
                let mean: f64 =
                    idx.iter().map(|&i| ds.features().get(i, j)).sum::<f64>() / idx.len() as f64;
                assert!((mean - centers[c * 4 + j]).abs() < bound);
            }
        }
    }

    #[test]
    fn old_new_split_sizes() {
        let ds = generate_synthetic(&spec(20, 2)).unwrap();
        let s = split_old_new(&ds, 0.5, 1).unwrap();
        assert_eq!(s.old_classes.len(), 10);
        assert_eq!(s.overlap().len(), 10);
        assert_eq!(s, split_old_new(&ds, 0.5, 1).unwrap());

        let full = split_old_new(&ds, 1.0, 1).unwrap();
        assert_eq!(full.old_classes, full.new_classes);
        assert_eq!(full.overlap(), full.new_classes);

        assert_eq!(class_split(4, 0.25, 9).unwrap().old_classes.len(), 1);
        assert!(class_split(4, 0.2, 9).is_err());
        assert!(class_split(4, 0.0, 9).is_err());
    }

    #[test]
    fn eval_split_counts() {
        let ds = generate_synthetic(&spec(20, 50)).unwrap();
        let e = make_eval_split(&ds, 1, EvalMode::HeldOut, 3).unwrap();
        assert_eq!(e.queries.len(), 20);
        assert_eq!(e.gallery.len(), 980);
        let gal: BTreeSet<usize> = e.gallery.iter().copied().collect();
        for &q in &e.queries {
            assert!(!gal.contains(&q));
            assert!(e.gallery.iter().any(|&g| ds.labels()[g] == ds.labels()[q]));
        }

        let small = generate_synthetic(&spec(3, 4)).unwrap();
        let loo = make_eval_split(&small, 0, EvalMode::LeaveOneOut, 3).unwrap();
        assert_eq!(loo.queries.len(), 12);
        for qp in 0..loo.queries.len() {
            let skip = loo.excluded_gallery_item(qp).unwrap();
            assert_eq!(loo.gallery[skip], loo.queries[qp]);
            assert_eq!(loo.gallery.len() - 1, 11);
        }
        assert!(make_eval_split(&small, 4, EvalMode::HeldOut, 3).is_err());
    }

    #[test]
    fn shuffled_batches_cover_epoch_once() {
        let labels: Vec<usize> = (0..37).map(|i| i % 5).collect();
        let b = iterate_batches(&labels, Sampler::Shuffled { batch_size: 8 }, 4, 2).unwrap();
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..37).collect::<Vec<_>>());
        assert_eq!(
            b,
            iterate_batches(&labels, Sampler::Shuffled { batch_size: 8 }, 4, 2).unwrap()
        );
        assert_ne!(
            b,
            iterate_batches(&labels, Sampler::Shuffled { batch_size: 8 }, 4, 3).unwrap()
        );

        let one = iterate_batches(&labels, Sampler::Shuffled { batch_size: 37 }, 4, 0).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].len(), 37);
    }

    #[test]
    fn pk_batches_are_balanced() {
        let labels: Vec<usize> = (0..60).map(|i| i % 6).collect();
        let s = Sampler::IdentityBalanced { p: 4, k: 4 };
        let batches = iterate_batches(&labels, s, 1, 0).unwrap();
        assert!(!batches.is_empty());
        for b in &batches {
            assert_eq!(b.len(), 16);
            let mut counts = [0; 6];
            for &i in b {
                counts[labels[i]] += 1;
            }
            assert_eq!(counts.iter().filter(|&&c| c == 4).count(), 4);
            assert_eq!(counts.iter().filter(|&&c| c == 0).count(), 2);
            let distinct: BTreeSet<usize> = b.iter().copied().collect();
            assert_eq!(distinct.len(), 16);
        }
        assert_eq!(batches, iterate_batches(&labels, s, 1, 0).unwrap());
        assert!(iterate_batches(&labels, Sampler::IdentityBalanced { p: 2, k: 11 }, 1, 0).is_err());
    }

    #[test]
    fn train_set_restricts_classes() {
        let ds = generate_synthetic(&spec(5, 3)).unwrap();
        let t = TrainSet::from_dataset(&ds, &[3, 1]).unwrap();
        assert_eq!(t.classes, vec![1, 3]);
        assert_eq!(t.len(), 6);
        assert_eq!(t.column_of(3), Some(1));
        assert_eq!(t.column_of(0), None);

        let (train, test) = train_test_split(&ds, 1, 0).unwrap();
        assert_eq!(train.len(), 10);
        assert_eq!(test.len(), 5);
        assert!(train_test_split(&ds, 3, 0).is_err());
    }
}
