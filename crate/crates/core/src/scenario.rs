//! The fixed synthetic benchmark and the experiment grids run on it.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{
    derive_seed, generate_synthetic, make_eval_split, split_old_new, train_test_split, ClassSplit,
    EvalMode, EvalSplit, LabeledDataset, SyntheticSpec, TrainSet,
};
use crate::error::Result;
use crate::eval::{chance_test, cross_test, mixed_gallery_test, self_test, RetrievalReport};
use crate::losses::LossWeights;
use crate::model::Model;
use crate::train::{
    train_compatible, train_independent, train_sequential, Arch, CompatMethod, Supervision,
    TrainConfig, TrainOutcome,
};

/// Old-gallery fractions of the mixed-gallery grid.
pub const MIXED_FRACTIONS: [f64; 5] = [0.0, 0.2, 0.5, 0.8, 1.0];
/// Class fractions of the three-model chain.
pub const SEQUENTIAL_FRACTIONS: [f64; 3] = [0.25, 0.5, 1.0];
/// Label permutations behind a chance estimate.
pub const CHANCE_PERMUTATIONS: usize = 20;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct Benchmark {
    pub data: SyntheticSpec,
    /// Samples per class held out for retrieval evaluation.
    pub test_per_class: usize,
    /// Held-out samples per class used as queries; the rest form the gallery.
    pub query_per_class: usize,
    pub old_fraction: f64,
    pub old_arch: Arch,
    pub new_arch: Arch,
    pub old_train: TrainConfig,
    pub new_train: TrainConfig,
    /// Class fractions of the three-model chain.
    pub chain_fractions: Vec<f64>,
}

impl Default for Benchmark {
    fn default() -> Self {
        Benchmark::fixed()
    }
}

/// Everything derived from a benchmark's data seed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub classes: ClassSplit,
    pub eval: EvalSplit,
    pub old_set: TrainSet,
    pub new_set: TrainSet,
}

impl Benchmark {
    /// 20 classes, 64-dim inputs, 50 samples per class, seed 42, 10 old classes.
    pub fn fixed() -> Self {
        Benchmark {
            data: SyntheticSpec::default(),
            test_per_class: 15,
            query_per_class: 5,
            old_fraction: 0.5,
            old_arch: Arch::default(),
            new_arch: Arch::default(),
            old_train: TrainConfig::desk(),
            new_train: TrainConfig {
                compat_method: CompatMethod::DualTuning,
                weights: LossWeights {
                    proto: 5.0,
                    temperature: 0.2,
                    ..LossWeights::default()
                },
                ..TrainConfig::desk()
            },
            chain_fractions: SEQUENTIAL_FRACTIONS.to_vec(),
        }
    }

    /// The fixed benchmark with heavier within-class noise.
    pub fn noisy() -> Self {
        let mut b = Benchmark::fixed();
        b.data.within_class_std *= 2.0;
        b
    }

    pub fn prepare(&self) -> Result<Prepared> {
        self.prepare_from(&generate_synthetic(&self.data)?)
    }

    /// Splits an existing dataset; `data.seed` still drives every split.
    pub fn prepare_from(&self, ds: &LabeledDataset) -> Result<Prepared> {
        let (train, test) = train_test_split(ds, self.test_per_class, self.data.seed)?;
        let classes = split_old_new(&train, self.old_fraction, self.data.seed)?;
        let eval = make_eval_split(
            &test,
            self.query_per_class,
            EvalMode::HeldOut,
            self.data.seed,
        )?;
        let old_set = TrainSet::from_dataset(&train, &classes.old_classes)?;
        let new_set = TrainSet::from_dataset(&train, &classes.new_classes)?;
        Ok(Prepared {
            train,
            test,
            classes,
            eval,
            old_set,
            new_set,
        })
    }

    pub fn old_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(seed, 0x01d),
            compat_method: CompatMethod::None,
            ..self.old_train.clone()
        }
    }

    pub fn new_config(&self, method: CompatMethod, seed: u64) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(seed, 0x2e3),
            compat_method: method,
            ..self.new_train.clone()
        }
    }

    pub fn train_old(&self, p: &Prepared, seed: u64) -> Result<TrainOutcome> {
        train_independent(&p.old_set, &self.old_arch, &self.old_config(seed))
    }

    /// A new model on all classes; `CompatMethod::None` ignores `old`.
    pub fn train_new(
        &self,
        p: &Prepared,
        old: &Model,
        method: CompatMethod,
        seed: u64,
    ) -> Result<TrainOutcome> {
        let cfg = self.new_config(method, seed);
        if method == CompatMethod::None {
            train_independent(&p.new_set, &self.new_arch, &cfg)
        } else {
            train_compatible(old, &p.new_set, &self.new_arch, &cfg)
        }
    }
}

/// One evaluation in an experiment grid.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ExperimentRow {
    pub scenario: String,
    pub seed: u64,
    pub report: RetrievalReport,
}

/// One grid cell: its rows, or why it could not run.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CellOutcome {
    pub cell: String,
    pub rows: Vec<ExperimentRow>,
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grid {
    /// Independent and compatible models against the old model.
    Table2,
    /// Prototype and structural components in isolation.
    Ablation,
    /// Old/new supervision combinations.
    Losses,
    /// Differing widths and embedding dims.
    Arch,
    /// Three-model chain on growing class sets.
    Sequential,
    /// Asymmetric-center against Dual-Tuning.
    AsymCenter,
    /// Mixed old/new galleries.
    Mixed,
    /// No cells.
    Empty,
}

impl Grid {
    pub const ALL: [Grid; 8] = [
        Grid::Table2,
        Grid::Ablation,
        Grid::Losses,
        Grid::Arch,
        Grid::Sequential,
        Grid::AsymCenter,
        Grid::Mixed,
        Grid::Empty,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Grid::Table2 => "table2",
            Grid::Ablation => "ablation",
            Grid::Losses => "losses",
            Grid::Arch => "arch",
            Grid::Sequential => "sequential",
            Grid::AsymCenter => "asym-center",
            Grid::Mixed => "mixed",
            Grid::Empty => "empty",
        }
    }
}

impl core::str::FromStr for Grid {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        Grid::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| crate::error::Error::invalid(format!("unknown grid {s:?}")))
    }
}

/// Ablation rows, weakest to strongest.
pub const ABLATION_METHODS: [CompatMethod; 6] = [
    CompatMethod::CenterProto,
    CompatMethod::CompatProto,
    CompatMethod::O2nOnly,
    CompatMethod::N2oOnly,
    CompatMethod::Mutual,
    CompatMethod::DualTuning,
];

pub const TABLE2_METHODS: [CompatMethod; 6] = [
    CompatMethod::None,
    CompatMethod::L2,
    CompatMethod::Kl,
    CompatMethod::AsymTriplet,
    CompatMethod::Bct,
    CompatMethod::DualTuning,
];

fn row(scenario: impl Into<String>, seed: u64, report: RetrievalReport) -> ExperimentRow {
    ExperimentRow {
        scenario: scenario.into(),
        seed,
        report,
    }
}

fn cell(name: impl Into<String>, f: impl FnOnce() -> Result<Vec<ExperimentRow>>) -> CellOutcome {
    let cell = name.into();
    match f() {
        Ok(rows) => CellOutcome {
            cell,
            rows,
            error: None,
        },
        Err(e) => CellOutcome {
            cell,
            rows: Vec::new(),
            error: Some(e.to_string()),
        },
    }
}

/// Cross and self reports of a new model against `old`.
fn pair_rows(
    p: &Prepared,
    name: &str,
    seed: u64,
    new: &Model,
    old: &Model,
) -> Result<Vec<ExperimentRow>> {
    Ok(vec![
        row(
            name,
            seed,
            cross_test(&new.backbone, &old.backbone, &p.test, &p.eval)?,
        ),
        row(name, seed, self_test(&new.backbone, &p.test, &p.eval)?),
    ])
}

/// Runs `grid` on `bench` for one seed. Cells that fail are recorded and the
/// grid continues.
pub fn run_grid(bench: &Benchmark, grid: Grid, seed: u64) -> Result<Vec<CellOutcome>> {
    if grid == Grid::Empty {
        return Ok(Vec::new());
    }
    run_grid_on(bench, &bench.prepare()?, grid, seed)
}

/// [`run_grid`] on already prepared data.
pub fn run_grid_on(
    bench: &Benchmark,
    p: &Prepared,
    grid: Grid,
    seed: u64,
) -> Result<Vec<CellOutcome>> {
    let mut out = Vec::new();
    match grid {
        Grid::Table2 | Grid::Ablation | Grid::AsymCenter => {
            let old = bench.train_old(p, seed)?.model;
            out.push(cell("old", || {
                Ok(vec![row(
                    "old",
                    seed,
                    self_test(&old.backbone, &p.test, &p.eval)?,
                )])
            }));
            let methods: &[CompatMethod] = match grid {
                Grid::Table2 => &TABLE2_METHODS,
                Grid::Ablation => &ABLATION_METHODS,
                _ => &[CompatMethod::AsymCenter, CompatMethod::DualTuning],
            };
            for &m in methods {
                let name = if m == CompatMethod::None {
                    "independent"
                } else {
                    m.name()
                };
                out.push(cell(name, || {
                    let new = bench.train_new(p, &old, m, seed)?.model;
                    let mut rows = pair_rows(p, name, seed, &new, &old)?;
                    if m == CompatMethod::None {
                        let c = chance_test(
                            &new.backbone,
                            &old.backbone,
                            &p.test,
                            &p.eval,
                            CHANCE_PERMUTATIONS,
                            seed,
                        )?;
                        rows.push(row(name, seed, c));
                    }
                    Ok(rows)
                }));
            }
        }
        Grid::Losses => {
            for old_sup in [Supervision::Softmax, Supervision::Triplet] {
                let mut b = bench.clone();
                b.old_train.supervision = old_sup;
                let old = match b.train_old(p, seed) {
                    Ok(o) => o.model,
                    Err(e) => {
                        out.push(CellOutcome {
                            cell: format!("old-{old_sup}"),
                            rows: Vec::new(),
                            error: Some(e.to_string()),
                        });
                        continue;
                    }
                };
                for new_sup in [
                    Supervision::Softmax,
                    Supervision::SoftmaxTriplet,
                    Supervision::Circle,
                ] {
                    let mut b = b.clone();
                    b.new_train.supervision = new_sup;
                    for m in [
                        CompatMethod::None,
                        CompatMethod::Bct,
                        CompatMethod::DualTuning,
                    ] {
                        let name = format!("{new_sup}/{old_sup}/{m}");
                        out.push(cell(name.clone(), || {
                            let new = b.train_new(p, &old, m, seed)?.model;
                            pair_rows(p, &name, seed, &new, &old)
                        }));
                    }
                }
            }
        }
        Grid::Arch => {
            let variants = [
                (
                    "narrow-to-wide",
                    Arch::new(&[64], 16),
                    Arch::new(&[128], 32),
                ),
                ("wide-to-wide", Arch::new(&[128], 32), Arch::new(&[128], 32)),
                ("deep-new", Arch::new(&[128], 32), Arch::new(&[128, 64], 32)),
            ];
            for (label, old_arch, new_arch) in variants {
                let mut b = bench.clone();
                b.old_arch = old_arch;
                b.new_arch = new_arch;
                let old = b.train_old(p, seed)?.model;
                for m in [
                    CompatMethod::None,
                    CompatMethod::Bct,
                    CompatMethod::DualTuning,
                ] {
                    let name = format!("{label}/{m}");
                    out.push(cell(name.clone(), || {
                        let new = b.train_new(p, &old, m, seed)?.model;
                        pair_rows(p, &name, seed, &new, &old)
                    }));
                }
            }
        }
        Grid::Sequential => {
            for m in [CompatMethod::None, CompatMethod::DualTuning] {
                out.push(cell(format!("chain/{m}"), || {
                    let chain = sequential_chain(bench, p, m, seed)?;
                    let mut rows = Vec::new();
                    let pairs = (1..chain.len()).flat_map(|a| (0..a).map(move |b| (a, b)));
                    for (a, b) in pairs {
                        let r = cross_test(
                            &chain[a].model.backbone,
                            &chain[b].model.backbone,
                            &p.test,
                            &p.eval,
                        )?;
                        rows.push(row(format!("{m}/phi{}-phi{}", a + 1, b + 1), seed, r));
                    }
                    Ok(rows)
                }));
            }
        }
        Grid::Mixed => {
            let old = bench.train_old(p, seed)?.model;
            for m in [CompatMethod::AsymTriplet, CompatMethod::DualTuning] {
                out.push(cell(m.name(), || {
                    let new = bench.train_new(p, &old, m, seed)?.model;
                    let reports = mixed_gallery_test(
                        &new.backbone,
                        &old.backbone,
                        &p.test,
                        &p.eval,
                        &MIXED_FRACTIONS,
                        seed,
                    )?;
                    Ok(reports
                        .into_iter()
                        .map(|r| row(m.name(), seed, r))
                        .collect())
                }));
            }
        }
        Grid::Empty => {}
    }
    Ok(out)
}

/// The three-model chain on growing class prefixes of the training split.
pub fn sequential_chain(
    bench: &Benchmark,
    p: &Prepared,
    method: CompatMethod,
    seed: u64,
) -> Result<Vec<TrainOutcome>> {
    let cfg = bench.new_config(method, seed);
    let archs = vec![bench.new_arch.clone(); bench.chain_fractions.len()];
    train_sequential(&p.train, &bench.chain_fractions, &archs, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_benchmark_shapes() {
        let b = Benchmark::fixed();
        let p = b.prepare().unwrap();
        assert_eq!(p.train.len(), 20 * 35);
        assert_eq!(p.test.len(), 20 * 15);
        assert_eq!(p.classes.old_classes.len(), 10);
        assert_eq!(p.eval.queries.len(), 100);
        assert_eq!(p.eval.gallery.len(), 200);
        assert_eq!(p.old_set.len(), 350);
        assert_eq!(
            Benchmark::noisy().data.within_class_std,
            2.0 * b.data.within_class_std
        );
    }

    #[test]
    fn grid_names_round_trip() {
        for g in Grid::ALL {
            assert_eq!(g.name().parse::<Grid>().unwrap(), g);
        }
        assert!(run_grid(&Benchmark::fixed(), Grid::Empty, 0)
            .unwrap()
            .is_empty());
    }
}
