//! The TOML experiment configuration shared by every command.

use std::path::{Path, PathBuf};

use dualtune_core::data::LabeledDataset;
use dualtune_core::scenario::{Benchmark, Grid, Prepared, CHANCE_PERMUTATIONS, MIXED_FRACTIONS};
use serde::{Deserialize, Serialize};

use crate::dataset;
use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    #[serde(rename = "self")]
    SelfTest,
    Cross,
    Mixed,
    Center,
    Chance,
    Audit,
}

impl Protocol {
    pub const ALL: [Protocol; 6] = [
        Protocol::SelfTest,
        Protocol::Cross,
        Protocol::Mixed,
        Protocol::Center,
        Protocol::Chance,
        Protocol::Audit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::SelfTest => "self",
            Protocol::Cross => "cross",
            Protocol::Mixed => "mixed",
            Protocol::Center => "center",
            Protocol::Chance => "chance",
            Protocol::Audit => "audit",
        }
    }

    /// Whether the protocol compares a new model against an old one.
    pub fn needs_old(self) -> bool {
        !matches!(self, Protocol::SelfTest | Protocol::Center)
    }
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown protocol {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run seed for every training stage and seeded evaluation.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Dataset file; when absent, data is generated from `benchmark.data`.
    pub data_path: Option<PathBuf>,
    pub grid: String,
    pub protocols: Vec<Protocol>,
    pub mixed_fractions: Vec<f64>,
    pub chance_permutations: usize,
    pub audit_budget: usize,
    pub benchmark: Benchmark,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            data_path: None,
            grid: Grid::Table2.name().to_string(),
            protocols: vec![Protocol::SelfTest, Protocol::Cross],
            mixed_fractions: MIXED_FRACTIONS.to_vec(),
            chance_permutations: CHANCE_PERMUTATIONS,
            audit_budget: 10_000,
            benchmark: Benchmark::fixed(),
        }
    }
}

impl ExperimentConfig {
    /// Parses `path`; relative paths inside it resolve against its directory.
    /// Tables given partially keep the default values of their other fields.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let config_err = |e: toml::de::Error| {
            let line = e.span().map(|s| text[..s.start].matches('\n').count() + 1);
            let msg = e.message().trim().to_string();
            CliError::Config {
                path: path.to_path_buf(),
                msg: match line {
                    Some(l) => format!("line {l}: {msg}"),
                    None => msg,
                },
            }
        };
        toml::from_str::<ExperimentConfig>(&text).map_err(config_err)?;
        let user: toml::Table = toml::from_str(&text).map_err(config_err)?;
        let mut merged = toml::Table::try_from(ExperimentConfig::default())
            .expect("defaults are TOML-representable");
        merge(&mut merged, user);
        let mut cfg: ExperimentConfig = merged.try_into().map_err(config_err)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(p) = cfg.data_path.as_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config fields are TOML-representable")
    }

    pub fn validate(&self) -> Result<()> {
        let field =
            |name: &str, e: dualtune_core::Error| CliError::Validation(format!("{name}: {e}"));
        let b = &self.benchmark;
        b.data.validate().map_err(|e| field("benchmark.data", e))?;
        b.old_train
            .validate()
            .map_err(|e| field("benchmark.old_train", e))?;
        b.new_train
            .validate()
            .map_err(|e| field("benchmark.new_train", e))?;
        if !(b.old_fraction > 0.0 && b.old_fraction <= 1.0) {
            return Err(CliError::Validation(
                "benchmark.old_fraction must lie in (0, 1]".into(),
            ));
        }
        if b.query_per_class == 0 || b.query_per_class >= b.test_per_class {
            return Err(CliError::Validation(
                "benchmark.query_per_class must be positive and below test_per_class".into(),
            ));
        }
        if b.chain_fractions.is_empty()
            || b.chain_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0))
        {
            return Err(CliError::Validation(
                "benchmark.chain_fractions must lie in (0, 1]".into(),
            ));
        }
        if self
            .mixed_fractions
            .iter()
            .any(|f| !(0.0..=1.0).contains(f))
        {
            return Err(CliError::Validation(
                "mixed_fractions must lie in [0, 1]".into(),
            ));
        }
        if self.chance_permutations == 0 || self.audit_budget == 0 {
            return Err(CliError::Validation(
                "chance_permutations and audit_budget must be positive".into(),
            ));
        }
        self.grid.parse::<Grid>().map_err(|e| field("grid", e))?;
        if let Some(p) = &self.data_path {
            if !p.is_file() {
                return Err(CliError::Validation(format!(
                    "data_path {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    pub fn dataset(&self) -> Result<LabeledDataset> {
        match &self.data_path {
            Some(p) => dataset::load(p),
            None => Ok(dualtune_core::data::generate_synthetic(
                &self.benchmark.data,
            )?),
        }
    }

    pub fn prepare(&self) -> Result<Prepared> {
        Ok(self.benchmark.prepare_from(&self.dataset()?)?)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
