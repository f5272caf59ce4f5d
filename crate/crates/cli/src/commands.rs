//! The five subcommands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dualtune_core::data::LabeledDataset;
use dualtune_core::eval::{
    center_replacement_test, chance_test, compatibility_violation_rate, cross_test, extract,
    mixed_gallery_test, self_test, Audit,
};
use dualtune_core::model::{CheckpointMeta, Model};
use dualtune_core::scenario::{
    run_grid_on, sequential_chain, CellOutcome, ExperimentRow, Grid, Prepared,
};
use dualtune_core::train::{
    checkpoint_meta, CompatMethod, EpochLog, Supervision, TrainConfig, TrainOutcome,
};
use serde::Serialize;

use crate::config::{ExperimentConfig, Protocol};
use crate::error::{CliError, Result};
use crate::output::{render_table, rows_to_csv, write_atomic, write_json};
use crate::verify::{self, Suite};
use crate::{checkpoint, dataset};

#[derive(Debug, Parser)]
#[command(
    name = "dualtune",
    version,
    about = "Backward-compatible embedding training and evaluation"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML config, or a JSON report whose `config` field is reused.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides `out_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset file.
    GenData(GenDataArgs),
    /// Train models and write checkpoints with run reports.
    Train(TrainArgs),
    /// Evaluate checkpoints under one or more protocols.
    Eval(EvalArgs),
    /// Run an experiment grid and render its table.
    Experiment(ExperimentArgs),
    /// Run verification suites.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub samples_per_class: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub std: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Stage {
    /// The old model on the old classes.
    Old,
    /// A new model on all classes, compatible to `--old`.
    New,
    /// Old, then new compatible to it.
    #[default]
    Pair,
    /// The sequential chain on growing class fractions.
    Chain,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value_t = Stage::Pair)]
    pub stage: Stage,
    /// Old checkpoint for `--stage new`.
    #[arg(long)]
    pub old: Option<PathBuf>,
    /// Overrides `benchmark.new_train.compat_method`.
    #[arg(long)]
    pub method: Option<CompatMethod>,
    /// Overrides `benchmark.new_train.supervision`.
    #[arg(long)]
    pub supervision: Option<Supervision>,
    /// Overrides `benchmark.old_train.supervision`.
    #[arg(long)]
    pub old_supervision: Option<Supervision>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub new: PathBuf,
    #[arg(long)]
    pub old: Option<PathBuf>,
    /// Protocols, comma separated; defaults to the config's `protocols`.
    #[arg(long, value_delimiter = ',')]
    pub mode: Vec<Protocol>,
    /// Old-gallery fractions for `mixed`.
    #[arg(long, value_delimiter = ',')]
    pub fractions: Vec<f64>,
    /// Scenario label written to every row.
    #[arg(long, default_value = "eval")]
    pub scenario: String,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ExperimentArgs {
    /// Overrides the config's `grid`.
    #[arg(long)]
    pub grid: Option<Grid>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SuiteArg {
    Gradcheck,
    MetricOracle,
    Invariants,
    All,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value_t = SuiteArg::All)]
    pub suite: SuiteArg,
    /// Flip one loss's gradient sign; the gradcheck suite must then fail.
    #[arg(long)]
    pub tamper: bool,
}

/// The effective configuration: file (or defaults) with flag overrides applied.
pub fn resolve_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) if p.extension().is_some_and(|e| e == "json") => config_from_report(p)?,
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn config_from_report(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let config_err = |msg: String| CliError::Config {
        path: path.to_path_buf(),
        msg,
    };
    let mut v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| config_err(e.to_string()))?;
    let cfg = v
        .get_mut("config")
        .map(serde_json::Value::take)
        .ok_or_else(|| config_err("report has no `config` field".into()))?;
    serde_json::from_value(cfg).map_err(|e| config_err(e.to_string()))
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    match &cli.command {
        Command::GenData(a) => gen_data(cfg, cli.common.seed, a).map(|_| ()),
        Command::Train(a) => train(cfg, a).map(|_| ()),
        Command::Eval(a) => eval(cfg, a).map(|_| ()),
        Command::Experiment(a) => experiment(cfg, a).map(|_| ()),
        Command::Verify(a) => verify_cmd(&cfg, cli.common.out.is_some(), a),
    }
}

/// `seed` replaces `benchmark.data.seed` when given.
pub fn gen_data(mut cfg: ExperimentConfig, seed: Option<u64>, a: &GenDataArgs) -> Result<PathBuf> {
    let spec = &mut cfg.benchmark.data;
    if let Some(v) = a.classes {
        spec.class_count = v;
    }
    if let Some(v) = a.samples_per_class {
        spec.samples_per_class = v;
    }
    if let Some(v) = a.dim {
        spec.input_dim = v;
    }
    if let Some(v) = a.std {
        spec.within_class_std = v;
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()
        .map_err(|e| CliError::Validation(format!("dataset spec: {e}")))?;
    let ds = dualtune_core::data::generate_synthetic(spec)?;
    let path = cfg.out_dir.join("dataset.txt");
    dataset::save(&ds, &path)?;
    println!(
        "wrote {} ({} samples, dim {}, {} classes)",
        path.display(),
        ds.len(),
        ds.input_dim(),
        ds.class_count()
    );
    Ok(path)
}

#[derive(Serialize)]
struct RunReport<'a> {
    command: &'static str,
    model: &'a str,
    seed: u64,
    train_config: &'a TrainConfig,
    classes: &'a [usize],
    epochs: &'a [EpochLog],
    wall_time_secs: f64,
    checkpoint: &'a Path,
    config: &'a ExperimentConfig,
}

fn check_input_dim(model: &Model, ds: &LabeledDataset, path: &Path) -> Result<()> {
    if model.backbone.input_dim() != ds.input_dim() {
        return Err(CliError::Validation(format!(
            "{}: model input dim {} does not match dataset dim {}",
            path.display(),
            model.backbone.input_dim(),
            ds.input_dim()
        )));
    }
    Ok(())
}

/// Saves a trained model with its run report; returns the checkpoint path.
fn save_stage(
    cfg: &ExperimentConfig,
    name: &str,
    outcome: &TrainOutcome,
    train_cfg: &TrainConfig,
    classes: &[usize],
    started: Instant,
) -> Result<PathBuf> {
    let ck = cfg.out_dir.join(format!("{name}.ckpt.json"));
    let meta = checkpoint_meta(
        train_cfg,
        classes,
        format!("{name}: {} classes", classes.len()),
    );
    checkpoint::save(&outcome.model, meta, &ck)?;
    let report = RunReport {
        command: "train",
        model: name,
        seed: cfg.seed,
        train_config: train_cfg,
        classes,
        epochs: &outcome.log,
        wall_time_secs: started.elapsed().as_secs_f64(),
        checkpoint: &ck,
        config: cfg,
    };
    write_json(&cfg.out_dir.join(format!("{name}.run.json")), &report)?;
    if let Some(last) = outcome.log.last() {
        println!(
            "{name}: {} epochs, final loss {:.4}, wrote {}",
            outcome.log.len(),
            last.total,
            ck.display()
        );
    } else {
        println!("{name}: 0 epochs (initialization), wrote {}", ck.display());
    }
    Ok(ck)
}

pub fn train(mut cfg: ExperimentConfig, a: &TrainArgs) -> Result<Vec<PathBuf>> {
    if let Some(m) = a.method {
        cfg.benchmark.new_train.compat_method = m;
    }
    if let Some(s) = a.supervision {
        cfg.benchmark.new_train.supervision = s;
    }
    if let Some(s) = a.old_supervision {
        cfg.benchmark.old_train.supervision = s;
    }
    cfg.validate()?;
    let ds = cfg.dataset()?;
    let p = cfg.benchmark.prepare_from(&ds)?;
    let b = &cfg.benchmark;
    let seed = cfg.seed;
    let mut written = Vec::new();

    let train_new = |old: &Model, written: &mut Vec<PathBuf>| -> Result<()> {
        let started = Instant::now();
        let method = b.new_train.compat_method;
        let out = b.train_new(&p, old, method, seed)?;
        written.push(save_stage(
            &cfg,
            "new",
            &out,
            &b.new_config(method, seed),
            &p.new_set.classes,
            started,
        )?);
        Ok(())
    };
    match a.stage {
        Stage::Old | Stage::Pair => {
            let started = Instant::now();
            let old = b.train_old(&p, seed)?;
            written.push(save_stage(
                &cfg,
                "old",
                &old,
                &b.old_config(seed),
                &p.old_set.classes,
                started,
            )?);
            if a.stage == Stage::Pair {
                train_new(&old.model, &mut written)?;
            }
        }
        Stage::New => {
            let path = a.old.as_ref().ok_or_else(|| {
                CliError::Validation("--stage new needs --old <checkpoint>".into())
            })?;
            let (old, _) = checkpoint::load(path)?;
            check_input_dim(&old, &ds, path)?;
            train_new(&old, &mut written)?;
        }
        Stage::Chain => {
            let started = Instant::now();
            let chain = sequential_chain(b, &p, b.new_train.compat_method, seed)?;
            let stage_cfg = b.new_config(b.new_train.compat_method, seed);
            for (i, (outcome, &f)) in chain.iter().zip(&b.chain_fractions).enumerate() {
                let classes =
                    dualtune_core::data::class_split(ds.class_count(), f, stage_cfg.seed)?
                        .old_classes;
                let mut c = stage_cfg.clone();
                if i == 0 {
                    c.compat_method = CompatMethod::None;
                }
                written.push(save_stage(
                    &cfg,
                    &format!("phi{}", i + 1),
                    outcome,
                    &c,
                    &classes,
                    started,
                )?);
            }
        }
    }
    Ok(written)
}

#[derive(Serialize)]
struct AuditResult {
    violation_rate: f64,
    budget: usize,
    seed: u64,
}

#[derive(Serialize)]
struct EvalReport<'a> {
    command: &'static str,
    scenario: &'a str,
    new: &'a Path,
    new_metadata: &'a CheckpointMeta,
    old: Option<&'a Path>,
    old_metadata: Option<&'a CheckpointMeta>,
    rows: &'a [ExperimentRow],
    audit: Option<AuditResult>,
    config: &'a ExperimentConfig,
}

pub struct EvalOutput {
    pub rows: Vec<ExperimentRow>,
    pub violation_rate: Option<f64>,
    pub csv: PathBuf,
}

pub fn eval(cfg: ExperimentConfig, a: &EvalArgs) -> Result<EvalOutput> {
    cfg.validate()?;
    let modes = if a.mode.is_empty() {
        cfg.protocols.clone()
    } else {
        a.mode.clone()
    };
    let fractions = if a.fractions.is_empty() {
        cfg.mixed_fractions.clone()
    } else {
        a.fractions.clone()
    };
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(CliError::Validation(
            "--fractions must lie in [0, 1]".into(),
        ));
    }
    let ds = cfg.dataset()?;
    let p: Prepared = cfg.benchmark.prepare_from(&ds)?;
    let (new, new_meta) = checkpoint::load(&a.new)?;
    check_input_dim(&new, &ds, &a.new)?;
    let old = match &a.old {
        Some(path) => {
            let (m, meta) = checkpoint::load(path)?;
            check_input_dim(&m, &ds, path)?;
            Some((m, meta))
        }
        None => None,
    };
    if let Some(m) = modes.iter().find(|m| m.needs_old()) {
        if old.is_none() {
            return Err(CliError::Validation(format!(
                "--mode {} needs --old <checkpoint>",
                m.name()
            )));
        }
    }

    let row = |report| ExperimentRow {
        scenario: a.scenario.clone(),
        seed: cfg.seed,
        report,
    };
    let mut rows = Vec::new();
    let mut audit = None;
    let nb = &new.backbone;
    for mode in &modes {
        let ob = old.as_ref().map(|(m, _)| &m.backbone);
        match mode {
            Protocol::SelfTest => rows.push(row(self_test(nb, &p.test, &p.eval)?)),
            Protocol::Cross => {
                rows.push(row(cross_test(nb, ob.expect("checked"), &p.test, &p.eval)?))
            }
            Protocol::Mixed => {
                for r in mixed_gallery_test(
                    nb,
                    ob.expect("checked"),
                    &p.test,
                    &p.eval,
                    &fractions,
                    cfg.seed,
                )? {
                    rows.push(row(r));
                }
            }
            Protocol::Center => {
                let (raw, center) = center_replacement_test(nb, &p.test, &p.eval)?;
                rows.push(row(raw));
                rows.push(row(center));
            }
            Protocol::Chance => rows.push(row(chance_test(
                nb,
                ob.expect("checked"),
                &p.test,
                &p.eval,
                cfg.chance_permutations,
                cfg.seed,
            )?)),
            Protocol::Audit => {
                let nf = extract(nb, p.test.features())?;
                let of = extract(ob.expect("checked"), p.test.features())?;
                let rate = compatibility_violation_rate(
                    &nf,
                    &of,
                    p.test.labels(),
                    Audit::Sampled {
                        budget: cfg.audit_budget,
                        seed: cfg.seed,
                    },
                )?;
                println!("violation rate {rate:.4} ({} triplets)", cfg.audit_budget);
                audit = Some(AuditResult {
                    violation_rate: rate,
                    budget: cfg.audit_budget,
                    seed: cfg.seed,
                });
            }
        }
    }

    let csv = cfg.out_dir.join("eval.csv");
    write_atomic(&csv, rows_to_csv(&rows)?.as_bytes())?;
    let violation_rate = audit.as_ref().map(|x| x.violation_rate);
    let report = EvalReport {
        command: "eval",
        scenario: &a.scenario,
        new: &a.new,
        new_metadata: &new_meta,
        old: a.old.as_deref(),
        old_metadata: old.as_ref().map(|(_, m)| m),
        rows: &rows,
        audit,
        config: &cfg,
    };
    write_json(&cfg.out_dir.join("eval.report.json"), &report)?;
    for r in &rows {
        let frac = r
            .report
            .old_fraction
            .map(|f| format!(" old_fraction={f}"))
            .unwrap_or_default();
        println!(
            "{} {}{frac}: mAP {:.4} top1 {:.4} top5 {:.4} ({} queries, {} excluded)",
            r.scenario,
            r.report.test_mode,
            r.report.map,
            r.report.top1,
            r.report.top5,
            r.report.num_queries,
            r.report.num_excluded
        );
    }
    Ok(EvalOutput {
        rows,
        violation_rate,
        csv,
    })
}

#[derive(Serialize)]
struct GridReport<'a> {
    command: &'static str,
    grid: &'a str,
    seed: u64,
    cells: &'a [CellOutcome],
    wall_time_secs: f64,
    config: &'a ExperimentConfig,
}

pub struct GridOutput {
    pub cells: Vec<CellOutcome>,
    pub csv: PathBuf,
    pub table: String,
}

pub fn experiment(mut cfg: ExperimentConfig, a: &ExperimentArgs) -> Result<GridOutput> {
    if let Some(g) = a.grid {
        cfg.grid = g.name().to_string();
    }
    cfg.validate()?;
    let grid: Grid = cfg.grid.parse()?;
    let started = Instant::now();
    let cells = if grid == Grid::Empty {
        Vec::new()
    } else {
        run_grid_on(&cfg.benchmark, &cfg.prepare()?, grid, cfg.seed)?
    };
    let rows: Vec<ExperimentRow> = cells.iter().flat_map(|c| c.rows.iter().cloned()).collect();
    let name = grid.name();
    let csv = cfg.out_dir.join(format!("{name}.csv"));
    write_atomic(&csv, rows_to_csv(&rows)?.as_bytes())?;
    let table = render_table(&format!("{name} (seed {})", cfg.seed), &cells);
    write_atomic(
        &cfg.out_dir.join(format!("{name}.table.txt")),
        table.as_bytes(),
    )?;
    let report = GridReport {
        command: "experiment",
        grid: name,
        seed: cfg.seed,
        cells: &cells,
        wall_time_secs: started.elapsed().as_secs_f64(),
        config: &cfg,
    };
    write_json(&cfg.out_dir.join(format!("{name}.report.json")), &report)?;
    print!("{table}");
    Ok(GridOutput { cells, csv, table })
}

pub fn verify_cmd(cfg: &ExperimentConfig, write_report: bool, a: &VerifyArgs) -> Result<()> {
    let suites: Vec<Suite> = match a.suite {
        SuiteArg::Gradcheck => vec![Suite::Gradcheck],
        SuiteArg::MetricOracle => vec![Suite::MetricOracle],
        SuiteArg::Invariants => vec![Suite::Invariants],
        SuiteArg::All => Suite::ALL.to_vec(),
    };
    let reports: Vec<_> = suites.iter().map(|&s| verify::run(s, a.tamper)).collect();
    let mut failed = Vec::new();
    for r in &reports {
        for c in &r.checks {
            let tag = if c.passed { "ok  " } else { "FAIL" };
            println!("{tag} {}/{}: {}", r.suite.name(), c.name, c.detail);
            if !c.passed {
                failed.push(format!("{}/{}", r.suite.name(), c.name));
            }
        }
    }
    if write_report {
        write_json(&cfg.out_dir.join("verify.report.json"), &reports)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(failed.join(", ")))
    }
}
