//! Command-line experiment runner: `gen`, `train`, `eval`, `verify`, `report`.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::datagen::{
    generate, holdout_split, load_tabular_csv, partition, read_dataset, write_dataset, PartitionSpec, TabularSchema,
};
use crate::engine::{evaluate_agnostic, Checkpoint, TrainOptions, Trainer};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_groups, Level, MetricsReport};
use crate::models::{ModelSpec, Objective};
use crate::types::{FederatedDataset, GroupIndex, ModelParams};
use crate::verify::{run_suite, Fault, VerifyOptions};

pub const SUMMARY_VERSION: u32 = 1;

/// JSON Schema of `summary.json`.
pub const SUMMARY_SCHEMA: &str = include_str!("../schemas/summary.schema.json");

/// Header of `metrics.csv`; one row per round, metrics on the evaluation split.
pub const METRICS_COLUMNS: [&str; 8] = [
    "round",
    "avg_acc_attr",
    "disparity_attr",
    "robustness_attr",
    "avg_acc_client",
    "disparity_client",
    "robustness_client",
    "max_group_loss",
];

#[derive(Debug, Parser)]
#[command(name = "fairfed", version, about = "Federated group-robust training simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset from a partition spec.
    Gen {
        /// PartitionSpec JSON.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dataset container to write; the sidecar goes next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from an experiment config and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `run.seed` (and the data seed when the config leaves it unset).
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one or more datasets.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        #[arg(long, default_value = "client")]
        level: Level,
        /// Report file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the oracle suite.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        trials: usize,
        /// Flip the sign of the mirror update (checks that the suite can fail).
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Long-format learning curves from run directories or metrics files.
    Report {
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Where a run's data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        partition: PartitionSpec,
        /// Generator seed; the run seed when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Csv {
        path: PathBuf,
        schema: TabularSchema,
        partition: PartitionSpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    /// A container written by `gen`.
    Dataset { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgnosticSetting {
    pub name: String,
    pub partition: PartitionSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_levels() -> Vec<Level> {
    vec![Level::Attribute, Level::Client]
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    #[serde(default = "default_levels")]
    pub levels: Vec<Level>,
    /// Share of every subgroup held out for evaluation; 0 evaluates on the training data.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Unseen settings the final model is evaluated on.
    #[serde(default)]
    pub agnostic: Vec<AgnosticSetting>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec { levels: default_levels(), test_fraction: default_test_fraction(), agnostic: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub model: ModelSpec,
    pub run: RunConfig,
    #[serde(default)]
    pub eval: EvalSpec,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Parses and validates a config file. Relative paths are resolved against
    /// the file's directory; referenced input files must exist.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut cfg.data {
            DataSource::Csv { path, .. } | DataSource::Dataset { path } => resolve(path),
            DataSource::Synthetic { .. } => {}
        }
        resolve(&mut cfg.output_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        match &self.data {
            DataSource::Synthetic { partition, .. } => partition.validate()?,
            DataSource::Csv { path, partition, .. } => {
                partition.validate()?;
                if !path.is_file() {
                    return Err(Error::Config(format!("data file {} does not exist", path.display())));
                }
            }
            DataSource::Dataset { path } => {
                if !path.is_file() {
                    return Err(Error::Config(format!("data file {} does not exist", path.display())));
                }
            }
        }
        for a in &self.eval.agnostic {
            a.partition.validate()?;
        }
        if self.eval.levels.is_empty() {
            return Err(Error::Config("eval.levels must not be empty".into()));
        }
        if self.eval.levels.contains(&Level::Agnostic) && self.eval.agnostic.is_empty() {
            return Err(Error::Config("agnostic level requested without agnostic settings".into()));
        }
        let f = self.eval.test_fraction;
        if !(0.0..1.0).contains(&f) {
            return Err(Error::Config(format!("test_fraction must lie in [0, 1), got {f}")));
        }
        if self.output_dir.is_file() {
            return Err(Error::Config(format!("output_dir {} is a file", self.output_dir.display())));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, output directory excluded.
    pub fn digest(&self) -> String {
        let text = serde_json::to_string(&ExperimentConfig { output_dir: PathBuf::new(), ..self.clone() })
            .expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// The full dataset before the holdout split.
    pub fn load_data(&self) -> Result<FederatedDataset> {
        let data = match &self.data {
            DataSource::Synthetic { partition, seed } => generate(partition, seed.unwrap_or(self.run.seed))?,
            DataSource::Csv { path, schema, partition: spec, seed } => {
                let load = load_tabular_csv(path, schema)?;
                if load.rejected_rows > 0 {
                    log::warn!("{}: {} rows rejected", path.display(), load.rejected_rows);
                }
                partition(&load.dataset, spec, seed.unwrap_or(self.run.seed))?
            }
            DataSource::Dataset { path } => read_dataset(path)?,
        };
        self.check_model(&data)?;
        Ok(data)
    }

    fn check_model(&self, data: &FederatedDataset) -> Result<()> {
        if data.feature_dim != self.model.feature_dim || data.class_count != self.model.class_count {
            return Err(Error::DimensionMismatch(format!(
                "data has {} features and {} classes, model expects {} and {}",
                data.feature_dim, data.class_count, self.model.feature_dim, self.model.class_count
            )));
        }
        Ok(())
    }
}

/// 17 significant digits, enough to read every f64 back exactly.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Final metrics of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub round: u64,
    pub theta_digest: String,
    pub lambda: Vec<f64>,
    pub max_group_loss: f64,
    pub reports: Vec<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFiles {
    pub metrics: String,
    pub checkpoint: String,
    pub train_data: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_data: Option<String>,
    #[serde(default)]
    pub agnostic_data: Vec<String>,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub format_version: u32,
    pub algorithm: String,
    pub rounds: usize,
    pub seed: u64,
    pub config_digest: String,
    pub experiment_digest: String,
    pub group_index_digest: String,
    /// `test` or `train`: the split the metrics are computed on.
    pub eval_split: String,
    #[serde(rename = "final")]
    pub final_metrics: FinalMetrics,
    pub agnostic: Vec<MetricsReport>,
    pub files: RunFiles,
}

fn report_at(
    model: &dyn Objective,
    theta: &ModelParams,
    data: &FederatedDataset,
    level: Level,
) -> Result<MetricsReport> {
    evaluate_groups(model, theta, data)?.report(level)
}

/// Trains per `cfg` and writes the run directory; returns the summary.
pub fn train_experiment(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<Summary> {
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::Config(format!("cannot create {}: {e}", out.display())))?;
    let full = cfg.load_data()?;
    let (train, test) = if cfg.eval.test_fraction > 0.0 {
        let (tr, te) = holdout_split(&full, cfg.eval.test_fraction, cfg.run.seed)?;
        (tr, Some(te))
    } else {
        (full, None)
    };
    let eval = test.as_ref().unwrap_or(&train);
    let model = cfg.model;
    let trainer = Trainer::new(cfg.run.clone(), &model, &train)?;
    let state = match resume {
        Some(p) => trainer.resume(&Checkpoint::load(p)?)?,
        None => trainer.init_state()?,
    };
    let remaining =
        cfg.run.rounds.checked_sub(state.round as usize).ok_or_else(|| {
            Error::Config(format!("checkpoint is at round {}, past R = {}", state.round, cfg.run.rounds))
        })?;
    let trace = trainer.train_from(state, remaining, TrainOptions { eval: Some(eval), record_theta: false })?;

    write_dataset(&train, &out.join("train.ffd"))?;
    if let Some(te) = &test {
        write_dataset(te, &out.join("test.ffd"))?;
    }

    let mut w = csv::Writer::from_path(out.join("metrics.csv"))?;
    w.write_record(METRICS_COLUMNS)?;
    for r in &trace.records {
        w.write_record([
            r.round.to_string(),
            fmt_f64(r.attribute.avg_acc),
            fmt_f64(r.attribute.disparity),
            fmt_f64(r.attribute.robustness),
            fmt_f64(r.client.avg_acc),
            fmt_f64(r.client.disparity),
            fmt_f64(r.client.robustness),
            fmt_f64(r.max_group_loss),
        ])?;
    }
    w.flush()?;

    let fin = &trace.final_state;
    let mut ckpt = trainer.checkpoint(fin);
    ckpt.model = Some(model);
    ckpt.save(&out.join("checkpoint.json"))?;

    let ev = evaluate_groups(&model, &fin.theta, eval)?;
    let mut reports = Vec::new();
    for &level in cfg.eval.levels.iter().filter(|&&l| l != Level::Agnostic) {
        reports.push(ev.report(level)?);
    }

    let mut agnostic_data = Vec::new();
    let mut named = Vec::new();
    for a in &cfg.eval.agnostic {
        let data = generate(&a.partition, a.seed.unwrap_or(cfg.run.seed))?;
        cfg.check_model(&data)?;
        let file = format!("agnostic_{}.ffd", a.name);
        write_dataset(&data, &out.join(&file))?;
        agnostic_data.push(file);
        named.push((a.name.clone(), data));
    }
    let refs: Vec<(String, &FederatedDataset)> = named.iter().map(|(n, d)| (n.clone(), d)).collect();
    let agnostic = evaluate_agnostic(&model, &fin.theta, &refs)?;

    let summary = Summary {
        format_version: SUMMARY_VERSION,
        algorithm: cfg.run.algorithm.name().to_string(),
        rounds: cfg.run.rounds,
        seed: cfg.run.seed,
        config_digest: cfg.run.digest(),
        experiment_digest: cfg.digest(),
        group_index_digest: trainer.index().digest(),
        eval_split: if test.is_some() { "test" } else { "train" }.to_string(),
        final_metrics: FinalMetrics {
            round: fin.round,
            theta_digest: fin.theta.digest(),
            lambda: fin.lambda.as_slice().to_vec(),
            max_group_loss: ev.max_group_loss(),
            reports,
        },
        agnostic,
        files: RunFiles {
            metrics: "metrics.csv".into(),
            checkpoint: "checkpoint.json".into(),
            train_data: "train.ffd".into(),
            test_data: test.is_some().then(|| "test.ffd".to_string()),
            agnostic_data,
        },
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Cell counts as a fixed-width table, clients down, attributes across.
pub fn cell_table(data: &FederatedDataset) -> String {
    let counts = data.cell_counts();
    let mut s = String::from("client");
    for a in 0..data.attribute_arity {
        let _ = write!(s, " {:>7}", format!("a{a}"));
    }
    s.push_str("   total\n");
    for (i, row) in counts.iter().enumerate() {
        let _ = write!(s, "{i:>6}");
        for c in row {
            let _ = write!(s, " {c:>7}");
        }
        let _ = writeln!(s, " {:>7}", row.iter().sum::<usize>());
    }
    s
}

fn setting_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string())
}

/// Reports of a checkpoint on each dataset. Attribute and client levels give
/// one report per dataset; agnostic gives one per-client report per dataset,
/// tagged with its setting name.
pub fn eval_checkpoint(ckpt: &Checkpoint, data: &[PathBuf], level: Level) -> Result<Vec<MetricsReport>> {
    let model = ckpt.model.ok_or_else(|| Error::Data("checkpoint carries no model spec".into()))?;
    let theta = ModelParams::new(ckpt.theta.clone())?;
    if theta.len() != model.param_len() {
        return Err(Error::DimensionMismatch("checkpoint parameters do not fit its model".into()));
    }
    let sets: Vec<(String, FederatedDataset)> =
        data.iter().map(|p| Ok((setting_name(p), read_dataset(p)?))).collect::<Result<_>>()?;
    let mut names: Vec<&String> = sets.iter().map(|(n, _)| n).collect();
    names.sort();
    names.dedup();
    if names.len() != sets.len() {
        return Err(Error::Config("datasets need distinct file names".into()));
    }
    for (_, d) in &sets {
        if d.feature_dim != model.feature_dim || d.class_count != model.class_count {
            return Err(Error::DimensionMismatch(format!(
                "dataset has {} features and {} classes, checkpoint model expects {} and {}",
                d.feature_dim, d.class_count, model.feature_dim, model.class_count
            )));
        }
    }
    if level == Level::Agnostic {
        let refs: Vec<(String, &FederatedDataset)> = sets.iter().map(|(n, d)| (n.clone(), d)).collect();
        return evaluate_agnostic(&model, &theta, &refs);
    }
    sets.iter()
        .map(|(n, d)| {
            let mut r = report_at(&model, &theta, d, level)?;
            if sets.len() > 1 {
                r.setting = Some(n.clone());
            }
            Ok(r)
        })
        .collect()
}

fn metrics_file(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("metrics.csv")
    } else {
        p.to_path_buf()
    }
}

fn run_name(p: &Path) -> String {
    if p.is_dir() {
        p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string())
    } else {
        p.parent()
            .and_then(Path::file_name)
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| setting_name(p))
    }
}

/// `run,round,metric,value` rows from one or more `metrics.csv` files.
pub fn long_report(inputs: &[PathBuf], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["run", "round", "metric", "value"])?;
    for p in inputs {
        let file = metrics_file(p);
        let mut r = csv::Reader::from_path(&file)?;
        let header = r.headers()?.clone();
        if header.iter().ne(METRICS_COLUMNS) {
            return Err(Error::Data(format!("{}: unexpected metrics header", file.display())));
        }
        let name = run_name(p);
        for rec in r.records() {
            let rec = rec?;
            for (col, value) in header.iter().zip(rec.iter()).skip(1) {
                let v: f64 =
                    value.parse().map_err(|_| Error::Data(format!("{}: bad value `{value}`", file.display())))?;
                w.write_record([name.as_str(), &rec[0], col, &fmt_f64(v)])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn emit(out: Option<&Path>, stdout: &mut dyn Write, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => stdout.write_all(text.as_bytes())?,
    }
    Ok(())
}

/// Runs one command, writing human-readable output to `stdout`.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Gen { config, seed, out } => {
            let text = fs::read_to_string(&config).map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
            let spec = PartitionSpec::from_json(&text)?;
            let data = generate(&spec, seed)?;
            write_dataset(&data, &out)?;
            write!(stdout, "{}", cell_table(&data))?;
            writeln!(stdout, "group index {}", GroupIndex::build(&data).digest())?;
        }
        Command::Train { config, seed, out, checkpoint } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.run.seed = s;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            cfg.validate()?;
            let s = train_experiment(&cfg, checkpoint.as_deref())?;
            for r in &s.final_metrics.reports {
                writeln!(
                    stdout,
                    "{:<9} avg_acc {} disparity {} robustness {}",
                    r.level.name(),
                    fmt_f64(r.avg_acc),
                    fmt_f64(r.disparity),
                    fmt_f64(r.robustness)
                )?;
            }
            writeln!(stdout, "wrote {}", cfg.output_dir.display())?;
        }
        Command::Eval { checkpoint, data, level, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let reports = eval_checkpoint(&ckpt, &data, level)?;
            let text = if reports.len() == 1 && level != Level::Agnostic {
                serde_json::to_string_pretty(&reports[0])?
            } else {
                serde_json::to_string_pretty(&reports)?
            };
            emit(out.as_deref(), stdout, &(text + "\n"))?;
        }
        Command::Verify { seed, trials, inject_fault } => {
            if trials == 0 {
                return Err(Error::Config("trials must be >= 1".into()));
            }
            let fault = inject_fault.then_some(Fault::FlipMirrorSign);
            let report = run_suite(&VerifyOptions { seed, trials, fault })?;
            write!(stdout, "{}", report.table())?;
            if !report.all_passed() {
                let failed: Vec<&str> = report.checks.iter().filter(|c| !c.ok()).map(|c| c.name).collect();
                return Err(Error::Verification(failed.join(", ")));
            }
        }
        Command::Report { data, out } => match out {
            Some(p) => long_report(&data, fs::File::create(p)?)?,
            None => long_report(&data, &mut *stdout)?,
        },
    }
    Ok(())
}
