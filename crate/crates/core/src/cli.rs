//! Command-line front end: run configuration, subcommands and artifacts.
//!
//! Exit codes: 0 on success, 2 for configuration or input errors, 3 when
//! training itself fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::baselines::DeferralRule;
use crate::dataset::{
    gen_synthetic, load_examples, split, split_by_question, write_examples, DatasetSplit, FileFormat, LabelScheme,
    SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::evaluation::{sweep_csv, MetricsRecord};
use crate::experiment::{
    default_d_values, run_condition, run_conditions, sweep_d, ComparisonReport, Condition, ExperimentData,
};
use crate::model::{Checkpoint, ModelConfig};
use crate::training::{EpochRecord, LossWeights, TrainConfig};

fn default_ratios() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

/// Where examples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Generated corpus.
    Synthetic(SyntheticConfig),
    /// One labelled file. With `unseen_questions` the split is by question
    /// id.
    File {
        path: PathBuf,
        #[serde(default)]
        format: Option<FileFormat>,
        #[serde(default)]
        unseen_questions: bool,
    },
    /// Pre-split files.
    Splits {
        train: PathBuf,
        validation: PathBuf,
        test: PathBuf,
        #[serde(default)]
        format: Option<FileFormat>,
    },
}

fn default_bits() -> u32 {
    ModelConfig::default().feature_bits
}
fn default_hidden() -> usize {
    ModelConfig::default().cl_hidden
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default = "default_d_values")]
    pub d_values: Vec<f64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            d_values: default_d_values(),
        }
    }
}

/// One JSON document per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    /// Train/validation/test fractions for single-source datasets.
    #[serde(default = "default_ratios")]
    pub split_ratios: [f64; 3],
    /// Seed for splitting, initialization and shuffling; overrides
    /// `train.seed` when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub labels: LabelScheme,
    #[serde(default = "default_bits")]
    pub feature_bits: u32,
    #[serde(default = "default_hidden")]
    pub cl_hidden: usize,
    #[serde(default = "default_hidden")]
    pub dp_hidden: usize,
    #[serde(default)]
    pub train: TrainConfig,
    /// Named loss-weight triple; conflicts with explicit `train.loss_weights`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_preset: Option<String>,
    #[serde(default = "default_condition")]
    pub condition: Condition,
    /// For `compare`; all five when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditions: Option<Vec<Condition>>,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn default_condition() -> Condition {
    Condition::Jtsp
}

impl RunConfig {
    /// Parses, merges the preset and seed, resolves relative paths against
    /// `base_dir` and validates. The result serializes to a snapshot that
    /// reloads to itself.
    pub fn from_json(text: &str, base_dir: &Path, seed_override: Option<u64>) -> Result<Self> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        let explicit_weights = raw.pointer("/train/loss_weights").is_some();
        let mut cfg: RunConfig =
            serde_json::from_value(raw).map_err(|e| Error::Config(format!("config: {e}")))?;

        if let Some(name) = cfg.loss_preset.clone() {
            let w = LossWeights::preset(&name)
                .ok_or_else(|| Error::Config(format!("loss_preset: unknown preset {name:?}")))?;
            if explicit_weights && cfg.train.loss_weights != w {
                return Err(Error::Config(
                    "loss_preset and train.loss_weights disagree; give only one".into(),
                ));
            }
            cfg.train.loss_weights = w;
        }
        if cfg.condition == Condition::JtspCe && cfg.train.loss_weights.gamma != 0.0 {
            if explicit_weights || cfg.loss_preset.is_some() {
                return Err(Error::Config(format!(
                    "train.loss_weights: jtsp_ce trains without the reward term, but gamma = {}",
                    cfg.train.loss_weights.gamma
                )));
            }
            cfg.train.loss_weights.gamma = 0.0;
        }
        if let Some(s) = seed_override.or(cfg.seed) {
            cfg.train.seed = s;
        }
        cfg.seed = Some(cfg.train.seed);

        let abs = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        match &mut cfg.dataset {
            DatasetSpec::Synthetic(_) => {}
            DatasetSpec::File { path, .. } => abs(path),
            DatasetSpec::Splits {
                train, validation, test, ..
            } => {
                abs(train);
                abs(validation);
                abs(test);
            }
        }
        if let Some(dir) = &mut cfg.train.checkpoint_dir {
            abs(dir);
        }
        if let Some(dir) = &mut cfg.output_dir {
            abs(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base, seed_override)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train.validate()?;
        match &self.dataset {
            DatasetSpec::Synthetic(config) => {
                config.validate()?;
                if config.num_classes != self.labels.len() {
                    return Err(Error::Config(format!(
                        "dataset.synthetic.num_classes is {} but labels has {} names",
                        config.num_classes,
                        self.labels.len()
                    )));
                }
            }
            DatasetSpec::File { .. } | DatasetSpec::Splits { .. } => {}
        }
        check_ratios(&self.split_ratios)?;
        if let Some(d) = self.sweep.d_values.iter().find(|d| !(0.0..=1.0).contains(*d)) {
            return Err(Error::Config(format!("sweep.d_values: {d} is outside [0, 1]")));
        }
        if self.sweep.d_values.is_empty() {
            return Err(Error::Config("sweep.d_values is empty".into()));
        }
        if matches!(&self.conditions, Some(c) if c.is_empty()) {
            return Err(Error::Config("conditions is empty".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            feature_bits: self.feature_bits,
            cl_hidden: self.cl_hidden,
            dp_hidden: self.dp_hidden,
            labels: self.labels.clone(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    /// Loads or generates the examples and splits them.
    pub fn load_split(&self) -> Result<DatasetSplit> {
        let seed = self.seed();
        let r = (self.split_ratios[0], self.split_ratios[1], self.split_ratios[2]);
        let load = |p: &Path, f: &Option<FileFormat>| {
            load_examples(p, f.unwrap_or_else(|| FileFormat::from_path(p)), &self.labels)
        };
        match &self.dataset {
            DatasetSpec::Synthetic(config) => split(&gen_synthetic(config)?, r, seed),
            DatasetSpec::File {
                path,
                format,
                unseen_questions,
            } => {
                let data = load(path, format)?;
                if *unseen_questions {
                    split_by_question(&data, r, seed)
                } else {
                    split(&data, r, seed)
                }
            }
            DatasetSpec::Splits {
                train,
                validation,
                test,
                format,
            } => Ok(DatasetSplit {
                train: load(train, format)?,
                validation: load(validation, format)?,
                test: load(test, format)?,
                split_seed: seed,
            }),
        }
    }

    pub fn to_pretty_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

fn check_ratios(r: &[f64; 3]) -> Result<()> {
    if r.iter().any(|x| x.is_nan() || *x <= 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split_ratios {r:?} must be positive and sum to 1")));
    }
    Ok(())
}

#[derive(Debug, Parser)]
#[command(name = "seldefer", version, about = "Selective prediction with a jointly trained deferral policy")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for compare and sweep.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one condition and write its artifacts.
    Train(Common),
    /// Score a checkpoint (and optional baseline policy) on a data file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Threshold or logistic policy file written by `train`.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Run configuration whose model settings must match the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run several conditions on identical splits.
    Compare(Common),
    /// Sweep the deferral weight d of the reward [1-d, 0, 0, d].
    Sweep(Common),
    /// Write a synthetic corpus as train/validation/test files.
    GenSynth(Common),
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const POLICY_FILE: &str = "policy.bin";
pub const EPOCH_LOG_FILE: &str = "epoch_log.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
pub const COMPARISON_FILE: &str = "comparison.json";
pub const SWEEP_FILE: &str = "sweep.csv";

/// Written by `train` and `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<Condition>,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub data_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<MetricsRecord>,
    pub test: MetricsRecord,
}

impl MetricsReport {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }
}

#[derive(Serialize)]
struct EpochRow<'a> {
    phase: &'a str,
    epoch: usize,
    loss_cl: f64,
    loss_dp: f64,
    reward: f64,
    loss_total: f64,
    val_cl_acc: f64,
    val_dp_acc: f64,
    val_dp_f1: f64,
    val_sp_acc: f64,
    val_sp_f1: f64,
    val_deferral_rate: f64,
}

pub fn write_epoch_log(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::invalid(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in records {
        w.serialize(EpochRow {
            phase: r.phase.as_str(),
            epoch: r.epoch,
            loss_cl: r.loss_cl,
            loss_dp: r.loss_dp,
            reward: r.reward,
            loss_total: r.loss_total,
            val_cl_acc: r.validation.cl_acc,
            val_dp_acc: r.validation.dp_acc,
            val_dp_f1: r.validation.dp_f1,
            val_sp_acc: r.validation.sp_acc,
            val_sp_f1: r.validation.sp_f1,
            val_deferral_rate: r.validation.deferral_rate,
        })
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

fn output_dir(cfg: &RunConfig, out: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn prepare(common: &Common) -> Result<(RunConfig, PathBuf)> {
    if common.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    let mut cfg = RunConfig::load(&common.config, common.seed)?;
    let dir = output_dir(&cfg, &common.out)?;
    cfg.output_dir = Some(dir.clone());
    write(&dir.join(RESOLVED_CONFIG_FILE), cfg.to_pretty_json())?;
    Ok((cfg, dir))
}

pub fn cmd_train(common: &Common) -> Result<MetricsReport> {
    let (cfg, dir) = prepare(common)?;
    let split = cfg.load_split()?;
    let data = ExperimentData::new(&split, cfg.feature_bits)?;
    let model_cfg = cfg.model_config();
    let run = run_condition(cfg.condition, &model_cfg, &cfg.train, &data)?;

    run.checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
    if run.rule != DeferralRule::Learned {
        run.rule.save(&dir.join(POLICY_FILE))?;
    }
    write_epoch_log(&dir.join(EPOCH_LOG_FILE), &run.records)?;
    let report = MetricsReport {
        condition: Some(cfg.condition),
        config_hash: model_cfg.hash(),
        seed: Some(cfg.seed()),
        data_hash: data.test_hash.clone(),
        selected_epoch: Some(run.checkpoint.epoch),
        validation: Some(run.validation),
        test: run.test,
    };
    write(&dir.join(METRICS_FILE), json(&report))?;
    Ok(report)
}

pub fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    policy: Option<&Path>,
    config: Option<&Path>,
    out: Option<&Path>,
) -> Result<MetricsReport> {
    let ck = match config {
        Some(c) => Checkpoint::load_compatible(checkpoint, &RunConfig::load(c, None)?.model_config())?,
        None => Checkpoint::load(checkpoint)?,
    };
    let labels = &ck.model.config.labels;
    let examples = load_examples(data, FileFormat::from_path(data), labels)?;
    let featurized = crate::dataset::Featurizer::new(ck.model.config.feature_bits)?.featurize_all(&examples);
    let rule = match policy {
        Some(p) => DeferralRule::load(p)?,
        None => DeferralRule::Learned,
    };
    let report = MetricsReport {
        condition: None,
        config_hash: ck.model.config.hash(),
        seed: None,
        data_hash: crate::experiment::examples_hash(&examples),
        selected_epoch: Some(ck.epoch),
        validation: None,
        test: rule.evaluate(&ck.model, &featurized)?,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join(METRICS_FILE), json(&report))?;
    }
    Ok(report)
}

pub fn cmd_compare(common: &Common) -> Result<ComparisonReport> {
    let (cfg, dir) = prepare(common)?;
    let split = cfg.load_split()?;
    let data = ExperimentData::new(&split, cfg.feature_bits)?;
    let model_cfg = cfg.model_config();
    let conditions = cfg.conditions.clone().unwrap_or_else(|| Condition::ALL.to_vec());
    let runs = run_conditions(&conditions, &model_cfg, &cfg.train, &data, common.threads)?;
    let report = ComparisonReport::from_runs(model_cfg.hash(), cfg.seed(), &data.test_hash, &runs);
    write(&dir.join(COMPARISON_FILE), json(&report))?;
    write(&dir.join("comparison.txt"), report.to_table())?;
    if report.rows.iter().all(|r| r.error.is_some()) {
        return Err(Error::State("every condition failed".into()));
    }
    Ok(report)
}

pub fn cmd_sweep(common: &Common) -> Result<Vec<crate::evaluation::SweepRow>> {
    let (cfg, dir) = prepare(common)?;
    if cfg.condition != Condition::Jtsp {
        return Err(Error::Config(format!(
            "condition: sweep runs jtsp, config names {}",
            cfg.condition
        )));
    }
    let split = cfg.load_split()?;
    let data = ExperimentData::new(&split, cfg.feature_bits)?;
    let rows = sweep_d(&cfg.model_config(), &cfg.train, &data, &cfg.sweep.d_values, common.threads)?;
    write(&dir.join(SWEEP_FILE), sweep_csv(&rows))?;
    write(&dir.join("sweep.json"), json(&rows))?;
    Ok(rows)
}

/// Writes `train.csv`, `validation.csv` and `test.csv`.
pub fn cmd_gen_synth(common: &Common) -> Result<[PathBuf; 3]> {
    let (cfg, dir) = prepare(common)?;
    if !matches!(cfg.dataset, DatasetSpec::Synthetic(_)) {
        return Err(Error::Config("dataset: gen-synth needs a synthetic dataset".into()));
    }
    let s = cfg.load_split()?;
    let paths = ["train.csv", "validation.csv", "test.csv"].map(|f| dir.join(f));
    for (p, ex) in paths.iter().zip([&s.train, &s.validation, &s.test]) {
        write_examples(p, FileFormat::Csv, &cfg.labels, ex)?;
    }
    Ok(paths)
}

fn exit_code(e: &Error) -> u8 {
    if e.is_runtime_failure() {
        3
    } else {
        2
    }
}

/// Runs a parsed command, printing human-readable output.
pub fn run(cli: Cli) -> ExitCode {
    let result: Result<()> = match &cli.command {
        Command::Train(c) => cmd_train(c).map(|r| print!("{}", r.test.to_table())),
        Command::Eval {
            checkpoint,
            data,
            policy,
            config,
            out,
        } => cmd_eval(checkpoint, data, policy.as_deref(), config.as_deref(), out.as_deref()).map(|r| {
            print!("{}", r.test.to_table());
            if out.is_none() {
                println!("{}", serde_json::to_string(&r).expect("report serializes"));
            }
        }),
        Command::Compare(c) => cmd_compare(c).map(|r| print!("{}", r.to_table())),
        Command::Sweep(c) => cmd_sweep(c).map(|rows| print!("{}", sweep_csv(&rows))),
        Command::GenSynth(c) => cmd_gen_synth(c).map(|paths| {
            for p in paths {
                println!("{}", p.display());
            }
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
