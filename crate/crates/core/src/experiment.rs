//! Condition pipelines on fixed splits, the condition comparison and the
//! deferral-weight sweep.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{fit_lr, fit_threshold, policy_condition, DeferralRule};
use crate::dataset::{DatasetSplit, Example, FeaturizedExample, Featurizer};
use crate::error::{Error, Result};
use crate::evaluation::{MetricsRecord, SweepRow};
use crate::model::{Checkpoint, ModelConfig, Phase, SelectiveModel};
use crate::reward::constrained_signal;
use crate::training::{train_joint, EpochRecord, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Thresh,
    Lr,
    Policy,
    JtspCe,
    Jtsp,
}

impl Condition {
    pub const ALL: [Condition; 5] = [Self::Thresh, Self::Lr, Self::Policy, Self::JtspCe, Self::Jtsp];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Thresh => "thresh",
            Self::Lr => "lr",
            Self::Policy => "policy",
            Self::JtspCe => "jtsp_ce",
            Self::Jtsp => "jtsp",
        }
    }

    /// Conditions built on the separately trained classifier.
    pub fn is_standalone(self) -> bool {
        matches!(self, Self::Thresh | Self::Lr | Self::Policy)
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown condition {s:?}; expected one of thresh, lr, policy, jtsp_ce, jtsp")))
    }
}

/// SHA-256 over the examples' ids, texts and labels.
pub fn examples_hash(examples: &[Example]) -> String {
    let mut h = Sha256::new();
    for e in examples {
        h.update(e.question_id.as_bytes());
        h.update([0x1f]);
        h.update(e.answer_text.as_bytes());
        h.update([0x1f]);
        h.update((e.gold_label as u64).to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Featurized splits shared by every condition of a run.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub train: Vec<FeaturizedExample>,
    pub validation: Vec<FeaturizedExample>,
    pub test: Vec<FeaturizedExample>,
    pub test_hash: String,
}

impl ExperimentData {
    pub fn new(split: &DatasetSplit, feature_bits: u32) -> Result<Self> {
        let f = Featurizer::new(feature_bits)?;
        Ok(Self {
            train: f.featurize_all(&split.train),
            validation: f.featurize_all(&split.validation),
            test: f.featurize_all(&split.test),
            test_hash: examples_hash(&split.test),
        })
    }
}

/// Trained artifacts and scores of one condition.
#[derive(Debug, Clone)]
pub struct ConditionRun {
    pub condition: Condition,
    pub checkpoint: Checkpoint,
    pub rule: DeferralRule,
    pub records: Vec<EpochRecord>,
    pub validation: MetricsRecord,
    pub test: MetricsRecord,
}

/// The training configuration a condition actually uses: `jtsp_ce` drops
/// the reward term.
pub fn condition_config(condition: Condition, base: &TrainConfig) -> TrainConfig {
    let mut cfg = base.clone();
    if condition == Condition::JtspCe {
        cfg.loss_weights.gamma = 0.0;
    }
    cfg
}

fn finish(
    condition: Condition,
    checkpoint: Checkpoint,
    rule: DeferralRule,
    records: Vec<EpochRecord>,
    data: &ExperimentData,
) -> Result<ConditionRun> {
    let validation = rule.evaluate(&checkpoint.model, &data.validation)?;
    let test = rule.evaluate(&checkpoint.model, &data.test)?;
    Ok(ConditionRun {
        condition,
        checkpoint,
        rule,
        records,
        validation,
        test,
    })
}

fn run_joint(
    condition: Condition,
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    data: &ExperimentData,
) -> Result<ConditionRun> {
    let cfg = condition_config(condition, base);
    let model = SelectiveModel::new(model_cfg.clone(), cfg.seed)?;
    let (ck, records) = train_joint(model, &cfg, &data.train, &data.validation)?;
    finish(condition, ck, DeferralRule::Learned, records, data)
}

/// Threshold, LR and Policy from one separately trained classifier.
fn run_standalone(
    wanted: &[Condition],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &ExperimentData,
) -> Vec<(Condition, Result<ConditionRun>)> {
    let base = SelectiveModel::new(model_cfg.clone(), cfg.seed)
        .and_then(|m| policy_condition(m, cfg, &data.train, &data.validation));
    let (ck, records) = match base {
        Ok(v) => v,
        Err(e) => {
            let msg = e.to_string();
            return wanted
                .iter()
                .map(|&c| (c, Err(Error::State(format!("standalone training failed: {msg}")))))
                .collect();
        }
    };
    let cl_records: Vec<EpochRecord> = records.iter().filter(|r| r.phase == Phase::ClWarmup).cloned().collect();
    let cl_checkpoint = || Checkpoint {
        phase: Phase::ClWarmup,
        epoch: cl_records.len(),
        ..ck.clone()
    };
    wanted
        .iter()
        .map(|&c| {
            let run = match c {
                Condition::Policy => finish(c, ck.clone(), DeferralRule::Learned, records.clone(), data),
                Condition::Thresh => fit_threshold(&ck.model, &data.validation)
                    .and_then(|t| finish(c, cl_checkpoint(), DeferralRule::Threshold(t), cl_records.clone(), data)),
                Condition::Lr => fit_lr(&ck.model, &data.train, &data.validation)
                    .and_then(|l| finish(c, cl_checkpoint(), DeferralRule::Logistic(l), cl_records.clone(), data)),
                _ => unreachable!("not a standalone condition"),
            };
            (c, run)
        })
        .collect()
}

pub fn run_condition(
    condition: Condition,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &ExperimentData,
) -> Result<ConditionRun> {
    if condition.is_standalone() {
        run_standalone(&[condition], model_cfg, cfg, data)
            .pop()
            .expect("one result per condition")
            .1
    } else {
        run_joint(condition, model_cfg, cfg, data)
    }
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads <= 1 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Runs `conditions` on the same splits and initialization seed. Failures
/// stay in their row. Results follow the order of `conditions`.
pub fn run_conditions(
    conditions: &[Condition],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &ExperimentData,
    threads: usize,
) -> Result<Vec<(Condition, Result<ConditionRun>)>> {
    let mut unique: Vec<Condition> = Vec::new();
    for &c in conditions {
        if !unique.contains(&c) {
            unique.push(c);
        }
    }
    let standalone: Vec<Condition> = unique.iter().copied().filter(|c| c.is_standalone()).collect();
    let mut jobs: Vec<Vec<Condition>> = unique.iter().filter(|c| !c.is_standalone()).map(|&c| vec![c]).collect();
    if !standalone.is_empty() {
        jobs.insert(0, standalone);
    }
    let run_job = |job: &Vec<Condition>| -> Vec<(Condition, Result<ConditionRun>)> {
        if job[0].is_standalone() {
            run_standalone(job, model_cfg, cfg, data)
        } else {
            vec![(job[0], run_joint(job[0], model_cfg, cfg, data))]
        }
    };
    let mut done: Vec<(Condition, Result<ConditionRun>)> = if threads <= 1 {
        jobs.iter().flat_map(run_job).collect()
    } else {
        with_threads(threads, || jobs.par_iter().flat_map_iter(run_job).collect())?
    };
    Ok(unique
        .iter()
        .map(|c| {
            let i = done.iter().position(|(d, _)| d == c).expect("every condition ran");
            done.swap_remove(i)
        })
        .collect())
}

/// One row of a comparison report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub condition: Condition,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub test_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    pub fn from_runs(config_hash: String, seed: u64, test_hash: &str, runs: &[(Condition, Result<ConditionRun>)]) -> Self {
        let rows = runs
            .iter()
            .map(|(c, r)| ComparisonRow {
                condition: *c,
                metrics: r.as_ref().ok().map(|r| r.test.clone()),
                error: r.as_ref().err().map(ToString::to_string),
                test_hash: test_hash.to_string(),
            })
            .collect();
        Self { config_hash, seed, rows }
    }

    pub fn row(&self, condition: Condition) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.condition == condition)
    }

    /// DP, SP and DR per condition, as percentages.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<9} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
            "condition", "DP acc", "DP F1", "SP acc", "SP F1", "DR", "CL acc"
        );
        for r in &self.rows {
            match &r.metrics {
                Some(m) => s.push_str(&format!(
                    "{:<9} {:>7.1} {:>7.1} {:>7.1} {:>7.1} {:>7.1} {:>7.1}\n",
                    r.condition.as_str(),
                    100.0 * m.dp_acc,
                    100.0 * m.dp_f1,
                    100.0 * m.sp_acc,
                    100.0 * m.sp_f1,
                    100.0 * m.deferral_rate,
                    100.0 * m.cl_acc
                )),
                None => s.push_str(&format!(
                    "{:<9} failed: {}\n",
                    r.condition.as_str(),
                    r.error.as_deref().unwrap_or("unknown error")
                )),
            }
        }
        s
    }
}

/// `{0, 0.05, ..., 1}`.
pub fn default_d_values() -> Vec<f64> {
    (0..=20).map(|k| k as f64 / 20.0).collect()
}

/// Full three-phase JTSP run per `d` with reward `[1-d, 0, 0, d]`, all
/// from the same seed, scored on test. Rows are sorted by `d`.
pub fn sweep_d(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &ExperimentData,
    d_values: &[f64],
    threads: usize,
) -> Result<Vec<SweepRow>> {
    if let Some(bad) = d_values.iter().find(|d| !(0.0..=1.0).contains(*d)) {
        return Err(Error::Config(format!("sweep value d = {bad} is outside [0, 1]")));
    }
    let mut ds = d_values.to_vec();
    ds.sort_by(f64::total_cmp);
    let one = |&d: &f64| -> SweepRow {
        let run = constrained_signal(d).and_then(|signal| {
            let point = TrainConfig {
                reward: signal,
                checkpoint_dir: None,
                ..cfg.clone()
            };
            run_joint(Condition::Jtsp, model_cfg, &point, data)
        });
        match run {
            Ok(r) => SweepRow::from_metrics(d, cfg.seed, &r.test),
            Err(e) => SweepRow::failed(d, cfg.seed, e.to_string()),
        }
    };
    if threads <= 1 {
        Ok(ds.iter().map(one).collect())
    } else {
        with_threads(threads, || ds.par_iter().map(one).collect())
    }
}
