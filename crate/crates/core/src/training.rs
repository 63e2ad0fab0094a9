//! Three-phase training: classifier warm-up, policy warm-up with the
//! classifier frozen, then joint optimization of
//! `alpha * CE(CL) + beta * CE(DP) - gamma * R`.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::dataset::FeaturizedExample;
use crate::error::{Error, Result};
use crate::evaluation::{compute_metrics, MetricsRecord};
use crate::model::{
    decide, predict, Checkpoint, FreezeMask, GradRoute, LogitGrads, ModelGrads, ParamId, Phase, SelectiveModel,
};
use crate::numerics::{cross_entropy, Adam, AdamConfig, ProbabilityVector, RandomStream};
use crate::reward::{per_example_reward, reward_logit_grad, validate_signal, RewardSignal};

/// `[alpha, beta, gamma]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl From<[f64; 3]> for LossWeights {
    fn from([alpha, beta, gamma]: [f64; 3]) -> Self {
        Self { alpha, beta, gamma }
    }
}

impl From<LossWeights> for [f64; 3] {
    fn from(w: LossWeights) -> Self {
        [w.alpha, w.beta, w.gamma]
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::new(1.0, 1.0, 1.0)
    }
}

impl LossWeights {
    pub const fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self { alpha, beta, gamma }
    }

    /// Published per-dataset settings: `istudio` `[1,1,1]`, `beetle`
    /// `[0.01,0.01,15]`, `scients` `[0.1,0.1,10]`, `midphys` `[0.1,0.1,1]`.
    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "istudio" => Some(Self::new(1.0, 1.0, 1.0)),
            "beetle" => Some(Self::new(0.01, 0.01, 15.0)),
            "scients" => Some(Self::new(0.1, 0.1, 10.0)),
            "midphys" | "mid-phys" => Some(Self::new(0.1, 0.1, 1.0)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Config(format!("loss weights must be non-negative, got {w:?}")));
        }
        if w.iter().all(|&x| x == 0.0) {
            return Err(Error::Config("loss weights are all zero".into()));
        }
        Ok(())
    }
}

fn default_warmup() -> usize {
    10
}
fn default_joint_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    AdamConfig::default().learning_rate
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Classifier warm-up epochs.
    #[serde(default = "default_warmup")]
    pub n_warmup_cl: usize,
    /// Policy warm-up epochs.
    #[serde(default = "default_warmup")]
    pub m_warmup_dp: usize,
    /// Joint epochs.
    #[serde(default = "default_joint_epochs")]
    pub joint_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub reward: RewardSignal,
    /// Per-epoch joint checkpoints are written here when set.
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Let the reward gradient reach the classifier through `h_C`.
    #[serde(default = "default_true")]
    pub reward_into_classifier: bool,
    /// Fraction of the training set withheld from classifier warm-up and
    /// used alone for policy warm-up, so deferral labels come from
    /// predictions on unseen answers. Zero disables.
    #[serde(default)]
    pub dp_holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_warmup_cl: default_warmup(),
            m_warmup_dp: default_warmup(),
            joint_epochs: default_joint_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            seed: 0,
            loss_weights: LossWeights::default(),
            reward: RewardSignal::default(),
            checkpoint_dir: None,
            reward_into_classifier: true,
            dp_holdout_fraction: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.dp_holdout_fraction) {
            return Err(Error::Config("dp_holdout_fraction must be in [0, 1)".into()));
        }
        self.loss_weights.validate()?;
        validate_signal(&self.reward).map_err(|e| Error::Config(e.to_string()))
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Mean training loss components and validation metrics for one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub loss_cl: f64,
    pub loss_dp: f64,
    pub reward: f64,
    /// The optimized objective; for the joint phase
    /// `alpha * loss_cl + beta * loss_dp - gamma * reward`.
    pub loss_total: f64,
    pub validation: MetricsRecord,
}

/// Per-example value of the joint objective.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss(
    p_c: &ProbabilityVector,
    gold: usize,
    p_d: &ProbabilityVector,
    defer_label: usize,
    cl_correct: bool,
    weights: &LossWeights,
    signal: &RewardSignal,
) -> Result<f64> {
    let (ce_c, _) = cross_entropy(p_c, gold)?;
    let (ce_d, _) = cross_entropy(p_d, defer_label)?;
    let r = per_example_reward(p_d, cl_correct, signal);
    Ok(weights.alpha * ce_c + weights.beta * ce_d - weights.gamma * r)
}

/// Batch value of the joint objective and its parts, computed exactly as
/// the training loop does: the deferral label and correctness come from
/// the classifier's current argmax.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub ce_cl: f64,
    pub ce_dp: f64,
    pub reward: f64,
    pub total: f64,
}

pub fn batch_joint_loss(
    model: &SelectiveModel,
    batch: &[&FeaturizedExample],
    weights: &LossWeights,
    signal: &RewardSignal,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let (mut ce_cl, mut ce_dp, mut reward) = (0.0, 0.0, 0.0);
    for ex in batch {
        let (p_c, p_d) = model.infer(&ex.features)?;
        let correct = predict(&p_c) == ex.label();
        ce_cl += cross_entropy(&p_c, ex.label())?.0;
        ce_dp += cross_entropy(&p_d, (!correct) as usize)?.0;
        reward += per_example_reward(&p_d, correct, signal);
    }
    let n = batch.len() as f64;
    let (ce_cl, ce_dp, reward) = (ce_cl / n, ce_dp / n, reward / n);
    Ok(BatchLoss {
        ce_cl,
        ce_dp,
        reward,
        total: weights.alpha * ce_cl + weights.beta * ce_dp - weights.gamma * reward,
    })
}

/// Analytic gradient of [`batch_joint_loss`]'s total.
pub fn batch_joint_grads(
    model: &SelectiveModel,
    batch: &[&FeaturizedExample],
    weights: &LossWeights,
    signal: &RewardSignal,
    route: GradRoute,
) -> Result<(BatchLoss, ModelGrads)> {
    let mut grads = ModelGrads::zeros_like(model);
    let loss = accumulate_joint(model, batch, weights, signal, route, &mut grads)?;
    Ok((loss, grads))
}

fn accumulate_joint(
    model: &SelectiveModel,
    batch: &[&FeaturizedExample],
    weights: &LossWeights,
    signal: &RewardSignal,
    route: GradRoute,
    grads: &mut ModelGrads,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let n = batch.len() as f64;
    let (mut ce_cl, mut ce_dp, mut reward) = (0.0, 0.0, 0.0);
    for ex in batch {
        let (cl, dp) = model.trace(&ex.features)?;
        let correct = predict(&cl.p_c) == ex.label();
        let (l_c, g_c) = cross_entropy(&cl.p_c, ex.label())?;
        let (l_d, g_d) = cross_entropy(&dp.p_d, (!correct) as usize)?;
        let r = per_example_reward(&dp.p_d, correct, signal);
        let g_r = reward_logit_grad(&dp.p_d, correct, signal);
        ce_cl += l_c;
        ce_dp += l_d;
        reward += r;
        let up = LogitGrads {
            classifier: Some(g_c.iter().map(|g| weights.alpha * g / n).collect()),
            policy_ce: Some([weights.beta * g_d[0] / n, weights.beta * g_d[1] / n]),
            policy_reward: Some([-weights.gamma * g_r[0] / n, -weights.gamma * g_r[1] / n]),
        };
        model.backward(&cl, Some(&dp), &up, route, &FreezeMask::all_trainable(), grads)?;
    }
    let (ce_cl, ce_dp, reward) = (ce_cl / n, ce_dp / n, reward / n);
    Ok(BatchLoss {
        ce_cl,
        ce_dp,
        reward,
        total: weights.alpha * ce_cl + weights.beta * ce_dp - weights.gamma * reward,
    })
}

/// Ideal deferral label per example: 1 iff the classifier's prediction is
/// wrong.
pub fn dp_labels(model: &SelectiveModel, data: &[FeaturizedExample]) -> Result<Vec<usize>> {
    data.iter()
        .map(|ex| {
            let (_, p_c) = model.cl_forward(&ex.features)?;
            Ok((predict(&p_c) != ex.label()) as usize)
        })
        .collect()
}

/// Classifier predictions and policy decisions for `data`.
pub fn predictions(model: &SelectiveModel, data: &[FeaturizedExample]) -> Result<(Vec<usize>, Vec<bool>)> {
    let mut preds = Vec::with_capacity(data.len());
    let mut actions = Vec::with_capacity(data.len());
    for ex in data {
        let (p_c, p_d) = model.infer(&ex.features)?;
        preds.push(predict(&p_c));
        actions.push(decide(&p_d));
    }
    Ok((preds, actions))
}

/// Metrics of the full system; with `use_policy == false` nothing is
/// deferred.
pub fn evaluate(model: &SelectiveModel, data: &[FeaturizedExample], use_policy: bool) -> Result<MetricsRecord> {
    let (preds, mut actions) = predictions(model, data)?;
    if !use_policy {
        actions.iter_mut().for_each(|a| *a = false);
    }
    let gold: Vec<usize> = data.iter().map(FeaturizedExample::label).collect();
    compute_metrics(&preds, &gold, &actions)
}

/// Highest validation SP accuracy, then lower deferral rate, then earlier
/// epoch. Checkpoints without validation metrics rank last.
pub fn select_checkpoint(checkpoints: &[Checkpoint]) -> Option<&Checkpoint> {
    let key = |c: &Checkpoint| c.validation.as_ref().map(|m| (m.sp_acc, m.deferral_rate));
    checkpoints.iter().reduce(|best, c| {
        let better = match (key(c), key(best)) {
            (Some((acc, dr)), Some((bacc, bdr))) => {
                acc > bacc || (acc == bacc && (dr < bdr || (dr == bdr && c.epoch < best.epoch)))
            }
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (None, None) => c.epoch < best.epoch,
        };
        if better {
            c
        } else {
            best
        }
    })
}

/// Inputs are checked before training starts, so an invalid-argument
/// error inside the loop means the numbers blew up.
fn numeric(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::Divergence(m),
        other => other,
    }
}

/// Stateful driver for the three phases. Phase order is enforced: the
/// policy warm-up needs a warmed classifier and the joint phase needs both.
pub struct Trainer<'a> {
    model: SelectiveModel,
    config: TrainConfig,
    train: &'a [FeaturizedExample],
    validation: &'a [FeaturizedExample],
    shuffle: RandomStream,
    cl_fold: Vec<usize>,
    dp_fold: Vec<usize>,
    cl_epochs: usize,
    dp_warmed: bool,
    records: Vec<EpochRecord>,
}

/// Result of the joint phase.
#[derive(Debug, Clone)]
pub struct JointOutcome {
    /// One checkpoint per joint epoch, in order.
    pub checkpoints: Vec<Checkpoint>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: SelectiveModel,
        config: TrainConfig,
        train: &'a [FeaturizedExample],
        validation: &'a [FeaturizedExample],
    ) -> Result<Self> {
        config.validate()?;
        if train.is_empty() || validation.is_empty() {
            return Err(Error::Config("training and validation sets must be non-empty".into()));
        }
        if let Some(ex) = train.iter().chain(validation).find(|e| e.features.len() != model.config.input_dim()) {
            return Err(Error::invalid(format!(
                "example has {} features, model expects {}",
                ex.features.len(),
                model.config.input_dim()
            )));
        }
        let mut all: Vec<usize> = (0..train.len()).collect();
        let (cl_fold, dp_fold) = if config.dp_holdout_fraction > 0.0 {
            RandomStream::derive(config.seed, 0x40_1d).shuffle(&mut all);
            let k = ((train.len() as f64) * config.dp_holdout_fraction).round() as usize;
            let k = k.clamp(1, train.len() - 1);
            let mut dp = all.split_off(train.len() - k);
            all.sort_unstable();
            dp.sort_unstable();
            (all, dp)
        } else {
            (all.clone(), all)
        };
        Ok(Self {
            model,
            shuffle: RandomStream::derive(config.seed, 0x5407),
            config,
            train,
            validation,
            cl_fold,
            dp_fold,
            cl_epochs: 0,
            dp_warmed: false,
            records: Vec::new(),
        })
    }

    pub fn model(&self) -> &SelectiveModel {
        &self.model
    }

    pub fn into_model(self) -> SelectiveModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Takes effect at the start of the next phase.
    pub fn set_learning_rate(&mut self, rate: f64) -> Result<()> {
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {rate} must be positive")));
        }
        self.config.learning_rate = rate;
        Ok(())
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn take_records(&mut self) -> Vec<EpochRecord> {
        std::mem::take(&mut self.records)
    }

    fn batches(&mut self, pool: &[usize]) -> Vec<Vec<usize>> {
        let mut order = pool.to_vec();
        self.shuffle.shuffle(&mut order);
        order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect()
    }

    fn step(&mut self, opt: &mut Adam, grads: &ModelGrads, mask: &FreezeMask) -> Result<()> {
        let g: Vec<&[f64]> = ParamId::ALL.iter().map(|&p| grads.tensor(p)).collect();
        let mut params = self.model.tensors_mut();
        opt.step(&mut params, &g, mask.as_slice())
    }

    fn check_finite(phase: Phase, epoch: usize, values: &[f64]) -> Result<()> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite loss in {} epoch {epoch}",
                phase.as_str()
            )));
        }
        Ok(())
    }

    /// Cross-entropy training of the classifier alone for `epochs` epochs.
    pub fn warmup_cl(&mut self, epochs: usize) -> Result<&[EpochRecord]> {
        let start = self.records.len();
        let mask = FreezeMask::freeze_policy();
        let mut opt = Adam::new(self.config.adam(), &self.model.tensor_sizes());
        let pool = self.cl_fold.clone();
        for epoch in 1..=epochs {
            let mut total = 0.0;
            for batch in self.batches(&pool) {
                let n = batch.len() as f64;
                let mut grads = ModelGrads::zeros_like(&self.model);
                for &i in &batch {
                    let ex = &self.train[i];
                    let cl = self.model.cl.trace(&ex.features).map_err(numeric)?;
                    let (loss, g) = cross_entropy(&cl.p_c, ex.label()).map_err(numeric)?;
                    total += loss;
                    let up = LogitGrads {
                        classifier: Some(g.iter().map(|v| v / n).collect()),
                        ..LogitGrads::default()
                    };
                    self.model
                        .backward(&cl, None, &up, GradRoute::default(), &mask, &mut grads)?;
                }
                Self::check_finite(Phase::ClWarmup, epoch, &[total])?;
                self.step(&mut opt, &grads, &mask)?;
            }
            let mean = total / pool.len() as f64;
            self.records.push(EpochRecord {
                epoch,
                phase: Phase::ClWarmup,
                loss_cl: mean,
                loss_dp: 0.0,
                reward: 0.0,
                loss_total: mean,
                validation: evaluate(&self.model, self.validation, false).map_err(numeric)?,
            });
        }
        self.cl_epochs += epochs;
        Ok(&self.records[start..])
    }

    /// Cross-entropy training of the policy against labels computed once
    /// from the frozen classifier.
    pub fn warmup_dp(&mut self, epochs: usize) -> Result<&[EpochRecord]> {
        if self.cl_epochs == 0 {
            return Err(Error::State(
                "policy warm-up needs a trained classifier to produce deferral labels".into(),
            ));
        }
        let start = self.records.len();
        let mask = FreezeMask::freeze_classifier();
        let mut opt = Adam::new(self.config.adam(), &self.model.tensor_sizes());
        let pool = self.dp_fold.clone();
        let mut labels = vec![0usize; self.train.len()];
        for &i in &pool {
            let (_, p_c) = self.model.cl_forward(&self.train[i].features)?;
            labels[i] = (predict(&p_c) != self.train[i].label()) as usize;
        }
        for epoch in 1..=epochs {
            let mut total = 0.0;
            for batch in self.batches(&pool) {
                let n = batch.len() as f64;
                let mut grads = ModelGrads::zeros_like(&self.model);
                for &i in &batch {
                    let (cl, dp) = self.model.trace(&self.train[i].features).map_err(numeric)?;
                    let (loss, g) = cross_entropy(&dp.p_d, labels[i]).map_err(numeric)?;
                    total += loss;
                    let up = LogitGrads {
                        policy_ce: Some([g[0] / n, g[1] / n]),
                        ..LogitGrads::default()
                    };
                    self.model
                        .backward(&cl, Some(&dp), &up, GradRoute::default(), &mask, &mut grads)?;
                }
                Self::check_finite(Phase::DpWarmup, epoch, &[total])?;
                self.step(&mut opt, &grads, &mask)?;
            }
            let mean = total / pool.len() as f64;
            self.records.push(EpochRecord {
                epoch,
                phase: Phase::DpWarmup,
                loss_cl: 0.0,
                loss_dp: mean,
                reward: 0.0,
                loss_total: mean,
                validation: evaluate(&self.model, self.validation, true).map_err(numeric)?,
            });
        }
        self.dp_warmed = true;
        Ok(&self.records[start..])
    }

    fn snapshot(&self, epoch: usize, phase: Phase, validation: MetricsRecord) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            epoch,
            phase,
            validation: Some(validation),
        }
    }

    /// Joint optimization for `joint_epochs` epochs. Deferral labels and
    /// correctness are recomputed from the current classifier for every
    /// batch. A checkpoint is taken after each epoch; on divergence the
    /// model is restored to the last good one and the error returned.
    pub fn joint_train(&mut self) -> Result<JointOutcome> {
        if self.cl_epochs == 0 || !self.dp_warmed {
            return Err(Error::State(
                "joint training requires both warm-up phases to have run".into(),
            ));
        }
        let weights = self.config.loss_weights;
        let signal = self.config.reward;
        let route = GradRoute {
            policy_ce_into_classifier: true,
            reward_into_classifier: self.config.reward_into_classifier,
        };
        let mut opt = Adam::new(self.config.adam(), &self.model.tensor_sizes());
        let all: Vec<usize> = (0..self.train.len()).collect();
        let mut checkpoints = Vec::new();
        let mut last_good = self.model.clone();
        if let Some(dir) = &self.config.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }

        for epoch in 1..=self.config.joint_epochs {
            let (mut ce_cl, mut ce_dp, mut reward, mut total) = (0.0, 0.0, 0.0, 0.0);
            let outcome: Result<MetricsRecord> = (|| {
                for batch in self.batches(&all) {
                    let refs: Vec<&FeaturizedExample> = batch.iter().map(|&i| &self.train[i]).collect();
                    let mut grads = ModelGrads::zeros_like(&self.model);
                    let loss = accumulate_joint(&self.model, &refs, &weights, &signal, route, &mut grads).map_err(numeric)?;
                    Self::check_finite(Phase::Joint, epoch, &[loss.total])?;
                    let n = refs.len() as f64;
                    ce_cl += loss.ce_cl * n;
                    ce_dp += loss.ce_dp * n;
                    reward += loss.reward * n;
                    total += loss.total * n;
                    self.step(&mut opt, &grads, &FreezeMask::all_trainable())?;
                }
                evaluate(&self.model, self.validation, true).map_err(numeric)
            })();
            let validation = match outcome {
                Ok(v) => v,
                Err(e) => {
                    self.model = last_good;
                    return Err(e);
                }
            };
            let n = all.len() as f64;
            self.records.push(EpochRecord {
                epoch,
                phase: Phase::Joint,
                loss_cl: ce_cl / n,
                loss_dp: ce_dp / n,
                reward: reward / n,
                loss_total: total / n,
                validation: validation.clone(),
            });
            let ck = self.snapshot(epoch, Phase::Joint, validation);
            if let Some(dir) = &self.config.checkpoint_dir {
                ck.save(&dir.join(format!("joint_epoch_{epoch:03}.ckpt")))?;
            }
            last_good = self.model.clone();
            checkpoints.push(ck);
        }
        Ok(JointOutcome { checkpoints })
    }

    /// A checkpoint of the current state, scored on validation.
    pub fn checkpoint(&self, epoch: usize, phase: Phase) -> Result<Checkpoint> {
        let validation = evaluate(&self.model, self.validation, phase != Phase::ClWarmup)?;
        Ok(self.snapshot(epoch, phase, validation))
    }
}

/// Runs all three phases and returns the selected checkpoint (the end of
/// policy warm-up when there are no joint epochs) with every epoch record.
pub fn train_joint(
    model: SelectiveModel,
    config: &TrainConfig,
    train: &[FeaturizedExample],
    validation: &[FeaturizedExample],
) -> Result<(Checkpoint, Vec<EpochRecord>)> {
    let mut trainer = Trainer::new(model, config.clone(), train, validation)?;
    trainer.warmup_cl(config.n_warmup_cl)?;
    trainer.warmup_dp(config.m_warmup_dp)?;
    let outcome = trainer.joint_train()?;
    let selected = match select_checkpoint(&outcome.checkpoints) {
        Some(ck) => ck.clone(),
        None => trainer.checkpoint(config.m_warmup_dp, Phase::DpWarmup)?,
    };
    Ok((selected, trainer.take_records()))
}
