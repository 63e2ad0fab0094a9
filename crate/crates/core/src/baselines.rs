//! Non-joint deferral conditions: a max-softmax threshold, a logistic
//! regression over engineered features, and a policy trained separately
//! against a frozen classifier.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::dataset::FeaturizedExample;
use crate::error::{Error, Result};
use crate::evaluation::{compute_metrics, MetricsRecord};
use crate::model::{predict, Checkpoint, Phase, SelectiveModel};
use crate::numerics::{dot, ProbabilityVector};
use crate::training::{EpochRecord, TrainConfig, Trainer};

pub const THRESHOLD_KIND: &str = "threshold";
pub const LOGISTIC_KIND: &str = "logistic";

/// Defers when the classifier's top probability is below `tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub tau: f64,
}

impl ThresholdPolicy {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau.is_finite() && tau >= 0.0) {
            return Err(Error::invalid(format!("threshold {tau} must be finite and non-negative")));
        }
        Ok(Self { tau })
    }

    pub fn defers(&self, p_c: &ProbabilityVector) -> bool {
        p_c.max() < self.tau
    }

    pub fn to_container(&self) -> Container {
        Container::new(THRESHOLD_KIND, serde_json::json!({ "tau": self.tau }))
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(THRESHOLD_KIND)?;
        let tau = c.meta["tau"]
            .as_f64()
            .ok_or_else(|| Error::Checkpoint("threshold container lacks tau".into()))?;
        Self::new(tau)
    }
}

/// `{0.05, 0.10, ..., 1.00}`.
pub fn threshold_grid() -> Vec<f64> {
    (1..=20).map(|k| k as f64 / 20.0).collect()
}

fn threshold_outcome(p_c: &[ProbabilityVector], gold: &[usize], tau: f64) -> Result<MetricsRecord> {
    let policy = ThresholdPolicy { tau };
    let preds: Vec<usize> = p_c.iter().map(predict).collect();
    let actions: Vec<bool> = p_c.iter().map(|p| policy.defers(p)).collect();
    compute_metrics(&preds, gold, &actions)
}

/// Grid search on validation: the lowest deferral rate among thresholds
/// whose SP accuracy exceeds `cl_acc` (ties to the lower threshold);
/// failing that, the highest SP accuracy, then lower deferral rate, then
/// lower threshold.
pub fn select_threshold(p_c: &[ProbabilityVector], gold: &[usize], cl_acc: f64) -> Result<ThresholdPolicy> {
    if p_c.is_empty() {
        return Err(Error::invalid("threshold selection needs a non-empty validation set"));
    }
    let mut scored = Vec::new();
    for tau in threshold_grid() {
        let m = threshold_outcome(p_c, gold, tau)?;
        scored.push((tau, m.sp_acc, m.deferral_rate));
    }
    let qualifying = scored
        .iter()
        .filter(|(_, sp, _)| *sp > cl_acc)
        .min_by(|a, b| a.2.total_cmp(&b.2).then(a.0.total_cmp(&b.0)));
    let (tau, _, _) = match qualifying {
        Some(best) => *best,
        None => *scored
            .iter()
            .min_by(|a, b| {
                b.1.total_cmp(&a.1)
                    .then(a.2.total_cmp(&b.2))
                    .then(a.0.total_cmp(&b.0))
            })
            .expect("grid is non-empty"),
    };
    ThresholdPolicy::new(tau)
}

/// Classifier training accuracy per question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionAccuracyTable {
    pub per_question: BTreeMap<String, f64>,
    /// Used for question ids absent from the table.
    pub global: f64,
}

impl QuestionAccuracyTable {
    pub fn build(model: &SelectiveModel, train: &[FeaturizedExample]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::invalid("accuracy table of an empty set"));
        }
        let mut tally: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        let mut correct_total = 0;
        for ex in train {
            let (_, p_c) = model.cl_forward(&ex.features)?;
            let ok = predict(&p_c) == ex.label();
            correct_total += ok as usize;
            let t = tally.entry(ex.example.question_id.as_str()).or_default();
            t.0 += ok as usize;
            t.1 += 1;
        }
        Ok(Self {
            per_question: tally
                .into_iter()
                .map(|(q, (c, n))| (q.to_string(), c as f64 / n as f64))
                .collect(),
            global: correct_total as f64 / train.len() as f64,
        })
    }

    pub fn get(&self, question_id: &str) -> f64 {
        self.per_question.get(question_id).copied().unwrap_or(self.global)
    }
}

/// `[onehot(predicted), p_c, q_acc]`.
pub fn lr_features(p_c: &ProbabilityVector, predicted: usize, q_acc: f64) -> Vec<f64> {
    let k = p_c.len();
    let mut f = vec![0.0; 2 * k + 1];
    f[predicted] = 1.0;
    f[k..2 * k].copy_from_slice(p_c);
    f[2 * k] = q_acc;
    f
}

/// Logistic regression over [`lr_features`]; output 1 means defer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LRPolicy {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Number of classes the feature layout was built for.
    pub num_classes: usize,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LRPolicy {
    pub fn feature_len(&self) -> usize {
        2 * self.num_classes + 1
    }

    pub fn probability(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.feature_len() {
            return Err(Error::invalid(format!(
                "LR policy expects {} features, got {}",
                self.feature_len(),
                features.len()
            )));
        }
        Ok(sigmoid(dot(&self.weights, features) + self.bias))
    }

    pub fn defers(&self, features: &[f64]) -> Result<bool> {
        Ok(self.probability(features)? > 0.5)
    }
}

pub const LR_EPOCHS: usize = 500;
pub const LR_RATE: f64 = 0.5;

/// Full-batch gradient descent on the mean logistic loss from zero
/// weights. Examples are sorted first, so input order does not matter.
pub fn train_lr(features: &[Vec<f64>], labels: &[usize], epochs: usize, rate: f64) -> Result<LRPolicy> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::invalid(format!(
            "LR needs matching non-empty inputs, got {} rows and {} labels",
            features.len(),
            labels.len()
        )));
    }
    let dim = features[0].len();
    if dim < 3 || dim.is_multiple_of(2) || features.iter().any(|f| f.len() != dim) {
        return Err(Error::invalid("inconsistent LR feature layout"));
    }
    let mut rows: Vec<(&[f64], usize)> = features.iter().map(Vec::as_slice).zip(labels.iter().copied()).collect();
    rows.sort_by(|a, b| {
        a.0.iter()
            .zip(b.0)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
    });

    let mut policy = LRPolicy {
        weights: vec![0.0; dim],
        bias: 0.0,
        num_classes: (dim - 1) / 2,
    };
    let n = rows.len() as f64;
    for epoch in 0..epochs {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (x, y) in &rows {
            let err = sigmoid(dot(&policy.weights, x) + policy.bias) - *y as f64;
            for (g, xi) in gw.iter_mut().zip(*x) {
                *g += err * xi;
            }
            gb += err;
        }
        for (w, g) in policy.weights.iter_mut().zip(&gw) {
            *w -= rate * g / n;
        }
        policy.bias -= rate * gb / n;
        if !policy.bias.is_finite() || policy.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Divergence(format!("LR weights became non-finite at epoch {epoch}")));
        }
    }
    Ok(policy)
}

/// A fitted LR policy together with the accuracy table its features need.
#[derive(Debug, Clone, PartialEq)]
pub struct LrDeferral {
    pub policy: LRPolicy,
    pub table: QuestionAccuracyTable,
}

impl LrDeferral {
    pub fn features(&self, p_c: &ProbabilityVector, question_id: &str) -> Vec<f64> {
        lr_features(p_c, predict(p_c), self.table.get(question_id))
    }

    pub fn defers(&self, p_c: &ProbabilityVector, question_id: &str) -> Result<bool> {
        self.policy.defers(&self.features(p_c, question_id))
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(
            LOGISTIC_KIND,
            serde_json::json!({
                "num_classes": self.policy.num_classes,
                "layout": ["onehot_prediction", "class_probabilities", "question_accuracy"],
                "question_accuracy": self.table,
            }),
        );
        c.push("weights", &[self.policy.weights.len()], &self.policy.weights);
        c.push("bias", &[1], &[self.policy.bias]);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(LOGISTIC_KIND)?;
        let bad = |m: &str| Error::Checkpoint(format!("logistic container: {m}"));
        let num_classes = c.meta["num_classes"].as_u64().ok_or_else(|| bad("num_classes"))? as usize;
        let table: QuestionAccuracyTable =
            serde_json::from_value(c.meta["question_accuracy"].clone()).map_err(|e| bad(&e.to_string()))?;
        let weights = c.tensor("weights")?.1.clone();
        let bias = *c.tensor("bias")?.1.first().ok_or_else(|| bad("empty bias"))?;
        if weights.len() != 2 * num_classes + 1 {
            return Err(bad("weight length does not match the feature layout"));
        }
        Ok(Self {
            policy: LRPolicy {
                weights,
                bias,
                num_classes,
            },
            table,
        })
    }
}

/// Fits the LR policy on `validation`, labelled by where `model`'s
/// classifier errs; question accuracies come from `train`.
pub fn fit_lr(model: &SelectiveModel, train: &[FeaturizedExample], validation: &[FeaturizedExample]) -> Result<LrDeferral> {
    let table = QuestionAccuracyTable::build(model, train)?;
    let mut feats = Vec::with_capacity(validation.len());
    let mut labels = Vec::with_capacity(validation.len());
    for ex in validation {
        let (_, p_c) = model.cl_forward(&ex.features)?;
        let pred = predict(&p_c);
        feats.push(lr_features(&p_c, pred, table.get(&ex.example.question_id)));
        labels.push((pred != ex.label()) as usize);
    }
    let policy = train_lr(&feats, &labels, LR_EPOCHS, LR_RATE)?;
    Ok(LrDeferral { policy, table })
}

/// Fits a threshold on `validation` for `model`'s classifier.
pub fn fit_threshold(model: &SelectiveModel, validation: &[FeaturizedExample]) -> Result<ThresholdPolicy> {
    let mut probs = Vec::with_capacity(validation.len());
    let mut gold = Vec::with_capacity(validation.len());
    let mut correct = 0;
    for ex in validation {
        let (_, p_c) = model.cl_forward(&ex.features)?;
        correct += (predict(&p_c) == ex.label()) as usize;
        probs.push(p_c);
        gold.push(ex.label());
    }
    let cl_acc = correct as f64 / validation.len().max(1) as f64;
    select_threshold(&probs, &gold, cl_acc)
}

/// Separate training: the classifier for `n + T` epochs, then the policy
/// for `m + T` epochs against the frozen classifier, cross-entropy only.
pub fn policy_condition(
    model: SelectiveModel,
    config: &TrainConfig,
    train: &[FeaturizedExample],
    validation: &[FeaturizedExample],
) -> Result<(Checkpoint, Vec<EpochRecord>)> {
    let mut trainer = Trainer::new(model, config.clone(), train, validation)?;
    trainer.warmup_cl(config.n_warmup_cl + config.joint_epochs)?;
    let dp_epochs = config.m_warmup_dp + config.joint_epochs;
    trainer.warmup_dp(dp_epochs)?;
    let ck = trainer.checkpoint(dp_epochs, Phase::DpWarmup)?;
    Ok((ck, trainer.take_records()))
}

/// How deferral decisions are made at evaluation time.
#[derive(Debug, Clone, PartialEq)]
pub enum DeferralRule {
    /// The model's own policy head.
    Learned,
    Threshold(ThresholdPolicy),
    Logistic(LrDeferral),
}

impl DeferralRule {
    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            Self::Learned => Err(Error::invalid("the learned policy is stored in the model checkpoint")),
            Self::Threshold(t) => t.to_container().save(path),
            Self::Logistic(l) => l.to_container().save(path),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        match c.kind.as_str() {
            THRESHOLD_KIND => Ok(Self::Threshold(ThresholdPolicy::from_container(&c)?)),
            LOGISTIC_KIND => Ok(Self::Logistic(LrDeferral::from_container(&c)?)),
            other => Err(Error::Checkpoint(format!("{other:?} is not a baseline policy container"))),
        }
    }

    pub fn decisions(&self, model: &SelectiveModel, data: &[FeaturizedExample]) -> Result<(Vec<usize>, Vec<bool>)> {
        let mut preds = Vec::with_capacity(data.len());
        let mut actions = Vec::with_capacity(data.len());
        for ex in data {
            let (h_c, p_c) = model.cl_forward(&ex.features)?;
            let defer = match self {
                Self::Learned => {
                    let (_, p_d) = model.dp_forward(&ex.features, &h_c)?;
                    crate::model::decide(&p_d)
                }
                Self::Threshold(t) => t.defers(&p_c),
                Self::Logistic(l) => l.defers(&p_c, &ex.example.question_id)?,
            };
            preds.push(predict(&p_c));
            actions.push(defer);
        }
        Ok((preds, actions))
    }

    pub fn evaluate(&self, model: &SelectiveModel, data: &[FeaturizedExample]) -> Result<MetricsRecord> {
        let (preds, actions) = self.decisions(model, data)?;
        let gold: Vec<usize> = data.iter().map(FeaturizedExample::label).collect();
        compute_metrics(&preds, &gold, &actions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(p: &[f64]) -> ProbabilityVector {
        ProbabilityVector::new(p.to_vec()).unwrap()
    }

    #[test]
    fn threshold_boundaries() {
        let p = pv(&[0.5, 0.3, 0.2]);
        assert!(!ThresholdPolicy::new(0.0).unwrap().defers(&p));
        let sure = pv(&[1.0, 0.0, 0.0]);
        let one = ThresholdPolicy::new(1.0).unwrap();
        assert!(one.defers(&p));
        assert!(!one.defers(&sure));
        assert!(ThresholdPolicy::new(1.0 + 1e-9).unwrap().defers(&sure));
        assert!(ThresholdPolicy::new(f64::NAN).is_err());
    }

    /// Ten validation examples, eight of them classified correctly.
    fn constructed() -> (Vec<ProbabilityVector>, Vec<usize>) {
        // Wrong ones: max 0.55 (deferred from tau 0.6) and 0.95 (never).
        // Correct ones: one at 0.58 (deferred from 0.6), one at 0.65
        // (deferred from 0.7), two at 0.68, the rest confident.
        let maxes = [0.55, 0.95, 0.58, 0.65, 0.68, 0.68, 0.9, 0.9, 0.9, 0.9];
        let wrong = [true, true, false, false, false, false, false, false, false, false];
        let mut probs = Vec::new();
        let mut gold = Vec::new();
        for (m, w) in maxes.iter().zip(wrong) {
            let rest = (1.0 - m) / 2.0;
            probs.push(pv(&[*m, rest, rest]));
            gold.push(if w { 1 } else { 0 });
        }
        (probs, gold)
    }

    #[test]
    fn constructed_grid_case() {
        let (p, g) = constructed();
        // CL acc 0.8. tau 0.6: defers 0.55 (wrong) and 0.58 (right) →
        // SP 0.9, DR 0.2. tau 0.7: also 0.65, 0.68, 0.68 → SP 0.9, DR 0.5.
        let m6 = threshold_outcome(&p, &g, 0.6).unwrap();
        assert_eq!((m6.cl_acc, m6.sp_acc, m6.deferral_rate), (0.8, 0.9, 0.2));
        let m7 = threshold_outcome(&p, &g, 0.7).unwrap();
        assert_eq!(m7.sp_acc, 0.9);
        assert!(m7.deferral_rate > 0.2);
        assert_eq!(select_threshold(&p, &g, 0.8).unwrap().tau, 0.6);
    }

    fn audit(p: &[ProbabilityVector], g: &[usize], cl_acc: f64, tau: f64) {
        let grid: Vec<(f64, MetricsRecord)> = threshold_grid()
            .into_iter()
            .map(|t| (t, threshold_outcome(p, g, t).unwrap()))
            .collect();
        let chosen = &grid.iter().find(|(t, _)| *t == tau).unwrap().1;
        let qualifying: Vec<_> = grid.iter().filter(|(_, m)| m.sp_acc > cl_acc).collect();
        if qualifying.is_empty() {
            for (t, m) in &grid {
                assert!(m.sp_acc <= chosen.sp_acc);
                if m.sp_acc == chosen.sp_acc {
                    assert!(m.deferral_rate > chosen.deferral_rate || (m.deferral_rate == chosen.deferral_rate && *t >= tau));
                }
            }
        } else {
            assert!(chosen.sp_acc > cl_acc);
            for (t, m) in qualifying {
                assert!(m.deferral_rate > chosen.deferral_rate || (m.deferral_rate == chosen.deferral_rate && *t >= tau));
            }
        }
    }

    #[test]
    fn confident_and_correct_falls_back_to_no_deferral() {
        let p = vec![pv(&[1.0, 0.0, 0.0]); 5];
        let g = vec![0; 5];
        let t = select_threshold(&p, &g, 1.0).unwrap();
        let m = threshold_outcome(&p, &g, t.tau).unwrap();
        assert_eq!((m.deferral_rate, m.sp_acc), (0.0, 1.0));
        audit(&p, &g, 1.0, t.tau);
    }

    #[test]
    fn degenerate_defer_everything() {
        // Wrong answers are the confident ones, so only deferring
        // everything beats the classifier.
        let p = vec![pv(&[0.99, 0.005, 0.005]), pv(&[0.5, 0.3, 0.2]), pv(&[0.45, 0.35, 0.2])];
        let g = vec![1, 0, 0];
        let t = select_threshold(&p, &g, 2.0 / 3.0).unwrap();
        assert_eq!(t.tau, 1.0);
        let m = threshold_outcome(&p, &g, t.tau).unwrap();
        assert_eq!((m.sp_acc, m.deferral_rate), (1.0, 1.0));
    }

    proptest::proptest! {
        #[test]
        fn selection_survives_brute_force_audit(
            rows in proptest::collection::vec((0.34f64..1.0, 0usize..3), 1..40)
        ) {
            let p: Vec<_> = rows.iter().map(|(m, _)| pv(&[*m, (1.0 - m) / 2.0, (1.0 - m) / 2.0])).collect();
            let g: Vec<_> = rows.iter().map(|(_, y)| *y).collect();
            let cl_acc = g.iter().filter(|&&y| y == 0).count() as f64 / g.len() as f64;
            let t = select_threshold(&p, &g, cl_acc).unwrap();
            audit(&p, &g, cl_acc, t.tau);
        }
    }

    #[test]
    fn lr_feature_layout() {
        let f = lr_features(&pv(&[0.5, 0.3, 0.2]), 0, 0.9);
        assert_eq!(f, vec![1.0, 0.0, 0.0, 0.5, 0.3, 0.2, 0.9]);
        let u = ProbabilityVector::uniform(3);
        let f = lr_features(&u, u.argmax(), 1.0);
        assert_eq!(f, vec![1.0, 0.0, 0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 1.0]);
        assert_eq!(f.len(), 7);
    }

    fn toy() -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            let q = if i < 10 { 0.05 * i as f64 } else { 0.55 + 0.045 * (i - 10) as f64 };
            feats.push(lr_features(&pv(&[0.6, 0.3, 0.1]), i % 3, q));
            labels.push((q < 0.5) as usize);
        }
        (feats, labels)
    }

    #[test]
    fn lr_separates_toy() {
        let (f, y) = toy();
        let lr = train_lr(&f, &y, LR_EPOCHS, LR_RATE).unwrap();
        for (x, &label) in f.iter().zip(&y) {
            assert_eq!(lr.defers(x).unwrap(), label == 1);
        }
        assert!(lr.probability(&[0.0; 3]).is_err());
    }

    #[test]
    fn lr_all_keep_and_order_invariance() {
        let (f, _) = toy();
        let zeros = vec![0; f.len()];
        let lr = train_lr(&f, &zeros, LR_EPOCHS, LR_RATE).unwrap();
        assert!(f.iter().all(|x| !lr.defers(x).unwrap()));

        let (f, y) = toy();
        let a = train_lr(&f, &y, 50, LR_RATE).unwrap();
        let mut idx: Vec<usize> = (0..f.len()).rev().collect();
        idx.rotate_left(7);
        let fp: Vec<_> = idx.iter().map(|&i| f[i].clone()).collect();
        let yp: Vec<_> = idx.iter().map(|&i| y[i]).collect();
        let b = train_lr(&fp, &yp, 50, LR_RATE).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lr_container_round_trip() {
        let (f, y) = toy();
        let l = LrDeferral {
            policy: train_lr(&f, &y, 10, LR_RATE).unwrap(),
            table: QuestionAccuracyTable {
                per_question: [("q1".to_string(), 0.25)].into_iter().collect(),
                global: 0.75,
            },
        };
        let back = LrDeferral::from_container(&Container::from_bytes(&l.to_container().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, l);
        assert_eq!(back.table.get("q1"), 0.25);
        assert_eq!(back.table.get("unseen"), 0.75);
        let t = ThresholdPolicy::new(0.35).unwrap();
        assert_eq!(ThresholdPolicy::from_container(&t.to_container()).unwrap(), t);
        assert!(ThresholdPolicy::from_container(&l.to_container()).is_err());
    }
}
