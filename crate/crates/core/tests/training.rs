use seldefer::dataset::*;
use seldefer::error::Error;
use seldefer::model::{FreezeMask, ModelConfig, ModelGrads, ParamId, Phase, SelectiveModel};
use seldefer::numerics::{Adam, AdamConfig};
use seldefer::training::*;
use seldefer::baselines::policy_condition;

fn model(bits: u32, hidden: usize, seed: u64) -> SelectiveModel {
    SelectiveModel::new(
        ModelConfig {
            feature_bits: bits,
            cl_hidden: hidden,
            dp_hidden: hidden,
            labels: LabelScheme::default(),
        },
        seed,
    )
    .unwrap()
}

fn toy() -> Vec<FeaturizedExample> {
    let words = [["bright", "glow", "shine", "lamp"], ["dark", "off", "broken", "open"], ["both", "either", "maybe", "unsure"]];
    let mut ex = Vec::new();
    for (c, ws) in words.iter().enumerate() {
        for w in ws {
            ex.push(Example {
                question_id: "q".into(),
                answer_text: w.to_string(),
                gold_label: c,
            });
        }
    }
    Featurizer::new(8).unwrap().featurize_all(&ex)
}

fn accuracy(m: &SelectiveModel, data: &[FeaturizedExample]) -> f64 {
    evaluate(m, data, false).unwrap().cl_acc
}

#[test]
fn classifier_warmup_separates_toy() {
    let data = toy();
    assert_eq!(data.len(), 12);
    let cfg = TrainConfig {
        batch_size: 4,
        learning_rate: 0.01,
        seed: 1,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(model(8, 8, 1), cfg, &data, &data).unwrap();
    let recs = t.warmup_cl(50).unwrap();
    assert_eq!(recs.len(), 50);
    assert!(recs.iter().all(|r| r.phase == Phase::ClWarmup));
    assert_eq!(accuracy(t.model(), &data), 1.0);
}

fn corpus(seed: u64) -> DatasetSplit {
    split(&gen_synthetic(&SyntheticConfig::default_corpus(seed)).unwrap(), (0.8, 0.1, 0.1), seed).unwrap()
}

#[test]
fn warmup_loss_decreases_on_default_corpus() {
    let s = corpus(7);
    let f = Featurizer::new(10).unwrap();
    let (train, val) = (f.featurize_all(&s.train), f.featurize_all(&s.validation));
    let cfg = TrainConfig {
        seed: 7,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(model(10, 64, 7), cfg, &train, &val).unwrap();
    let recs = t.warmup_cl(10).unwrap();
    assert!(recs[9].loss_cl <= recs[0].loss_cl, "{} > {}", recs[9].loss_cl, recs[0].loss_cl);
}

#[test]
fn warmed_policy_defers_more_on_the_noisy_question() {
    let cfg = SyntheticConfig {
        num_questions: 2,
        examples_per_question: 400,
        num_classes: 3,
        per_question_noise: vec![0.0, 0.5],
        feature_dim: 6,
        answer_words: 3,
        signal: 1.0,
        seed: 4,
    };
    let s = split(&gen_synthetic(&cfg).unwrap(), (0.6, 0.2, 0.2), 4).unwrap();
    let f = Featurizer::new(10).unwrap();
    let (train, val, test) = (f.featurize_all(&s.train), f.featurize_all(&s.validation), f.featurize_all(&s.test));
    let tc = TrainConfig {
        seed: 4,
        dp_holdout_fraction: 0.3,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(model(10, 32, 4), tc, &train, &val).unwrap();
    t.warmup_cl(10).unwrap();
    t.warmup_dp(10).unwrap();
    let (_, actions) = predictions(t.model(), &test).unwrap();
    let rate = |q: &str| {
        let idx: Vec<usize> = (0..test.len()).filter(|&i| test[i].example.question_id == q).collect();
        idx.iter().filter(|&&i| actions[i]).count() as f64 / idx.len() as f64
    };
    assert!(rate("q1") > rate("q0"), "noisy {} vs clean {}", rate("q1"), rate("q0"));
}

fn bits(m: &SelectiveModel, classifier: bool) -> Vec<Vec<u64>> {
    ParamId::ALL
        .iter()
        .filter(|p| p.is_classifier() == classifier)
        .map(|&p| m.tensor(p).iter().map(|x| x.to_bits()).collect())
        .collect()
}

#[test]
fn policy_warmup_leaves_classifier_bit_identical() {
    let data = toy();
    let mut t = Trainer::new(model(8, 6, 2), TrainConfig::default(), &data, &data).unwrap();
    t.warmup_cl(3).unwrap();
    let before = bits(t.model(), true);
    let dp_before = bits(t.model(), false);
    t.warmup_dp(5).unwrap();
    assert_eq!(bits(t.model(), true), before);
    assert_ne!(bits(t.model(), false), dp_before);
}

#[test]
fn hundred_frozen_steps_keep_theta() {
    let data = toy();
    let mut m = model(8, 6, 3);
    let before = bits(&m, true);
    let mut opt = Adam::new(AdamConfig::default(), &m.tensor_sizes());
    let mask = FreezeMask::freeze_classifier();
    let refs: Vec<&FeaturizedExample> = data.iter().collect();
    for _ in 0..100 {
        let (_, g) = batch_joint_grads(&m, &refs, &LossWeights::default(), &Default::default(), Default::default()).unwrap();
        let gs: Vec<&[f64]> = ParamId::ALL.iter().map(|&p| g.tensor(p)).collect();
        opt.step(&mut m.tensors_mut(), &gs, mask.as_slice()).unwrap();
    }
    assert_eq!(bits(&m, true), before);
    let _ = ModelGrads::zeros_like(&m);
}

#[test]
fn recorded_total_matches_components() {
    let data = toy();
    let cfg = TrainConfig {
        loss_weights: LossWeights::new(0.1, 0.1, 10.0),
        joint_epochs: 4,
        batch_size: 5,
        ..TrainConfig::default()
    };
    let (_, recs) = train_joint(model(8, 6, 4), &cfg, &data, &data).unwrap();
    let w = cfg.loss_weights;
    let joint: Vec<_> = recs.iter().filter(|r| r.phase == Phase::Joint).collect();
    assert_eq!(joint.len(), 4);
    for r in joint {
        assert!(r.loss_cl.is_finite() && r.loss_dp.is_finite() && r.reward.is_finite());
        let recomputed = w.alpha * r.loss_cl + w.beta * r.loss_dp - w.gamma * r.reward;
        assert!((recomputed - r.loss_total).abs() <= 1e-12, "{recomputed} vs {}", r.loss_total);
    }
    let phases: Vec<Phase> = recs.iter().map(|r| r.phase).collect();
    assert_eq!(phases.iter().filter(|&&p| p == Phase::ClWarmup).count(), 10);
    assert_eq!(phases.iter().filter(|&&p| p == Phase::DpWarmup).count(), 10);
}

#[test]
fn identical_configs_give_identical_records() {
    let data = toy();
    let cfg = TrainConfig {
        joint_epochs: 3,
        batch_size: 5,
        seed: 9,
        ..TrainConfig::default()
    };
    let (a, ra) = train_joint(model(8, 6, 9), &cfg, &data, &data).unwrap();
    let (b, rb) = train_joint(model(8, 6, 9), &cfg, &data, &data).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a, b);
}

#[test]
fn policy_condition_classifier_equals_plain_warmup() {
    let data = toy();
    let cfg = TrainConfig {
        n_warmup_cl: 3,
        m_warmup_dp: 2,
        joint_epochs: 4,
        batch_size: 5,
        seed: 12,
        ..TrainConfig::default()
    };
    let (ck, recs) = policy_condition(model(8, 6, 12), &cfg, &data, &data).unwrap();
    assert_eq!(recs.iter().filter(|r| r.phase == Phase::ClWarmup).count(), 7);
    assert_eq!(recs.iter().filter(|r| r.phase == Phase::DpWarmup).count(), 6);
    assert_eq!(ck.phase, Phase::DpWarmup);

    let mut t = Trainer::new(model(8, 6, 12), cfg, &data, &data).unwrap();
    t.warmup_cl(7).unwrap();
    assert_eq!(bits(&ck.model, true), bits(t.model(), true));
}

#[test]
fn divergence_restores_last_good_model() {
    let data = toy();
    let cfg = TrainConfig {
        joint_epochs: 3,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(model(8, 6, 5), cfg, &data, &data).unwrap();
    t.warmup_cl(2).unwrap();
    t.warmup_dp(2).unwrap();
    let before = t.model().clone();
    t.set_learning_rate(f64::MAX).unwrap();
    let err = t.joint_train().unwrap_err();
    assert!(matches!(err, Error::Divergence(_)), "{err}");
    assert!(err.is_runtime_failure());
    assert_eq!(t.model(), &before);
}

#[test]
fn checkpoints_written_per_joint_epoch() {
    let data = toy();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        n_warmup_cl: 1,
        m_warmup_dp: 1,
        joint_epochs: 3,
        checkpoint_dir: Some(dir.path().join("ck")),
        ..TrainConfig::default()
    };
    let (best, _) = train_joint(model(8, 6, 6), &cfg, &data, &data).unwrap();
    for e in 1..=3 {
        let ck = seldefer::model::load_checkpoint(&dir.path().join(format!("ck/joint_epoch_{e:03}.ckpt"))).unwrap();
        assert_eq!((ck.epoch, ck.phase), (e, Phase::Joint));
        assert!(ck.validation.is_some());
    }
    assert_eq!(best.phase, Phase::Joint);
}

#[test]
fn joint_phase_keeps_validation_sp_accuracy() {
    // Same corpus (seed 7), five training seeds.
    let s = corpus(7);
    let f = Featurizer::new(10).unwrap();
    let (train, val) = (f.featurize_all(&s.train), f.featurize_all(&s.validation));
    let mut kept = 0;
    for seed in 0..5 {
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(model(10, 64, seed), cfg, &train, &val).unwrap();
        t.warmup_cl(10).unwrap();
        t.warmup_dp(10).unwrap();
        let warm = evaluate(t.model(), &val, true).unwrap().sp_acc;
        let out = t.joint_train().unwrap();
        let best = select_checkpoint(&out.checkpoints).unwrap();
        let joint = best.validation.as_ref().unwrap().sp_acc;
        eprintln!("seed {seed}: warm-up {warm:.4} joint {joint:.4}");
        kept += (joint >= warm) as usize;
    }
    assert!(kept >= 4, "joint training kept validation SP accuracy in {kept} of 5 seeds");
}

fn planted(noise: f64, seed: u64) -> (Vec<FeaturizedExample>, Vec<FeaturizedExample>) {
    let cfg = SyntheticConfig {
        num_questions: 3,
        examples_per_question: 1000,
        num_classes: 3,
        per_question_noise: vec![noise; 3],
        feature_dim: 6,
        answer_words: 3,
        signal: 1.0,
        seed,
    };
    let s = split(&gen_synthetic(&cfg).unwrap(), (0.5, 0.25, 0.25), seed).unwrap();
    let f = Featurizer::new(10).unwrap();
    (f.featurize_all(&s.train), f.featurize_all(&s.test))
}

#[test]
fn noise_extremes_bound_classifier_accuracy() {
    let (train, _) = planted(0.0, 31);
    let mut t = Trainer::new(model(10, 32, 31), TrainConfig::default(), &train, &train).unwrap();
    t.warmup_cl(10).unwrap();
    let clean = accuracy(t.model(), &train);
    assert!(clean >= 0.99, "clean train accuracy {clean}");

    // Bayes rate is 0.5; held-out accuracy must not exceed it by much.
    let (train, test) = planted(0.5, 32);
    let mut t = Trainer::new(model(10, 32, 32), TrainConfig::default(), &train, &train).unwrap();
    t.warmup_cl(10).unwrap();
    let noisy = accuracy(t.model(), &test);
    assert!(noisy <= 0.58, "noisy held-out accuracy {noisy}");
}
