//! Classifier (CL) and deferral policy (DP).
//!
//! The CL encodes the features into `h_C` and classifies from it. The DP
//! has its own encoder producing `h_DP`; its head reads the concatenation
//! `[h_C, h_DP]` in that order, so DP decisions depend on the CL
//! parameters as well as its own.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::Container;
use crate::dataset::{LabelScheme, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::evaluation::MetricsRecord;
use crate::numerics::{softmax, Activation, Dense, DenseCache, DenseGrads, Matrix, ProbabilityVector, RandomStream};
use crate::reward::{DEFER, KEEP};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_bits: u32,
    pub cl_hidden: usize,
    pub dp_hidden: usize,
    pub labels: LabelScheme,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_bits: 10,
            cl_hidden: 64,
            dp_hidden: 64,
            labels: LabelScheme::default(),
        }
    }
}

impl ModelConfig {
    pub fn input_dim(&self) -> usize {
        1 << self.feature_bits
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn validate(&self) -> Result<()> {
        crate::dataset::Featurizer::new(self.feature_bits)?;
        if self.cl_hidden == 0 || self.dp_hidden == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if self.num_classes() != NUM_CLASSES {
            return Err(Error::Config(format!(
                "the classifier head has {NUM_CLASSES} classes, label scheme has {}",
                self.num_classes()
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of this config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("model config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parameter tensors in declaration (and checkpoint) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamId {
    ClEncoderWeight,
    ClEncoderBias,
    ClHeadWeight,
    ClHeadBias,
    DpEncoderWeight,
    DpEncoderBias,
    DpHeadWeight,
    DpHeadBias,
}

impl ParamId {
    pub const ALL: [ParamId; 8] = [
        ParamId::ClEncoderWeight,
        ParamId::ClEncoderBias,
        ParamId::ClHeadWeight,
        ParamId::ClHeadBias,
        ParamId::DpEncoderWeight,
        ParamId::DpEncoderBias,
        ParamId::DpHeadWeight,
        ParamId::DpHeadBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamId::ClEncoderWeight => "cl.encoder.weight",
            ParamId::ClEncoderBias => "cl.encoder.bias",
            ParamId::ClHeadWeight => "cl.head.weight",
            ParamId::ClHeadBias => "cl.head.bias",
            ParamId::DpEncoderWeight => "dp.encoder.weight",
            ParamId::DpEncoderBias => "dp.encoder.bias",
            ParamId::DpHeadWeight => "dp.head.weight",
            ParamId::DpHeadBias => "dp.head.bias",
        }
    }

    pub fn is_classifier(self) -> bool {
        (self as usize) < 4
    }
}

/// `true` marks a tensor the optimizer must not touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FreezeMask([bool; 8]);

impl FreezeMask {
    pub fn all_trainable() -> Self {
        Self([false; 8])
    }

    pub fn freeze_classifier() -> Self {
        Self(ParamId::ALL.map(ParamId::is_classifier))
    }

    pub fn freeze_policy() -> Self {
        Self(ParamId::ALL.map(|p| !p.is_classifier()))
    }

    pub fn is_frozen(&self, p: ParamId) -> bool {
        self.0[p as usize]
    }

    pub fn set(&mut self, p: ParamId, frozen: bool) {
        self.0[p as usize] = frozen;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    fn classifier_frozen(&self) -> bool {
        ParamId::ALL.iter().filter(|p| p.is_classifier()).all(|&p| self.is_frozen(p))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClModel {
    pub encoder: Dense,
    pub head: Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpModel {
    pub encoder: Dense,
    pub head: Dense,
}

/// Forward state of the classifier for one example.
#[derive(Debug, Clone)]
pub struct ClTrace {
    encoder: DenseCache,
    head: DenseCache,
    pub p_c: ProbabilityVector,
}

impl ClTrace {
    pub fn hidden(&self) -> &[f64] {
        self.encoder.output()
    }

    pub fn logits(&self) -> &[f64] {
        self.head.output()
    }
}

/// Forward state of the deferral policy for one example.
#[derive(Debug, Clone)]
pub struct DpTrace {
    encoder: DenseCache,
    head: DenseCache,
    pub p_d: ProbabilityVector,
}

impl DpTrace {
    pub fn hidden(&self) -> &[f64] {
        self.encoder.output()
    }

    pub fn logits(&self) -> &[f64] {
        self.head.output()
    }
}

impl ClModel {
    pub fn new(input_dim: usize, hidden: usize, classes: usize, rng: &mut RandomStream) -> Self {
        Self {
            encoder: Dense::glorot(input_dim, hidden, Activation::Tanh, rng),
            head: Dense::glorot(hidden, classes, Activation::Identity, rng),
        }
    }

    pub fn trace(&self, x: &[f64]) -> Result<ClTrace> {
        let (h, encoder) = self.encoder.forward(x)?;
        let (logits, head) = self.head.forward(&h)?;
        Ok(ClTrace {
            p_c: softmax(&logits)?,
            encoder,
            head,
        })
    }

    /// `(h_C, p_c)`.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ProbabilityVector)> {
        let t = self.trace(x)?;
        Ok((t.hidden().to_vec(), t.p_c))
    }
}

impl DpModel {
    pub fn new(input_dim: usize, hidden: usize, cl_hidden: usize, rng: &mut RandomStream) -> Self {
        Self {
            encoder: Dense::glorot(input_dim, hidden, Activation::Tanh, rng),
            head: Dense::glorot(cl_hidden + hidden, 2, Activation::Identity, rng),
        }
    }

    pub fn trace(&self, x: &[f64], h_c: &[f64]) -> Result<DpTrace> {
        let (h_dp, encoder) = self.encoder.forward(x)?;
        if h_c.len() + h_dp.len() != self.head.inputs() {
            return Err(Error::invalid(format!(
                "deferral head expects {} inputs, got {} + {}",
                self.head.inputs(),
                h_c.len(),
                h_dp.len()
            )));
        }
        let joint: Vec<f64> = h_c.iter().chain(&h_dp).copied().collect();
        let (logits, head) = self.head.forward(&joint)?;
        Ok(DpTrace {
            p_d: softmax(&logits)?,
            encoder,
            head,
        })
    }

    /// `(h_DP, p_d)`; `p_d[0]` is keep, `p_d[1]` defer.
    pub fn forward(&self, x: &[f64], h_c: &[f64]) -> Result<(Vec<f64>, ProbabilityVector)> {
        let t = self.trace(x, h_c)?;
        Ok((t.hidden().to_vec(), t.p_d))
    }
}

/// Class with the highest probability, lowest index on ties.
pub fn predict(p_c: &ProbabilityVector) -> usize {
    p_c.argmax()
}

/// `true` to defer. A 50/50 split keeps.
pub fn decide(p_d: &ProbabilityVector) -> bool {
    p_d.argmax() == DEFER
}

/// Gradients of the objective with respect to each head's logits.
#[derive(Debug, Clone, Default)]
pub struct LogitGrads {
    pub classifier: Option<Vec<f64>>,
    /// Deferral cross-entropy part.
    pub policy_ce: Option<[f64; 2]>,
    /// Expected-reward part.
    pub policy_reward: Option<[f64; 2]>,
}

/// Which deferral-loss gradients may reach the classifier through `h_C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradRoute {
    pub policy_ce_into_classifier: bool,
    pub reward_into_classifier: bool,
}

impl Default for GradRoute {
    fn default() -> Self {
        Self {
            policy_ce_into_classifier: true,
            reward_into_classifier: true,
        }
    }
}

/// Gradient accumulator shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub cl_encoder: DenseGrads,
    pub cl_head: DenseGrads,
    pub dp_encoder: DenseGrads,
    pub dp_head: DenseGrads,
}

impl ModelGrads {
    pub fn zeros_like(m: &SelectiveModel) -> Self {
        Self {
            cl_encoder: DenseGrads::zeros_like(&m.cl.encoder),
            cl_head: DenseGrads::zeros_like(&m.cl.head),
            dp_encoder: DenseGrads::zeros_like(&m.dp.encoder),
            dp_head: DenseGrads::zeros_like(&m.dp.head),
        }
    }

    pub fn tensor(&self, p: ParamId) -> &[f64] {
        match p {
            ParamId::ClEncoderWeight => self.cl_encoder.weight.as_slice(),
            ParamId::ClEncoderBias => &self.cl_encoder.bias,
            ParamId::ClHeadWeight => self.cl_head.weight.as_slice(),
            ParamId::ClHeadBias => &self.cl_head.bias,
            ParamId::DpEncoderWeight => self.dp_encoder.weight.as_slice(),
            ParamId::DpEncoderBias => &self.dp_encoder.bias,
            ParamId::DpHeadWeight => self.dp_head.weight.as_slice(),
            ParamId::DpHeadBias => &self.dp_head.bias,
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in [&mut self.cl_encoder, &mut self.cl_head, &mut self.dp_encoder, &mut self.dp_head] {
            g.weight.as_mut_slice().iter_mut().for_each(|x| *x *= k);
            g.bias.iter_mut().for_each(|x| *x *= k);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        ParamId::ALL.iter().flat_map(|&p| self.tensor(p).iter().copied()).collect()
    }
}

/// The full CL + DP system plus the configuration it was built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectiveModel {
    pub config: ModelConfig,
    pub cl: ClModel,
    pub dp: DpModel,
}

impl SelectiveModel {
    /// Glorot initialization from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RandomStream::derive(seed, 0x1417);
        let d = config.input_dim();
        let cl = ClModel::new(d, config.cl_hidden, config.num_classes(), &mut rng);
        let dp = DpModel::new(d, config.dp_hidden, config.cl_hidden, &mut rng);
        Ok(Self { config, cl, dp })
    }

    pub fn tensor(&self, p: ParamId) -> &[f64] {
        match p {
            ParamId::ClEncoderWeight => self.cl.encoder.weight.as_slice(),
            ParamId::ClEncoderBias => &self.cl.encoder.bias,
            ParamId::ClHeadWeight => self.cl.head.weight.as_slice(),
            ParamId::ClHeadBias => &self.cl.head.bias,
            ParamId::DpEncoderWeight => self.dp.encoder.weight.as_slice(),
            ParamId::DpEncoderBias => &self.dp.encoder.bias,
            ParamId::DpHeadWeight => self.dp.head.weight.as_slice(),
            ParamId::DpHeadBias => &self.dp.head.bias,
        }
    }

    pub fn tensor_shape(&self, p: ParamId) -> Vec<usize> {
        let layer = match p {
            ParamId::ClEncoderWeight | ParamId::ClEncoderBias => &self.cl.encoder,
            ParamId::ClHeadWeight | ParamId::ClHeadBias => &self.cl.head,
            ParamId::DpEncoderWeight | ParamId::DpEncoderBias => &self.dp.encoder,
            ParamId::DpHeadWeight | ParamId::DpHeadBias => &self.dp.head,
        };
        match p {
            ParamId::ClEncoderBias | ParamId::ClHeadBias | ParamId::DpEncoderBias | ParamId::DpHeadBias => {
                vec![layer.bias.len()]
            }
            _ => vec![layer.weight.rows(), layer.weight.cols()],
        }
    }

    /// Mutable views of every tensor in [`ParamId::ALL`] order.
    pub fn tensors_mut(&mut self) -> [&mut [f64]; 8] {
        let SelectiveModel { cl, dp, .. } = self;
        [
            cl.encoder.weight.as_mut_slice(),
            &mut cl.encoder.bias,
            cl.head.weight.as_mut_slice(),
            &mut cl.head.bias,
            dp.encoder.weight.as_mut_slice(),
            &mut dp.encoder.bias,
            dp.head.weight.as_mut_slice(),
            &mut dp.head.bias,
        ]
    }

    pub fn tensor_sizes(&self) -> Vec<usize> {
        ParamId::ALL.iter().map(|&p| self.tensor(p).len()).collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        ParamId::ALL.iter().flat_map(|&p| self.tensor(p).iter().copied()).collect()
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.tensor_sizes().iter().sum();
        if flat.len() != total {
            return Err(Error::invalid(format!("expected {total} parameters, got {}", flat.len())));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn classifier_params(&self) -> Vec<Vec<f64>> {
        ParamId::ALL
            .iter()
            .filter(|p| p.is_classifier())
            .map(|&p| self.tensor(p).to_vec())
            .collect()
    }

    pub fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.config.input_dim() {
            return Err(Error::invalid(format!(
                "feature vector has dimension {}, model expects {}",
                x.len(),
                self.config.input_dim()
            )));
        }
        Ok(())
    }

    pub fn cl_forward(&self, x: &[f64]) -> Result<(Vec<f64>, ProbabilityVector)> {
        self.check_input(x)?;
        self.cl.forward(x)
    }

    pub fn dp_forward(&self, x: &[f64], h_c: &[f64]) -> Result<(Vec<f64>, ProbabilityVector)> {
        self.check_input(x)?;
        self.dp.forward(x, h_c)
    }

    pub fn trace(&self, x: &[f64]) -> Result<(ClTrace, DpTrace)> {
        self.check_input(x)?;
        let cl = self.cl.trace(x)?;
        let dp = self.dp.trace(x, cl.hidden())?;
        Ok((cl, dp))
    }

    /// `(p_c, p_d)`.
    pub fn infer(&self, x: &[f64]) -> Result<(ProbabilityVector, ProbabilityVector)> {
        let (cl, dp) = self.trace(x)?;
        Ok((cl.p_c, dp.p_d))
    }

    /// Accumulates one example's parameter gradients. Frozen tensors are
    /// skipped; the classifier encoder still receives gradient through
    /// `h_C` from the policy head when `route` allows it.
    pub fn backward(
        &self,
        cl: &ClTrace,
        dp: Option<&DpTrace>,
        up: &LogitGrads,
        route: GradRoute,
        mask: &FreezeMask,
        grads: &mut ModelGrads,
    ) -> Result<()> {
        let h_c = self.config.cl_hidden;
        let mut g_hc = vec![0.0; h_c];
        let cl_frozen = mask.classifier_frozen();

        if let Some(dp) = dp {
            let zero = [0.0; 2];
            let ce = up.policy_ce.unwrap_or(zero);
            let rw = up.policy_reward.unwrap_or(zero);
            let total = [ce[KEEP] + rw[KEEP], ce[DEFER] + rw[DEFER]];
            let (gw, gb) = masked(&mut grads.dp_head, mask, ParamId::DpHeadWeight, ParamId::DpHeadBias);
            self.dp.head.accumulate_backward(&dp.head, &total, gw, gb, None)?;

            // The head is linear, so the two loss parts back-propagate
            // independently into [h_C, h_DP].
            let w = &self.dp.head.weight;
            if !mask.is_frozen(ParamId::DpEncoderWeight) || !mask.is_frozen(ParamId::DpEncoderBias) {
                let g_joint = w.matvec_transposed(&total)?;
                let (gw, gb) = masked(&mut grads.dp_encoder, mask, ParamId::DpEncoderWeight, ParamId::DpEncoderBias);
                self.dp
                    .encoder
                    .accumulate_backward(&dp.encoder, &g_joint[h_c..], gw, gb, None)?;
            }
            if !cl_frozen {
                let mut part = [0.0; 2];
                if route.policy_ce_into_classifier {
                    part[0] += ce[0];
                    part[1] += ce[1];
                }
                if route.reward_into_classifier {
                    part[0] += rw[0];
                    part[1] += rw[1];
                }
                if part != [0.0; 2] {
                    let g_joint = w.matvec_transposed(&part)?;
                    for (a, b) in g_hc.iter_mut().zip(&g_joint[..h_c]) {
                        *a += b;
                    }
                }
            }
        }

        if cl_frozen {
            return Ok(());
        }
        if let Some(g_logits) = &up.classifier {
            let mut g_h = vec![0.0; h_c];
            let (gw, gb) = masked(&mut grads.cl_head, mask, ParamId::ClHeadWeight, ParamId::ClHeadBias);
            self.cl
                .head
                .accumulate_backward(&cl.head, g_logits, gw, gb, Some(&mut g_h))?;
            for (a, b) in g_hc.iter_mut().zip(&g_h) {
                *a += b;
            }
        }
        let (gw, gb) = masked(&mut grads.cl_encoder, mask, ParamId::ClEncoderWeight, ParamId::ClEncoderBias);
        self.cl.encoder.accumulate_backward(&cl.encoder, &g_hc, gw, gb, None)?;
        Ok(())
    }
}

fn masked<'a>(
    g: &'a mut DenseGrads,
    mask: &FreezeMask,
    w: ParamId,
    b: ParamId,
) -> (Option<&'a mut Matrix>, Option<&'a mut [f64]>) {
    let gw = (!mask.is_frozen(w)).then_some(&mut g.weight);
    let gb = (!mask.is_frozen(b)).then_some(g.bias.as_mut_slice());
    (gw, gb)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    ClWarmup,
    DpWarmup,
    Joint,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::ClWarmup => "cl_warmup",
            Phase::DpWarmup => "dp_warmup",
            Phase::Joint => "joint",
        }
    }
}

pub const CHECKPOINT_KIND: &str = "selective_model";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    config_hash: String,
    epoch: usize,
    phase: Phase,
    validation: Option<MetricsRecord>,
}

/// A model snapshot with its training provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: SelectiveModel,
    pub epoch: usize,
    pub phase: Phase,
    pub validation: Option<MetricsRecord>,
}

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        let meta = CheckpointMeta {
            config: self.model.config.clone(),
            config_hash: self.model.config.hash(),
            epoch: self.epoch,
            phase: self.phase,
            validation: self.validation.clone(),
        };
        let mut c = Container::new(CHECKPOINT_KIND, serde_json::to_value(meta).expect("meta serializes"));
        for p in ParamId::ALL {
            c.push(p.name(), &self.model.tensor_shape(p), self.model.tensor(p));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let meta: CheckpointMeta =
            serde_json::from_value(c.meta.clone()).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        if meta.config.hash() != meta.config_hash {
            return Err(Error::Checkpoint("config hash does not match stored config".into()));
        }
        // Shapes come from the config; the stored table must agree.
        let mut model = SelectiveModel::new(meta.config.clone(), 0)?;
        for p in ParamId::ALL {
            let (info, data) = c.tensor(p.name())?;
            if info.shape != model.tensor_shape(p) {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, config implies {:?}",
                    p.name(),
                    info.shape,
                    model.tensor_shape(p)
                )));
            }
            model.tensors_mut()[p as usize].copy_from_slice(data);
        }
        Ok(Self {
            model,
            epoch: meta.epoch,
            phase: meta.phase,
            validation: meta.validation,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    /// Loads and refuses a checkpoint built for a different configuration.
    pub fn load_compatible(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        let got = &ck.model.config;
        if got.feature_bits != expected.feature_bits {
            return Err(Error::Checkpoint(format!(
                "checkpoint uses 2^{} features, data is featurized with 2^{}",
                got.feature_bits, expected.feature_bits
            )));
        }
        if got.hash() != expected.hash() {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {}, expected {}",
                got.hash(),
                expected.hash()
            )));
        }
        Ok(ck)
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    ck.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
