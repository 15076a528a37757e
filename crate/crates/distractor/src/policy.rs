//! Linear-softmax policy over the closed distractor vocabulary.
//!
//! Features are a hashed bag of context words plus a dedicated bucket for the
//! answer token, so the only text processing is whitespace splitting and edge
//! punctuation trimming. The training objective is reward-weighted negative
//! log likelihood: `loss = -(1/B) * sum_i reward_i * log pi(label_i | x_i)`,
//! whose exact per-example logit gradient is
//! `(reward_i / B) * (p_j - [j == label_i])`. Updates use AdamW with
//! decoupled weight decay.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClozeInstance, Vocabulary, BLANK_MARKER};

/// Probabilities below this floor are clamped before taking logs so a single
/// vanishing label cannot drive the loss to infinity.
pub const PROB_FLOOR: f64 = 1e-12;

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("label index {index} out of range for vocabulary of {vocab}")]
    IndexOutOfRange { index: usize, vocab: usize },
    #[error("token {0:?} is not in the vocabulary")]
    UnknownToken(String),
    #[error("training batch is empty")]
    EmptyBatch,
    #[error("model parameters are not finite")]
    NonFiniteParameters,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid policy config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint io at {path}: {source}")]
    CheckpointIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),
}

/// 64-bit FNV-1a over the namespace byte and token bytes. Hand-rolled so
/// bucket assignment is stable across platforms and toolchain upgrades.
fn fnv1a(namespace: u8, token: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut hash = OFFSET;
    hash ^= namespace as u64;
    hash = hash.wrapping_mul(PRIME);
    for byte in token.as_bytes() {
        hash ^= *byte as u64;
        hash = hash.wrapping_mul(PRIME);
    }
    hash
}

/// Hashed feature layout. Context words and the answer token hash into the
/// same `dim`-sized vector but under different namespaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    /// Feature vector length. Default: 256.
    pub dim: usize,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self { dim: 256 }
    }
}

impl FeatureSpec {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.dim == 0 {
            return Err(PolicyError::InvalidConfig(
                "feature dim must be at least 1".to_string(),
            ));
        }
        Ok(())
    }

    /// Bucket for one context word.
    pub fn context_bucket(&self, word: &str) -> usize {
        (fnv1a(b'c', word) % self.dim as u64) as usize
    }

    /// Bucket for the answer token.
    pub fn answer_bucket(&self, answer: &str) -> usize {
        (fnv1a(b'a', answer) % self.dim as u64) as usize
    }

    /// Bag-of-words counts over context words (the blank marker is skipped,
    /// edge punctuation is trimmed, words are lowercased) plus one count in
    /// the answer bucket. Deterministic for a given instance.
    pub fn featurize(&self, instance: &ClozeInstance) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for word in instance.context.split_whitespace() {
            if word.contains(BLANK_MARKER) {
                continue;
            }
            let trimmed = word.trim_matches(|c: char| !c.is_alphanumeric());
            if trimmed.is_empty() {
                continue;
            }
            let folded = trimmed.to_lowercase();
            v[self.context_bucket(&folded)] += 1.0;
        }
        v[self.answer_bucket(&instance.answer)] += 1.0;
        v
    }
}

/// Numerically stable softmax via the log-sum-exp shift.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// How parameters start out. Zeros give the uniform policy; the seeded
/// Gaussian breaks symmetry when that matters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum ParamInit {
    #[default]
    Zeros,
    Gaussian { sigma: f64 },
}

/// Linear-softmax scorer: `logits = W f + b` with one row per vocabulary
/// token, weights stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyModel {
    vocab: Vocabulary,
    feature: FeatureSpec,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl PolicyModel {
    pub fn new(vocab: Vocabulary, feature: FeatureSpec) -> Result<Self, PolicyError> {
        feature.validate()?;
        if vocab.is_empty() {
            return Err(PolicyError::InvalidConfig(
                "vocabulary must not be empty".to_string(),
            ));
        }
        let n = vocab.len();
        Ok(Self {
            weights: vec![0.0; n * feature.dim],
            bias: vec![0.0; n],
            vocab,
            feature,
        })
    }

    pub fn new_with_init(
        vocab: Vocabulary,
        feature: FeatureSpec,
        init: ParamInit,
        rng: &mut impl Rng,
    ) -> Result<Self, PolicyError> {
        let mut model = Self::new(vocab, feature)?;
        if let ParamInit::Gaussian { sigma } = init {
            if !sigma.is_finite() || sigma <= 0.0 {
                return Err(PolicyError::InvalidConfig(format!(
                    "gaussian init sigma must be positive, got {sigma}"
                )));
            }
            let normal = rand_distr::Normal::new(0.0, sigma)
                .map_err(|e| PolicyError::InvalidConfig(e.to_string()))?;
            for w in &mut model.weights {
                *w = rng.sample(normal);
            }
            for b in &mut model.bias {
                *b = rng.sample(normal);
            }
        }
        Ok(model)
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn feature_spec(&self) -> FeatureSpec {
        self.feature
    }

    pub fn vocab_len(&self) -> usize {
        self.vocab.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn params_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite()) && self.bias.iter().all(|b| b.is_finite())
    }

    fn check_features(&self, features: &[f64]) -> Result<(), PolicyError> {
        if features.len() != self.feature.dim {
            return Err(PolicyError::ShapeMismatch(format!(
                "feature vector has length {}, model expects {}",
                features.len(),
                self.feature.dim
            )));
        }
        Ok(())
    }

    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>, PolicyError> {
        self.check_features(features)?;
        let dim = self.feature.dim;
        let mut out = Vec::with_capacity(self.vocab.len());
        for (row, b) in self.bias.iter().enumerate() {
            let w = &self.weights[row * dim..(row + 1) * dim];
            let mut z = *b;
            for (wk, fk) in w.iter().zip(features) {
                if *fk != 0.0 {
                    z += wk * fk;
                }
            }
            out.push(z);
        }
        Ok(out)
    }

    pub fn probabilities(&self, features: &[f64]) -> Result<Vec<f64>, PolicyError> {
        Ok(softmax(&self.logits(features)?))
    }

    /// Log probability of a vocabulary index, clamped at `ln(PROB_FLOOR)`.
    pub fn log_prob(&self, features: &[f64], label: usize) -> Result<f64, PolicyError> {
        if label >= self.vocab.len() {
            return Err(PolicyError::IndexOutOfRange {
                index: label,
                vocab: self.vocab.len(),
            });
        }
        let logits = self.logits(features)?;
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        Ok((logits[label] - lse).max(PROB_FLOOR.ln()))
    }

    /// Softmax probability the policy assigns to a token for this instance.
    pub fn confidence(&self, instance: &ClozeInstance, token: &str) -> Result<f64, PolicyError> {
        let idx = self
            .vocab
            .get(token)
            .ok_or_else(|| PolicyError::UnknownToken(token.to_string()))?;
        let features = self.feature.featurize(instance);
        Ok(self.probabilities(&features)?[idx])
    }

    pub fn to_json(&self) -> String {
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            feature_dim: self.feature.dim,
            vocab: self.vocab.tokens().to_vec(),
            weights: self.weights.clone(),
            bias: self.bias.clone(),
        };
        serde_json::to_string(&file).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        let file: CheckpointFile =
            serde_json::from_str(text).map_err(|e| PolicyError::CheckpointFormat(e.to_string()))?;
        if file.version != CHECKPOINT_VERSION {
            return Err(PolicyError::CheckpointFormat(format!(
                "unsupported checkpoint version {}",
                file.version
            )));
        }
        let vocab = Vocabulary::try_from(file.vocab).map_err(PolicyError::CheckpointFormat)?;
        let feature = FeatureSpec {
            dim: file.feature_dim,
        };
        feature.validate()?;
        if file.weights.len() != vocab.len() * feature.dim || file.bias.len() != vocab.len() {
            return Err(PolicyError::CheckpointFormat(format!(
                "parameter shapes do not match vocabulary of {} and dim {}",
                vocab.len(),
                feature.dim
            )));
        }
        let model = Self {
            vocab,
            feature,
            weights: file.weights,
            bias: file.bias,
        };
        if !model.params_finite() {
            return Err(PolicyError::NonFiniteParameters);
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PolicyError> {
        let path = path.as_ref();
        let mut text = self.to_json();
        text.push('\n');
        std::fs::write(path, text).map_err(|source| PolicyError::CheckpointIo {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PolicyError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| PolicyError::CheckpointIo {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(text.trim_end())
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    feature_dim: usize,
    vocab: Vec<String>,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// One reward-weighted training example.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub instance_id: String,
    pub features: Vec<f64>,
    pub label: usize,
    pub reward: f64,
}

/// Batch loss values: the reward-weighted objective that is optimized, and
/// the unweighted mean NLL the scheduler consumes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchStats {
    pub loss: f64,
    pub mean_nll: f64,
}

/// Dense gradients matching the model's parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Reward-weighted NLL and its exact analytic gradient over one batch.
pub fn rl_loss_and_grad(
    model: &PolicyModel,
    batch: &[TrainingExample],
) -> Result<(BatchStats, Gradients), PolicyError> {
    if batch.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    if !model.params_finite() {
        return Err(PolicyError::NonFiniteParameters);
    }
    let dim = model.feature.dim;
    let n = model.vocab.len();
    let b = batch.len() as f64;
    let floor = PROB_FLOOR.ln();
    let mut grad = Gradients {
        weights: vec![0.0; n * dim],
        bias: vec![0.0; n],
    };
    let mut loss_sum = 0.0;
    let mut nll_sum = 0.0;
    for example in batch {
        if example.label >= n {
            return Err(PolicyError::IndexOutOfRange {
                index: example.label,
                vocab: n,
            });
        }
        let probs = model.probabilities(&example.features)?;
        let log_p = probs[example.label].ln().max(floor);
        loss_sum += example.reward * (-log_p);
        nll_sum += -log_p;
        let scale = example.reward / b;
        for (j, p) in probs.iter().enumerate() {
            let indicator = if j == example.label { 1.0 } else { 0.0 };
            let g_logit = scale * (p - indicator);
            if g_logit == 0.0 {
                continue;
            }
            grad.bias[j] += g_logit;
            let row = &mut grad.weights[j * dim..(j + 1) * dim];
            for (gw, f) in row.iter_mut().zip(&example.features) {
                if *f != 0.0 {
                    *gw += g_logit * f;
                }
            }
        }
    }
    Ok((
        BatchStats {
            loss: loss_sum / b,
            mean_nll: nll_sum / b,
        },
        grad,
    ))
}

/// AdamW hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    /// Learning rate. Default: 1e-4.
    pub lr: f64,
    /// First-moment decay. Default: 0.9.
    pub beta1: f64,
    /// Second-moment decay. Default: 0.999.
    pub beta2: f64,
    /// Denominator fuzz. Default: 1e-8.
    pub eps: f64,
    /// Decoupled weight decay, applied to weights but not biases.
    /// Default: 0.01.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(PolicyError::InvalidConfig(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !beta.is_finite() || !(0.0..1.0).contains(&beta) {
                return Err(PolicyError::InvalidConfig(format!(
                    "{name} must lie in [0, 1), got {beta}"
                )));
            }
        }
        if !self.eps.is_finite() || self.eps <= 0.0 {
            return Err(PolicyError::InvalidConfig(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(PolicyError::InvalidConfig(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// First/second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    step: u64,
    m_weights: Vec<f64>,
    v_weights: Vec<f64>,
    m_bias: Vec<f64>,
    v_bias: Vec<f64>,
}

impl AdamWState {
    pub fn for_model(model: &PolicyModel) -> Self {
        Self {
            step: 0,
            m_weights: vec![0.0; model.weights.len()],
            v_weights: vec![0.0; model.weights.len()],
            m_bias: vec![0.0; model.bias.len()],
            v_bias: vec![0.0; model.bias.len()],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

#[allow(clippy::too_many_arguments)]
fn adamw_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    cfg: &AdamWConfig,
    bias_correction1: f64,
    bias_correction2: f64,
    decay: f64,
) {
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bias_correction1;
        let v_hat = v[i] / bias_correction2;
        params[i] -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + decay * params[i]);
    }
}

/// One AdamW step over all model parameters. Deterministic: identical
/// inputs produce bit-identical parameters.
pub fn optimizer_step(
    model: &mut PolicyModel,
    grads: &Gradients,
    cfg: &AdamWConfig,
    state: &mut AdamWState,
) -> Result<(), PolicyError> {
    cfg.validate()?;
    if grads.weights.len() != model.weights.len() || grads.bias.len() != model.bias.len() {
        return Err(PolicyError::ShapeMismatch(format!(
            "gradient shapes ({}, {}) do not match model ({}, {})",
            grads.weights.len(),
            grads.bias.len(),
            model.weights.len(),
            model.bias.len()
        )));
    }
    if state.m_weights.len() != model.weights.len() || state.m_bias.len() != model.bias.len() {
        return Err(PolicyError::ShapeMismatch(
            "optimizer state does not match model".to_string(),
        ));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    adamw_update(
        &mut model.weights,
        &grads.weights,
        &mut state.m_weights,
        &mut state.v_weights,
        cfg,
        bc1,
        bc2,
        cfg.weight_decay,
    );
    adamw_update(
        &mut model.bias,
        &grads.bias,
        &mut state.m_bias,
        &mut state.v_bias,
        cfg,
        bc1,
        bc2,
        0.0,
    );
    if !model.params_finite() {
        return Err(PolicyError::NonFiniteParameters);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_vocabulary;
    use proptest::prelude::*;

    fn instance(context: &str, answer: &str) -> ClozeInstance {
        ClozeInstance {
            id: "t".into(),
            context: context.into(),
            answer: answer.into(),
            gold_distractors: vec![],
        }
    }

    fn vocab_of(tokens: &[&str]) -> Vocabulary {
        let mut v = Vocabulary::new();
        for t in tokens {
            v.insert(t);
        }
        v
    }

    #[test]
    fn uniform_model_log_prob_is_log_quarter() {
        let model = PolicyModel::new(vocab_of(&["a", "b", "c", "d"]), FeatureSpec { dim: 4 }).unwrap();
        let lp = model.log_prob(&[0.0; 4], 2).unwrap();
        assert!((lp - (-1.3862943611198906)).abs() < 1e-12);
    }

    #[test]
    fn two_token_logit_gap_matches_reference() {
        // logits [1, 0]: log p(0) = -ln(1 + e^-1) = ln(e / (e + 1)).
        let mut model =
            PolicyModel::new(vocab_of(&["a", "b"]), FeatureSpec { dim: 1 }).unwrap();
        model.weights_mut()[0] = 1.0;
        let lp = model.log_prob(&[1.0], 0).unwrap();
        assert!((lp - (-0.3132616875182228)).abs() < 1e-12);
    }

    #[test]
    fn log_prob_is_clamped_at_floor() {
        let mut model =
            PolicyModel::new(vocab_of(&["a", "b"]), FeatureSpec { dim: 1 }).unwrap();
        model.weights_mut()[0] = 200.0;
        let lp = model.log_prob(&[1.0], 1).unwrap();
        assert_eq!(lp, PROB_FLOOR.ln());
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let model = PolicyModel::new(vocab_of(&["a", "b"]), FeatureSpec { dim: 2 }).unwrap();
        assert!(matches!(
            model.log_prob(&[0.0, 0.0], 2),
            Err(PolicyError::IndexOutOfRange { index: 2, vocab: 2 })
        ));
    }

    #[test]
    fn feature_length_mismatch_is_rejected() {
        let model = PolicyModel::new(vocab_of(&["a"]), FeatureSpec { dim: 4 }).unwrap();
        assert!(matches!(
            model.logits(&[0.0; 3]),
            Err(PolicyError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn featurize_is_deterministic_and_skips_blank() {
        let spec = FeatureSpec { dim: 32 };
        let inst = instance("the small [BLANK] rolls away.", "metal");
        let a = spec.featurize(&inst);
        let b = spec.featurize(&inst);
        assert_eq!(a, b);
        // 4 context words (blank marker dropped) + 1 answer count.
        assert_eq!(a.iter().sum::<f64>(), 5.0);
    }

    #[test]
    fn featurize_differs_only_in_answer_buckets() {
        let spec = FeatureSpec::default();
        let a = spec.featurize(&instance("the [BLANK] is here", "metal"));
        let b = spec.featurize(&instance("the [BLANK] is here", "wood"));
        let metal = spec.answer_bucket("metal");
        let wood = spec.answer_bucket("wood");
        assert_ne!(metal, wood, "fixture answers must not collide");
        for (i, (x, y)) in a.iter().zip(&b).enumerate() {
            if i == metal {
                assert_eq!(x - y, 1.0);
            } else if i == wood {
                assert_eq!(y - x, 1.0);
            } else {
                assert_eq!(x, y, "bucket {i} should be untouched");
            }
        }
    }

    #[test]
    fn featurize_empty_context_sets_only_answer_bucket() {
        let spec = FeatureSpec { dim: 16 };
        let v = spec.featurize(&instance("", "metal"));
        assert_eq!(v.iter().sum::<f64>(), 1.0);
        assert_eq!(v[spec.answer_bucket("metal")], 1.0);
    }

    #[test]
    fn confidence_of_unknown_token_errors() {
        let model = PolicyModel::new(vocab_of(&["a", "b"]), FeatureSpec { dim: 2 }).unwrap();
        let inst = instance("x [BLANK] y", "a");
        assert!(matches!(
            model.confidence(&inst, "zzz"),
            Err(PolicyError::UnknownToken(_))
        ));
        let c = model.confidence(&inst, "b").unwrap();
        assert!((c - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rl_loss_matches_worked_example() {
        // Two tokens, zero parameters, one example with reward 0.15, label 0:
        // loss = 0.15 * ln 2, logit gradient (-0.075, +0.075).
        let model = PolicyModel::new(vocab_of(&["a", "b"]), FeatureSpec { dim: 2 }).unwrap();
        let batch = [TrainingExample {
            instance_id: "t".into(),
            features: vec![0.0, 0.0],
            label: 0,
            reward: 0.15,
        }];
        let (stats, grads) = rl_loss_and_grad(&model, &batch).unwrap();
        assert!((stats.loss - 0.1039720770839918).abs() < 1e-12);
        assert!((grads.bias[0] - (-0.075)).abs() < 1e-15);
        assert!((grads.bias[1] - 0.075).abs() < 1e-15);
        // Zero features leave weight gradients zero.
        assert!(grads.weights.iter().all(|g| *g == 0.0));
        // The scheduler signal ignores rewards: mean NLL is ln 2.
        assert!((stats.mean_nll - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn zero_reward_zeroes_loss_but_not_nll() {
        let model = PolicyModel::new(vocab_of(&["a", "b"]), FeatureSpec { dim: 2 }).unwrap();
        let batch = [TrainingExample {
            instance_id: "t".into(),
            features: vec![0.0, 0.0],
            label: 1,
            reward: 0.0,
        }];
        let (stats, grads) = rl_loss_and_grad(&model, &batch).unwrap();
        assert_eq!(stats.loss, 0.0);
        assert!((stats.mean_nll - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(grads.bias.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn empty_batch_is_rejected() {
        let model = PolicyModel::new(vocab_of(&["a"]), FeatureSpec { dim: 1 }).unwrap();
        assert!(matches!(
            rl_loss_and_grad(&model, &[]),
            Err(PolicyError::EmptyBatch)
        ));
    }

    #[test]
    fn non_finite_params_are_rejected() {
        let mut model = PolicyModel::new(vocab_of(&["a"]), FeatureSpec { dim: 1 }).unwrap();
        model.weights_mut()[0] = f64::NAN;
        let batch = [TrainingExample {
            instance_id: "t".into(),
            features: vec![1.0],
            label: 0,
            reward: 1.0,
        }];
        assert!(matches!(
            rl_loss_and_grad(&model, &batch),
            Err(PolicyError::NonFiniteParameters)
        ));
    }

    fn finite_difference_check(model: &mut PolicyModel, batch: &[TrainingExample]) -> f64 {
        let h = 1e-6;
        let (_, grads) = rl_loss_and_grad(model, batch).unwrap();
        let mut worst: f64 = 0.0;
        let n_w = model.weights().len();
        for i in 0..n_w + model.bias().len() {
            let read = |m: &PolicyModel| -> f64 {
                if i < n_w {
                    m.weights()[i]
                } else {
                    m.bias()[i - n_w]
                }
            };
            let write = |m: &mut PolicyModel, val: f64| {
                if i < n_w {
                    m.weights_mut()[i] = val;
                } else {
                    m.bias_mut()[i - n_w] = val;
                }
            };
            let orig = read(model);
            write(model, orig + h);
            let (up, _) = rl_loss_and_grad(model, batch).unwrap();
            write(model, orig - h);
            let (down, _) = rl_loss_and_grad(model, batch).unwrap();
            write(model, orig);
            let numeric = (up.loss - down.loss) / (2.0 * h);
            let analytic = if i < n_w {
                grads.weights[i]
            } else {
                grads.bias[i - n_w]
            };
            let rel = (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn gradient_agrees_with_central_differences() {
        let vocab = vocab_of(&["a", "b", "c"]);
        let mut model = PolicyModel::new(vocab, FeatureSpec { dim: 2 }).unwrap();
        for (i, w) in model.weights_mut().iter_mut().enumerate() {
            *w = 0.3 * (i as f64 + 1.0) - 0.8;
        }
        model.bias_mut()[1] = 0.25;
        let batch = [
            TrainingExample {
                instance_id: "x".into(),
                features: vec![1.0, 2.0],
                label: 0,
                reward: 0.15,
            },
            TrainingExample {
                instance_id: "y".into(),
                features: vec![0.0, 1.0],
                label: 2,
                reward: 0.09,
            },
        ];
        let worst = finite_difference_check(&mut model, &batch);
        assert!(worst <= 1e-6, "worst relative error {worst}");
    }

    #[test]
    fn adamw_zero_gradient_is_fixed_point() {
        let mut model = PolicyModel::new(vocab_of(&["a", "b"]), FeatureSpec { dim: 2 }).unwrap();
        model.weights_mut().copy_from_slice(&[0.5, -0.25, 0.125, 2.0]);
        model.bias_mut().copy_from_slice(&[1.0, -1.0]);
        let before = model.clone();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut state = AdamWState::for_model(&model);
        let grads = Gradients {
            weights: vec![0.0; 4],
            bias: vec![0.0; 2],
        };
        for _ in 0..5 {
            optimizer_step(&mut model, &grads, &cfg, &mut state).unwrap();
        }
        assert_eq!(model, before);
    }

    #[test]
    fn adamw_first_step_is_normalized_descent() {
        let mut model = PolicyModel::new(vocab_of(&["a"]), FeatureSpec { dim: 2 }).unwrap();
        let cfg = AdamWConfig::default();
        let mut state = AdamWState::for_model(&model);
        let grads = Gradients {
            weights: vec![0.4, -0.7],
            bias: vec![1.3],
        };
        optimizer_step(&mut model, &grads, &cfg, &mut state).unwrap();
        // First step: m_hat = g, v_hat = g^2, so the move is lr * sign(g)
        // up to eps.
        assert!((model.weights()[0] + cfg.lr).abs() < 1e-6 * cfg.lr + 1e-12);
        assert!((model.weights()[1] - cfg.lr).abs() < 1e-6 * cfg.lr + 1e-12);
        assert!((model.bias()[0] + cfg.lr).abs() < 1e-6 * cfg.lr + 1e-12);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adamw_weight_decay_shrinks_weights_not_bias() {
        let mut model = PolicyModel::new(vocab_of(&["a"]), FeatureSpec { dim: 1 }).unwrap();
        model.weights_mut()[0] = 1.0;
        model.bias_mut()[0] = 1.0;
        let cfg = AdamWConfig {
            weight_decay: 0.01,
            ..AdamWConfig::default()
        };
        let mut state = AdamWState::for_model(&model);
        let grads = Gradients {
            weights: vec![0.0],
            bias: vec![0.0],
        };
        optimizer_step(&mut model, &grads, &cfg, &mut state).unwrap();
        assert!(model.weights()[0] < 1.0);
        assert_eq!(model.bias()[0], 1.0);
    }

    #[test]
    fn adamw_is_deterministic() {
        let run = || {
            let mut model =
                PolicyModel::new(vocab_of(&["a", "b"]), FeatureSpec { dim: 2 }).unwrap();
            let cfg = AdamWConfig::default();
            let mut state = AdamWState::for_model(&model);
            for k in 1..=25u32 {
                let grads = Gradients {
                    weights: vec![0.01 * k as f64, -0.02, 0.5 / k as f64, 0.3],
                    bias: vec![-0.1, 0.1 * k as f64],
                };
                optimizer_step(&mut model, &grads, &cfg, &mut state).unwrap();
            }
            (model.weights().to_vec(), model.bias().to_vec())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adamw_shape_mismatch_is_rejected() {
        let mut model = PolicyModel::new(vocab_of(&["a"]), FeatureSpec { dim: 2 }).unwrap();
        let cfg = AdamWConfig::default();
        let mut state = AdamWState::for_model(&model);
        let grads = Gradients {
            weights: vec![0.0; 3],
            bias: vec![0.0],
        };
        assert!(matches!(
            optimizer_step(&mut model, &grads, &cfg, &mut state),
            Err(PolicyError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn repeated_example_training_raises_label_confidence() {
        let inst = instance("the [BLANK] is shiny", "metal");
        let vocab = build_vocabulary(
            &[ClozeInstance {
                gold_distractors: vec!["wood".into(), "plastic".into(), "glass".into()],
                ..inst.clone()
            }],
            &[] as &[&str],
        );
        let spec = FeatureSpec { dim: 16 };
        let mut model = PolicyModel::new(vocab, spec).unwrap();
        let label = model.vocab().get("wood").unwrap();
        let batch = [TrainingExample {
            instance_id: inst.id.clone(),
            features: spec.featurize(&inst),
            label,
            reward: 1.0,
        }];
        let cfg = AdamWConfig {
            lr: 0.05,
            ..AdamWConfig::default()
        };
        let mut state = AdamWState::for_model(&model);
        for _ in 0..200 {
            let (_, grads) = rl_loss_and_grad(&model, &batch).unwrap();
            optimizer_step(&mut model, &grads, &cfg, &mut state).unwrap();
        }
        let conf = model.confidence(&inst, "wood").unwrap();
        assert!(conf > 0.5, "confidence after training: {conf}");
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let mut model = PolicyModel::new(vocab_of(&["metal", "wood"]), FeatureSpec { dim: 3 }).unwrap();
        for (i, w) in model.weights_mut().iter_mut().enumerate() {
            *w = (i as f64 * 0.137).sin();
        }
        model.bias_mut()[1] = -0.0625;
        let once = model.to_json();
        let back = PolicyModel::from_json(&once).unwrap();
        assert_eq!(back.to_json(), once);
        assert_eq!(back, model);
    }

    #[test]
    fn checkpoint_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.json");
        let model = PolicyModel::new(vocab_of(&["a", "b"]), FeatureSpec { dim: 2 }).unwrap();
        model.save(&path).unwrap();
        let back = PolicyModel::load(&path).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn checkpoint_rejects_bad_version_and_shape() {
        let bad_version = r#"{"version":9,"feature_dim":1,"vocab":["a"],"weights":[0.0],"bias":[0.0]}"#;
        assert!(matches!(
            PolicyModel::from_json(bad_version),
            Err(PolicyError::CheckpointFormat(_))
        ));
        let bad_shape = r#"{"version":1,"feature_dim":2,"vocab":["a"],"weights":[0.0],"bias":[0.0]}"#;
        assert!(matches!(
            PolicyModel::from_json(bad_shape),
            Err(PolicyError::CheckpointFormat(_))
        ));
    }

    #[test]
    fn gaussian_init_is_seeded_and_small() {
        use rand::SeedableRng;
        let make = |seed: u64| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            PolicyModel::new_with_init(
                vocab_of(&["a", "b", "c"]),
                FeatureSpec { dim: 8 },
                ParamInit::Gaussian { sigma: 0.01 },
                &mut rng,
            )
            .unwrap()
        };
        let a = make(7);
        let b = make(7);
        let c = make(8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.weights().iter().all(|w| w.abs() < 0.1));
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(logits in proptest::collection::vec(-1e3f64..1e3, 1..12)) {
            let p = softmax(&logits);
            prop_assert_eq!(p.len(), logits.len());
            // Extreme spreads can underflow individual entries to exactly 0;
            // the distribution itself stays finite and normalized.
            for &x in &p {
                prop_assert!(x.is_finite());
                prop_assert!((0.0..=1.0).contains(&x));
            }
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(max > 0.0);
        }

        #[test]
        fn log_prob_never_underflows(spread in 0.0f64..500.0) {
            let mut model = PolicyModel::new(
                Vocabulary::try_from(vec!["a".to_string(), "b".to_string()]).unwrap(),
                FeatureSpec { dim: 1 },
            ).unwrap();
            model.weights_mut()[0] = spread;
            let lp = model.log_prob(&[1.0], 1).unwrap();
            prop_assert!(lp >= PROB_FLOOR.ln());
            prop_assert!(lp <= 0.0);
        }
    }
}
