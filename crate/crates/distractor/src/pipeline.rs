//! End-to-end wiring: candidate pools, generators, the training loop,
//! inference, and the ablation harness.
//!
//! A candidate pool per instance holds `n_gold` gold distractors and
//! `n_generated` generated ones. During training every pool entry becomes one
//! reward-weighted example; the reward scale for a batch comes from the
//! scheduler fed with the running mean of recent batch NLLs. Before the first
//! observation the threshold itself stands in for the mean, so every logged
//! step satisfies `reward_scale == scale_for_loss(avg_loss)` exactly.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{build_vocabulary, Candidate, CandidatePool, ClozeInstance, DataError, PredictionRecord};
use crate::metrics::{evaluate, pair_with_gold, AggregateMetrics, MetricsError};
use crate::policy::{
    optimizer_step, rl_loss_and_grad, AdamWConfig, AdamWState, FeatureSpec, ParamInit,
    PolicyError, PolicyModel, TrainingExample,
};
use crate::reward::{reward_generated, reward_gold, RewardConfig, RewardError, RewardMode};
use crate::scheduler::{ScaleMode, SchedulerConfig, SchedulerError, SchedulerState};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error(
        "instance {id}: generator exhausted after {rounds} rounds with {collected} of {needed} candidates"
    )]
    GenerationExhausted {
        id: String,
        rounds: usize,
        collected: usize,
        needed: usize,
    },
    #[error("instance {id}: only {have} usable candidates for top-{need} selection")]
    InsufficientCandidates { id: String, have: usize, need: usize },
    #[error("instance {id}: has {have} gold distractors, pool needs {need}")]
    InsufficientGold { id: String, have: usize, need: usize },
    #[error("instance {id}: candidate {token:?} has confidence {confidence}")]
    InvalidConfidence {
        id: String,
        token: String,
        confidence: f64,
    },
    #[error("no candidate pool for instance {id}")]
    MissingPool { id: String },
    #[error("multiple candidate pools for instance {id}")]
    DuplicatePool { id: String },
    #[error("pool for instance {id} is inconsistent: {reason}")]
    PoolMismatch { id: String, reason: String },
    #[error("training loss became non-finite at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("no instances to process")]
    EmptyDataset,
    #[error("trajectory io at {path}: {source}")]
    TrajectoryIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("trajectory line {line}: {reason}")]
    TrajectoryFormat { line: usize, reason: String },
}

/// Canonical token form used when comparing candidates: trimmed + lowercased.
pub fn fold(token: &str) -> String {
    token.trim().to_lowercase()
}

/// Proposes candidate distractor tokens for an instance. `exclude` holds
/// folded tokens the caller has already seen; implementations should skip
/// them and return at most `k` candidates.
pub trait CandidateGenerator {
    fn generate(&self, instance: &ClozeInstance, k: usize, exclude: &HashSet<String>)
        -> Vec<Candidate>;
}

/// Pool shape parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolConfig {
    /// Gold distractors per pool. Default: 3.
    pub n_gold: usize,
    /// Generated distractors per pool. Default: 7.
    pub n_generated: usize,
    /// Upper bound on generator calls per pool. Default: 10.
    pub max_generation_rounds: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            n_gold: 3,
            n_generated: 7,
            max_generation_rounds: 10,
        }
    }
}

impl PoolConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.n_gold == 0 || self.n_generated == 0 {
            return Err(PipelineError::InvalidConfig(
                "pool needs at least one gold and one generated slot".to_string(),
            ));
        }
        if self.max_generation_rounds == 0 {
            return Err(PipelineError::InvalidConfig(
                "max_generation_rounds must be at least 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// Builds one pool: the instance's first `n_gold` golds plus `n_generated`
/// accepted generator candidates. The generator only sees folded tokens it
/// already returned; filtering against the answer and the golds happens here.
/// Rounds ask for the remaining deficit and stop early once a round
/// contributes nothing new.
pub fn build_pool(
    instance: &ClozeInstance,
    generator: &dyn CandidateGenerator,
    config: &PoolConfig,
) -> Result<CandidatePool, PipelineError> {
    config.validate()?;
    if instance.gold_distractors.len() < config.n_gold {
        return Err(PipelineError::InsufficientGold {
            id: instance.id.clone(),
            have: instance.gold_distractors.len(),
            need: config.n_gold,
        });
    }
    let gold: Vec<String> = instance.gold_distractors[..config.n_gold].to_vec();
    // Filter against every gold the instance knows, pooled or not.
    let gold_set: HashSet<String> = instance.gold_distractors.iter().map(|g| fold(g)).collect();
    let answer = fold(&instance.answer);

    let mut seen: HashSet<String> = HashSet::new();
    let mut accepted: Vec<Candidate> = Vec::with_capacity(config.n_generated);
    let mut rounds = 0;
    while accepted.len() < config.n_generated && rounds < config.max_generation_rounds {
        let deficit = config.n_generated - accepted.len();
        let returned = generator.generate(instance, deficit, &seen);
        rounds += 1;
        if returned.is_empty() {
            break;
        }
        let mut progressed = false;
        for candidate in returned {
            let token = fold(&candidate.token);
            if token.is_empty() || !seen.insert(token.clone()) {
                continue;
            }
            progressed = true;
            if token == answer || gold_set.contains(&token) {
                continue;
            }
            if !candidate.confidence.is_finite() || !(0.0..=1.0).contains(&candidate.confidence) {
                return Err(PipelineError::InvalidConfidence {
                    id: instance.id.clone(),
                    token,
                    confidence: candidate.confidence,
                });
            }
            if accepted.len() < config.n_generated {
                accepted.push(Candidate {
                    token,
                    confidence: candidate.confidence,
                });
            }
        }
        if !progressed {
            break;
        }
    }
    if accepted.len() < config.n_generated {
        return Err(PipelineError::GenerationExhausted {
            id: instance.id.clone(),
            rounds,
            collected: accepted.len(),
            needed: config.n_generated,
        });
    }
    Ok(CandidatePool {
        id: instance.id.clone(),
        gold,
        generated: accepted,
    })
}

pub fn build_pools(
    instances: &[ClozeInstance],
    generator: &dyn CandidateGenerator,
    config: &PoolConfig,
) -> Result<Vec<CandidatePool>, PipelineError> {
    instances
        .iter()
        .map(|instance| build_pool(instance, generator, config))
        .collect()
}

/// Checks a pool (possibly loaded from disk) against its instance: exact slot
/// counts, golds drawn from the instance, no duplicates, no answer leakage,
/// confidences in [0, 1].
pub fn validate_pool(
    pool: &CandidatePool,
    instance: &ClozeInstance,
    config: &PoolConfig,
) -> Result<(), PipelineError> {
    let fail = |reason: String| PipelineError::PoolMismatch {
        id: pool.id.clone(),
        reason,
    };
    if pool.id != instance.id {
        return Err(fail(format!("pool id differs from instance id {}", instance.id)));
    }
    if pool.gold.len() != config.n_gold {
        return Err(fail(format!(
            "expected {} gold entries, found {}",
            config.n_gold,
            pool.gold.len()
        )));
    }
    if pool.generated.len() != config.n_generated {
        return Err(fail(format!(
            "expected {} generated entries, found {}",
            config.n_generated,
            pool.generated.len()
        )));
    }
    let instance_golds: HashSet<String> = instance.gold_distractors.iter().map(|g| fold(g)).collect();
    let answer = fold(&instance.answer);
    let mut seen = HashSet::new();
    for g in &pool.gold {
        let token = fold(g);
        if !instance_golds.contains(&token) {
            return Err(fail(format!("gold {token:?} is not a gold of the instance")));
        }
        if !seen.insert(token.clone()) {
            return Err(fail(format!("duplicate token {token:?}")));
        }
    }
    for c in &pool.generated {
        let token = fold(&c.token);
        if token == answer {
            return Err(fail("generated candidate equals the answer".to_string()));
        }
        if instance_golds.contains(&token) {
            return Err(fail(format!("generated candidate {token:?} duplicates a gold")));
        }
        if !seen.insert(token.clone()) {
            return Err(fail(format!("duplicate token {token:?}")));
        }
        if !c.confidence.is_finite() || !(0.0..=1.0).contains(&c.confidence) {
            return Err(PipelineError::InvalidConfidence {
                id: pool.id.clone(),
                token,
                confidence: c.confidence,
            });
        }
    }
    Ok(())
}

/// Orders pools to match `instances`, requiring a one-to-one id match.
pub fn align_pools<'a>(
    instances: &[ClozeInstance],
    pools: &'a [CandidatePool],
) -> Result<Vec<&'a CandidatePool>, PipelineError> {
    let mut by_id: HashMap<&str, &CandidatePool> = HashMap::with_capacity(pools.len());
    for pool in pools {
        if by_id.insert(pool.id.as_str(), pool).is_some() {
            return Err(PipelineError::DuplicatePool {
                id: pool.id.clone(),
            });
        }
    }
    instances
        .iter()
        .map(|instance| {
            by_id
                .get(instance.id.as_str())
                .copied()
                .ok_or_else(|| PipelineError::MissingPool {
                    id: instance.id.clone(),
                })
        })
        .collect()
}

/// Ranks tokens by how often they appear as answers or golds elsewhere in a
/// corpus. Each query subtracts the instance's own contribution so an
/// instance cannot vote for itself; confidence is the score relative to the
/// best eligible token.
#[derive(Debug, Clone)]
pub struct FrequencyGenerator {
    counts: HashMap<String, u64>,
}

impl FrequencyGenerator {
    pub fn from_corpus(instances: &[ClozeInstance]) -> Self {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for instance in instances {
            *counts.entry(fold(&instance.answer)).or_insert(0) += 1;
            for g in &instance.gold_distractors {
                *counts.entry(fold(g)).or_insert(0) += 1;
            }
        }
        Self { counts }
    }
}

impl CandidateGenerator for FrequencyGenerator {
    fn generate(
        &self,
        instance: &ClozeInstance,
        k: usize,
        exclude: &HashSet<String>,
    ) -> Vec<Candidate> {
        let mut own: HashMap<String, u64> = HashMap::new();
        *own.entry(fold(&instance.answer)).or_insert(0) += 1;
        for g in &instance.gold_distractors {
            *own.entry(fold(g)).or_insert(0) += 1;
        }
        let mut scored: Vec<(&str, u64)> = self
            .counts
            .iter()
            .filter_map(|(token, count)| {
                let score = count.saturating_sub(own.get(token).copied().unwrap_or(0));
                if score == 0 || exclude.contains(token) {
                    None
                } else {
                    Some((token.as_str(), score))
                }
            })
            .collect();
        scored.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let max = match scored.first() {
            Some((_, top)) => *top as f64,
            None => return Vec::new(),
        };
        scored
            .into_iter()
            .take(k)
            .map(|(token, score)| Candidate {
                token: token.to_string(),
                confidence: score as f64 / max,
            })
            .collect()
    }
}

/// Ranks the trained policy's vocabulary by softmax probability for the
/// queried instance. Confidence is the raw probability.
pub struct PolicyGenerator<'a> {
    model: &'a PolicyModel,
}

impl<'a> PolicyGenerator<'a> {
    pub fn new(model: &'a PolicyModel) -> Self {
        Self { model }
    }
}

impl CandidateGenerator for PolicyGenerator<'_> {
    fn generate(
        &self,
        instance: &ClozeInstance,
        k: usize,
        exclude: &HashSet<String>,
    ) -> Vec<Candidate> {
        let features = self.model.feature_spec().featurize(instance);
        let probs = match self.model.probabilities(&features) {
            Ok(p) => p,
            Err(_) => return Vec::new(),
        };
        let mut scored: Vec<(&str, f64)> = self
            .model
            .vocab()
            .tokens()
            .iter()
            .zip(&probs)
            .filter(|(token, _)| !exclude.contains(token.as_str()))
            .map(|(token, p)| (token.as_str(), *p))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        scored
            .into_iter()
            .take(k)
            .map(|(token, p)| Candidate {
                token: token.to_string(),
                confidence: p,
            })
            .collect()
    }
}

/// Replays fixed candidate lists: per-instance scripts with a shared
/// fallback. Entries already in `exclude` are skipped, nothing else is
/// filtered, so callers see exactly what the script says.
#[derive(Debug, Clone, Default)]
pub struct ScriptedGenerator {
    scripts: HashMap<String, Vec<Candidate>>,
    fallback: Vec<Candidate>,
}

impl ScriptedGenerator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fallback(fallback: Vec<Candidate>) -> Self {
        Self {
            scripts: HashMap::new(),
            fallback,
        }
    }

    pub fn add_script(&mut self, id: impl Into<String>, candidates: Vec<Candidate>) {
        self.scripts.insert(id.into(), candidates);
    }
}

impl CandidateGenerator for ScriptedGenerator {
    fn generate(
        &self,
        instance: &ClozeInstance,
        k: usize,
        exclude: &HashSet<String>,
    ) -> Vec<Candidate> {
        let script = self.scripts.get(&instance.id).unwrap_or(&self.fallback);
        script
            .iter()
            .filter(|c| !exclude.contains(&fold(&c.token)))
            .take(k)
            .cloned()
            .collect()
    }
}

/// One logged optimizer step. `avg_loss` is the window mean that produced
/// `reward_scale` for this batch; `batch_nll` is the unweighted mean NLL the
/// window absorbs afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRecord {
    pub step: u64,
    pub epoch: u64,
    pub batch_nll: f64,
    pub avg_loss: f64,
    pub reward_scale: f64,
}

pub const TRAJECTORY_HEADER: &str = "step,epoch,batch_nll,avg_loss,reward_scale";

pub fn trajectory_to_csv(records: &[TrajectoryRecord]) -> String {
    let mut out = String::with_capacity(records.len() * 48 + 48);
    out.push_str(TRAJECTORY_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{:.9},{:.9},{:.9}\n",
            r.step, r.epoch, r.batch_nll, r.avg_loss, r.reward_scale
        ));
    }
    out
}

pub fn parse_trajectory(text: &str) -> Result<Vec<TrajectoryRecord>, PipelineError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == TRAJECTORY_HEADER => {}
        Some((_, header)) => {
            return Err(PipelineError::TrajectoryFormat {
                line: 1,
                reason: format!("unexpected header {header:?}"),
            })
        }
        None => {
            return Err(PipelineError::TrajectoryFormat {
                line: 1,
                reason: "missing header".to_string(),
            })
        }
    }
    let mut records = Vec::new();
    for (index, line) in lines {
        if line.is_empty() {
            continue;
        }
        let number = index + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(PipelineError::TrajectoryFormat {
                line: number,
                reason: format!("expected 5 fields, found {}", fields.len()),
            });
        }
        let bad = |what: &str| PipelineError::TrajectoryFormat {
            line: number,
            reason: format!("cannot parse {what}"),
        };
        records.push(TrajectoryRecord {
            step: fields[0].parse().map_err(|_| bad("step"))?,
            epoch: fields[1].parse().map_err(|_| bad("epoch"))?,
            batch_nll: fields[2].parse().map_err(|_| bad("batch_nll"))?,
            avg_loss: fields[3].parse().map_err(|_| bad("avg_loss"))?,
            reward_scale: fields[4].parse().map_err(|_| bad("reward_scale"))?,
        });
    }
    Ok(records)
}

pub fn save_trajectory(
    path: impl AsRef<Path>,
    records: &[TrajectoryRecord],
) -> Result<(), PipelineError> {
    let path = path.as_ref();
    let io_err = |source| PipelineError::TrajectoryIo {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut writer = std::io::BufWriter::new(file);
    writer
        .write_all(trajectory_to_csv(records).as_bytes())
        .and_then(|_| writer.flush())
        .map_err(io_err)
}

pub fn load_trajectory(path: impl AsRef<Path>) -> Result<Vec<TrajectoryRecord>, PipelineError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| PipelineError::TrajectoryIo {
        path: path.display().to_string(),
        source,
    })?;
    parse_trajectory(&text)
}

/// Everything the training loop needs.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Passes over the pooled examples. Default: 20.
    pub epochs: usize,
    /// Examples per optimizer step. Default: 8.
    pub batch_size: usize,
    /// Seed for init and shuffling. Default: 42.
    pub seed: u64,
    pub feature: FeatureSpec,
    pub init: ParamInit,
    pub optimizer: AdamWConfig,
    pub scheduler: SchedulerConfig,
    pub reward: RewardConfig,
    pub pool: PoolConfig,
    /// When set, generated-candidate confidences are refreshed from the
    /// current policy at the start of every epoch after the first.
    pub recompute_confidence: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            seed: 42,
            feature: FeatureSpec::default(),
            init: ParamInit::default(),
            optimizer: AdamWConfig::default(),
            scheduler: SchedulerConfig::default(),
            reward: RewardConfig::default(),
            pool: PoolConfig::default(),
            recompute_confidence: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.epochs == 0 {
            return Err(PipelineError::InvalidConfig(
                "epochs must be at least 1".to_string(),
            ));
        }
        if self.batch_size == 0 {
            return Err(PipelineError::InvalidConfig(
                "batch_size must be at least 1".to_string(),
            ));
        }
        self.feature.validate()?;
        self.optimizer.validate()?;
        self.pool.validate()?;
        self.scheduler
            .validate()
            .map_err(PipelineError::Scheduler)?;
        self.reward.validate().map_err(PipelineError::Reward)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: PolicyModel,
    pub trajectory: Vec<TrajectoryRecord>,
}

#[derive(Clone, Copy)]
enum EntryKind {
    Gold,
    Generated { gen_index: usize },
}

/// Trains the policy on pooled examples. Deterministic for a given seed.
pub fn train(
    instances: &[ClozeInstance],
    pools: &[CandidatePool],
    config: &TrainConfig,
) -> Result<TrainOutput, PipelineError> {
    config.validate()?;
    if instances.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let aligned = align_pools(instances, pools)?;
    for (instance, pool) in instances.iter().zip(&aligned) {
        validate_pool(pool, instance, &config.pool)?;
    }

    let extra_tokens: Vec<String> = aligned
        .iter()
        .flat_map(|pool| pool.generated.iter().map(|c| c.token.clone()))
        .collect();
    let vocab = build_vocabulary(instances, &extra_tokens);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = PolicyModel::new_with_init(vocab, config.feature, config.init, &mut rng)?;
    let mut opt_state = AdamWState::for_model(&model);
    let mut sched_state = SchedulerState::new(config.scheduler.loss_window);

    // Local mutable copy so per-epoch confidence refreshes stay internal.
    let mut local_pools: Vec<CandidatePool> = aligned.iter().map(|p| (*p).clone()).collect();

    let features: Vec<Vec<f64>> = instances
        .iter()
        .map(|instance| config.feature.featurize(instance))
        .collect();
    let lookup = |token: &str| {
        model.vocab().get(token).ok_or_else(|| PipelineError::PoolMismatch {
            id: "<vocab>".to_string(),
            reason: format!("token {token:?} missing from vocabulary"),
        })
    };
    let mut gold_labels: Vec<Vec<usize>> = Vec::with_capacity(local_pools.len());
    let mut gen_labels: Vec<Vec<usize>> = Vec::with_capacity(local_pools.len());
    for pool in &local_pools {
        gold_labels.push(
            pool.gold
                .iter()
                .map(|g| lookup(&fold(g)))
                .collect::<Result<_, _>>()?,
        );
        gen_labels.push(
            pool.generated
                .iter()
                .map(|c| lookup(&c.token))
                .collect::<Result<_, _>>()?,
        );
    }

    let mut entries: Vec<(usize, usize, EntryKind)> = Vec::new();
    for (i, pool) in local_pools.iter().enumerate() {
        for (g, _) in pool.gold.iter().enumerate() {
            entries.push((i, gold_labels[i][g], EntryKind::Gold));
        }
        for (g, _) in pool.generated.iter().enumerate() {
            entries.push((i, gen_labels[i][g], EntryKind::Generated { gen_index: g }));
        }
    }

    let mut trajectory = Vec::with_capacity(config.epochs * entries.len() / config.batch_size + 1);
    let mut step: u64 = 0;
    for epoch in 1..=config.epochs as u64 {
        if config.recompute_confidence && epoch > 1 {
            for (i, pool) in local_pools.iter_mut().enumerate() {
                let probs = model.probabilities(&features[i])?;
                for (g, candidate) in pool.generated.iter_mut().enumerate() {
                    candidate.confidence = probs[gen_labels[i][g]];
                }
            }
        }
        entries.shuffle(&mut rng);
        for chunk in entries.chunks(config.batch_size) {
            let avg_loss = sched_state
                .avg_loss()
                .unwrap_or(config.scheduler.threshold);
            let scale = config.scheduler.scale_for_loss(avg_loss);
            let mut batch = Vec::with_capacity(chunk.len());
            for &(i, label, kind) in chunk {
                let reward = match kind {
                    EntryKind::Gold => reward_gold(scale)?,
                    EntryKind::Generated { gen_index } => reward_generated(
                        scale,
                        local_pools[i].generated[gen_index].confidence,
                        &config.reward,
                    )?,
                };
                batch.push(TrainingExample {
                    instance_id: instances[i].id.clone(),
                    features: features[i].clone(),
                    label,
                    reward,
                });
            }
            let (stats, grads) = rl_loss_and_grad(&model, &batch)?;
            step += 1;
            if !stats.loss.is_finite() || !stats.mean_nll.is_finite() {
                return Err(PipelineError::NonFiniteLoss { step });
            }
            optimizer_step(&mut model, &grads, &config.optimizer, &mut opt_state)?;
            sched_state.observe(stats.mean_nll)?;
            trajectory.push(TrajectoryRecord {
                step,
                epoch,
                batch_nll: stats.mean_nll,
                avg_loss,
                reward_scale: scale,
            });
        }
    }
    Ok(TrainOutput { model, trajectory })
}

/// Inference shape parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferConfig {
    /// Final predictions per instance. Default: 3.
    pub k_out: usize,
    /// Candidates requested from the generator. Default: 10.
    pub k_gen: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { k_out: 3, k_gen: 10 }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.k_out == 0 {
            return Err(PipelineError::InvalidConfig(
                "k_out must be at least 1".to_string(),
            ));
        }
        if self.k_gen < self.k_out {
            return Err(PipelineError::InvalidConfig(format!(
                "k_gen ({}) must be at least k_out ({})",
                self.k_gen, self.k_out
            )));
        }
        Ok(())
    }
}

/// Ranks generator candidates by the policy's probability and keeps the top
/// `k_out`. Tokens outside the vocabulary rank with probability zero; ties
/// break lexicographically. One extra generator round covers shortfalls, then
/// the instance is reported as uncoverable.
pub fn infer(
    model: &PolicyModel,
    instance: &ClozeInstance,
    generator: &dyn CandidateGenerator,
    config: &InferConfig,
) -> Result<PredictionRecord, PipelineError> {
    config.validate()?;
    let answer = fold(&instance.answer);
    let features = model.feature_spec().featurize(instance);
    let probs = model.probabilities(&features)?;

    let mut returned: HashSet<String> = HashSet::new();
    let mut kept: Vec<(String, f64)> = Vec::new();
    for round in 0..2 {
        let ask = if round == 0 {
            config.k_gen
        } else {
            config.k_out - kept.len()
        };
        let candidates = generator.generate(instance, ask, &returned);
        for candidate in candidates {
            let token = fold(&candidate.token);
            if token.is_empty() || !returned.insert(token.clone()) {
                continue;
            }
            if token == answer {
                continue;
            }
            let confidence = match model.vocab().get(&token) {
                Some(index) => probs[index],
                None => 0.0,
            };
            kept.push((token, confidence));
        }
        if kept.len() >= config.k_out {
            break;
        }
    }
    if kept.len() < config.k_out {
        return Err(PipelineError::InsufficientCandidates {
            id: instance.id.clone(),
            have: kept.len(),
            need: config.k_out,
        });
    }
    kept.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(PredictionRecord {
        id: instance.id.clone(),
        predictions: kept
            .into_iter()
            .take(config.k_out)
            .map(|(token, _)| token)
            .collect(),
    })
}

pub fn infer_dataset(
    model: &PolicyModel,
    instances: &[ClozeInstance],
    generator: &dyn CandidateGenerator,
    config: &InferConfig,
) -> Result<Vec<PredictionRecord>, PipelineError> {
    instances
        .iter()
        .map(|instance| infer(model, instance, generator, config))
        .collect()
}

/// The five reported training conditions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AblateCondition {
    /// Adaptive scale schedule with the dual reward: the full method.
    AdaptiveDual,
    /// Fixed reward scale, dual reward.
    ConstantScale(f64),
    /// Adaptive schedule but generated candidates earn the gold coefficient.
    UniformReward,
}

impl AblateCondition {
    pub fn label(&self) -> String {
        match self {
            AblateCondition::AdaptiveDual => "adaptive-dual".to_string(),
            AblateCondition::ConstantScale(scale) => format!("constant-{scale:.2}"),
            AblateCondition::UniformReward => "uniform".to_string(),
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut config = base.clone();
        match self {
            AblateCondition::AdaptiveDual => {
                config.scheduler.mode = ScaleMode::Adaptive;
                config.reward.mode = RewardMode::Dual;
            }
            AblateCondition::ConstantScale(scale) => {
                config.scheduler.mode = ScaleMode::Constant;
                config.scheduler.constant_scale = *scale;
                config.reward.mode = RewardMode::Dual;
            }
            AblateCondition::UniformReward => {
                config.scheduler.mode = ScaleMode::Adaptive;
                config.reward.mode = RewardMode::Uniform;
            }
        }
        config
    }
}

pub fn standard_conditions() -> Vec<AblateCondition> {
    vec![
        AblateCondition::AdaptiveDual,
        AblateCondition::ConstantScale(0.1),
        AblateCondition::ConstantScale(0.15),
        AblateCondition::ConstantScale(0.2),
        AblateCondition::UniformReward,
    ]
}

#[derive(Debug, Clone)]
pub struct EvaluatedRun {
    pub output: TrainOutput,
    pub metrics: AggregateMetrics,
}

/// Trains under `config`, predicts for the eval set, and scores against its
/// gold distractors.
pub fn train_and_evaluate(
    config: &TrainConfig,
    train_instances: &[ClozeInstance],
    pools: &[CandidatePool],
    eval_instances: &[ClozeInstance],
    generator: &dyn CandidateGenerator,
    infer_config: &InferConfig,
) -> Result<EvaluatedRun, PipelineError> {
    let output = train(train_instances, pools, config)?;
    let records = infer_dataset(&output.model, eval_instances, generator, infer_config)?;
    let pairs = pair_with_gold(&records, eval_instances)?;
    let evaluation = evaluate(&pairs)?;
    Ok(EvaluatedRun {
        output,
        metrics: evaluation.aggregate,
    })
}

/// Runs every condition over every seed and averages each condition's
/// metrics over seeds. Returns one labeled row per condition, in order.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    base: &TrainConfig,
    conditions: &[AblateCondition],
    seeds: &[u64],
    train_instances: &[ClozeInstance],
    pools: &[CandidatePool],
    eval_instances: &[ClozeInstance],
    generator: &dyn CandidateGenerator,
    infer_config: &InferConfig,
) -> Result<Vec<(String, AggregateMetrics)>, PipelineError> {
    if seeds.is_empty() {
        return Err(PipelineError::InvalidConfig(
            "ablation needs at least one seed".to_string(),
        ));
    }
    if conditions.is_empty() {
        return Err(PipelineError::InvalidConfig(
            "ablation needs at least one condition".to_string(),
        ));
    }
    let mut rows = Vec::with_capacity(conditions.len());
    for condition in conditions {
        let mut sums = [0.0f64; 5];
        for &seed in seeds {
            let mut config = condition.apply(base);
            config.seed = seed;
            let run = train_and_evaluate(
                &config,
                train_instances,
                pools,
                eval_instances,
                generator,
                infer_config,
            )?;
            for (sum, value) in sums.iter_mut().zip(run.metrics.as_array()) {
                *sum += value;
            }
        }
        let n = seeds.len() as f64;
        rows.push((
            condition.label(),
            AggregateMetrics {
                p_at_1: sums[0] / n,
                r_at_1: sums[1] / n,
                f1_at_3: sums[2] / n,
                mrr_at_3: sums[3] / n,
                ndcg_at_3: sums[4] / n,
            },
        ));
    }
    Ok(rows)
}

/// CSV rendering of ablation rows, values rounded to two decimals.
pub fn ablation_csv(rows: &[(String, AggregateMetrics)]) -> String {
    let mut out = String::from("condition,p_at_1,r_at_1,f1_at_3,mrr_at_3,ndcg_at_3\n");
    for (label, metrics) in rows {
        let r = metrics.rounded();
        out.push_str(&format!(
            "{label},{:.2},{:.2},{:.2},{:.2},{:.2}\n",
            r.p_at_1, r.r_at_1, r.f1_at_3, r.mrr_at_3, r.ndcg_at_3
        ));
    }
    out
}
