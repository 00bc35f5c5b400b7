//! Policy optimization: a group-relative clipped-surrogate trainer and
//! maximum-likelihood fitting, sharing one Adam update rule.
//!
//! One trainer step freezes the current parameters as the rollout policy,
//! draws a group of G actions per state, scores them through the environment
//! callback, normalizes rewards within each group into advantages, and
//! ascends
//!
//! ```text
//! mean over sequences of  min(rho * A, clip(rho, 1-eps, 1+eps) * A)
//!                         - beta * (exp(delta) - delta - 1)
//! ```
//!
//! where `rho = exp(log pi - log pi_old)` is the sequence-level probability
//! ratio and `delta = log pi_ref - log pi` feeds the low-variance KL
//! estimator. Rollouts are evaluated in parallel against the frozen
//! snapshot; the parameter update itself is single-threaded, and gradient
//! accumulation runs in a fixed order so training is bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::par;
use crate::policy::{
    ActionSequence, NeuralPolicy, Policy, PolicyGrad, SamplerConfig, StateInput, TabularPolicy,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("reward callback returned a non-finite value for state {state:?}")]
    NonFiniteReward { state: String },
    #[error("empty minibatch")]
    EmptyBatch,
    #[error("invalid config: {0}")]
    BadConfig(String),
}

/// Group-relative trainer configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrpoConfig {
    /// Samples drawn per state per step.
    pub group_size: usize,
    /// Surrogate clip width.
    pub clip: f64,
    /// KL penalty coefficient toward the reference policy.
    pub kl_coef: f64,
    pub learning_rate: f64,
    /// States per step; the batch is a rotating window over the state list.
    pub minibatch: usize,
    /// Gradient passes over each rollout batch (1 = strictly on-policy).
    pub epochs: usize,
    pub sampler: SamplerConfig,
    /// Guard added to the group standard deviation.
    pub advantage_epsilon: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 12,
            clip: 0.2,
            kl_coef: 0.001,
            learning_rate: 1e-3,
            minibatch: 8,
            epochs: 1,
            sampler: SamplerConfig::default(),
            advantage_epsilon: 1e-6,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.group_size < 2 {
            return Err(TrainError::BadConfig("group_size must be >= 2".into()));
        }
        if !(self.clip > 0.0) {
            return Err(TrainError::BadConfig("clip must be > 0".into()));
        }
        if self.kl_coef < 0.0 {
            return Err(TrainError::BadConfig("kl_coef must be >= 0".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::BadConfig("learning_rate must be > 0".into()));
        }
        if self.minibatch < 1 || self.epochs < 1 {
            return Err(TrainError::BadConfig(
                "minibatch and epochs must be >= 1".into(),
            ));
        }
        if !(self.advantage_epsilon > 0.0) {
            return Err(TrainError::BadConfig(
                "advantage_epsilon must be > 0".into(),
            ));
        }
        self.sampler.validate().map_err(TrainError::BadConfig)
    }
}

/// Adam with the usual decay rates; one slot pair per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(param_count: usize) -> Self {
        Self {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Ascends `params` along `grad` (gradient of the objective being
    /// maximized).
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grad.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            params[i] += lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Group-relative advantages: `(r - mean) / (population std + epsilon)`.
pub fn group_advantages(rewards: &[f64], epsilon: f64) -> Vec<f64> {
    // Identical rewards center to exactly zero; summing first would leave
    // ~1e-16 residuals that the optimizer's normalization then amplifies.
    if rewards.iter().all(|&r| r == rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    rewards
        .iter()
        .map(|r| (r - mean) / (std + epsilon))
        .collect()
}

/// Low-variance KL estimator `exp(delta) - delta - 1` with
/// `delta = log pi_ref - log pi`; non-negative by convexity of exp.
pub fn kl_penalty_estimate(log_prob: f64, ref_log_prob: f64) -> f64 {
    let delta = ref_log_prob - log_prob;
    delta.exp() - delta - 1.0
}

/// One group of rollouts for a single state.
#[derive(Debug, Clone)]
pub struct Group {
    pub state_index: usize,
    pub actions: Vec<ActionSequence>,
    /// Sequence log-probabilities under the frozen rollout policy.
    pub old_log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// All groups drawn in one rollout phase.
#[derive(Debug, Clone)]
pub struct GroupBatch {
    pub groups: Vec<Group>,
}

impl GroupBatch {
    pub fn mean_reward(&self) -> f64 {
        let (sum, n) = self
            .groups
            .iter()
            .flat_map(|g| g.rewards.iter())
            .fold((0.0, 0usize), |(s, n), r| (s + r, n + 1));
        sum / n as f64
    }
}

/// Per-step training statistics, serialized one JSON object per line in the
/// training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub clip_frac: f64,
    pub nll: Option<f64>,
}

/// Draws G actions per state from the frozen policy and scores them.
///
/// Rollouts are independent work items seeded by (step, state, sample), so
/// the result does not depend on scheduling. Errors if the callback produces
/// a non-finite reward.
pub fn collect_groups<F>(
    rollout_policy: &NeuralPolicy,
    states: &[StateInput],
    reward_fn: F,
    cfg: &GrpoConfig,
    step: u64,
) -> Result<GroupBatch, TrainError>
where
    F: Fn(&StateInput, &ActionSequence) -> f64 + Send + Sync,
{
    collect_groups_with(
        rollout_policy,
        states,
        |policy, state, sampler| policy.sample(state, sampler),
        reward_fn,
        cfg,
        step,
    )
}

/// [`collect_groups`] with a custom draw, e.g. constrained exploration that
/// still records raw log-probabilities.
pub fn collect_groups_with<S, F>(
    rollout_policy: &NeuralPolicy,
    states: &[StateInput],
    sample_fn: S,
    reward_fn: F,
    cfg: &GrpoConfig,
    step: u64,
) -> Result<GroupBatch, TrainError>
where
    S: Fn(&NeuralPolicy, &StateInput, &SamplerConfig) -> crate::policy::Sampled + Send + Sync,
    F: Fn(&StateInput, &ActionSequence) -> f64 + Send + Sync,
{
    let g = cfg.group_size;
    let flat = par::map_indices(states.len() * g, |idx| {
        let state_index = idx / g;
        let sample_index = idx % g;
        let state = &states[state_index];
        let sampler = cfg
            .sampler
            .derive(&[step, state_index as u64, sample_index as u64]);
        let sampled = sample_fn(rollout_policy, state, &sampler);
        let reward = reward_fn(state, &sampled.action);
        (sampled, reward)
    });
    let mut groups = Vec::with_capacity(states.len());
    for (state_index, chunk) in flat.chunks(g).enumerate() {
        let mut actions = Vec::with_capacity(g);
        let mut old_log_probs = Vec::with_capacity(g);
        let mut rewards = Vec::with_capacity(g);
        for (sampled, reward) in chunk {
            if !reward.is_finite() {
                return Err(TrainError::NonFiniteReward {
                    state: states[state_index].id.clone(),
                });
            }
            actions.push(sampled.action.clone());
            old_log_probs.push(sampled.log_prob);
            rewards.push(*reward);
        }
        let advantages = group_advantages(&rewards, cfg.advantage_epsilon);
        groups.push(Group {
            state_index,
            actions,
            old_log_probs,
            rewards,
            advantages,
        });
    }
    Ok(GroupBatch { groups })
}

/// One full trainer step: rollout under the frozen snapshot, then `epochs`
/// clipped-surrogate ascent passes over the batch.
///
/// `reference` anchors the KL penalty and is typically the initial policy,
/// fixed for the whole run.
pub fn grpo_step<F>(
    policy: &mut NeuralPolicy,
    adam: &mut Adam,
    reference: &NeuralPolicy,
    states: &[StateInput],
    reward_fn: F,
    cfg: &GrpoConfig,
    step: u64,
) -> Result<StepReport, TrainError>
where
    F: Fn(&StateInput, &ActionSequence) -> f64 + Send + Sync,
{
    grpo_step_with(
        policy,
        adam,
        reference,
        states,
        |p, s, c| p.sample(s, c),
        reward_fn,
        cfg,
        step,
    )
}

/// [`grpo_step`] with a custom rollout draw.
#[allow(clippy::too_many_arguments)]
pub fn grpo_step_with<S, F>(
    policy: &mut NeuralPolicy,
    adam: &mut Adam,
    reference: &NeuralPolicy,
    states: &[StateInput],
    sample_fn: S,
    reward_fn: F,
    cfg: &GrpoConfig,
    step: u64,
) -> Result<StepReport, TrainError>
where
    S: Fn(&NeuralPolicy, &StateInput, &SamplerConfig) -> crate::policy::Sampled + Send + Sync,
    F: Fn(&StateInput, &ActionSequence) -> f64 + Send + Sync,
{
    cfg.validate()?;
    let rollout_policy = policy.clone();
    let batch = collect_groups_with(&rollout_policy, states, sample_fn, reward_fn, cfg, step)?;

    let mut mean_kl = 0.0;
    let mut clip_frac = 0.0;
    for _ in 0..cfg.epochs {
        let (grad, stats) = surrogate_gradient(policy, reference, states, &batch, cfg);
        adam.step(policy.params_mut(), &grad, cfg.learning_rate);
        mean_kl = stats.mean_kl;
        clip_frac = stats.clip_frac;
    }

    Ok(StepReport {
        step,
        mean_reward: batch.mean_reward(),
        mean_kl,
        clip_frac,
        nll: None,
    })
}

struct SurrogateStats {
    mean_kl: f64,
    clip_frac: f64,
}

/// Gradient of the clipped surrogate minus the KL penalty, averaged over all
/// sequences in the batch. Per-sequence coefficients are computed in
/// parallel; accumulation runs in index order.
fn surrogate_gradient(
    policy: &NeuralPolicy,
    reference: &NeuralPolicy,
    states: &[StateInput],
    batch: &GroupBatch,
    cfg: &GrpoConfig,
) -> (PolicyGrad, SurrogateStats) {
    struct SeqTerm {
        group: usize,
        sample: usize,
        /// Coefficient multiplying grad log pi for this sequence.
        coef: f64,
        kl: f64,
        clipped: bool,
    }

    let items: Vec<(usize, usize)> = batch
        .groups
        .iter()
        .enumerate()
        .flat_map(|(gi, group)| (0..group.actions.len()).map(move |ai| (gi, ai)))
        .collect();
    let terms: Vec<SeqTerm> = par::map_slice(&items, |&(gi, ai)| {
        let group = &batch.groups[gi];
        let state = &states[group.state_index];
        let action = &group.actions[ai];
        let advantage = group.advantages[ai];
        let log_prob = policy.log_prob(state, action);
        let ratio = (log_prob - group.old_log_probs[ai]).exp();
        let unclipped = ratio * advantage;
        let clipped_obj = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip) * advantage;
        let clipping_active = clipped_obj < unclipped;
        // min(rho A, clip(rho) A): when the clipped branch is active the
        // ratio sits at a constant bound, so the surrogate gradient is zero.
        let mut coef = if clipping_active { 0.0 } else { advantage * ratio };
        let delta = reference.log_prob(state, action) - log_prob;
        let kl = delta.exp() - delta - 1.0;
        // d/dtheta of -beta*(exp(delta)-delta-1) is
        // beta*(exp(delta)-1)*grad log pi.
        coef += cfg.kl_coef * (delta.exp() - 1.0);
        SeqTerm {
            group: gi,
            sample: ai,
            coef,
            kl,
            clipped: clipping_active,
        }
    });

    let n = terms.len() as f64;
    let mut grad = policy.zero_grad();
    let mut kl_sum = 0.0;
    let mut clip_count = 0usize;
    for term in &terms {
        let group = &batch.groups[term.group];
        if term.coef != 0.0 {
            policy.accumulate_grad_log_prob(
                &states[group.state_index],
                &group.actions[term.sample],
                term.coef / n,
                &mut grad,
            );
        }
        kl_sum += term.kl;
        clip_count += usize::from(term.clipped);
    }
    (
        grad,
        SurrogateStats {
            mean_kl: kl_sum / n,
            clip_frac: clip_count as f64 / n,
        },
    )
}

/// One (state, action) supervision pair.
#[derive(Debug, Clone)]
pub struct SftExample {
    pub state: StateInput,
    pub action: ActionSequence,
}

/// One Adam ascent step on mean log-likelihood over the minibatch. Returns
/// the minibatch mean negative log-likelihood before the update.
pub fn sft_step(
    policy: &mut NeuralPolicy,
    adam: &mut Adam,
    minibatch: &[SftExample],
    learning_rate: f64,
) -> Result<f64, TrainError> {
    if minibatch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let n = minibatch.len() as f64;
    let frozen = &*policy;
    let per_example: Vec<(PolicyGrad, f64)> = par::map_slice(minibatch, |ex| {
        let grad = frozen.grad_log_prob(&ex.state, &ex.action);
        let lp = frozen.log_prob(&ex.state, &ex.action);
        (grad, lp)
    });
    let mut grad = policy.zero_grad();
    let mut nll = 0.0;
    for (g, lp) in &per_example {
        for (acc, gi) in grad.iter_mut().zip(g) {
            *acc += gi / n;
        }
        nll -= lp / n;
    }
    adam.step(policy.params_mut(), &grad, learning_rate);
    Ok(nll)
}

/// Gradient ascent on mean log-likelihood for a tabular policy, performed in
/// logit space so rows stay normalized. Returns the pre-update mean NLL.
pub fn sft_step_tabular(
    policy: &mut TabularPolicy,
    minibatch: &[(usize, ActionSequence)],
    learning_rate: f64,
) -> Result<f64, TrainError> {
    if minibatch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let vocab = policy.action_vocab();
    let stop = policy.stop_id();
    let l_max = policy.l_max();
    let n = minibatch.len() as f64;
    let floor = 1e-12;

    // (state, pos, prev) -> accumulated dlogits.
    let mut updates: std::collections::HashMap<(usize, usize, Option<u32>), Vec<f64>> =
        std::collections::HashMap::new();
    let mut nll = 0.0;
    for (state, action) in minibatch {
        let content = action.content();
        let steps = content
            .iter()
            .copied()
            .chain((content.len() < l_max).then_some(stop));
        let mut prev: Option<u32> = None;
        for (pos, tok) in steps.enumerate() {
            let row = policy.row(*state, pos, prev);
            nll -= row[tok as usize].max(floor).ln() / n;
            let dl = updates
                .entry((*state, pos, prev))
                .or_insert_with(|| vec![0.0; vocab]);
            for (k, d) in dl.iter_mut().enumerate() {
                let onehot = if k as u32 == tok { 1.0 } else { 0.0 };
                *d += (onehot - row[k]) / n;
            }
            prev = (tok != stop).then_some(tok);
        }
    }
    for ((state, pos, prev), dlogits) in updates {
        let row = policy.row(state, pos, prev).to_vec();
        let mut logits: Vec<f64> = row.iter().map(|&p| p.max(floor).ln()).collect();
        for (l, d) in logits.iter_mut().zip(&dlogits) {
            *l += learning_rate * d;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let z: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= z;
        }
        policy.set_row(state, pos, prev, &probs);
    }
    Ok(nll)
}

/// Closed-form maximum-likelihood fit of a tabular policy from sampled
/// actions: per-context counts with add-alpha smoothing over the action
/// vocabulary. Contexts never visited stay uniform.
pub fn sft_fit_tabular(
    shape: &TabularPolicy,
    samples: &[(usize, ActionSequence)],
    alpha: f64,
) -> TabularPolicy {
    let vocab = shape.action_vocab();
    let stop = shape.stop_id();
    let l_max = shape.l_max();
    let mut counts: std::collections::HashMap<(usize, usize, Option<u32>), Vec<f64>> =
        std::collections::HashMap::new();
    for (state, action) in samples {
        let content = action.content();
        let steps = content
            .iter()
            .copied()
            .chain((content.len() < l_max).then_some(stop));
        let mut prev: Option<u32> = None;
        for (pos, tok) in steps.enumerate() {
            counts
                .entry((*state, pos, prev))
                .or_insert_with(|| vec![0.0; vocab])[tok as usize] += 1.0;
            prev = (tok != stop).then_some(tok);
        }
    }
    let mut fitted = TabularPolicy::uniform(shape.state_ids().to_vec(), vocab, l_max);
    for ((state, pos, prev), row_counts) in counts {
        let total: f64 = row_counts.iter().sum::<f64>() + alpha * vocab as f64;
        let probs: Vec<f64> = row_counts.iter().map(|c| (c + alpha) / total).collect();
        fitted.set_row(state, pos, prev, &probs);
    }
    fitted
}
