//! Exact evaluation on enumerable instances: J(pi), KL/TV/entropy, the
//! Pinsker-based performance bound, the MLE/KL decomposition, and the
//! head-to-head RL-versus-SFT experiment.
//!
//! All divergences use natural log.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::optim::{self, Adam, GrpoConfig};
use crate::policy::{
    ActionSequence, NeuralPolicy, Policy, PolicyDims, PolicyError, SamplerConfig, StateInput,
    TabularPolicy, DEFAULT_ENUMERATION_BOUND,
};
use crate::rng;

/// A finite task: states with probabilities, an enumerable action space per
/// state, and a bounded reward table keyed by action content tokens.
/// Actions absent from the table earn 0.
#[derive(Debug, Clone)]
pub struct TabularInstance {
    pub state_ids: Vec<String>,
    pub state_probs: Vec<f64>,
    rewards: Vec<HashMap<Vec<u32>, f64>>,
    pub r_max: f64,
    pub action_vocab: usize,
    pub l_max: usize,
}

impl TabularInstance {
    pub fn new(
        state_ids: Vec<String>,
        state_probs: Vec<f64>,
        rewards: Vec<HashMap<Vec<u32>, f64>>,
        r_max: f64,
        action_vocab: usize,
        l_max: usize,
    ) -> Self {
        assert_eq!(state_ids.len(), state_probs.len());
        assert_eq!(state_ids.len(), rewards.len());
        let total: f64 = state_probs.iter().sum();
        assert!((total - 1.0).abs() < 1e-9, "state probs sum to {total}");
        assert!(rewards
            .iter()
            .flat_map(|m| m.values())
            .all(|&r| (0.0..=r_max).contains(&r)));
        Self {
            state_ids,
            state_probs,
            rewards,
            r_max,
            action_vocab,
            l_max,
        }
    }

    /// One state, one generation step: action `i` is the sequence `[i, STOP]`
    /// and earns `rewards[i]`; the empty action earns 0.
    pub fn bandit(rewards: &[f64]) -> Self {
        let r_max = rewards.iter().cloned().fold(0.0f64, f64::max).max(1.0);
        let table: HashMap<Vec<u32>, f64> = rewards
            .iter()
            .enumerate()
            .map(|(i, &r)| (vec![i as u32], r))
            .collect();
        Self::new(
            vec!["s0".into()],
            vec![1.0],
            vec![table],
            r_max,
            rewards.len() + 1,
            1,
        )
    }

    pub fn n_states(&self) -> usize {
        self.state_ids.len()
    }

    pub fn reward(&self, state: usize, action: &ActionSequence) -> f64 {
        self.rewards[state]
            .get(action.content())
            .copied()
            .unwrap_or(0.0)
    }

    /// Policy inputs for this instance; the neural feature bag is the state
    /// index itself.
    pub fn state_inputs(&self) -> Vec<StateInput> {
        self.state_ids
            .iter()
            .enumerate()
            .map(|(i, id)| StateInput::new(id.clone(), vec![i as u32]))
            .collect()
    }

    /// A uniform tabular policy shaped for this instance.
    pub fn uniform_policy(&self) -> TabularPolicy {
        TabularPolicy::uniform(self.state_ids.clone(), self.action_vocab, self.l_max)
    }

    /// Best achievable expected reward: a deterministic policy can place all
    /// mass on any single sequence per state.
    pub fn j_opt(&self) -> f64 {
        self.state_ids
            .iter()
            .enumerate()
            .map(|(s, _)| {
                let best = self.rewards[s]
                    .values()
                    .cloned()
                    .fold(0.0f64, f64::max);
                self.state_probs[s] * best
            })
            .sum()
    }
}

/// Exact J(pi) = sum_s p(s) sum_a pi(a|s) f(a|s) via full enumeration.
pub fn exact_performance(
    instance: &TabularInstance,
    policy: &impl Policy,
    bound: usize,
) -> Result<f64, PolicyError> {
    let inputs = instance.state_inputs();
    let mut total = 0.0;
    for (s, input) in inputs.iter().enumerate() {
        let actions = policy.enumerate(input, bound)?;
        let mean: f64 = actions
            .iter()
            .map(|(a, p)| p * instance.reward(s, a))
            .sum();
        total += instance.state_probs[s] * mean;
    }
    Ok(total)
}

/// KL(P || Q) in nats over aligned categoricals. `0 ln(0/q) = 0`; a point
/// where P > 0 but Q = 0 yields +infinity.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return f64::INFINITY;
        }
        total += pi * (pi / qi).ln();
    }
    total
}

/// Total variation distance, half the L1 difference.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// Sequence-level action distribution of a policy at one state, keyed by
/// content tokens.
pub fn action_distribution(
    policy: &impl Policy,
    state: &StateInput,
    bound: usize,
) -> Result<HashMap<Vec<u32>, f64>, PolicyError> {
    Ok(policy
        .enumerate(state, bound)?
        .into_iter()
        .map(|(a, p)| (a.content().to_vec(), p))
        .collect())
}

/// KL between two policies' sequence distributions at one state.
pub fn policy_state_kl(
    p_policy: &impl Policy,
    q_policy: &impl Policy,
    state: &StateInput,
    bound: usize,
) -> Result<f64, PolicyError> {
    let p = action_distribution(p_policy, state, bound)?;
    let q = action_distribution(q_policy, state, bound)?;
    let mut total = 0.0;
    for (action, &pa) in &p {
        if pa == 0.0 {
            continue;
        }
        match q.get(action) {
            Some(&qa) if qa > 0.0 => total += pa * (pa / qa).ln(),
            _ => return Ok(f64::INFINITY),
        }
    }
    Ok(total)
}

/// Expected KL(pi_g || pi) under the instance's state distribution.
pub fn expected_kl(
    instance: &TabularInstance,
    generator: &impl Policy,
    other: &impl Policy,
    bound: usize,
) -> Result<f64, PolicyError> {
    let inputs = instance.state_inputs();
    let mut total = 0.0;
    for (s, input) in inputs.iter().enumerate() {
        let kl = policy_state_kl(generator, other, input, bound)?;
        if kl.is_infinite() {
            return Ok(f64::INFINITY);
        }
        total += instance.state_probs[s] * kl;
    }
    Ok(total)
}

/// Outcome of one performance-difference bound check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PinskerReport {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    pub infinite_kl: bool,
}

/// Checks `|J(pi) - J(pi_g)| <= R_max sqrt(0.5 E_s[KL(pi_g || pi)])`.
/// Infinite KL makes the bound vacuous; the report flags it.
pub fn pinsker_bound_check(
    instance: &TabularInstance,
    policy: &impl Policy,
    generator: &impl Policy,
) -> Result<PinskerReport, PolicyError> {
    let bound = DEFAULT_ENUMERATION_BOUND;
    let j_policy = exact_performance(instance, policy, bound)?;
    let j_generator = exact_performance(instance, generator, bound)?;
    let kl = expected_kl(instance, generator, policy, bound)?;
    let lhs = (j_policy - j_generator).abs();
    if kl.is_infinite() {
        return Ok(PinskerReport {
            lhs,
            rhs: f64::INFINITY,
            holds: true,
            infinite_kl: true,
        });
    }
    let rhs = instance.r_max * (0.5 * kl).sqrt();
    Ok(PinskerReport {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-9,
        infinite_kl: false,
    })
}

/// Per-state check of the identity
/// `E_{a ~ pi_g}[-log pi(a|s)] = KL(pi_g || pi) + H(pi_g)`, plus an
/// empirical NLL estimate that must land within 3 standard errors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MleKlReport {
    pub exact_nll: f64,
    pub kl: f64,
    pub entropy: f64,
    pub residual: f64,
    pub empirical_nll: f64,
    pub stderr: f64,
    pub within_3se: bool,
}

pub fn mle_kl_decomposition_check(
    generator: &TabularPolicy,
    model: &impl Policy,
    state: &StateInput,
    n_samples: u64,
    seed: u64,
) -> Result<MleKlReport, PolicyError> {
    let bound = DEFAULT_ENUMERATION_BOUND;
    let gen_dist = policy_distribution_vec(generator, state, bound)?;
    let exact_nll: f64 = gen_dist
        .iter()
        .map(|(action, p)| {
            if *p == 0.0 {
                0.0
            } else {
                -p * model.log_prob(state, action)
            }
        })
        .sum();
    let kl = policy_state_kl(generator, model, state, bound)?;
    let probs: Vec<f64> = gen_dist.iter().map(|(_, p)| *p).collect();
    let h = entropy(&probs);
    let residual = (exact_nll - (kl + h)).abs();

    let sampler = SamplerConfig {
        temperature: 1.0,
        top_p: 1.0,
        seed,
    };
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for i in 0..n_samples {
        let sampled = generator.sample(state, &sampler.derive(&[i]));
        let nll = -model.log_prob(state, &sampled.action);
        sum += nll;
        sum_sq += nll * nll;
    }
    let n = n_samples as f64;
    let empirical_nll = sum / n;
    let var = (sum_sq / n - empirical_nll * empirical_nll).max(0.0);
    let stderr = (var / n).sqrt();
    Ok(MleKlReport {
        exact_nll,
        kl,
        entropy: h,
        residual,
        empirical_nll,
        stderr,
        within_3se: (empirical_nll - exact_nll).abs() <= 3.0 * stderr + 1e-12,
    })
}

fn policy_distribution_vec(
    policy: &impl Policy,
    state: &StateInput,
    bound: usize,
) -> Result<Vec<(ActionSequence, f64)>, PolicyError> {
    policy.enumerate(state, bound)
}

/// Settings for [`rl_vs_sft_experiment`].
#[derive(Debug, Clone)]
pub struct RlVsSftConfig {
    pub grpo: GrpoConfig,
    pub grpo_steps: u64,
    pub sample_n: u64,
    /// Smoothing for the closed-form tabular fit.
    pub alpha: f64,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub seed: u64,
}

impl Default for RlVsSftConfig {
    fn default() -> Self {
        Self {
            grpo: GrpoConfig {
                learning_rate: 0.05,
                minibatch: 1,
                sampler: SamplerConfig {
                    temperature: 1.0,
                    top_p: 1.0,
                    seed: 0,
                },
                ..GrpoConfig::default()
            },
            grpo_steps: 500,
            sample_n: 100_000,
            alpha: 0.5,
            embed_dim: 8,
            hidden_dim: 16,
            seed: 0,
        }
    }
}

/// Exact performances after fitting both ways on one instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RlVsSftReport {
    pub j_rl: f64,
    pub j_sft: f64,
    pub j_g: f64,
    pub j_opt: f64,
    /// Concentration-style ceiling allowance for the SFT check.
    pub delta_n: f64,
    /// J_sft <= J_g + delta_n.
    pub sft_within_slack: bool,
    /// J_rl >= J_sft - 1e-6.
    pub rl_ge_sft: bool,
}

/// Fits the tabular MLE to samples from the generator, trains a fresh neural
/// policy with the group-relative trainer on the true reward, and reports
/// exact J for generator, SFT fit, RL policy, and the optimum.
pub fn rl_vs_sft_experiment(
    instance: &TabularInstance,
    generator: &TabularPolicy,
    cfg: &RlVsSftConfig,
) -> Result<RlVsSftReport, PolicyError> {
    let bound = DEFAULT_ENUMERATION_BOUND;
    let inputs = instance.state_inputs();
    let j_g = exact_performance(instance, generator, bound)?;
    let j_opt = instance.j_opt();

    // SFT side: N samples of (s, a) with s ~ p(s), a ~ pi_g(.|s), then the
    // closed-form empirical-frequency fit.
    let sampler = SamplerConfig {
        temperature: 1.0,
        top_p: 1.0,
        seed: rng::derive_seed(cfg.seed, &[1]),
    };
    let mut state_rng = rng::derived(cfg.seed, &[2]);
    let mut samples = Vec::with_capacity(cfg.sample_n as usize);
    for i in 0..cfg.sample_n {
        let s = draw_state(&instance.state_probs, &mut state_rng);
        let action = generator.sample(&inputs[s], &sampler.derive(&[i])).action;
        samples.push((s, action));
    }
    let sft = optim::sft_fit_tabular(generator, &samples, cfg.alpha);
    let j_sft = exact_performance(instance, &sft, bound)?;

    // RL side: fresh neural policy on the same instance and reward.
    let dims = PolicyDims {
        action_vocab: instance.action_vocab,
        feature_vocab: instance.n_states(),
        embed_dim: cfg.embed_dim,
        hidden_dim: cfg.hidden_dim,
        l_max: instance.l_max,
    };
    let mut policy = NeuralPolicy::init(dims, 0, rng::derive_seed(cfg.seed, &[3]));
    let reference = policy.clone();
    let mut adam = Adam::new(policy.params().len());
    let mut grpo = cfg.grpo.clone();
    grpo.sampler.seed = rng::derive_seed(cfg.seed, &[4]);
    let state_index: HashMap<&str, usize> = instance
        .state_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let reward_fn = |state: &StateInput, action: &ActionSequence| {
        instance.reward(state_index[state.id.as_str()], action)
    };
    for step in 0..cfg.grpo_steps {
        optim::grpo_step(
            &mut policy,
            &mut adam,
            &reference,
            &inputs,
            reward_fn,
            &grpo,
            step,
        )
        .expect("finite rewards by construction");
    }
    let j_rl = exact_performance(instance, &policy, bound)?;

    // 3 R_max sqrt(ln(2/0.05) / 2N): a concentration-style allowance for
    // finite-sample SFT drift above the generator.
    let delta_n =
        3.0 * instance.r_max * ((2.0f64 / 0.05).ln() / (2.0 * cfg.sample_n as f64)).sqrt();
    Ok(RlVsSftReport {
        j_rl,
        j_sft,
        j_g,
        j_opt,
        delta_n,
        sft_within_slack: j_sft <= j_g + delta_n,
        rl_ge_sft: j_rl >= j_sft - 1e-6,
    })
}

fn draw_state(probs: &[f64], rng: &mut impl rand::Rng) -> usize {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs.len() - 1
}
