//! Autoregressive categorical policies over a small action vocabulary.
//!
//! An action is a token sequence terminated by a reserved STOP id (the last
//! id of the action vocabulary). Generation runs for at most `l_max` content
//! steps; a sequence that reaches `l_max` content tokens has STOP forced with
//! probability 1, so the set of actions is finite and distributions over it
//! normalize exactly.
//!
//! Temperature and top-p shape exploration only: the log-probabilities
//! recorded during sampling — and everything the optimizer sees — come from
//! the raw, untruncated temperature-1 distribution.

mod neural;
mod tabular;

pub use neural::{NeuralPolicy, PolicyDims, PolicyGrad};
pub use tabular::TabularPolicy;

use serde::{Deserialize, Serialize};

use crate::rng;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("action space exceeds enumeration bound {bound} — use sampling estimators")]
    EnumerationBound { bound: usize },
    #[error("state {0:?} is not known to this policy")]
    UnknownState(String),
    #[error("invalid action sequence: {0}")]
    BadAction(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint {path}: {message}")]
    Malformed { path: String, message: String },
}

/// Default ceiling on how many sequences [`TabularPolicy::enumerate`] and
/// friends will materialize.
pub const DEFAULT_ENUMERATION_BOUND: usize = 100_000;

/// A token sequence ending in exactly one STOP id.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionSequence {
    tokens: Vec<u32>,
}

impl ActionSequence {
    /// Builds a sequence from content tokens, appending STOP.
    pub fn from_content(content: &[u32], stop_id: u32) -> Self {
        let mut tokens = content.to_vec();
        tokens.push(stop_id);
        Self { tokens }
    }

    /// All tokens including the trailing STOP.
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Tokens before STOP.
    pub fn content(&self) -> &[u32] {
        &self.tokens[..self.tokens.len() - 1]
    }

    pub fn content_len(&self) -> usize {
        self.tokens.len() - 1
    }

    /// Checks the STOP-termination and length invariants.
    pub fn validate(&self, stop_id: u32, l_max: usize) -> Result<(), PolicyError> {
        if self.tokens.last() != Some(&stop_id) {
            return Err(PolicyError::BadAction("missing trailing STOP".into()));
        }
        if self.content().iter().any(|&t| t == stop_id) {
            return Err(PolicyError::BadAction("STOP before the end".into()));
        }
        if self.content_len() > l_max {
            return Err(PolicyError::BadAction(format!(
                "content length {} exceeds l_max {}",
                self.content_len(),
                l_max
            )));
        }
        Ok(())
    }
}

/// Exploration-time sampling knobs. `seed` fully determines the draw, so a
/// fixed (policy, state, config) triple always yields the same sequence.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 0.6,
            top_p: 0.95,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature > 0.0) {
            return Err(format!("temperature must be > 0, got {}", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p must be in (0, 1], got {}", self.top_p));
        }
        Ok(())
    }

    /// Same knobs, different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..*self }
    }

    pub fn derive(&self, coords: &[u64]) -> Self {
        self.with_seed(rng::derive_seed(self.seed, coords))
    }
}

/// One policy input: a stable id plus the bag of feature-token ids the
/// neural policy embeds. Tabular policies key on `id` alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateInput {
    pub id: String,
    pub features: Vec<u32>,
}

impl StateInput {
    pub fn new(id: impl Into<String>, features: Vec<u32>) -> Self {
        Self {
            id: id.into(),
            features,
        }
    }
}

/// A sampled action together with the raw per-token log-probabilities
/// recorded while sampling (one entry per emitted token, STOP included;
/// a forced STOP records 0).
#[derive(Debug, Clone)]
pub struct Sampled {
    pub action: ActionSequence,
    pub token_log_probs: Vec<f64>,
    pub log_prob: f64,
}

/// Common sampling/enumeration interface over the two policy forms.
pub trait Policy {
    fn action_vocab(&self) -> usize;
    fn l_max(&self) -> usize;

    /// Raw log-probabilities (natural log, normalized) over the action
    /// vocabulary for one generation step.
    fn step_log_probs(&self, state: &StateInput, prev: Option<u32>, pos: usize) -> Vec<f64>;

    fn stop_id(&self) -> u32 {
        (self.action_vocab() - 1) as u32
    }

    /// Draws one action autoregressively. Exploration uses the temperature-
    /// scaled, nucleus-truncated distribution; recorded log-probabilities are
    /// raw. STOP is forced once `l_max` content tokens have been emitted.
    fn sample(&self, state: &StateInput, sampler: &SamplerConfig) -> Sampled {
        let mut rng = rng::seeded(sampler.seed);
        let stop = self.stop_id();
        let mut content: Vec<u32> = Vec::new();
        let mut token_log_probs: Vec<f64> = Vec::new();
        let mut total = 0.0;
        loop {
            if content.len() == self.l_max() {
                token_log_probs.push(0.0);
                break;
            }
            let prev = content.last().copied();
            let raw = self.step_log_probs(state, prev, content.len());
            let dist = exploration_distribution(&raw, sampler.temperature, sampler.top_p);
            let tok = draw_categorical(&dist, &mut rng);
            token_log_probs.push(raw[tok as usize]);
            total += raw[tok as usize];
            if tok == stop {
                break;
            }
            content.push(tok);
        }
        Sampled {
            action: ActionSequence::from_content(&content, stop),
            token_log_probs,
            log_prob: total,
        }
    }

    /// Sum of raw per-token log-probabilities of `action`. A token with zero
    /// probability under the policy yields negative infinity.
    fn log_prob(&self, state: &StateInput, action: &ActionSequence) -> f64 {
        let stop = self.stop_id();
        debug_assert!(action.validate(stop, self.l_max()).is_ok());
        let content = action.content();
        let mut total = 0.0;
        for (pos, &tok) in content.iter().enumerate() {
            let prev = if pos == 0 { None } else { Some(content[pos - 1]) };
            total += self.step_log_probs(state, prev, pos)[tok as usize];
        }
        if content.len() < self.l_max() {
            total += self.step_log_probs(state, content.last().copied(), content.len())
                [stop as usize];
        }
        total
    }

    /// Greedy (argmax) decode; ties break toward the lower token id.
    fn greedy(&self, state: &StateInput) -> ActionSequence {
        let stop = self.stop_id();
        let mut content: Vec<u32> = Vec::new();
        while content.len() < self.l_max() {
            let raw = self.step_log_probs(state, content.last().copied(), content.len());
            let tok = argmax(&raw);
            if tok == stop {
                break;
            }
            content.push(tok);
        }
        ActionSequence::from_content(&content, stop)
    }

    /// Every action with nonzero probability, with its probability. Errors
    /// if more than `bound` sequences would be produced.
    fn enumerate(
        &self,
        state: &StateInput,
        bound: usize,
    ) -> Result<Vec<(ActionSequence, f64)>, PolicyError> {
        let stop = self.stop_id();
        let mut out: Vec<(ActionSequence, f64)> = Vec::new();
        let mut stack: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 1.0)];
        while let Some((prefix, prob)) = stack.pop() {
            if prefix.len() == self.l_max() {
                push_bounded(&mut out, ActionSequence::from_content(&prefix, stop), prob, bound)?;
                continue;
            }
            let prev = prefix.last().copied();
            let raw = self.step_log_probs(state, prev, prefix.len());
            // Descending token id so the stack pops in ascending order.
            for tok in (0..raw.len()).rev() {
                let p = raw[tok].exp();
                if p <= 0.0 {
                    continue;
                }
                if tok as u32 == stop {
                    push_bounded(
                        &mut out,
                        ActionSequence::from_content(&prefix, stop),
                        prob * p,
                        bound,
                    )?;
                } else {
                    let mut next = prefix.clone();
                    next.push(tok as u32);
                    stack.push((next, prob * p));
                }
            }
        }
        Ok(out)
    }
}

fn push_bounded(
    out: &mut Vec<(ActionSequence, f64)>,
    action: ActionSequence,
    prob: f64,
    bound: usize,
) -> Result<(), PolicyError> {
    if out.len() >= bound {
        return Err(PolicyError::EnumerationBound { bound });
    }
    out.push((action, prob));
    Ok(())
}

fn argmax(values: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best as u32
}

/// Temperature-scales and nucleus-truncates raw log-probabilities into the
/// exploration distribution. Ties in the nucleus ordering break by ascending
/// token id so the truncation set is reproducible.
pub fn exploration_distribution(raw_log_probs: &[f64], temperature: f64, top_p: f64) -> Vec<f64> {
    let n = raw_log_probs.len();
    let max = raw_log_probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = raw_log_probs
        .iter()
        .map(|&lp| {
            if lp == f64::NEG_INFINITY {
                0.0
            } else {
                ((lp - max) / temperature).exp()
            }
        })
        .collect();
    let z: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= z;
    }
    if top_p < 1.0 {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
        let mut kept = vec![false; n];
        let mut cum = 0.0;
        for &i in &order {
            kept[i] = true;
            cum += probs[i];
            if cum >= top_p {
                break;
            }
        }
        let mut z = 0.0;
        for i in 0..n {
            if !kept[i] {
                probs[i] = 0.0;
            }
            z += probs[i];
        }
        for p in &mut probs {
            *p /= z;
        }
    }
    probs
}

/// Inverse-CDF draw from a normalized categorical.
pub fn draw_categorical(probs: &[f64], rng: &mut impl rand::Rng) -> u32 {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut last_positive = 0u32;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        last_positive = i as u32;
        cum += p;
        if u < cum {
            return i as u32;
        }
    }
    // Rounding can leave cum slightly below 1; fall back to the last
    // positive-probability token.
    last_positive
}

/// Serialized policy parameters plus the vocabulary digest they were trained
/// against. Reloading reproduces log-probabilities bit-identically because
/// JSON round-trips f64 exactly.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub dims: PolicyDims,
    pub vocab_digest: u64,
    pub params: Vec<f64>,
}
