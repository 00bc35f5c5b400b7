//! Small differentiable policy with hand-written reverse-mode gradients.
//!
//! Step logits are `W2 tanh(W1 x + b1) + b2` where `x` is the sum of the
//! mean state-feature embedding, the previous-token embedding (zero at the
//! first step), and the position embedding. Parameters live in one flat
//! vector so optimizers and finite-difference checks can treat coordinates
//! uniformly.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Checkpoint, Policy, PolicyError, StateInput};
use crate::rng;

/// Architecture sizes. `action_vocab` includes the STOP id (last index).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub action_vocab: usize,
    pub feature_vocab: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub l_max: usize,
}

impl PolicyDims {
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        self.action_vocab * d          // prev-token embeddings
            + self.feature_vocab * d   // state-feature embeddings
            + self.l_max * d           // position embeddings
            + self.hidden_dim * d      // w1
            + self.hidden_dim          // b1
            + self.action_vocab * self.hidden_dim // w2
            + self.action_vocab // b2
    }
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    tok_emb: usize,
    feat_emb: usize,
    pos_emb: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl Layout {
    fn of(dims: &PolicyDims) -> Self {
        let d = dims.embed_dim;
        let tok_emb = 0;
        let feat_emb = tok_emb + dims.action_vocab * d;
        let pos_emb = feat_emb + dims.feature_vocab * d;
        let w1 = pos_emb + dims.l_max * d;
        let b1 = w1 + dims.hidden_dim * d;
        let w2 = b1 + dims.hidden_dim;
        let b2 = w2 + dims.action_vocab * dims.hidden_dim;
        Self {
            tok_emb,
            feat_emb,
            pos_emb,
            w1,
            b1,
            w2,
            b2,
        }
    }
}

/// Gradient with respect to all parameters, same layout as the flat vector.
pub type PolicyGrad = Vec<f64>;

#[derive(Debug, Clone)]
pub struct NeuralPolicy {
    dims: PolicyDims,
    layout: Layout,
    params: Vec<f64>,
    vocab_digest: u64,
}

struct StepCache {
    x: Vec<f64>,
    hidden: Vec<f64>,
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

impl NeuralPolicy {
    /// Seeded initialization: embeddings and weights uniform in
    /// [-0.1, 0.1], biases zero.
    pub fn init(dims: PolicyDims, vocab_digest: u64, seed: u64) -> Self {
        assert!(dims.action_vocab >= 2 && dims.l_max >= 1);
        let layout = Layout::of(&dims);
        let mut rng = rng::seeded(seed);
        let mut params = vec![0.0; dims.param_count()];
        for p in params[..layout.b1].iter_mut() {
            *p = rng.gen_range(-0.1..=0.1);
        }
        for p in params[layout.w2..layout.b2].iter_mut() {
            *p = rng.gen_range(-0.1..=0.1);
        }
        Self {
            dims,
            layout,
            params,
            vocab_digest,
        }
    }

    pub fn dims(&self) -> &PolicyDims {
        &self.dims
    }

    pub fn vocab_digest(&self) -> u64 {
        self.vocab_digest
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn zero_grad(&self) -> PolicyGrad {
        vec![0.0; self.params.len()]
    }

    fn forward(&self, features: &[u32], prev: Option<u32>, pos: usize) -> StepCache {
        let d = self.dims.embed_dim;
        let h = self.dims.hidden_dim;
        let a = self.dims.action_vocab;
        let lay = &self.layout;
        debug_assert!(pos < self.dims.l_max);

        let mut x = vec![0.0; d];
        if !features.is_empty() {
            let scale = 1.0 / features.len() as f64;
            for &f in features {
                let off = lay.feat_emb + f as usize * d;
                for j in 0..d {
                    x[j] += scale * self.params[off + j];
                }
            }
        }
        if let Some(t) = prev {
            let off = lay.tok_emb + t as usize * d;
            for j in 0..d {
                x[j] += self.params[off + j];
            }
        }
        let off = lay.pos_emb + pos * d;
        for j in 0..d {
            x[j] += self.params[off + j];
        }

        let mut hidden = vec![0.0; h];
        for (i, slot) in hidden.iter_mut().enumerate() {
            let row = lay.w1 + i * d;
            let mut acc = self.params[lay.b1 + i];
            for j in 0..d {
                acc += self.params[row + j] * x[j];
            }
            *slot = acc.tanh();
        }

        let mut logits = vec![0.0; a];
        for (k, slot) in logits.iter_mut().enumerate() {
            let row = lay.w2 + k * h;
            let mut acc = self.params[lay.b2 + k];
            for (i, &hv) in hidden.iter().enumerate() {
                acc += self.params[row + i] * hv;
            }
            *slot = acc;
        }

        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let z: f64 = probs.iter().sum();
        let log_z = z.ln();
        let log_probs: Vec<f64> = logits.iter().map(|&l| l - max - log_z).collect();
        for p in &mut probs {
            *p /= z;
        }
        StepCache {
            x,
            hidden,
            probs,
            log_probs,
        }
    }

    /// Adds `coef * d log pi(action|state) / d theta` into `grad`.
    pub fn accumulate_grad_log_prob(
        &self,
        state: &StateInput,
        action: &super::ActionSequence,
        coef: f64,
        grad: &mut [f64],
    ) {
        debug_assert_eq!(grad.len(), self.params.len());
        let stop = self.stop_id();
        let content = action.content();
        for (pos, &tok) in content.iter().enumerate() {
            let prev = if pos == 0 { None } else { Some(content[pos - 1]) };
            self.backprop_step(state, prev, pos, tok, coef, grad);
        }
        if content.len() < self.dims.l_max {
            self.backprop_step(state, content.last().copied(), content.len(), stop, coef, grad);
        }
    }

    /// Gradient of `log_prob` with respect to every parameter.
    pub fn grad_log_prob(&self, state: &StateInput, action: &super::ActionSequence) -> PolicyGrad {
        let mut grad = self.zero_grad();
        self.accumulate_grad_log_prob(state, action, 1.0, &mut grad);
        grad
    }

    fn backprop_step(
        &self,
        state: &StateInput,
        prev: Option<u32>,
        pos: usize,
        target: u32,
        coef: f64,
        grad: &mut [f64],
    ) {
        let d = self.dims.embed_dim;
        let h = self.dims.hidden_dim;
        let a = self.dims.action_vocab;
        let lay = &self.layout;
        let cache = self.forward(&state.features, prev, pos);

        // d log softmax / d logits = onehot(target) - probs
        let mut dlogits = vec![0.0; a];
        for k in 0..a {
            let onehot = if k as u32 == target { 1.0 } else { 0.0 };
            dlogits[k] = coef * (onehot - cache.probs[k]);
        }

        let mut dhidden = vec![0.0; h];
        for k in 0..a {
            let dk = dlogits[k];
            grad[lay.b2 + k] += dk;
            let row = lay.w2 + k * h;
            for i in 0..h {
                grad[row + i] += dk * cache.hidden[i];
                dhidden[i] += dk * self.params[row + i];
            }
        }

        let mut dx = vec![0.0; d];
        for i in 0..h {
            let dpre = dhidden[i] * (1.0 - cache.hidden[i] * cache.hidden[i]);
            grad[lay.b1 + i] += dpre;
            let row = lay.w1 + i * d;
            for j in 0..d {
                grad[row + j] += dpre * cache.x[j];
                dx[j] += dpre * self.params[row + j];
            }
        }

        let off = lay.pos_emb + pos * d;
        for j in 0..d {
            grad[off + j] += dx[j];
        }
        if let Some(t) = prev {
            let off = lay.tok_emb + t as usize * d;
            for j in 0..d {
                grad[off + j] += dx[j];
            }
        }
        if !state.features.is_empty() {
            let scale = 1.0 / state.features.len() as f64;
            for &f in &state.features {
                let off = lay.feat_emb + f as usize * d;
                for j in 0..d {
                    grad[off + j] += scale * dx[j];
                }
            }
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PolicyError> {
        let path = path.as_ref();
        let ck = Checkpoint {
            dims: self.dims,
            vocab_digest: self.vocab_digest,
            params: self.params.clone(),
        };
        let file = File::create(path).map_err(|e| PolicyError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        serde_json::to_writer(BufWriter::new(file), &ck).map_err(|e| PolicyError::Malformed {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Loads a checkpoint, refusing one whose vocabulary digest differs from
    /// `expect_digest` (pass None to skip the check).
    pub fn load(path: impl AsRef<Path>, expect_digest: Option<u64>) -> Result<Self, PolicyError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| PolicyError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let ck: Checkpoint =
            serde_json::from_reader(BufReader::new(file)).map_err(|e| PolicyError::Malformed {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        if ck.params.len() != ck.dims.param_count() {
            return Err(PolicyError::CheckpointMismatch(format!(
                "parameter count {} does not match dims {:?}",
                ck.params.len(),
                ck.dims
            )));
        }
        if let Some(expect) = expect_digest {
            if expect != ck.vocab_digest {
                return Err(PolicyError::CheckpointMismatch(format!(
                    "vocabulary digest {:#x} does not match expected {:#x}",
                    ck.vocab_digest, expect
                )));
            }
        }
        let layout = Layout::of(&ck.dims);
        Ok(Self {
            dims: ck.dims,
            layout,
            params: ck.params,
            vocab_digest: ck.vocab_digest,
        })
    }
}

impl Policy for NeuralPolicy {
    fn action_vocab(&self) -> usize {
        self.dims.action_vocab
    }

    fn l_max(&self) -> usize {
        self.dims.l_max
    }

    fn step_log_probs(&self, state: &StateInput, prev: Option<u32>, pos: usize) -> Vec<f64> {
        self.forward(&state.features, prev, pos).log_probs
    }
}
