//! Training orchestration over a loaded run configuration: builds the task
//! environment, runs the configured trainer, logs one JSON object per step,
//! keeps the best-by-validation checkpoint, and evaluates splits.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context as _, Result};
use serde::Serialize;

use recloop_core::corpus::{tokenize, Corpus, RelevanceDict, StatePayload, StateRecord, TaskKind};
use recloop_core::envs::{
    decode_permutation, decode_query, masked_permutation_sample, state_features, ProductSearchEnv,
    RerankEnv, SeqRecEnv,
};
use recloop_core::optim::{
    self, Adam, GrpoConfig, SftExample, StepReport, TrainError,
};
use recloop_core::policy::{
    ActionSequence, NeuralPolicy, Policy, PolicyDims, SamplerConfig, StateInput,
};
use recloop_core::rng;

use crate::config::{read_state_list, Method, RunConfig};

/// A loaded, validated training context.
pub struct RunContext {
    pub cfg: RunConfig,
    pub env: TaskEnv,
    pub train: Split,
    pub valid: Split,
    pub test: Split,
    pub dims: PolicyDims,
    pub vocab_digest: u64,
}

/// One split's states and their policy inputs, index-aligned.
pub struct Split {
    pub states: Vec<StateRecord>,
    pub inputs: Vec<StateInput>,
}

/// The three environments behind one reward interface.
pub enum TaskEnv {
    Search(ProductSearchEnv),
    SeqRec(SeqRecEnv),
    Rerank(RerankEnv),
}

impl TaskEnv {
    pub fn corpus(&self) -> &Corpus {
        match self {
            TaskEnv::Search(e) => &e.corpus,
            TaskEnv::SeqRec(e) => &e.inner.corpus,
            TaskEnv::Rerank(e) => &e.corpus,
        }
    }

    pub fn relevance(&self) -> &RelevanceDict {
        match self {
            TaskEnv::Search(e) => &e.relevance,
            TaskEnv::SeqRec(e) => &e.inner.relevance,
            TaskEnv::Rerank(e) => &e.relevance,
        }
    }

    /// Composite training reward of a raw action for a state.
    pub fn reward(&self, state: &StateRecord, action: &ActionSequence) -> Result<f64> {
        let value = match self {
            TaskEnv::Search(e) => e.reward(state, action),
            TaskEnv::SeqRec(e) => e.reward(state, action),
            TaskEnv::Rerank(e) => e.reward(state, action),
        };
        value.map_err(|e| anyhow!("reward for {}: {e}", state.id))
    }

    /// Evaluation NDCG of a raw action (pure metric at the eval cutoff).
    pub fn eval_ndcg(&self, state: &StateRecord, action: &ActionSequence) -> Result<f64> {
        let value = match self {
            TaskEnv::Search(e) => e.eval_ndcg(&state.id, &decode_query(action, &e.corpus)),
            TaskEnv::SeqRec(e) => e
                .inner
                .eval_ndcg(&state.id, &decode_query(action, &e.inner.corpus)),
            TaskEnv::Rerank(e) => e.eval_ndcg(state, &decode_permutation(action, e.m)),
        };
        value.map_err(|e| anyhow!("eval for {}: {e}", state.id))
    }

    /// Evaluation recall; for rerank this is recall of the permuted list at
    /// the rerank cutoff.
    pub fn eval_recall(&self, state: &StateRecord, action: &ActionSequence) -> Result<f64> {
        match self {
            TaskEnv::Search(e) => e
                .eval_recall(&state.id, &decode_query(action, &e.corpus))
                .map_err(|e| anyhow!("{e}")),
            TaskEnv::SeqRec(e) => e
                .inner
                .eval_recall(&state.id, &decode_query(action, &e.inner.corpus))
                .map_err(|e| anyhow!("{e}")),
            TaskEnv::Rerank(e) => {
                let decoded = decode_permutation(action, e.m);
                let ranking = e
                    .permuted_ranking(state, &decoded)
                    .map_err(|e| anyhow!("{e}"))?;
                if ranking.is_empty() {
                    return Ok(0.0);
                }
                let targets = e.relevance.targets(&state.id).unwrap();
                recloop_core::metrics::recall_at_k(&ranking, targets, e.ndcg_cutoff)
                    .map_err(|e| anyhow!("{e}"))
            }
        }
    }

    /// Whether the action decodes to a structurally valid task action.
    pub fn decodes_ok(&self, action: &ActionSequence) -> bool {
        match self {
            TaskEnv::Search(e) => decode_query(action, &e.corpus).is_valid(),
            TaskEnv::SeqRec(e) => decode_query(action, &e.inner.corpus).is_valid(),
            TaskEnv::Rerank(e) => decode_permutation(action, e.m).is_valid(),
        }
    }
}

/// Loads data files, builds the environment, and resolves splits.
pub fn load_context(cfg: &RunConfig) -> Result<RunContext> {
    cfg.validate()?;
    cfg.validate_paths()?;
    let corpus = Corpus::load(&cfg.corpus)?;
    let relevance = RelevanceDict::load(&cfg.relevance, &corpus)?;
    let reward_spec = cfg.reward_spec(corpus.len());
    let vocab_digest = corpus.vocabulary().digest();

    let env = match cfg.task {
        TaskKind::ProductSearch => TaskEnv::Search(
            ProductSearchEnv::new(
                corpus.clone(),
                relevance.clone(),
                cfg.bm25_params(),
                reward_spec,
                cfg.k_train(corpus.len()),
                cfg.reward.k_eval,
            )
            .map_err(|e| anyhow!("{e}"))?,
        ),
        TaskKind::SeqRec => TaskEnv::SeqRec(
            SeqRecEnv::new(
                ProductSearchEnv::new(
                    corpus.clone(),
                    relevance.clone(),
                    cfg.bm25_params(),
                    reward_spec,
                    cfg.k_train(corpus.len()),
                    cfg.reward.k_eval,
                )
                .map_err(|e| anyhow!("{e}"))?,
                cfg.env.history_len,
            )
            .map_err(|e| anyhow!("{e}"))?,
        ),
        TaskKind::Rerank => TaskEnv::Rerank(
            RerankEnv::new(
                corpus.clone(),
                relevance.clone(),
                reward_spec,
                cfg.env.rerank_cutoff,
                cfg.env.rerank_m,
            )
            .map_err(|e| anyhow!("{e}"))?,
        ),
    };

    let resolve = |path: &PathBuf| -> Result<Split> {
        let ids = read_state_list(path)?;
        let mut states = Vec::with_capacity(ids.len());
        let mut inputs = Vec::with_capacity(ids.len());
        for id in &ids {
            let state = relevance
                .state(id)
                .ok_or_else(|| anyhow!("state list {} references unknown id {id:?}", path.display()))?
                .clone();
            if state.task != cfg.task {
                bail!("state {id:?} has task {} but config says {}", state.task, cfg.task);
            }
            inputs.push(state_features(&state, &corpus, cfg.env.history_len));
            states.push(state);
        }
        Ok(Split { states, inputs })
    };
    let train = resolve(&cfg.train_states)?;
    let valid = resolve(&cfg.valid_states)?;
    let test = resolve(&cfg.test_states)?;
    if train.states.is_empty() {
        bail!("train split is empty");
    }

    let (action_vocab, l_max) = match cfg.task {
        TaskKind::Rerank => (cfg.env.rerank_m + 1, cfg.env.rerank_m),
        _ => (corpus.vocabulary().len() + 1, cfg.policy.l_max),
    };
    let dims = PolicyDims {
        action_vocab,
        feature_vocab: corpus.vocabulary().len(),
        embed_dim: cfg.policy.embed_dim,
        hidden_dim: cfg.policy.hidden_dim,
        l_max,
    };
    Ok(RunContext {
        cfg: cfg.clone(),
        env,
        train,
        valid,
        test,
        dims,
        vocab_digest,
    })
}

/// Split-level evaluation: greedy decode plus sampled statistics.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub mean_ndcg_greedy: f64,
    pub mean_recall_greedy: f64,
    pub mean_ndcg_sampled: f64,
    pub format_valid_rate: f64,
    pub n_states: usize,
}

impl EvalReport {
    /// The score used for best-checkpoint selection.
    pub fn selection_score(&self, task: TaskKind) -> f64 {
        match task {
            TaskKind::Rerank => self.mean_ndcg_sampled,
            _ => self.mean_ndcg_greedy,
        }
    }
}

/// Evaluates a policy over one split. Sampled statistics draw
/// `samples_per_state` actions at the configured exploration settings with
/// seeds derived from (eval tag, state, draw), so evaluation is
/// deterministic and does not perturb training randomness.
pub fn evaluate(ctx: &RunContext, policy: &NeuralPolicy, split: &Split) -> Result<EvalReport> {
    let n = split.states.len();
    if n == 0 {
        bail!("cannot evaluate an empty split");
    }
    let mut ndcg_greedy = 0.0;
    let mut recall_greedy = 0.0;
    let mut ndcg_sampled = 0.0;
    let mut valid = 0usize;
    let per_state = ctx.cfg.eval.samples_per_state;
    let sampler = SamplerConfig {
        temperature: ctx.cfg.eval.temperature,
        top_p: ctx.cfg.eval.top_p,
        seed: rng::derive_seed(ctx.cfg.seed, &[0xE7A1]),
    };
    for (si, (state, input)) in split.states.iter().zip(&split.inputs).enumerate() {
        let greedy = policy.greedy(input);
        ndcg_greedy += ctx.env.eval_ndcg(state, &greedy)?;
        recall_greedy += ctx.env.eval_recall(state, &greedy)?;
        for draw in 0..per_state {
            let s = policy.sample(input, &sampler.derive(&[si as u64, draw as u64]));
            ndcg_sampled += ctx.env.eval_ndcg(state, &s.action)?;
            valid += usize::from(ctx.env.decodes_ok(&s.action));
        }
    }
    Ok(EvalReport {
        mean_ndcg_greedy: ndcg_greedy / n as f64,
        mean_recall_greedy: recall_greedy / n as f64,
        mean_ndcg_sampled: ndcg_sampled / (n * per_state) as f64,
        format_valid_rate: valid as f64 / (n * per_state) as f64,
        n_states: n,
    })
}

/// Everything `train` leaves behind.
#[derive(Debug)]
pub struct TrainOutcome {
    pub initial_eval: EvalReport,
    pub final_eval: EvalReport,
    pub best_valid_score: f64,
    pub log_path: PathBuf,
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub reports: Vec<StepReport>,
}

/// Runs the configured trainer. Fully deterministic for a fixed config and
/// seed: rollout seeds derive from (seed, step, state, sample) and the log
/// contains no timestamps.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let ctx = load_context(cfg)?;
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let log_path = cfg.out_dir.join("train_log.jsonl");
    let best_path = cfg.out_dir.join("best.json");
    let final_path = cfg.out_dir.join("final.json");
    let mut log = BufWriter::new(File::create(&log_path)?);

    let mut policy = NeuralPolicy::init(ctx.dims, ctx.vocab_digest, cfg.seed);
    let initial_eval = evaluate(&ctx, &policy, &ctx.valid)?;
    let mut best_score = f64::NEG_INFINITY;
    let mut reports = Vec::new();

    match cfg.method {
        Method::Grpo => {
            let reference = policy.clone();
            let mut adam = Adam::new(policy.params().len());
            let grpo: GrpoConfig = cfg.grpo_config();
            let n_train = ctx.train.states.len();
            let mb = grpo.minibatch.min(n_train);
            for step in 0..cfg.grpo.steps {
                let batch_idx: Vec<usize> = (0..mb)
                    .map(|j| ((step as usize) * mb + j) % n_train)
                    .collect();
                let inputs: Vec<StateInput> = batch_idx
                    .iter()
                    .map(|&i| ctx.train.inputs[i].clone())
                    .collect();
                let states: Vec<&StateRecord> =
                    batch_idx.iter().map(|&i| &ctx.train.states[i]).collect();
                let by_id: std::collections::HashMap<&str, usize> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, s)| (s.id.as_str(), i))
                    .collect();
                let reward_fn = |input: &StateInput, action: &ActionSequence| {
                    let idx = by_id[input.id.as_str()];
                    ctx.env.reward(states[idx], action).unwrap_or(f64::NAN)
                };
                let report = if masked_rollouts(cfg) {
                    let m = cfg.env.rerank_m;
                    optim::grpo_step_with(
                        &mut policy,
                        &mut adam,
                        &reference,
                        &inputs,
                        |p, s, c| masked_permutation_sample(p, s, c, m),
                        reward_fn,
                        &grpo,
                        step,
                    )
                } else {
                    optim::grpo_step(
                        &mut policy,
                        &mut adam,
                        &reference,
                        &inputs,
                        reward_fn,
                        &grpo,
                        step,
                    )
                }
                .map_err(train_error)?;
                writeln!(log, "{}", serde_json::to_string(&report)?)?;
                reports.push(report);

                if (step + 1) % cfg.eval.every == 0 || step + 1 == cfg.grpo.steps {
                    let eval = evaluate(&ctx, &policy, &ctx.valid)?;
                    let score = eval.selection_score(cfg.task);
                    if score > best_score {
                        best_score = score;
                        policy.save(&best_path).map_err(|e| anyhow!("{e}"))?;
                    }
                }
            }
        }
        Method::Sft => {
            let reference = policy.clone();
            let mut adam = Adam::new(policy.params().len());
            let dataset = echo_dataset(&ctx)?;
            if dataset.is_empty() {
                bail!("echo generator produced no usable examples");
            }
            let mb = cfg.sft.minibatch.min(dataset.len()).max(1);
            for step in 0..cfg.sft.steps {
                let batch: Vec<SftExample> = (0..mb)
                    .map(|j| dataset[((step as usize) * mb + j) % dataset.len()].clone())
                    .collect();
                let nll = optim::sft_step(&mut policy, &mut adam, &batch, cfg.sft.learning_rate)
                    .map_err(train_error)?;
                let mut mean_reward = 0.0;
                let mut mean_kl = 0.0;
                for ex in &batch {
                    let state = lookup_state(&ctx, &ex.state.id)?;
                    mean_reward += ctx.env.reward(state, &ex.action)? / mb as f64;
                    let lp = policy.log_prob(&ex.state, &ex.action);
                    let ref_lp = reference.log_prob(&ex.state, &ex.action);
                    mean_kl += optim::kl_penalty_estimate(lp, ref_lp) / mb as f64;
                }
                let report = StepReport {
                    step,
                    mean_reward,
                    mean_kl,
                    clip_frac: 0.0,
                    nll: Some(nll),
                };
                writeln!(log, "{}", serde_json::to_string(&report)?)?;
                reports.push(report);

                if (step + 1) % cfg.eval.every == 0 || step + 1 == cfg.sft.steps {
                    let eval = evaluate(&ctx, &policy, &ctx.valid)?;
                    let score = eval.selection_score(cfg.task);
                    if score > best_score {
                        best_score = score;
                        policy.save(&best_path).map_err(|e| anyhow!("{e}"))?;
                    }
                }
            }
        }
    }
    log.flush()?;
    policy.save(&final_path).map_err(|e| anyhow!("{e}"))?;
    if !best_path.exists() {
        // Zero-step runs still leave a usable checkpoint pair.
        policy.save(&best_path).map_err(|e| anyhow!("{e}"))?;
        best_score = initial_eval.selection_score(cfg.task);
    }

    let best = NeuralPolicy::load(&best_path, Some(ctx.vocab_digest)).map_err(|e| anyhow!("{e}"))?;
    let final_eval = evaluate(&ctx, &best, &ctx.test)?;
    Ok(TrainOutcome {
        initial_eval,
        final_eval,
        best_valid_score: best_score,
        log_path,
        best_checkpoint: best_path,
        final_checkpoint: final_path,
        reports,
    })
}

fn masked_rollouts(cfg: &RunConfig) -> bool {
    cfg.task == TaskKind::Rerank && cfg.env.rerank_masked
}

fn train_error(e: TrainError) -> anyhow::Error {
    anyhow!("{e}")
}

fn lookup_state<'a>(ctx: &'a RunContext, id: &str) -> Result<&'a StateRecord> {
    ctx.env
        .relevance()
        .state(id)
        .ok_or_else(|| anyhow!("unknown state {id:?}"))
}

/// The designated data-generating policy for SFT runs: echo the raw state.
/// Query tasks emit the state's own tokens (truncated to the action budget);
/// rerank emits the identity permutation. This is the frozen-generator
/// baseline that reward-driven training is measured against.
pub fn echo_action(
    state: &StateRecord,
    corpus: &Corpus,
    l_max: usize,
    rerank_m: usize,
) -> Option<ActionSequence> {
    match &state.payload {
        StatePayload::Query(q) => {
            let vocab = corpus.vocabulary();
            let ids: Vec<u32> = tokenize(q)
                .iter()
                .filter_map(|t| vocab.id(t))
                .take(l_max)
                .collect();
            if ids.is_empty() {
                return None;
            }
            Some(ActionSequence::from_content(&ids, vocab.len() as u32))
        }
        StatePayload::History(items) => {
            let vocab = corpus.vocabulary();
            let ids: Vec<u32> = items
                .iter()
                .rev()
                .flat_map(|id| {
                    corpus
                        .document(id)
                        .map(|d| tokenize(&d.title))
                        .unwrap_or_default()
                })
                .filter_map(|t| vocab.id(&t))
                .take(l_max)
                .collect();
            if ids.is_empty() {
                return None;
            }
            Some(ActionSequence::from_content(&ids, vocab.len() as u32))
        }
        StatePayload::Candidates { .. } => {
            let ids: Vec<u32> = (0..rerank_m as u32).collect();
            Some(ActionSequence::from_content(&ids, rerank_m as u32))
        }
    }
}

fn echo_dataset(ctx: &RunContext) -> Result<Vec<SftExample>> {
    let corpus = ctx.env.corpus();
    let mut out = Vec::new();
    for (state, input) in ctx.train.states.iter().zip(&ctx.train.inputs) {
        if let Some(action) = echo_action(state, corpus, ctx.dims.l_max, ctx.cfg.env.rerank_m) {
            out.push(SftExample {
                state: input.clone(),
                action,
            });
        }
    }
    Ok(out)
}
