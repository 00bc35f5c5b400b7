//! Command implementations behind the thin argument parser in `main`.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Result};

use recloop_core::corpus::{Corpus, RelevanceDict};
use recloop_core::retrieval::InvertedIndex;
use recloop_core::verify::{self, SuiteReport};
use recloop_service::{App, ServiceConfig};

use crate::config::RunConfig;
use crate::fixture::{
    self, FixtureFiles, RerankFixtureParams, SearchFixtureParams, SeqRecFixtureParams,
};
use crate::train::{self, EvalReport, TrainOutcome};

/// Builds an index snapshot and prints collection statistics.
pub fn cmd_index(corpus_path: &Path, out_path: &Path) -> Result<()> {
    let corpus = Corpus::load(corpus_path)?;
    let index = InvertedIndex::build(&corpus).map_err(|e| anyhow!("{e}"))?;
    index.save(out_path).map_err(|e| anyhow!("{e}"))?;
    println!(
        "N={} vocabulary={} avgdl={}",
        index.doc_count(),
        index.vocab_size(),
        index.avgdl()
    );
    println!("snapshot written to {}", out_path.display());
    Ok(())
}

fn print_eval(label: &str, eval: &EvalReport) {
    println!(
        "{label}: ndcg(greedy)={:.4} recall(greedy)={:.4} ndcg(sampled)={:.4} valid_rate={:.4} states={}",
        eval.mean_ndcg_greedy,
        eval.mean_recall_greedy,
        eval.mean_ndcg_sampled,
        eval.format_valid_rate,
        eval.n_states
    );
}

/// Loads a config (with optional seed/out overrides), trains, prints the
/// final table, and writes `eval.json` next to the checkpoints.
pub fn cmd_train(
    config_path: &Path,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
) -> Result<TrainOutcome> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(out) = out_dir {
        cfg.out_dir = out;
    }
    let outcome = train::train(&cfg)?;
    print_eval("valid(initial)", &outcome.initial_eval);
    print_eval("test(best)", &outcome.final_eval);
    println!("training log: {}", outcome.log_path.display());
    println!("best checkpoint: {}", outcome.best_checkpoint.display());
    let eval_json = serde_json::json!({
        "initial_valid": outcome.initial_eval,
        "final_test": outcome.final_eval,
        "best_valid_score": outcome.best_valid_score,
    });
    std::fs::write(
        cfg.out_dir.join("eval.json"),
        serde_json::to_string_pretty(&eval_json)? + "\n",
    )?;
    Ok(outcome)
}

/// Evaluates a checkpoint on the config's test split.
pub fn cmd_eval(config_path: &Path, checkpoint: &Path) -> Result<EvalReport> {
    let cfg = RunConfig::load(config_path)?;
    let ctx = train::load_context(&cfg)?;
    let policy = recloop_core::policy::NeuralPolicy::load(checkpoint, Some(ctx.vocab_digest))
        .map_err(|e| anyhow!("{e}"))?;
    let eval = train::evaluate(&ctx, &policy, &ctx.test)?;
    print_eval("test", &eval);
    Ok(eval)
}

/// Runs one verification suite (or all of them) and prints its report.
/// Returns false when any check fails.
pub fn cmd_verify(suite: &str, seed: u64) -> Result<bool> {
    let names: Vec<&str> = if suite == "all" {
        verify::SUITE_NAMES.to_vec()
    } else {
        vec![suite]
    };
    let mut all_passed = true;
    for name in names {
        let report: SuiteReport = verify::run_suite(name, seed)
            .ok_or_else(|| anyhow!("unknown suite {name:?}; expected one of {:?} or \"all\"", verify::SUITE_NAMES))?;
        println!("suite {}: {}", report.name, if report.passed { "PASS" } else { "FAIL" });
        for line in &report.lines {
            println!("  {line}");
        }
        all_passed &= report.passed;
    }
    Ok(all_passed)
}

/// Generates a synthetic fixture family.
pub fn cmd_fixture(
    kind: &str,
    out_dir: &Path,
    seed: u64,
    overrides: &FixtureOverrides,
) -> Result<FixtureFiles> {
    std::fs::create_dir_all(out_dir)?;
    let files = match kind {
        "product_search" => {
            let mut params = SearchFixtureParams {
                seed,
                ..SearchFixtureParams::default()
            };
            if let Some(d) = overrides.docs {
                params.n_docs = d;
            }
            if let Some(v) = overrides.vocab {
                params.vocab = v;
            }
            if let Some(t) = overrides.train {
                params.n_train = t;
            }
            if let Some(e) = overrides.eval {
                params.n_eval = e;
            }
            fixture::generate_search_fixture(&params, out_dir)?
        }
        "rerank" => {
            let mut params = RerankFixtureParams {
                seed,
                ..RerankFixtureParams::default()
            };
            if let Some(s) = overrides.states {
                params.n_states = s;
            }
            if let Some(m) = overrides.m {
                params.m = m;
            }
            fixture::generate_rerank_fixture(&params, out_dir)?
        }
        "seq_rec" => {
            let params = SeqRecFixtureParams {
                seed,
                ..SeqRecFixtureParams::default()
            };
            fixture::generate_seqrec_fixture(&params, out_dir)?
        }
        other => bail!("unknown fixture kind {other:?}; expected product_search, rerank, or seq_rec"),
    };
    println!("fixture written under {}", out_dir.display());
    println!("run config: {}", files.config.display());
    Ok(files)
}

#[derive(Debug, Default, Clone)]
pub struct FixtureOverrides {
    pub docs: Option<usize>,
    pub vocab: Option<usize>,
    pub train: Option<usize>,
    pub eval: Option<usize>,
    pub states: Option<usize>,
    pub m: Option<usize>,
}

/// Builds the service app from a run config.
pub fn build_app(cfg: &RunConfig, service: ServiceConfig) -> Result<Arc<App>> {
    cfg.validate()?;
    cfg.validate_paths()?;
    let corpus = Corpus::load(&cfg.corpus)?;
    let relevance = RelevanceDict::load(&cfg.relevance, &corpus)?;
    let reward_spec = cfg.reward_spec(corpus.len());
    let k_train = cfg.k_train(corpus.len());
    let app = App::new(
        corpus,
        relevance,
        cfg.bm25_params(),
        reward_spec,
        k_train,
        cfg.reward.k_eval,
        cfg.env.rerank_cutoff,
        service,
    )
    .map_err(|e| anyhow!("{e}"))?;
    Ok(Arc::new(app))
}

/// Serves the environment until interrupted.
pub fn cmd_serve(config_path: &Path, addr: SocketAddr) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let app = build_app(&cfg, ServiceConfig::default())?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        recloop_service::serve(app, addr, async {
            let _ = tokio::signal::ctrl_c().await;
            eprintln!("shutting down");
        })
        .await
    })?;
    Ok(())
}
