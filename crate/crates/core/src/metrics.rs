//! Rule-based reward functions over rankings.
//!
//! NDCG uses linear gain, `gain / log2(rank + 1)`; for binary gains this
//! coincides with the exponential form, and graded gains stay on the linear
//! scale. Composite rewards are weighted sums of the individual components.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Target};

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("targets contain no positive gain")]
    NoPositiveGain,
    #[error("invalid reward spec: {0}")]
    BadSpec(String),
}

/// Discounted cumulative gain of the top-K ranking. Items absent from
/// `gains` contribute 0.
pub fn dcg(ranked: &[String], gains: &HashMap<String, f64>, k: usize) -> f64 {
    assert!(k >= 1, "dcg requires K >= 1");
    ranked
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, item)| {
            let gain = gains.get(item).copied().unwrap_or(0.0);
            gain / ((i + 2) as f64).log2()
        })
        .sum()
}

fn gain_map(targets: &[Target]) -> HashMap<String, f64> {
    targets
        .iter()
        .map(|t| (t.item_id.clone(), t.gain))
        .collect()
}

/// DCG of the ideal ordering of `targets` (gains descending), truncated at K.
pub fn ideal_dcg(targets: &[Target], k: usize) -> f64 {
    let mut gains: Vec<f64> = targets.iter().map(|t| t.gain).collect();
    gains.sort_by(|a, b| b.partial_cmp(a).unwrap());
    gains
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, g)| g / ((i + 2) as f64).log2())
        .sum()
}

/// Normalized DCG at cutoff K, in [0, 1].
pub fn ndcg_at_k(ranked: &[String], targets: &[Target], k: usize) -> Result<f64, MetricError> {
    let idcg = ideal_dcg(targets, k);
    if idcg <= 0.0 {
        return Err(MetricError::NoPositiveGain);
    }
    Ok(dcg(ranked, &gain_map(targets), k) / idcg)
}

/// Fraction of positive-gain targets appearing in the top-K.
pub fn recall_at_k(ranked: &[String], targets: &[Target], k: usize) -> Result<f64, MetricError> {
    let positives: Vec<&str> = targets
        .iter()
        .filter(|t| t.gain > 0.0)
        .map(|t| t.item_id.as_str())
        .collect();
    if positives.is_empty() {
        return Err(MetricError::NoPositiveGain);
    }
    let top: Vec<&str> = ranked.iter().take(k).map(String::as_str).collect();
    let hit = positives.iter().filter(|p| top.contains(*p)).count();
    Ok(hit as f64 / positives.len() as f64)
}

/// 1 if the action decoded to a structurally valid task action, else 0.
pub fn format_reward(decoded_ok: bool) -> f64 {
    if decoded_ok {
        1.0
    } else {
        0.0
    }
}

/// Majority category among positive targets, ties broken lexicographically.
/// Returns None when no positive target carries a category.
pub fn majority_target_category(targets: &[Target], corpus: &Corpus) -> Option<String> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in targets.iter().filter(|t| t.gain > 0.0) {
        if let Some(cat) = corpus
            .document(&t.item_id)
            .and_then(|d| d.category.as_deref())
        {
            *counts.entry(cat).or_insert(0) += 1;
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(a.0)))
        .map(|(cat, _)| cat.to_string())
}

/// Fraction of the top-K retrieved items whose category equals the majority
/// category of the positive targets. Retrieved items without a category
/// count as mismatches; an empty retrieval scores 0.
pub fn category_consistency(
    ranked: &[String],
    targets: &[Target],
    corpus: &Corpus,
    k: usize,
) -> f64 {
    let Some(reference) = majority_target_category(targets, corpus) else {
        return 0.0;
    };
    let top: Vec<&String> = ranked.iter().take(k).collect();
    if top.is_empty() {
        return 0.0;
    }
    let matching = top
        .iter()
        .filter(|id| {
            corpus
                .document(id)
                .and_then(|d| d.category.as_deref())
                .map_or(false, |c| c == reference)
        })
        .count();
    matching as f64 / top.len() as f64
}

/// The reward components understood by [`RewardSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    Ndcg,
    Recall,
    Format,
    CategoryConsistency,
}

/// One weighted component of a composite reward.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardComponent {
    pub kind: ComponentKind,
    /// Ranking cutoff; required for every kind except `format`.
    #[serde(default)]
    pub cutoff: Option<usize>,
    pub weight: f64,
}

/// Linear combination of reward components.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardSpec {
    pub components: Vec<RewardComponent>,
}

impl RewardSpec {
    /// Pure NDCG at the given cutoff.
    pub fn ndcg(k: usize) -> Self {
        Self {
            components: vec![RewardComponent {
                kind: ComponentKind::Ndcg,
                cutoff: Some(k),
                weight: 1.0,
            }],
        }
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        if self.components.is_empty() {
            return Err(MetricError::BadSpec("no components".into()));
        }
        let mut sum = 0.0;
        for c in &self.components {
            if !(c.weight >= 0.0) {
                return Err(MetricError::BadSpec(format!(
                    "component weight must be >= 0, got {}",
                    c.weight
                )));
            }
            sum += c.weight;
            match c.kind {
                ComponentKind::Format => {}
                _ => {
                    if c.cutoff.map_or(true, |k| k == 0) {
                        return Err(MetricError::BadSpec(format!(
                            "{:?} requires a positive cutoff",
                            c.kind
                        )));
                    }
                }
            }
        }
        if sum <= 0.0 {
            return Err(MetricError::BadSpec("weights sum to zero".into()));
        }
        Ok(())
    }

    /// Upper bound of the composite reward: every component's maximum is 1.
    pub fn max_reward(&self) -> f64 {
        self.components.iter().map(|c| c.weight).sum()
    }

    pub fn uses_categories(&self) -> bool {
        self.components
            .iter()
            .any(|c| c.kind == ComponentKind::CategoryConsistency)
    }
}

/// Everything a composite reward needs to evaluate one action's outcome.
/// On decode failure `format_ok` is false and `ranking` is empty, so every
/// ranking component evaluates to 0.
pub struct RewardContext<'a> {
    pub format_ok: bool,
    pub ranking: &'a [String],
    pub targets: &'a [Target],
    pub corpus: Option<&'a Corpus>,
}

/// Weighted sum of the spec's components over the context.
pub fn composite_reward(spec: &RewardSpec, ctx: &RewardContext<'_>) -> Result<f64, MetricError> {
    let mut total = 0.0;
    for c in &spec.components {
        let value = match c.kind {
            ComponentKind::Format => format_reward(ctx.format_ok),
            ComponentKind::Ndcg => {
                if ctx.ranking.is_empty() {
                    0.0
                } else {
                    ndcg_at_k(ctx.ranking, ctx.targets, c.cutoff.unwrap())?
                }
            }
            ComponentKind::Recall => {
                if ctx.ranking.is_empty() {
                    0.0
                } else {
                    recall_at_k(ctx.ranking, ctx.targets, c.cutoff.unwrap())?
                }
            }
            ComponentKind::CategoryConsistency => {
                let corpus = ctx.corpus.ok_or_else(|| {
                    MetricError::BadSpec("category_consistency requires a corpus".into())
                })?;
                category_consistency(ctx.ranking, ctx.targets, corpus, c.cutoff.unwrap())
            }
        };
        total += c.weight * value;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;

    fn ids(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    fn targets(pairs: &[(&str, f64)]) -> Vec<Target> {
        pairs
            .iter()
            .map(|(id, gain)| Target {
                item_id: id.to_string(),
                gain: *gain,
            })
            .collect()
    }

    #[test]
    fn dcg_by_hand() {
        let gains: HashMap<String, f64> = [("i1".to_string(), 1.0)].into();
        assert_eq!(dcg(&[], &gains, 10), 0.0);
        assert_eq!(dcg(&ids(&["i1"]), &gains, 10), 1.0);

        let gains: HashMap<String, f64> =
            [("i1".to_string(), 1.0), ("i2".to_string(), 1.0)].into();
        let d = dcg(&ids(&["i1", "x", "i2"]), &gains, 10);
        assert!((d - 1.5).abs() < 1e-12);
    }

    #[test]
    fn ndcg_worked_example() {
        let t = targets(&[("i1", 1.0), ("i2", 1.0)]);
        let perfect = ndcg_at_k(&ids(&["i1", "i2"]), &t, 10).unwrap();
        assert!((perfect - 1.0).abs() < 1e-12);

        let miss = ndcg_at_k(&ids(&["x", "y"]), &t, 10).unwrap();
        assert_eq!(miss, 0.0);

        let partial = ndcg_at_k(&ids(&["i1", "x", "i2"]), &t, 10).unwrap();
        let expected = 1.5 / (1.0 + 1.0 / 3f64.log2());
        assert!((partial - expected).abs() < 1e-12);
        assert!((partial - 0.9197).abs() < 5e-5);
    }

    #[test]
    fn ndcg_requires_positive_gain() {
        let t = targets(&[("i1", 0.0)]);
        assert!(matches!(
            ndcg_at_k(&ids(&["i1"]), &t, 10),
            Err(MetricError::NoPositiveGain)
        ));
    }

    #[test]
    fn recall_cases() {
        let t = targets(&[("i1", 1.0), ("i2", 1.0)]);
        assert_eq!(recall_at_k(&ids(&["i1", "i2"]), &t, 10).unwrap(), 1.0);
        assert_eq!(recall_at_k(&ids(&["x"]), &t, 10).unwrap(), 0.0);
        assert_eq!(recall_at_k(&ids(&["i1", "x"]), &t, 10).unwrap(), 0.5);
        // Positions beyond K do not count.
        assert_eq!(recall_at_k(&ids(&["x", "i1"]), &t, 1).unwrap(), 0.0);
    }

    #[test]
    fn format_reward_is_binary() {
        assert_eq!(format_reward(true), 1.0);
        assert_eq!(format_reward(false), 0.0);
    }

    fn categorized_corpus() -> Corpus {
        let mk = |id: &str, cat: Option<&str>| Document {
            id: id.to_string(),
            title: format!("item {id}"),
            body: String::new(),
            category: cat.map(str::to_string),
        };
        Corpus::from_documents(vec![
            mk("a", Some("games")),
            mk("b", Some("games")),
            mk("c", Some("toys")),
            mk("d", None),
        ])
        .unwrap()
    }

    #[test]
    fn category_consistency_cases() {
        let corpus = categorized_corpus();
        let t = targets(&[("a", 1.0), ("b", 1.0)]);
        assert_eq!(category_consistency(&ids(&["a", "b"]), &t, &corpus, 10), 1.0);
        assert_eq!(category_consistency(&[], &t, &corpus, 10), 0.0);
        // 4 retrieved, 3 in the majority category ("d" has none).
        let r = category_consistency(&ids(&["a", "b", "a", "d"]), &t, &corpus, 10);
        assert!((r - 0.75).abs() < 1e-12);
    }

    #[test]
    fn category_tie_breaks_lexicographically() {
        let corpus = categorized_corpus();
        // One positive target in each of "games" and "toys": tie -> "games".
        let t = targets(&[("a", 1.0), ("c", 1.0)]);
        assert_eq!(
            majority_target_category(&t, &corpus).as_deref(),
            Some("games")
        );
    }

    #[test]
    fn composite_matches_hand_arithmetic() {
        let t = targets(&[("i1", 1.0), ("i2", 1.0)]);
        let ranking = ids(&["i1", "x", "i2"]);
        let spec = RewardSpec {
            components: vec![
                RewardComponent {
                    kind: ComponentKind::Format,
                    cutoff: None,
                    weight: 0.5,
                },
                RewardComponent {
                    kind: ComponentKind::Ndcg,
                    cutoff: Some(10),
                    weight: 0.5,
                },
            ],
        };
        spec.validate().unwrap();
        let ctx = RewardContext {
            format_ok: true,
            ranking: &ranking,
            targets: &t,
            corpus: None,
        };
        let reward = composite_reward(&spec, &ctx).unwrap();
        let ndcg = ndcg_at_k(&ranking, &t, 10).unwrap();
        assert!((reward - (0.5 + 0.5 * ndcg)).abs() < 1e-12);
        assert!((reward - 0.9599).abs() < 5e-5);
    }

    #[test]
    fn composite_identity_and_failure() {
        let t = targets(&[("i1", 1.0)]);
        let ranking = ids(&["i1"]);
        let spec = RewardSpec::ndcg(10);
        let ctx = RewardContext {
            format_ok: true,
            ranking: &ranking,
            targets: &t,
            corpus: None,
        };
        assert_eq!(composite_reward(&spec, &ctx).unwrap(), 1.0);

        let fail_spec = RewardSpec {
            components: vec![RewardComponent {
                kind: ComponentKind::Format,
                cutoff: None,
                weight: 1.0,
            }],
        };
        let fail_ctx = RewardContext {
            format_ok: false,
            ranking: &[],
            targets: &t,
            corpus: None,
        };
        assert_eq!(composite_reward(&fail_spec, &fail_ctx).unwrap(), 0.0);
    }

    #[test]
    fn spec_validation_rejects_bad_inputs() {
        assert!(RewardSpec { components: vec![] }.validate().is_err());
        let zero = RewardSpec {
            components: vec![RewardComponent {
                kind: ComponentKind::Format,
                cutoff: None,
                weight: 0.0,
            }],
        };
        assert!(zero.validate().is_err());
        let no_cutoff = RewardSpec {
            components: vec![RewardComponent {
                kind: ComponentKind::Ndcg,
                cutoff: None,
                weight: 1.0,
            }],
        };
        assert!(no_cutoff.validate().is_err());
    }

    #[test]
    fn metrics_ignore_items_beyond_cutoff() {
        let t = targets(&[("i1", 1.0), ("i2", 0.5)]);
        let short = ids(&["i1", "i2"]);
        let long = ids(&["i1", "i2", "zz", "yy", "i1"]);
        let k = 2;
        assert_eq!(
            ndcg_at_k(&short, &t, k).unwrap(),
            ndcg_at_k(&long, &t, k).unwrap()
        );
        assert_eq!(
            recall_at_k(&short, &t, k).unwrap(),
            recall_at_k(&long, &t, k).unwrap()
        );
    }

    #[test]
    fn ndcg_max_iff_gain_sorted() {
        // Exhaustive over all permutations of small instances: NDCG is
        // maximal exactly when ranked gains are non-increasing.
        use itertools::Itertools;
        let t = targets(&[("a", 2.0), ("b", 1.0), ("c", 1.0), ("d", 0.0)]);
        let items = ["a", "b", "c", "d", "e"];
        let gain_of = |id: &str| t.iter().find(|x| x.item_id == id).map_or(0.0, |x| x.gain);
        let mut best = 0.0f64;
        let mut all: Vec<(Vec<String>, f64)> = Vec::new();
        for perm in items.iter().permutations(items.len()) {
            let ranking: Vec<String> = perm.iter().map(|s| s.to_string()).collect();
            let v = ndcg_at_k(&ranking, &t, 10).unwrap();
            best = best.max(v);
            all.push((ranking, v));
        }
        assert!((best - 1.0).abs() < 1e-12);
        for (ranking, v) in all {
            let gains: Vec<f64> = ranking.iter().map(|id| gain_of(id)).collect();
            let sorted = gains.windows(2).all(|w| w[0] >= w[1]);
            let maximal = (v - best).abs() < 1e-12;
            assert_eq!(sorted, maximal, "ranking {ranking:?} ndcg {v}");
        }
    }
}
