//! Top-K ranking metrics, seed aggregation and per-group reports.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{InteractionDataset, ItemIdx, SplitBundle, UserIdx};
use crate::recommenders::{top_k_of, Scorer};

pub const DEFAULT_KS: [usize; 3] = [10, 20, 50];

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no runs to aggregate")]
    NoRuns,
    #[error("runs evaluated different cutoffs")]
    MismatchedKs,
    #[error("cutoffs must be nonempty and at least 1")]
    InvalidKs,
    #[error("no user has test interactions")]
    EmptyTest,
}

/// `|top-K ∩ relevant| / |relevant|`.
pub fn recall_at_k(ranked: &[ItemIdx], relevant: &HashSet<ItemIdx>, k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let hits = ranked
        .iter()
        .take(k)
        .filter(|i| relevant.contains(i))
        .count();
    hits as f64 / relevant.len() as f64
}

/// Binary-relevance NDCG with log2 discounts and 1-based positions.
pub fn ndcg_at_k(ranked: &[ItemIdx], relevant: &HashSet<ItemIdx>, k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let disc = |p: usize| 1.0 / ((p + 1) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(p, _)| disc(p + 1))
        .sum();
    let idcg: f64 = (1..=k.min(relevant.len())).map(disc).sum();
    dcg / idcg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    /// Users averaged over.
    pub users: usize,
}

impl RankingMetrics {
    pub fn ks(&self) -> Vec<usize> {
        self.recall.keys().copied().collect()
    }
}

fn check_ks(ks: &[usize]) -> Result<(), EvalError> {
    if ks.is_empty() || ks.contains(&0) {
        Err(EvalError::InvalidKs)
    } else {
        Ok(())
    }
}

/// Ranks all items minus the train positives for every user of `test`
/// (restricted to `users` when given) and averages over users with test
/// items. Returns `None` when no such user exists.
pub fn evaluate_users<S: Scorer + Sync + ?Sized>(
    scorer: &S,
    train: &InteractionDataset,
    test: &InteractionDataset,
    ks: &[usize],
    users: Option<&[UserIdx]>,
) -> Result<Option<RankingMetrics>, EvalError> {
    check_ks(ks)?;
    let max_k = *ks.iter().max().expect("nonempty");
    let candidates: Vec<UserIdx> = match users {
        Some(u) => u
            .iter()
            .copied()
            .filter(|&u| !test.user(u).is_empty())
            .collect(),
        None => (0..test.num_users())
            .filter(|&u| !test.user(u).is_empty())
            .collect(),
    };
    if candidates.is_empty() {
        return Ok(None);
    }
    let per_user = |u: UserIdx| -> (Vec<f64>, Vec<f64>) {
        let ranked = top_k_of(&scorer.score_user(u), max_k, &train.user_item_set(u));
        let relevant = test.user_item_set(u);
        (
            ks.iter()
                .map(|&k| recall_at_k(&ranked, &relevant, k))
                .collect(),
            ks.iter()
                .map(|&k| ndcg_at_k(&ranked, &relevant, k))
                .collect(),
        )
    };
    let threads = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(candidates.len());
    let chunk = candidates.len().div_ceil(threads);
    let results: Vec<(Vec<f64>, Vec<f64>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = candidates
            .chunks(chunk)
            .map(|c| scope.spawn(move || c.iter().map(|&u| per_user(u)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let n = results.len() as f64;
    let mut recall = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for (j, &k) in ks.iter().enumerate() {
        recall.insert(k, results.iter().map(|r| r.0[j]).sum::<f64>() / n);
        ndcg.insert(k, results.iter().map(|r| r.1[j]).sum::<f64>() / n);
    }
    Ok(Some(RankingMetrics {
        recall,
        ndcg,
        users: results.len(),
    }))
}

/// Test-split metrics masking only train positives.
pub fn evaluate<S: Scorer + Sync + ?Sized>(
    scorer: &S,
    bundle: &SplitBundle,
    ks: &[usize],
) -> Result<RankingMetrics, EvalError> {
    evaluate_users(scorer, &bundle.train, &bundle.test, ks, None)?.ok_or(EvalError::EmptyTest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub runs: usize,
    pub mean: RankingMetrics,
    pub std: RankingMetrics,
    /// False for a single run, whose std is reported as 0.
    pub std_defined: bool,
}

/// Mean and sample standard deviation per (metric, K).
pub fn multi_seed_average(runs: &[RankingMetrics]) -> Result<SeedSummary, EvalError> {
    let first = runs.first().ok_or(EvalError::NoRuns)?;
    let ks = first.ks();
    if runs
        .iter()
        .any(|r| r.ks() != ks || r.ndcg.keys().copied().collect::<Vec<_>>() != ks)
    {
        return Err(EvalError::MismatchedKs);
    }
    let n = runs.len() as f64;
    let stats = |get: &dyn Fn(&RankingMetrics) -> f64| {
        let v0 = get(first);
        if runs.iter().all(|r| get(r) == v0) {
            return (v0, 0.0);
        }
        let mean = runs.iter().map(get).sum::<f64>() / n;
        let std = if runs.len() > 1 {
            (runs.iter().map(|r| (get(r) - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        (mean, std)
    };
    let mut mean = RankingMetrics {
        recall: BTreeMap::new(),
        ndcg: BTreeMap::new(),
        users: first.users,
    };
    let mut std = mean.clone();
    for &k in &ks {
        let (m, s) = stats(&|r| r.recall[&k]);
        mean.recall.insert(k, m);
        std.recall.insert(k, s);
        let (m, s) = stats(&|r| r.ndcg[&k]);
        mean.ndcg.insert(k, m);
        std.ndcg.insert(k, s);
    }
    Ok(SeedSummary {
        runs: runs.len(),
        mean,
        std,
        std_defined: runs.len() > 1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: usize,
    /// Smallest and largest train interaction count in the group.
    pub min_interactions: usize,
    pub max_interactions: usize,
    pub users: usize,
    /// Absent when no user in the group has test items.
    pub metrics: Option<RankingMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub groups: Vec<GroupMetrics>,
}

pub fn group_evaluate<S: Scorer + Sync + ?Sized>(
    scorer: &S,
    bundle: &SplitBundle,
    groups: &[Vec<UserIdx>],
    ks: &[usize],
) -> Result<GroupReport, EvalError> {
    let degrees = bundle.train.user_degrees();
    let mut out = Vec::with_capacity(groups.len());
    for (g, users) in groups.iter().enumerate() {
        let metrics = evaluate_users(scorer, &bundle.train, &bundle.test, ks, Some(users))?;
        out.push(GroupMetrics {
            group: g,
            min_interactions: users.iter().map(|&u| degrees[u]).min().unwrap_or(0),
            max_interactions: users.iter().map(|&u| degrees[u]).max().unwrap_or(0),
            users: users.len(),
            metrics,
        });
    }
    Ok(GroupReport { groups: out })
}

/// `(aug - base) / base * 100`; `None` when `base` is 0.
pub fn improvement_percent(base: f64, aug: f64) -> Option<f64> {
    (base != 0.0).then(|| (aug - base) / base * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationInfo {
    pub ratio: f64,
    pub backend: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
}

/// One model's results on one training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub model: String,
    pub dataset: String,
    pub augmentation: Option<AugmentationInfo>,
    pub seeds: Vec<u64>,
    pub metrics: MetricTable,
    pub std: MetricTable,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub groups: Vec<GroupMetrics>,
}

impl EvalResult {
    pub fn from_summary(
        model: &str,
        dataset: &str,
        augmentation: Option<AugmentationInfo>,
        seeds: &[u64],
        summary: &SeedSummary,
        groups: Vec<GroupMetrics>,
    ) -> Self {
        Self {
            model: model.into(),
            dataset: dataset.into(),
            augmentation,
            seeds: seeds.to_vec(),
            metrics: MetricTable {
                recall: summary.mean.recall.clone(),
                ndcg: summary.mean.ndcg.clone(),
            },
            std: MetricTable {
                recall: summary.std.recall.clone(),
                ndcg: summary.std.ndcg.clone(),
            },
            groups,
        }
    }
}

/// A model trained on the original data and on the augmented data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedResult {
    pub base: EvalResult,
    pub augmented: Option<EvalResult>,
    /// Percent change per metric label such as `"recall@10"`.
    pub improvement: BTreeMap<String, Option<f64>>,
}

impl PairedResult {
    pub fn new(base: EvalResult, augmented: Option<EvalResult>) -> Self {
        let mut improvement = BTreeMap::new();
        if let Some(aug) = &augmented {
            for (name, b, a) in [
                ("recall", &base.metrics.recall, &aug.metrics.recall),
                ("ndcg", &base.metrics.ndcg, &aug.metrics.ndcg),
            ] {
                for (k, bv) in b {
                    if let Some(av) = a.get(k) {
                        improvement.insert(format!("{name}@{k}"), improvement_percent(*bv, *av));
                    }
                }
            }
        }
        Self {
            base,
            augmented,
            improvement,
        }
    }
}

/// Aligned text table: one row per model variant, one column per metric,
/// with an improvement row under each augmented variant.
pub fn format_table(results: &[PairedResult]) -> String {
    let Some(first) = results.first() else {
        return String::new();
    };
    let mut cols: Vec<String> = Vec::new();
    for k in first.base.metrics.recall.keys() {
        cols.push(format!("Recall@{k}"));
    }
    for k in first.base.metrics.ndcg.keys() {
        cols.push(format!("NDCG@{k}"));
    }
    let values = |r: &EvalResult| -> Vec<String> {
        r.metrics
            .recall
            .values()
            .chain(r.metrics.ndcg.values())
            .map(|v| format!("{v:.5}"))
            .collect()
    };
    let mut rows: Vec<(String, Vec<String>)> = Vec::new();
    for p in results {
        rows.push((p.base.model.clone(), values(&p.base)));
        if let Some(aug) = &p.augmented {
            let label = match &aug.augmentation {
                Some(a) => format!("{}+{} ({:.1}%)", aug.model, a.backend, a.ratio * 100.0),
                None => format!("{}+aug", aug.model),
            };
            rows.push((label, values(aug)));
            let imp = p
                .base
                .metrics
                .recall
                .keys()
                .map(|k| format!("recall@{k}"))
                .chain(p.base.metrics.ndcg.keys().map(|k| format!("ndcg@{k}")))
                .map(|key| match p.improvement.get(&key).copied().flatten() {
                    Some(v) => format!("{v:+.2}%"),
                    None => "n/a".into(),
                })
                .collect();
            rows.push(("Improv.".into(), imp));
        }
    }
    let name_w = rows.iter().map(|r| r.0.len()).chain([5]).max().unwrap_or(5);
    let col_w: Vec<usize> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| {
            rows.iter()
                .map(|r| r.1.get(j).map_or(0, String::len))
                .chain([c.len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let _ = write!(out, "{:<name_w$}", "Model");
    for (c, w) in cols.iter().zip(&col_w) {
        let _ = write!(out, "  {c:>w$}");
    }
    out.push('\n');
    for (name, vals) in rows {
        let _ = write!(out, "{name:<name_w$}");
        for (v, w) in vals.iter().zip(&col_w) {
            let _ = write!(out, "  {v:>w$}");
        }
        out.push('\n');
    }
    out
}
