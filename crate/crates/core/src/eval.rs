//! Top-N evaluation: recall@N and NDCG@N with binary relevance, averaged
//! over users and then over repeated runs.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{friend_context, InteractionSet, RelevanceLabels, SocialGraph};
use crate::error::{NasError, Result};
use crate::nn::compensated_sum;

/// Anything that can score every item for a user.
pub trait Recommender: Sync {
    fn n_users(&self) -> usize;
    fn n_items(&self) -> usize;
    /// Cap on the number of friends fed to the model; 0 when friends are unused.
    fn k_max(&self) -> usize;
    fn score_all(&self, user: usize, friends: &[usize]) -> Vec<f64>;
}

/// Descending score, ties by ascending id.
fn by_score(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Orders `candidates` by descending score, breaking ties by ascending id.
pub fn rank_by_scores(scores: &[f64], candidates: &[usize]) -> Vec<usize> {
    let mut out = candidates.to_vec();
    out.sort_by(by_score(scores));
    out
}

/// The first `n` entries of [`rank_by_scores`] without sorting the rest.
pub fn top_n_by_scores(scores: &[f64], candidates: &[usize], n: usize) -> Vec<usize> {
    let mut out = candidates.to_vec();
    let cmp = by_score(scores);
    if n < out.len() {
        if n == 0 {
            return Vec::new();
        }
        out.select_nth_unstable_by(n - 1, &cmp);
        out.truncate(n);
    }
    out.sort_by(cmp);
    out
}

/// Every item the user has no train rating for. `train_items` must be sorted.
pub fn candidates(n_items: usize, train_items: &[usize]) -> Vec<usize> {
    (0..n_items)
        .filter(|i| train_items.binary_search(i).is_err())
        .collect()
}

pub fn rank_items<M: Recommender + ?Sized>(
    model: &M,
    user: usize,
    friends: &[usize],
    candidates: &[usize],
) -> Vec<usize> {
    rank_by_scores(&model.score_all(user, friends), candidates)
}

/// `|top-N ∩ relevant| / |relevant|`. Panics when `relevant` is empty.
pub fn recall_at_n(ranked: &[usize], relevant: &BTreeSet<usize>, n: usize) -> f64 {
    assert!(!relevant.is_empty(), "recall with no relevant items");
    let hits = ranked
        .iter()
        .take(n)
        .filter(|i| relevant.contains(i))
        .count();
    hits as f64 / relevant.len() as f64
}

/// `sum_{l=1}^{N} (2^rel_l - 1) / log2(l + 1)` over binary labels.
pub fn dcg_at_n(relevance: &[bool], n: usize) -> f64 {
    relevance
        .iter()
        .take(n)
        .enumerate()
        .filter(|(_, &r)| r)
        .map(|(l, _)| 1.0 / ((l + 2) as f64).log2())
        .sum()
}

/// DCG over the ideal DCG, which places `min(num_relevant, N)` relevant items first.
pub fn ndcg_at_n(relevance: &[bool], num_relevant: usize, n: usize) -> f64 {
    assert!(num_relevant > 0, "ndcg with no relevant items");
    let ideal = vec![true; num_relevant.min(n)];
    dcg_at_n(relevance, n) / dcg_at_n(&ideal, n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run: usize,
    pub seed: u64,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub train_frac: Option<f64>,
    pub n: usize,
    pub runs: Vec<RunMetrics>,
    pub recall_mean: f64,
    pub recall_std: f64,
    pub ndcg_mean: f64,
    pub ndcg_std: f64,
    /// Users with at least one relevant item.
    pub evaluated_users: usize,
    /// Users without relevant items, excluded from the averages.
    pub skipped_users: usize,
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = compensated_sum(values.iter().copied()) / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = compensated_sum(values.iter().map(|v| (v - mean) * (v - mean))) / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-user (recall, ndcg) for one run, `None` for users without relevant items.
pub fn user_metrics<M: Recommender + ?Sized>(
    model: &M,
    train: &InteractionSet,
    labels: &RelevanceLabels,
    graph: &SocialGraph,
    n: usize,
    seed: u64,
) -> Vec<Option<(f64, f64)>> {
    let train_items = train.item_sets();
    let k_max = model.k_max();
    (0..labels.n_users())
        .into_par_iter()
        .map(|user| {
            let relevant = &labels.relevant[user];
            if relevant.is_empty() {
                return None;
            }
            let friends = if k_max == 0 {
                Vec::new()
            } else {
                friend_context(graph, user, k_max, seed).friend_ids
            };
            let scores = model.score_all(user, &friends);
            let cands = candidates(model.n_items(), &train_items[user]);
            let top = top_n_by_scores(&scores, &cands, n);
            let rel: Vec<bool> = top.iter().map(|i| relevant.contains(i)).collect();
            Some((
                recall_at_n(&top, relevant, n),
                ndcg_at_n(&rel, relevant.len(), n),
            ))
        })
        .collect()
}

/// Evaluates once per seed and aggregates across runs. The seed drives friend
/// subsampling for users with more than `k_max` friends.
pub fn evaluate<M: Recommender + ?Sized>(
    model: &M,
    model_tag: &str,
    train: &InteractionSet,
    labels: &RelevanceLabels,
    graph: &SocialGraph,
    n: usize,
    seeds: &[u64],
) -> Result<EvalReport> {
    if seeds.is_empty() {
        return Err(NasError::Config("evaluation needs at least one run".into()));
    }
    if labels.n_users() != model.n_users() || train.n_items() != model.n_items() {
        return Err(NasError::Eval(format!(
            "model is {}x{} but data is {}x{}",
            model.n_users(),
            model.n_items(),
            labels.n_users(),
            train.n_items()
        )));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    let mut evaluated = 0;
    for (run, &seed) in seeds.iter().enumerate() {
        let per_user: Vec<(f64, f64)> = user_metrics(model, train, labels, graph, n, seed)
            .into_iter()
            .flatten()
            .collect();
        if per_user.is_empty() {
            return Err(NasError::Eval(
                "no user has a relevant item to evaluate".into(),
            ));
        }
        evaluated = per_user.len();
        let count = per_user.len() as f64;
        runs.push(RunMetrics {
            run,
            seed,
            recall: compensated_sum(per_user.iter().map(|m| m.0)) / count,
            ndcg: compensated_sum(per_user.iter().map(|m| m.1)) / count,
        });
    }
    let recalls: Vec<f64> = runs.iter().map(|r| r.recall).collect();
    let ndcgs: Vec<f64> = runs.iter().map(|r| r.ndcg).collect();
    let (recall_mean, recall_std) = mean_std(&recalls);
    let (ndcg_mean, ndcg_std) = mean_std(&ndcgs);
    Ok(EvalReport {
        model: model_tag.to_string(),
        train_frac: None,
        n,
        runs,
        recall_mean,
        recall_std,
        ndcg_mean,
        ndcg_std,
        evaluated_users: evaluated,
        skipped_users: labels.n_users() - evaluated,
    })
}

impl EvalReport {
    /// `model,train_frac,run,seed,recall@N,ndcg@N` rows followed by `mean`
    /// and `std` summary rows.
    pub fn to_csv(&self) -> String {
        let frac = self.train_frac.map(|f| f.to_string()).unwrap_or_default();
        let mut out = format!(
            "model,train_frac,run,seed,recall@{n},ndcg@{n}\n",
            n = self.n
        );
        for r in &self.runs {
            out.push_str(&format!(
                "{},{frac},{},{},{},{}\n",
                self.model, r.run, r.seed, r.recall, r.ndcg
            ));
        }
        out.push_str(&format!(
            "{},{frac},mean,,{},{}\n",
            self.model, self.recall_mean, self.ndcg_mean
        ));
        out.push_str(&format!(
            "{},{frac},std,,{},{}\n",
            self.model, self.recall_std, self.ndcg_std
        ));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `<stem>.csv` and `<stem>.json` next to each other.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.to_csv()).map_err(|e| NasError::io(&csv, e))?;
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, self.to_json()).map_err(|e| NasError::io(&json, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTTest {
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p_value: f64,
}

/// Paired t-test on per-run metrics. `None` with fewer than two pairs or
/// identical differences.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Option<PairedTTest> {
    assert_eq!(a.len(), b.len(), "paired samples differ in length");
    if a.len() < 2 {
        return None;
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mean, sd) = mean_std(&diffs);
    if sd == 0.0 {
        return None;
    }
    let df = (diffs.len() - 1) as f64;
    let t = mean / (sd / (diffs.len() as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, df).ok()?;
    let p_value = 2.0 * (1.0 - dist.cdf(t.abs()));
    Some(PairedTTest { t, df, p_value })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_order_and_ties() {
        let scores = [0.1, 0.9, 0.5, 0.5];
        assert_eq!(rank_by_scores(&scores, &[0, 1]), vec![1, 0]);
        assert_eq!(rank_by_scores(&scores, &[3, 2]), vec![2, 3]);
        assert_eq!(rank_by_scores(&scores, &[0, 1, 2, 3]), vec![1, 2, 3, 0]);
        assert_eq!(top_n_by_scores(&scores, &[0, 1, 2, 3], 2), vec![1, 2]);
        assert_eq!(top_n_by_scores(&scores, &[0, 1, 2, 3], 9), vec![1, 2, 3, 0]);
        assert!(top_n_by_scores(&scores, &[0, 1], 0).is_empty());
    }

    #[test]
    fn candidate_set_excludes_train() {
        assert_eq!(candidates(6, &[1, 4]), vec![0, 2, 3, 5]);
    }

    #[test]
    fn recall_cases() {
        let ranked: Vec<usize> = (0..20).collect();
        assert_eq!(recall_at_n(&ranked, &BTreeSet::from([0]), 10), 1.0);
        assert_eq!(recall_at_n(&ranked, &BTreeSet::from([15, 3]), 10), 0.5);
    }

    #[test]
    fn dcg_cases() {
        assert_eq!(dcg_at_n(&[true, false, false], 10), 1.0);
        // 1 + 1/log2(3)
        let v = dcg_at_n(&[true, true], 10);
        assert!((v - 1.630_929_753_571_457).abs() < 1e-12, "{v}");
        assert_eq!(dcg_at_n(&[false; 10], 10), 0.0);
        assert_eq!(dcg_at_n(&[false, true], 1), 0.0);
    }

    #[test]
    fn ndcg_cases() {
        assert_eq!(ndcg_at_n(&[true, true, false], 2, 10), 1.0);
        // 1/log2(4) over an ideal of 1
        assert_eq!(ndcg_at_n(&[false, false, true], 1, 10), 0.5);
        let a = ndcg_at_n(&[true, false, true, false, false], 2, 3);
        let b = ndcg_at_n(&[true, false, true, false, false, false, false], 2, 3);
        assert_eq!(a, b);
    }

    #[test]
    fn stats_helpers() {
        assert_eq!(mean_std(&[0.5; 5]), (0.5, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);

        assert!(paired_t_test(&[1.0], &[0.0]).is_none());
        let t = paired_t_test(
            &[0.30, 0.32, 0.31, 0.35, 0.33],
            &[0.20, 0.21, 0.22, 0.24, 0.20],
        )
        .unwrap();
        assert!(t.t > 0.0 && t.p_value < 0.05);
        // diffs [0.1, 0.1, 0.1, 0.1, 0.2]: mean 0.12, sd 0.04472, t = 6.0 with 4 df
        let t = paired_t_test(&[0.3, 0.3, 0.3, 0.3, 0.4], &[0.2; 5]).unwrap();
        assert!((t.t - 6.0).abs() < 1e-9);
        assert!((t.p_value - 0.003_882_537).abs() < 1e-6, "{}", t.p_value);
    }
}
