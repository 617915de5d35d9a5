//! Category-level ranking metrics (hit rate, NDCG, novel-category and
//! long-tail proportions), list assembly from stored aligned sets, and the
//! group and category similarity analyses.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::UserId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecommendationList {
    pub user_id: UserId,
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserGroundTruth {
    pub preferred: BTreeSet<String>,
    pub history: BTreeSet<String>,
    /// Categories clicked in the evaluation window.
    pub relevant: BTreeSet<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LongTailSet {
    pub categories: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: usize,
    pub tail_fraction: f64,
    /// Groups sampled for the similarity analysis.
    pub similarity_groups: usize,
    pub similarity_subset: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 5,
            tail_fraction: 0.2,
            similarity_groups: 10,
            similarity_subset: 30,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.similarity_subset == 0 {
            return Err(Error::Config("eval.k and eval.similarity_subset must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.tail_fraction) {
            return Err(Error::Config("eval.tail_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// The ⌈fraction·|C|⌋ categories with the fewest clicks, ties by name.
/// Categories absent from `clicks` count as zero.
pub fn long_tail_set(clicks: &BTreeMap<String, usize>, categories: &[String], fraction: f64) -> LongTailSet {
    let size = ((categories.len() as f64) * fraction - 1e-9).ceil().max(0.0) as usize;
    let mut ranked: Vec<(usize, &String)> = categories
        .iter()
        .map(|c| (clicks.get(c).copied().unwrap_or(0), c))
        .collect();
    ranked.sort();
    LongTailSet {
        categories: ranked.into_iter().take(size).map(|(_, c)| c.clone()).collect(),
    }
}

fn top_k(list: &RecommendationList, k: usize) -> Result<&[String]> {
    if list.categories.len() < k {
        return Err(Error::Shape(format!(
            "list for user {} has {} categories, need {k}",
            list.user_id,
            list.categories.len()
        )));
    }
    let top = &list.categories[..k];
    let distinct: BTreeSet<&String> = top.iter().collect();
    if distinct.len() != k {
        return Err(Error::Shape(format!("list for user {} repeats a category", list.user_id)));
    }
    Ok(top)
}

fn truth_for<'a>(truths: &'a BTreeMap<UserId, UserGroundTruth>, user: &UserId) -> Result<&'a UserGroundTruth> {
    truths
        .get(user)
        .ok_or_else(|| Error::MissingRepresentation(format!("ground truth for user {user}")))
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

pub fn user_hit_rate(top: &[String], truth: &UserGroundTruth) -> f64 {
    top.iter().filter(|c| truth.preferred.contains(*c)).count() as f64 / top.len() as f64
}

/// DCG/IDCG with discount log₂(i+1), or `None` when no label is positive.
pub fn user_ndcg(top: &[String], truth: &UserGroundTruth) -> Option<f64> {
    let labels: Vec<bool> = top.iter().map(|c| truth.relevant.contains(c)).collect();
    let dcg: f64 = labels
        .iter()
        .enumerate()
        .filter(|(_, r)| **r)
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum();
    let ones = labels.iter().filter(|r| **r).count();
    let idcg: f64 = (0..ones).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
    (idcg > 0.0).then(|| dcg / idcg)
}

pub fn user_novel_proportion(top: &[String], truth: &UserGroundTruth, n_categories: usize) -> f64 {
    top.iter().filter(|c| !truth.history.contains(*c)).count() as f64 / n_categories as f64
}

pub fn user_long_tail_proportion(top: &[String], tail: &LongTailSet, n_categories: usize) -> f64 {
    top.iter().filter(|c| tail.categories.contains(*c)).count() as f64 / n_categories as f64
}

pub fn category_hit_rate(
    lists: &[RecommendationList],
    truths: &BTreeMap<UserId, UserGroundTruth>,
    k: usize,
) -> Result<f64> {
    let v = lists
        .iter()
        .map(|l| Ok(user_hit_rate(top_k(l, k)?, truth_for(truths, &l.user_id)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&v))
}

/// Mean NDCG over users with at least one relevant label, and the number
/// of users excluded.
pub fn category_ndcg(
    lists: &[RecommendationList],
    truths: &BTreeMap<UserId, UserGroundTruth>,
    k: usize,
) -> Result<(f64, usize)> {
    let v = lists
        .iter()
        .map(|l| Ok(user_ndcg(top_k(l, k)?, truth_for(truths, &l.user_id)?)))
        .collect::<Result<Vec<_>>>()?;
    let kept: Vec<f64> = v.iter().flatten().copied().collect();
    Ok((mean(&kept), v.len() - kept.len()))
}

pub fn novel_category_proportion(
    lists: &[RecommendationList],
    truths: &BTreeMap<UserId, UserGroundTruth>,
    k: usize,
    n_categories: usize,
) -> Result<f64> {
    let v = lists
        .iter()
        .map(|l| Ok(user_novel_proportion(top_k(l, k)?, truth_for(truths, &l.user_id)?, n_categories)))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&v))
}

pub fn category_long_tail_proportion(
    lists: &[RecommendationList],
    tail: &LongTailSet,
    k: usize,
    n_categories: usize,
) -> Result<f64> {
    let v = lists
        .iter()
        .map(|l| Ok(user_long_tail_proportion(top_k(l, k)?, tail, n_categories)))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user_id: UserId,
    pub hit_rate: f64,
    pub ndcg: Option<f64>,
    pub novel: f64,
    pub long_tail: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub k: usize,
    pub mean: f64,
    pub n_users: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub k: usize,
    pub n_users: usize,
    pub ndcg_excluded: usize,
    pub rows: Vec<MetricRow>,
    pub per_user: Vec<UserMetrics>,
}

impl MetricReport {
    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == metric).map(|r| r.mean)
    }

    /// `metric,K,mean,n_users`.
    pub fn csv(&self) -> String {
        let mut s = String::from("metric,K,mean,n_users\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{:.6},{}\n", r.metric, r.k, r.mean, r.n_users));
        }
        s
    }

    pub fn per_user_tsv(&self) -> String {
        let mut s = String::from("user_id\tC-H\tC-N\tNCP\tCLTP\n");
        for u in &self.per_user {
            let ndcg = u.ndcg.map(|v| format!("{v:.6}")).unwrap_or_else(|| "NA".into());
            s.push_str(&format!(
                "{}\t{:.6}\t{ndcg}\t{:.6}\t{:.6}\n",
                u.user_id, u.hit_rate, u.novel, u.long_tail
            ));
        }
        s
    }
}

/// All four metrics at cut-off `k`.
pub fn evaluate(
    lists: &[RecommendationList],
    truths: &BTreeMap<UserId, UserGroundTruth>,
    tail: &LongTailSet,
    k: usize,
    n_categories: usize,
) -> Result<MetricReport> {
    if k == 0 || n_categories == 0 {
        return Err(Error::Config("K and the category count must be positive".into()));
    }
    let per_user = lists
        .par_iter()
        .map(|l| {
            let top = top_k(l, k)?;
            let truth = truth_for(truths, &l.user_id)?;
            Ok(UserMetrics {
                user_id: l.user_id.clone(),
                hit_rate: user_hit_rate(top, truth),
                ndcg: user_ndcg(top, truth),
                novel: user_novel_proportion(top, truth, n_categories),
                long_tail: user_long_tail_proportion(top, tail, n_categories),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_user.len();
    let ndcg: Vec<f64> = per_user.iter().filter_map(|u| u.ndcg).collect();
    let row = |metric: &str, values: Vec<f64>| MetricRow {
        metric: metric.to_string(),
        k,
        mean: mean(&values),
        n_users: values.len(),
    };
    let rows = vec![
        row("C-H", per_user.iter().map(|u| u.hit_rate).collect()),
        row("C-N", ndcg.clone()),
        row("NCP", per_user.iter().map(|u| u.novel).collect()),
        row("CLTP", per_user.iter().map(|u| u.long_tail).collect()),
    ];
    Ok(MetricReport {
        k,
        n_users: n,
        ndcg_excluded: n - ndcg.len(),
        rows,
        per_user,
    })
}

/// Stored aligned categories by descending score (ties by name), then
/// popular categories until the list reaches `k`.
pub fn assemble_list(aligned: &[(String, f64)], popularity: &[String], k: usize) -> Vec<String> {
    let mut ranked: Vec<&(String, f64)> = aligned.iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut out: Vec<String> = Vec::with_capacity(k);
    for (c, _) in ranked {
        if !out.contains(c) {
            out.push(c.clone());
        }
    }
    for c in popularity {
        if out.len() >= k {
            break;
        }
        if !out.contains(c) {
            out.push(c.clone());
        }
    }
    out
}

/// Cosine similarity, defined as 0 (and flagged) when either vector is zero.
pub fn cosine_or_zero(a: &[f64], b: &[f64]) -> (f64, bool) {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        (0.0, true)
    } else {
        ((dot / (na * nb)).clamp(-1.0, 1.0), false)
    }
}

fn mean_vector(vs: &[&Vec<f64>]) -> Vec<f64> {
    let dim = vs.first().map_or(0, |v| v.len());
    let mut out = vec![0.0; dim];
    for v in vs {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += x;
        }
    }
    let n = vs.len().max(1) as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub labels: Vec<String>,
    /// `values[i][j]` compares group i's first subset with group j's second.
    pub values: Vec<Vec<f64>>,
    pub skipped: Vec<String>,
}

impl SimilarityMatrix {
    pub fn intra_mean(&self) -> f64 {
        mean(&(0..self.values.len()).map(|i| self.values[i][i]).collect::<Vec<_>>())
    }

    pub fn inter_mean(&self) -> f64 {
        let n = self.values.len();
        let off: Vec<f64> = (0..n)
            .flat_map(|i| (0..n).filter(move |j| *j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.values[i][j])
            .collect();
        mean(&off)
    }

    /// Header row of labels, then one labelled row per group.
    pub fn csv(&self) -> String {
        let mut s = format!("group,{}\n", self.labels.join(","));
        for (l, row) in self.labels.iter().zip(&self.values) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            s.push_str(&format!("{l},{}\n", cells.join(",")));
        }
        s
    }
}

/// Samples up to `n_groups` groups with at least `2·subset` members, splits
/// each into two disjoint random subsets, and compares subset means by
/// cosine similarity.
pub fn group_similarity_analysis(
    groups: &BTreeMap<String, Vec<Vec<f64>>>,
    n_groups: usize,
    subset: usize,
    seed: u64,
) -> SimilarityMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut eligible, mut skipped) = (Vec::new(), Vec::new());
    for (label, members) in groups {
        if members.len() >= 2 * subset && subset > 0 {
            eligible.push(label);
        } else {
            log::debug!("group {label} has {} members; skipped", members.len());
            skipped.push(label.clone());
        }
    }
    eligible.shuffle(&mut rng);
    eligible.truncate(n_groups);
    eligible.sort();
    let halves: Vec<(Vec<f64>, Vec<f64>)> = eligible
        .iter()
        .map(|label| {
            let members = &groups[*label];
            let mut idx: Vec<usize> = (0..members.len()).collect();
            idx.shuffle(&mut rng);
            let a: Vec<&Vec<f64>> = idx[..subset].iter().map(|&i| &members[i]).collect();
            let b: Vec<&Vec<f64>> = idx[subset..2 * subset].iter().map(|&i| &members[i]).collect();
            (mean_vector(&a), mean_vector(&b))
        })
        .collect();
    let values = halves
        .iter()
        .map(|(a, _)| halves.iter().map(|(_, b)| cosine_or_zero(a, b).0).collect())
        .collect();
    SimilarityMatrix {
        labels: eligible.into_iter().cloned().collect(),
        values,
        skipped,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySimilarity {
    pub category: String,
    /// Mean cosine between the category vector and its users.
    pub users: f64,
    /// Same, against randomly drawn unrelated users.
    pub random: f64,
    pub zero_vectors: usize,
}

/// Mean cosine similarity of a category vector to its users and to a
/// random baseline of unrelated users.
pub fn category_user_similarity(
    category: &str,
    vector: &[f64],
    users: &[&Vec<f64>],
    unrelated: &[&Vec<f64>],
) -> Result<CategorySimilarity> {
    let mut zero_vectors = 0;
    let mut side = |vs: &[&Vec<f64>]| -> Result<f64> {
        let mut acc = Vec::with_capacity(vs.len());
        for v in vs {
            if v.len() != vector.len() {
                return Err(Error::Shape(format!("user vector of length {} vs {}", v.len(), vector.len())));
            }
            let (c, zero) = cosine_or_zero(vector, v);
            zero_vectors += zero as usize;
            acc.push(c);
        }
        Ok(mean(&acc))
    };
    let users_mean = side(users)?;
    let random = side(unrelated)?;
    Ok(CategorySimilarity {
        category: category.to_string(),
        users: users_mean,
        random,
        zero_vectors,
    })
}

pub fn category_similarity_csv(rows: &[CategorySimilarity]) -> String {
    let mut s = String::from("category,users,random,zero_vectors\n");
    for r in rows {
        s.push_str(&format!("{},{:.6},{:.6},{}\n", r.category, r.users, r.random, r.zero_vectors));
    }
    s
}
