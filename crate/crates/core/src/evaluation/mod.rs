//! Candidate ranking, ranking metrics, accuracy and significance tests.

use std::cmp::Ordering;

use serde::Serialize;
use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, Normal};

use crate::{Error, Result};

/// Candidate indices by descending score; ties keep ascending original index.
pub fn rank_candidates(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| match probs[b].partial_cmp(&probs[a]) {
        Some(Ordering::Equal) | None => a.cmp(&b),
        Some(o) => o,
    });
    order
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedQuery {
    pub id: String,
    /// `order[r]` is the original index of the candidate at rank `r`.
    pub order: Vec<usize>,
    /// Binary relevance in ranked order.
    pub labels: Vec<usize>,
}

impl RankedQuery {
    pub fn new(id: impl Into<String>, probs: &[f64], labels: &[usize]) -> Result<Self> {
        let id = id.into();
        if probs.is_empty() || probs.len() != labels.len() {
            return Err(Error::Contract(format!(
                "query {id}: {} scores for {} labels",
                probs.len(),
                labels.len()
            )));
        }
        let order = rank_candidates(probs);
        let labels = order.iter().map(|&i| usize::from(labels[i] > 0)).collect();
        Ok(Self { id, order, labels })
    }

    pub fn n_relevant(&self) -> usize {
        self.labels.iter().sum()
    }
}

/// Per-query values behind a [`MetricsReport`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryMetrics {
    pub id: String,
    pub ap: f64,
    pub rr: f64,
    pub p1: f64,
    pub avg_rec: f64,
}

/// Metric means over queries; each metric is present only when the task
/// defines it.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct MetricsReport {
    #[serde(rename = "MAP", skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
    #[serde(rename = "MRR", skip_serializing_if = "Option::is_none")]
    pub mrr: Option<f64>,
    #[serde(rename = "P@1", skip_serializing_if = "Option::is_none")]
    pub p_at_1: Option<f64>,
    #[serde(rename = "AvgRec", skip_serializing_if = "Option::is_none")]
    pub avg_rec: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    pub n_queries: usize,
    pub n_excluded: usize,
    #[serde(skip)]
    pub per_query: Vec<QueryMetrics>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

pub fn query_metrics(q: &RankedQuery) -> Result<QueryMetrics> {
    let total = q.n_relevant();
    if total == 0 {
        return Err(Error::Contract(format!("query {} has no relevant candidate", q.id)));
    }
    let mut hits = 0usize;
    let mut ap = 0.0;
    let mut rr = 0.0;
    let mut rec_sum = 0.0;
    for (k, &rel) in q.labels.iter().enumerate() {
        if rel == 1 {
            hits += 1;
            ap += hits as f64 / (k + 1) as f64;
            if hits == 1 {
                rr = 1.0 / (k + 1) as f64;
            }
        }
        rec_sum += hits as f64 / total as f64;
    }
    Ok(QueryMetrics {
        id: q.id.clone(),
        ap: ap / total as f64,
        rr,
        p1: q.labels[0] as f64,
        avg_rec: rec_sum / q.labels.len() as f64,
    })
}

/// Means of AP, RR, P@1 and AvgRec. Every query must have a relevant
/// candidate; filter unanswerable ones first (see [`score_selection`]).
pub fn compute_ranking_metrics(queries: &[RankedQuery]) -> Result<MetricsReport> {
    if queries.is_empty() {
        return Err(Error::Domain("no scorable queries".into()));
    }
    let per_query = queries.iter().map(query_metrics).collect::<Result<Vec<_>>>()?;
    let n = per_query.len() as f64;
    let mean = |f: fn(&QueryMetrics) -> f64| per_query.iter().map(f).sum::<f64>() / n;
    Ok(MetricsReport {
        map: Some(mean(|m| m.ap)),
        mrr: Some(mean(|m| m.rr)),
        p_at_1: Some(mean(|m| m.p1)),
        avg_rec: Some(mean(|m| m.avg_rec)),
        accuracy: None,
        n_queries: per_query.len(),
        n_excluded: 0,
        per_query,
    })
}

/// Ranks `(id, relevant-probabilities, labels)` triples, drops queries with
/// no relevant candidate and scores the rest.
pub fn score_selection<'a>(
    queries: impl IntoIterator<Item = (&'a str, &'a [f64], &'a [usize])>,
) -> Result<MetricsReport> {
    let mut ranked = Vec::new();
    let mut excluded = 0;
    for (id, probs, labels) in queries {
        let q = RankedQuery::new(id, probs, labels)?;
        if q.n_relevant() == 0 {
            excluded += 1;
        } else {
            ranked.push(q);
        }
    }
    let mut report = compute_ranking_metrics(&ranked)?;
    report.n_excluded = excluded;
    Ok(report)
}

pub fn accuracy(predictions: &[usize], golds: &[usize]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::Dimension {
            op: "accuracy",
            lhs: vec![predictions.len()],
            rhs: vec![golds.len()],
        });
    }
    if predictions.is_empty() {
        return Err(Error::EmptySequence("accuracy"));
    }
    let hits = predictions.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MannWhitney {
    pub u_a: f64,
    pub u_b: f64,
    pub p: f64,
    pub exact: bool,
}

/// Largest `n_a·n_b` for which the exact null distribution is enumerated.
pub const EXACT_LIMIT: usize = 400;

/// Twice the midrank of every pooled value (so ranks stay integral).
fn doubled_midranks(pooled: &[f64]) -> Vec<u64> {
    let mut idx: Vec<usize> = (0..pooled.len()).collect();
    idx.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));
    let mut ranks = vec![0; pooled.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && pooled[idx[j + 1]] == pooled[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean; doubled that is i + j + 2
        for &k in &idx[i..=j] {
            ranks[k] = (i + j + 2) as u64;
        }
        i = j + 1;
    }
    ranks
}

/// Rank-sum test with midranks. Two-sided `p = P(|U − μ| ≥ |u − μ|)`, exact by
/// counting rank subsets when `n_a·n_b ≤ 400`, otherwise the normal
/// approximation with tie and continuity correction.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySequence("mann_whitney_u"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Domain("mann_whitney_u needs finite scores".into()));
    }
    let (na, nb) = (a.len(), b.len());
    let n = na + nb;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = doubled_midranks(&pooled);
    let sum_a: u64 = ranks[..na].iter().sum();
    let u_a = sum_a as f64 / 2.0 - (na * (na + 1)) as f64 / 2.0;
    let u_b = (na * nb) as f64 - u_a;

    if na * nb <= EXACT_LIMIT {
        let p = exact_p(&ranks, na, sum_a);
        return Ok(MannWhitney {
            u_a,
            u_b,
            p,
            exact: true,
        });
    }

    let mu = (na * nb) as f64 / 2.0;
    let mut ties = 0.0;
    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        i = j + 1;
    }
    let nf = n as f64;
    let var = (na * nb) as f64 / 12.0 * ((nf + 1.0) - ties / (nf * (nf - 1.0)));
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = ((u_a - mu).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        (2.0 * (1.0 - normal.cdf(z))).min(1.0)
    };
    Ok(MannWhitney {
        u_a,
        u_b,
        p,
        exact: false,
    })
}

/// Fraction of `na`-subsets of the doubled ranks whose sum lies at least as
/// far from its mean as `observed`.
fn exact_p(ranks: &[u64], na: usize, observed: u64) -> f64 {
    let total: u64 = ranks.iter().sum();
    // dp[k][s]: subsets of size k with doubled-rank sum s
    let mut dp = vec![vec![0u128; total as usize + 1]; na + 1];
    dp[0][0] = 1;
    for &r in ranks {
        let r = r as usize;
        for k in (1..=na).rev() {
            let (lo, hi) = dp.split_at_mut(k);
            let (prev, cur) = (&lo[k - 1], &mut hi[0]);
            for s in (r..cur.len()).rev() {
                cur[s] += prev[s - r];
            }
        }
    }
    let n = ranks.len() as u64;
    // mean doubled sum is na·(n+1)
    let centre = (na as u64 * (n + 1)) as i128;
    let dev = (observed as i128 - centre).abs();
    let mut extreme = 0u128;
    let mut all = 0u128;
    for (s, &count) in dp[na].iter().enumerate() {
        all += count;
        if (s as i128 - centre).abs() >= dev {
            extreme += count;
        }
    }
    (extreme as f64 / all as f64).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McNemar {
    /// `(b − c)² / (b + c)`, reported for reference.
    pub statistic: f64,
    /// Exact binomial two-sided p.
    pub p: f64,
}

/// Exact McNemar test on the discordant counts `b` (A right, B wrong) and `c`.
pub fn mcnemar(b: u64, c: u64) -> Result<McNemar> {
    let n = b + c;
    if n == 0 {
        return Err(Error::Domain(
            "McNemar's test is undefined without discordant pairs".into(),
        ));
    }
    let diff = b as f64 - c as f64;
    let binom = Binomial::new(0.5, n).expect("valid binomial");
    let p = (2.0 * binom.cdf(b.min(c))).min(1.0);
    Ok(McNemar {
        statistic: diff * diff / n as f64,
        p,
    })
}
