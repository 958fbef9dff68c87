//! Top-N ranking metrics (Recall@R, DCG@R, NDCG@R) and the held-out
//! evaluation loop.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::data::{ClickMatrix, HeldoutPair};
use crate::error::{Error, Result};

/// Users scored per forward pass during evaluation.
pub const EVAL_BATCH: usize = 500;

/// A ranked list `w(1..)` and the held-out set I_u it is judged against.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    ranked: Vec<u32>,
    truth: Vec<u32>,
}

impl RankingResult {
    pub fn new(ranked: Vec<u32>, truth: &[u32]) -> Result<Self> {
        if truth.is_empty() {
            return Err(Error::InvalidArgument("held-out set is empty".into()));
        }
        let mut seen = ranked.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("ranking contains duplicates".into()));
        }
        let mut truth = truth.to_vec();
        truth.sort_unstable();
        truth.dedup();
        Ok(Self { ranked, truth })
    }

    pub fn ranked(&self) -> &[u32] {
        &self.ranked
    }

    pub fn truth(&self) -> &[u32] {
        &self.truth
    }

    fn hit(&self, rank: usize) -> bool {
        self.ranked
            .get(rank)
            .is_some_and(|i| self.truth.binary_search(i).is_ok())
    }

    /// Hits in the top `r`, divided by `min(r, |I_u|)`.
    pub fn recall_at(&self, r: usize) -> f64 {
        assert!(r >= 1, "cutoff must be at least 1");
        let hits = (0..r).filter(|&k| self.hit(k)).count();
        hits as f64 / r.min(self.truth.len()) as f64
    }

    /// `sum_{k=1..r} (2^hit(k) - 1) / log2(k + 1)`.
    pub fn dcg_at(&self, r: usize) -> f64 {
        assert!(r >= 1, "cutoff must be at least 1");
        (0..r)
            .filter(|&k| self.hit(k))
            .map(|k| 1.0 / ((k + 2) as f64).log2())
            .sum()
    }

    /// DCG divided by the DCG of `min(r, |I_u|)` hits at the top.
    pub fn ndcg_at(&self, r: usize) -> f64 {
        let ideal: f64 = (0..r.min(self.truth.len()))
            .map(|k| 1.0 / ((k + 2) as f64).log2())
            .sum();
        self.dcg_at(r) / ideal
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Recall,
    Ndcg,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Recall => "recall",
            MetricKind::Ndcg => "ndcg",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "recall" => Ok(MetricKind::Recall),
            "ndcg" => Ok(MetricKind::Ndcg),
            _ => Err(Error::InvalidArgument(format!("unknown metric `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub metric: MetricKind,
    #[serde(rename = "R")]
    pub r: usize,
    pub mean: f64,
    pub n_users: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    pub fn get(&self, metric: MetricKind, r: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|row| row.metric == metric && row.r == r)
            .map(|row| row.mean)
    }

    /// `metric,R,mean,n_users` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,R,mean,n_users\n");
        for row in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", row.metric.name(), row.r, row.mean, row.n_users);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metric table serializes")
    }
}

/// Anything that can score every item for a batch of fold-in rows.
pub trait Scorer {
    /// Returns an `n x I` matrix; higher means more recommended.
    fn score_batch(&self, foldin: &DMatrix<f64>) -> Result<DMatrix<f64>>;
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn score_batch(&self, foldin: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        (**self).score_batch(foldin)
    }
}

/// Ranks items by training-set click counts.
#[derive(Debug, Clone)]
pub struct Popularity {
    counts: Vec<f64>,
}

impl Popularity {
    pub fn from_train(train: &ClickMatrix) -> Self {
        Self {
            counts: train.item_counts().into_iter().map(|c| c as f64).collect(),
        }
    }
}

impl Scorer for Popularity {
    fn score_batch(&self, foldin: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if foldin.ncols() != self.counts.len() {
            return Err(Error::Shape("fold-in width differs from item count".into()));
        }
        Ok(DMatrix::from_fn(foldin.nrows(), foldin.ncols(), |_, c| self.counts[c]))
    }
}

/// Top `k` items of `scores` by descending score, ties broken by ascending
/// item index. Items in `exclude` (sorted) are never ranked.
pub fn rank_top(scores: &[f64], exclude: &[u32], k: usize) -> Vec<u32> {
    let mut candidates: Vec<u32> = (0..scores.len() as u32)
        .filter(|i| exclude.binary_search(i).is_err())
        .collect();
    let order = |a: &u32, b: &u32| {
        scores[*b as usize]
            .total_cmp(&scores[*a as usize])
            .then(a.cmp(b))
    };
    let k = k.min(candidates.len());
    if k < candidates.len() && k > 0 {
        candidates.select_nth_unstable_by(k - 1, order);
        candidates.truncate(k);
    } else {
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(order);
    candidates
}

/// Per-user rankings for every held-out user, fold-in items excluded.
pub fn rank_heldout<S: Scorer + ?Sized>(
    scorer: &S,
    heldout: &HeldoutPair,
    depth: usize,
) -> Result<Vec<RankingResult>> {
    let n = heldout.n_users();
    let mut out = Vec::with_capacity(n);
    let users: Vec<usize> = (0..n).collect();
    for chunk in users.chunks(EVAL_BATCH) {
        let x = heldout.foldin.dense_rows(chunk);
        let scores = scorer.score_batch(&x)?;
        if scores.shape() != x.shape() {
            return Err(Error::Shape(format!(
                "scorer returned {:?} for a {:?} batch",
                scores.shape(),
                x.shape()
            )));
        }
        for (r, &u) in chunk.iter().enumerate() {
            let row: Vec<f64> = scores.row(r).iter().copied().collect();
            let ranked = rank_top(&row, heldout.foldin.row(u), depth);
            out.push(RankingResult::new(ranked, heldout.heldout.row(u))?);
        }
    }
    Ok(out)
}

/// Mean Recall@R and NDCG@R over held-out users for every R in `r_list`.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    heldout: &HeldoutPair,
    r_list: &[usize],
) -> Result<MetricTable> {
    if r_list.is_empty() || r_list.contains(&0) {
        return Err(Error::InvalidArgument(
            "cutoff list must be non-empty and positive".into(),
        ));
    }
    let depth = *r_list.iter().max().expect("non-empty");
    let rankings = rank_heldout(scorer, heldout, depth)?;
    let n = rankings.len();
    let mean = |f: &dyn Fn(&RankingResult) -> f64| {
        if n == 0 {
            0.0
        } else {
            rankings.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let mut rows = Vec::new();
    for metric in [MetricKind::Recall, MetricKind::Ndcg] {
        for &r in r_list {
            let value = match metric {
                MetricKind::Recall => mean(&|x| x.recall_at(r)),
                MetricKind::Ndcg => mean(&|x| x.ndcg_at(r)),
            };
            rows.push(MetricRow {
                metric,
                r,
                mean: value,
                n_users: n,
            });
        }
    }
    Ok(MetricTable { rows })
}
