//! Top-K ranking, Recall/Precision/NDCG averaged over held-out users, the
//! missing-review sweep and the review-view similarity analysis.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::backbone::{Backbone, ParameterSet};
use crate::contrastive::cosine_sim;
use crate::corpus::{InteractionTable, ReviewEmbeddingStore, Split};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::trainer::{train, EpochRecord, TrainConfig};
use crate::views::{build_review_sets, mask_reviews, pool_view, sample_views, Side, ViewAssignment};

pub const DEFAULT_CUTOFFS: [usize; 2] = [5, 20];
/// Cutoff used for model selection.
pub const NDCG_CUTOFF: usize = 5;

/// Orders by score descending, then item id ascending.
fn rank_order(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// The `k` best-scoring items for `user_vec` that are not in `exclusions`.
pub fn recommend_topk(user_vec: &[f64], items: &Matrix, k: usize, exclusions: &HashSet<usize>) -> Result<Vec<usize>> {
    let excluded = exclusions.iter().filter(|&&i| i < items.rows()).count();
    let available = items.rows() - excluded;
    if k == 0 || k > available {
        return Err(Error::invalid(format!(
            "top-k needs 1 <= k <= {available} candidates, got k = {k}"
        )));
    }
    Ok(rank_candidates(user_vec, items, k, exclusions))
}

/// Like [`recommend_topk`] but returns fewer than `k` items when the
/// candidate set is smaller.
fn rank_candidates(user_vec: &[f64], items: &Matrix, k: usize, exclusions: &HashSet<usize>) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = (0..items.rows())
        .filter(|i| !exclusions.contains(i))
        .map(|i| (i, dot(user_vec, items.row(i))))
        .collect();
    let k = k.min(scored.len());
    if k == 0 {
        return Vec::new();
    }
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_by(rank_order);
    scored.into_iter().map(|(i, _)| i).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RankMetrics {
    pub recall: f64,
    pub precision: f64,
    pub ndcg: f64,
}

/// Binary-relevance Recall, Precision and NDCG over the first `k` entries of
/// `ranked`. Returns `None` for an empty relevant set.
pub fn metrics_at_k(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> Result<Option<RankMetrics>> {
    if k == 0 || ranked.len() < k {
        return Err(Error::invalid(format!(
            "need at least k = {k} ranked items, got {}",
            ranked.len()
        )));
    }
    if relevant.is_empty() {
        return Ok(None);
    }
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (pos, item) in ranked[..k].iter().enumerate() {
        if relevant.contains(item) {
            hits += 1;
            dcg += discount(pos + 1);
        }
    }
    let idcg: f64 = (1..=k.min(relevant.len())).map(discount).sum();
    Ok(Some(RankMetrics {
        recall: hits as f64 / relevant.len() as f64,
        precision: hits as f64 / k as f64,
        ndcg: dcg / idcg,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSeries {
    pub mean: f64,
    pub per_user: Vec<f64>,
}

impl MetricSeries {
    fn from_values(per_user: Vec<f64>) -> Self {
        let mean = per_user.iter().sum::<f64>() / per_user.len() as f64;
        MetricSeries { mean, per_user }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CutoffMetrics {
    pub k: usize,
    pub recall: MetricSeries,
    pub precision: MetricSeries,
    pub ndcg: MetricSeries,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub cutoffs: Vec<CutoffMetrics>,
    /// Users evaluated, in the order of the per-user vectors.
    pub users: Vec<usize>,
}

impl MetricsReport {
    pub fn num_users_evaluated(&self) -> usize {
        self.users.len()
    }

    pub fn cutoff(&self, k: usize) -> Option<&CutoffMetrics> {
        self.cutoffs.iter().find(|c| c.k == k)
    }

    /// `{"<k>": {"recall", "precision", "ndcg", "n_users"}}`
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for c in &self.cutoffs {
            map.insert(
                c.k.to_string(),
                serde_json::json!({
                    "recall": c.recall.mean,
                    "precision": c.precision.mean,
                    "ndcg": c.ndcg.mean,
                    "n_users": self.users.len(),
                }),
            );
        }
        serde_json::Value::Object(map)
    }
}

/// Ranks every user that has items in `target` against all items outside the
/// `exclude` splits. Users with fewer candidates than a cutoff have the
/// missing slots counted as misses.
pub fn evaluate_split(
    users: &Matrix,
    items: &Matrix,
    table: &InteractionTable,
    target: Split,
    cutoffs: &[usize],
    exclude: &[Split],
) -> Result<MetricsReport> {
    if cutoffs.is_empty() || cutoffs.contains(&0) {
        return Err(Error::invalid("cutoffs must be non-empty and positive"));
    }
    let mut relevant = vec![HashSet::new(); table.num_users];
    let mut excluded = vec![HashSet::new(); table.num_users];
    for t in &table.triples {
        if t.split == target {
            relevant[t.user].insert(t.item);
        } else if exclude.contains(&t.split) {
            excluded[t.user].insert(t.item);
        }
    }
    let evaluated: Vec<usize> = (0..table.num_users).filter(|&u| !relevant[u].is_empty()).collect();
    if evaluated.is_empty() {
        return Err(Error::NoEvaluableUsers);
    }
    let max_k = *cutoffs.iter().max().unwrap();
    let per_user: Vec<Vec<RankMetrics>> = evaluated
        .par_iter()
        .map(|&u| {
            let mut ranked = rank_candidates(users.row(u), items, max_k, &excluded[u]);
            ranked.resize(max_k, usize::MAX);
            cutoffs
                .iter()
                .map(|&k| {
                    metrics_at_k(&ranked, &relevant[u], k)
                        .expect("ranked padded to max cutoff")
                        .expect("relevant non-empty")
                })
                .collect()
        })
        .collect();
    let cutoffs = cutoffs
        .iter()
        .enumerate()
        .map(|(c, &k)| {
            let column = |f: fn(&RankMetrics) -> f64| MetricSeries::from_values(per_user.iter().map(|m| f(&m[c])).collect());
            CutoffMetrics {
                k,
                recall: column(|m| m.recall),
                precision: column(|m| m.precision),
                ndcg: column(|m| m.ndcg),
            }
        })
        .collect();
    Ok(MetricsReport { cutoffs, users: evaluated })
}

/// Test-split metrics at `cutoffs`, excluding training items (and validation
/// items when `exclude_valid`).
pub fn evaluate(
    params: &ParameterSet,
    backbone: &Backbone,
    table: &InteractionTable,
    cutoffs: &[usize],
    exclude_valid: bool,
) -> Result<MetricsReport> {
    let (users, items) = backbone.scoring_tables(params);
    let exclude: &[Split] = if exclude_valid {
        &[Split::Train, Split::Valid]
    } else {
        &[Split::Train]
    };
    evaluate_split(&users, &items, table, Split::Test, cutoffs, exclude)
}

/// One trained-and-evaluated run of the missing-review sweep.
#[derive(Debug, Clone)]
pub struct RobustnessRun {
    pub fraction: f64,
    pub seed: u64,
    pub reviews_kept: usize,
    pub report: MetricsReport,
    pub history: Vec<EpochRecord>,
}

/// For each fraction and seed: remove that fraction of training reviews,
/// re-sample views, retrain with `cfg` (seed replaced) and evaluate on test.
pub fn robustness_sweep(
    table: &InteractionTable,
    store: &ReviewEmbeddingStore,
    cfg: &TrainConfig,
    fractions: &[f64],
    seeds: &[u64],
    exclude_valid: bool,
) -> Result<Vec<RobustnessRun>> {
    if let Some(f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Error::invalid(format!("fraction {f} outside [0, 1]")));
    }
    let full = build_review_sets(table);
    let mut runs = Vec::new();
    for &fraction in fractions {
        for &seed in seeds {
            let sets = mask_reviews(&full, fraction, seed)?;
            let views = sample_views(&sets, seed);
            let run_cfg = TrainConfig { seed, ..cfg.clone() };
            let out = train(table, &sets, &views, store, &run_cfg)?;
            let report = evaluate(&out.params, &out.context.backbone, table, &DEFAULT_CUTOFFS, exclude_valid)?;
            log::info!("robustness fraction={fraction} seed={seed} reviews_kept={}", sets.total_reviews());
            runs.push(RobustnessRun {
                fraction,
                seed,
                reviews_kept: sets.total_reviews(),
                report,
                history: out.history,
            });
        }
    }
    Ok(runs)
}

/// Per-seed rows followed by one `mean` row per fraction.
pub fn robustness_tsv(runs: &[RobustnessRun]) -> String {
    let mut out = String::from("fraction\tseed\treviews");
    for k in DEFAULT_CUTOFFS {
        let _ = write!(out, "\trecall@{k}\tprecision@{k}\tndcg@{k}");
    }
    out.push('\n');
    let values = |r: &MetricsReport| -> Vec<f64> {
        DEFAULT_CUTOFFS
            .iter()
            .flat_map(|&k| {
                let c = r.cutoff(k).expect("sweep evaluates default cutoffs");
                [c.recall.mean, c.precision.mean, c.ndcg.mean]
            })
            .collect()
    };
    let mut fractions: Vec<f64> = Vec::new();
    for r in runs {
        if !fractions.contains(&r.fraction) {
            fractions.push(r.fraction);
        }
    }
    for f in fractions {
        let group: Vec<&RobustnessRun> = runs.iter().filter(|r| r.fraction == f).collect();
        let mut mean = vec![0.0; DEFAULT_CUTOFFS.len() * 3];
        let mut reviews = 0.0;
        for r in &group {
            let v = values(&r.report);
            let _ = write!(out, "{f}\t{}\t{}", r.seed, r.reviews_kept);
            for x in &v {
                let _ = write!(out, "\t{x:.6}");
            }
            out.push('\n');
            for (m, x) in mean.iter_mut().zip(&v) {
                *m += x / group.len() as f64;
            }
            reviews += r.reviews_kept as f64 / group.len() as f64;
        }
        let _ = write!(out, "{f}\tmean\t{reviews}");
        for x in &mean {
            let _ = write!(out, "\t{x:.6}");
        }
        out.push('\n');
    }
    out
}

pub const HISTOGRAM_BINS: usize = 64;

/// Fixed 64-bin histogram over [-1, 1] with summary statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub bins: Vec<u64>,
    pub count: u64,
    pub mean: f64,
    pub std: f64,
}

impl Histogram {
    pub fn from_values(values: &[f64]) -> Self {
        let mut bins = vec![0u64; HISTOGRAM_BINS];
        for v in values {
            let pos = ((v + 1.0) / 2.0 * HISTOGRAM_BINS as f64).floor();
            let idx = (pos.max(0.0) as usize).min(HISTOGRAM_BINS - 1);
            bins[idx] += 1;
        }
        let n = values.len() as f64;
        let mean = if values.is_empty() { 0.0 } else { values.iter().sum::<f64>() / n };
        let var = if values.is_empty() {
            0.0
        } else {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
        };
        Histogram {
            bins,
            count: values.len() as u64,
            mean,
            std: var.sqrt(),
        }
    }

    pub fn bin_edges(idx: usize) -> (f64, f64) {
        let w = 2.0 / HISTOGRAM_BINS as f64;
        (-1.0 + idx as f64 * w, -1.0 + (idx + 1) as f64 * w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityDistribution {
    pub side: Side,
    pub positive: Histogram,
    pub negative: Histogram,
}

/// Cosine similarity of each entity's two pooled views (positives) against
/// `sample_size` draws per entity of its first view versus another entity's
/// second view (negatives), using the pretrained review vectors.
pub fn pilot_distributions(
    views: &ViewAssignment,
    side: Side,
    store: &ReviewEmbeddingStore,
    sample_size: usize,
    seed: u64,
) -> Result<SimilarityDistribution> {
    let mut pooled = Vec::new();
    for pair in views.side(side).iter().flatten() {
        pooled.push((pool_view(&pair.first, store)?, pool_view(&pair.second, store)?));
    }
    if pooled.len() < 2 {
        return Err(Error::invalid(format!(
            "pilot analysis needs at least 2 {}s with views, found {}",
            side.name(),
            pooled.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positive = Vec::with_capacity(pooled.len());
    let mut negative = Vec::with_capacity(pooled.len() * sample_size);
    for (x, (h1, h2)) in pooled.iter().enumerate() {
        positive.push(cosine_sim(h1, h2)?);
        for _ in 0..sample_size {
            // uniform over the other entities
            let mut y = rng.random_range(0..pooled.len() - 1);
            if y >= x {
                y += 1;
            }
            negative.push(cosine_sim(h1, &pooled[y].1)?);
        }
    }
    Ok(SimilarityDistribution {
        side,
        positive: Histogram::from_values(&positive),
        negative: Histogram::from_values(&negative),
    })
}

/// `side, bin_lo, bin_hi, pos_count, neg_count` rows.
pub fn pilot_tsv(dists: &[SimilarityDistribution]) -> String {
    let mut out = String::from("side\tbin_lo\tbin_hi\tpos_count\tneg_count\n");
    for d in dists {
        for b in 0..HISTOGRAM_BINS {
            let (lo, hi) = Histogram::bin_edges(b);
            let _ = writeln!(
                out,
                "{}\t{lo:.5}\t{hi:.5}\t{}\t{}",
                d.side.name(),
                d.positive.bins[b],
                d.negative.bins[b]
            );
        }
    }
    out
}
