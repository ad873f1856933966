//! Cosine similarity, the InfoNCE kernel and the two contrastive objectives:
//! view-vs-view agreement of review representations, and alignment of
//! collaborative embeddings with review representations.

use std::collections::{BTreeMap, HashSet};

use rand::Rng;

use crate::backbone::{Gradients, ParameterSet, Table};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm};
use crate::views::{Side, ViewKind, ViewLayout};

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(dot(a, b) / (na * nb))
}

/// InfoNCE loss with its gradient in coefficient form.
///
/// The gradient with respect to candidate `c` is
/// `on_anchor[c] * anchor + on_self[c] * candidate_c`; candidate 0 is the positive.
#[derive(Debug, Clone, PartialEq)]
struct InfoNceCoefs {
    loss: f64,
    anchor_grad: Vec<f64>,
    on_anchor: Vec<f64>,
    on_self: Vec<f64>,
}

fn info_nce_coefs(anchor: &[f64], candidates: &[&[f64]], tau: f64) -> Result<InfoNceCoefs> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    if candidates.is_empty() {
        return Err(Error::invalid("InfoNCE needs at least the positive candidate"));
    }
    let na = norm(anchor);
    if na == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let mut norms = Vec::with_capacity(candidates.len());
    let mut sims = Vec::with_capacity(candidates.len());
    for c in candidates {
        let nc = norm(c);
        if nc == 0.0 {
            return Err(Error::ZeroNorm);
        }
        norms.push(nc);
        sims.push(dot(anchor, c) / (na * nc));
    }
    let logits: Vec<f64> = sims.iter().map(|s| s / tau).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = max + total.ln() - logits[0];

    let mut anchor_grad = vec![0.0; anchor.len()];
    let mut on_anchor = Vec::with_capacity(candidates.len());
    let mut on_self = Vec::with_capacity(candidates.len());
    let mut anchor_self = 0.0;
    for (k, c) in candidates.iter().enumerate() {
        let dz = exps[k] / total - if k == 0 { 1.0 } else { 0.0 };
        let ds = dz / tau;
        // d cos(a, c) / da = c / (|a||c|) - cos * a / |a|^2, symmetric in c
        axpy(&mut anchor_grad, ds / (na * norms[k]), c);
        anchor_self -= ds * sims[k] / (na * na);
        on_anchor.push(ds / (na * norms[k]));
        on_self.push(-ds * sims[k] / (norms[k] * norms[k]));
    }
    axpy(&mut anchor_grad, anchor_self, anchor);
    Ok(InfoNceCoefs {
        loss,
        anchor_grad,
        on_anchor,
        on_self,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceOutput {
    pub loss: f64,
    pub grad_anchor: Vec<f64>,
    pub grad_positive: Vec<f64>,
    pub grad_negatives: Vec<Vec<f64>>,
}

/// `-log softmax` of the positive among `{positive} ∪ negatives`, over cosine
/// similarities scaled by `1 / tau`. Stabilized by subtracting the largest logit.
pub fn info_nce(anchor: &[f64], positive: &[f64], negatives: &[&[f64]], tau: f64) -> Result<InfoNceOutput> {
    let mut candidates = Vec::with_capacity(negatives.len() + 1);
    candidates.push(positive);
    candidates.extend_from_slice(negatives);
    let coefs = info_nce_coefs(anchor, &candidates, tau)?;
    let mut grads = candidates.iter().enumerate().map(|(k, c)| {
        let mut g = vec![0.0; c.len()];
        axpy(&mut g, coefs.on_anchor[k], anchor);
        axpy(&mut g, coefs.on_self[k], c);
        g
    });
    let grad_positive = grads.next().unwrap();
    Ok(InfoNceOutput {
        loss: coefs.loss,
        grad_anchor: coefs.anchor_grad,
        grad_positive,
        grad_negatives: grads.collect(),
    })
}

/// Anchors and the normalization pool for one side of one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub anchors: Vec<usize>,
    pub pool: Vec<usize>,
    pub tau: f64,
}

impl ContrastiveBatch {
    /// Every distinct entity of the batch is both an anchor and a pool member.
    pub fn in_batch(entities: &[usize], tau: f64) -> Self {
        let distinct = dedup(entities);
        ContrastiveBatch {
            anchors: distinct.clone(),
            pool: distinct,
            tau,
        }
    }

    /// Anchors and pool range over all `n` entities.
    pub fn full(n: usize, tau: f64) -> Self {
        ContrastiveBatch {
            anchors: (0..n).collect(),
            pool: (0..n).collect(),
            tau,
        }
    }
}

fn dedup(ids: &[usize]) -> Vec<usize> {
    let mut seen = HashSet::new();
    ids.iter().copied().filter(|x| seen.insert(*x)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveOutput {
    /// Sum of per-anchor losses.
    pub sum: f64,
    /// Number of anchors that contributed.
    pub count: usize,
    /// Gradients of `sum`.
    pub grads: Gradients,
}

impl ContrastiveOutput {
    fn empty() -> Self {
        ContrastiveOutput {
            sum: 0.0,
            count: 0,
            grads: Gradients::new(),
        }
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }
}

/// Shared driver: for each anchor `x`, InfoNCE of `anchor_vec(x)` against the
/// target rows of every pool member, with `x`'s own target as the positive.
fn pooled_info_nce(
    params: &ParameterSet,
    anchors: &[usize],
    pool: &[usize],
    tau: f64,
    anchor_table: Table,
    target_table: impl Fn(usize) -> Table,
) -> Result<ContrastiveOutput> {
    let mut out = ContrastiveOutput::empty();
    for &x in anchors {
        let anchor = params.row(anchor_table, x);
        let mut ids = Vec::with_capacity(pool.len() + 1);
        ids.push(x);
        ids.extend(pool.iter().copied().filter(|&y| y != x));
        let rows: Vec<&[f64]> = ids.iter().map(|&y| params.row(target_table(y), y)).collect();
        let c = info_nce_coefs(anchor, &rows, tau)?;
        out.sum += c.loss;
        out.count += 1;
        out.grads.add(anchor_table, x, 1.0, &c.anchor_grad);
        for (k, &y) in ids.iter().enumerate() {
            let t = target_table(y);
            out.grads.add(t, y, c.on_anchor[k], anchor);
            out.grads.add(t, y, c.on_self[k], rows[k]);
        }
    }
    Ok(out)
}

/// View-agreement loss: anchor `h1_x`, positive `h2_x`, negatives `h2_x'` for
/// the other pool members. Entities without a view pair are skipped.
pub fn review_contrastive_loss(
    side: Side,
    batch: &ContrastiveBatch,
    params: &ParameterSet,
    layout: &ViewLayout,
) -> Result<ContrastiveOutput> {
    let paired = |ids: &[usize]| -> Vec<usize> {
        dedup(ids)
            .into_iter()
            .filter(|&x| layout.kind(side, x) == ViewKind::Pair)
            .collect()
    };
    let anchors = paired(&batch.anchors);
    if anchors.is_empty() {
        return Ok(ContrastiveOutput::empty());
    }
    let pool = paired(&batch.pool);
    pooled_info_nce(params, &anchors, &pool, batch.tau, Table::view(side, 0), |_| {
        Table::view(side, 1)
    })
}

/// Which view row (0 or 1) stands in as each entity's review representation.
pub type ViewChoice = BTreeMap<usize, usize>;

/// Fair coin per entity with a view pair; single-review entities use slot 0.
/// Review-less entities draw nothing, so they never shift the random stream.
pub fn choose_alignment_views<R: Rng + ?Sized>(
    side: Side,
    batch: &ContrastiveBatch,
    layout: &ViewLayout,
    rng: &mut R,
) -> ViewChoice {
    let mut all = batch.anchors.clone();
    all.extend_from_slice(&batch.pool);
    let mut choice = ViewChoice::new();
    for x in dedup(&all) {
        match layout.kind(side, x) {
            ViewKind::Pair => {
                choice.insert(x, usize::from(rng.random::<bool>()));
            }
            ViewKind::Single => {
                choice.insert(x, 0);
            }
            ViewKind::None => {}
        }
    }
    choice
}

/// Alignment loss with a fixed view choice: anchor `e_x`, positive `h_x`,
/// negatives `h_x'` for the other pool members.
pub fn alignment_loss_with_views(
    side: Side,
    batch: &ContrastiveBatch,
    params: &ParameterSet,
    layout: &ViewLayout,
    choice: &ViewChoice,
) -> Result<ContrastiveOutput> {
    let with_reviews = |ids: &[usize]| -> Vec<usize> {
        dedup(ids)
            .into_iter()
            .filter(|&x| layout.kind(side, x) != ViewKind::None)
            .collect()
    };
    let anchors = with_reviews(&batch.anchors);
    if anchors.is_empty() {
        return Ok(ContrastiveOutput::empty());
    }
    let pool = with_reviews(&batch.pool);
    let view_of = |x: usize| -> Table {
        let k = choice.get(&x).copied().unwrap_or(0);
        Table::view(side, k)
    };
    pooled_info_nce(params, &anchors, &pool, batch.tau, Table::emb(side), view_of)
}

pub fn alignment_loss<R: Rng + ?Sized>(
    side: Side,
    batch: &ContrastiveBatch,
    params: &ParameterSet,
    layout: &ViewLayout,
    rng: &mut R,
) -> Result<ContrastiveOutput> {
    let choice = choose_alignment_views(side, batch, layout, rng);
    alignment_loss_with_views(side, batch, params, layout, &choice)
}
