//! Joint objective, parameter initialization and the mini-batch Adam loop.

mod adam;
mod config;

use std::collections::{BTreeSet, HashSet};

use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamState};
pub use config::{Ablations, AdamParams, TrainConfig, CONFIG_KEYS};

use crate::backbone::{bpr_loss, sample_negative, Backbone, Gradients, PairwiseSample, ParameterSet, Table, UserItemIndex};
use crate::contrastive::{alignment_loss, review_contrastive_loss, ContrastiveBatch, ContrastiveOutput};
use crate::corpus::{InteractionTable, ReviewEmbeddingStore, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate_split, NDCG_CUTOFF};
use crate::linalg::dot;
use crate::views::{dummy_vector, init_entity_embedding, pool_view, ReviewSets, Side, ViewAssignment, ViewKind, ViewLayout};

/// Random streams derived from the run seed. Each concern draws from its own
/// ChaCha8 stream so that toggling one part never shifts another.
pub const STREAM_INIT: u64 = 1;
/// Epoch shuffles and negative draws.
pub const STREAM_SAMPLING: u64 = 2;
/// Alignment view coin flips.
pub const STREAM_CONTRASTIVE: u64 = 3;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One mini-batch of training triples plus the distinct users and items it
/// touches, which form the in-batch contrastive pools.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub samples: Vec<PairwiseSample>,
    pub users: Vec<usize>,
    pub items: Vec<usize>,
}

impl Batch {
    pub fn from_samples(samples: Vec<PairwiseSample>) -> Self {
        let mut seen_u = HashSet::new();
        let mut seen_i = HashSet::new();
        let mut users = Vec::new();
        let mut items = Vec::new();
        for s in &samples {
            if seen_u.insert(s.user) {
                users.push(s.user);
            }
            for i in [s.pos, s.neg] {
                if seen_i.insert(i) {
                    items.push(i);
                }
            }
        }
        Batch { samples, users, items }
    }

    pub fn entities(&self, side: Side) -> &[usize] {
        match side {
            Side::User => &self.users,
            Side::Item => &self.items,
        }
    }
}

/// Sum and number of contributing terms for one loss component.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Term {
    pub sum: f64,
    pub count: usize,
}

impl Term {
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }
}

impl From<&ContrastiveOutput> for Term {
    fn from(o: &ContrastiveOutput) -> Self {
        Term { sum: o.sum, count: o.count }
    }
}

/// Value of every component of the joint objective for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    /// `cf.mean + l1 (rev means) + l2 (align means) + l3 reg`.
    pub total: f64,
    pub cf: Term,
    /// Indexed user, item.
    pub rev: [Term; 2],
    pub align: [Term; 2],
    /// Squared norm of the touched rows divided by the number of triples.
    pub reg: f64,
}

/// Everything besides parameters and configuration that the loss needs.
#[derive(Debug, Clone)]
pub struct ModelContext {
    pub backbone: Backbone,
    pub layout: ViewLayout,
}

impl TrainConfig {
    pub fn side_active(&self, side: Side) -> bool {
        match side {
            Side::User => !self.ablations.no_user_cl,
            Side::Item => !self.ablations.no_item_cl,
        }
    }
}

fn side_index(side: Side) -> usize {
    match side {
        Side::User => 0,
        Side::Item => 1,
    }
}

fn contrastive_batch(batch: &Batch, side: Side, params: &ParameterSet, cfg: &TrainConfig) -> ContrastiveBatch {
    if cfg.full_normalization {
        let n = match side {
            Side::User => params.num_users(),
            Side::Item => params.num_items(),
        };
        ContrastiveBatch::full(n, cfg.tau)
    } else {
        ContrastiveBatch::in_batch(batch.entities(side), cfg.tau)
    }
}

/// Joint objective for one batch and its gradient.
///
/// Each component is averaged over its own terms (triples for the pairwise
/// loss, anchors for the contrastive losses). The L2 term covers the layer-0
/// rows of the batch's users and items plus every row a contrastive term
/// read, each counted once, divided by the number of triples.
pub fn total_loss<R: Rng + ?Sized>(
    batch: &Batch,
    params: &ParameterSet,
    ctx: &ModelContext,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(LossBreakdown, Gradients)> {
    let cf = bpr_loss(&batch.samples, params, &ctx.backbone)?;
    let n = cf.count.max(1) as f64;
    let mut grads = Gradients::new();
    grads.merge_scaled(&cf.grads, 1.0 / n);
    let mut out = LossBreakdown {
        cf: Term { sum: cf.sum, count: cf.count },
        ..Default::default()
    };

    let mut touched: BTreeSet<(Table, usize)> = BTreeSet::new();
    for s in &batch.samples {
        touched.insert((Table::UserEmb, s.user));
        touched.insert((Table::ItemEmb, s.pos));
        touched.insert((Table::ItemEmb, s.neg));
    }

    let mut contrastive = 0.0;
    for side in Side::BOTH {
        if !cfg.side_active(side) {
            continue;
        }
        let k = side_index(side);
        let cb = contrastive_batch(batch, side, params, cfg);
        if cfg.lambda1 > 0.0 {
            let rev = review_contrastive_loss(side, &cb, params, &ctx.layout)?;
            out.rev[k] = Term::from(&rev);
            if rev.count > 0 {
                grads.merge_scaled(&rev.grads, cfg.lambda1 / rev.count as f64);
                contrastive += cfg.lambda1 * rev.mean();
            }
            collect_rows(&rev.grads, &mut touched);
        }
        if cfg.lambda2 > 0.0 {
            let align = alignment_loss(side, &cb, params, &ctx.layout, rng)?;
            out.align[k] = Term::from(&align);
            if align.count > 0 {
                grads.merge_scaled(&align.grads, cfg.lambda2 / align.count as f64);
                contrastive += cfg.lambda2 * align.mean();
            }
            collect_rows(&align.grads, &mut touched);
        }
    }

    if cfg.lambda3 > 0.0 {
        let mut reg = 0.0;
        for &(t, r) in &touched {
            let row = params.row(t, r);
            reg += dot(row, row);
            grads.add(t, r, 2.0 * cfg.lambda3 / n, row);
        }
        out.reg = reg / n;
    }

    out.total = cf.mean() + contrastive + cfg.lambda3 * out.reg;
    if !out.total.is_finite() {
        return Err(Error::NonFiniteValue {
            what: format!(
                "batch loss (cf {}, rev {:?}, align {:?}, reg {})",
                cf.mean(),
                out.rev,
                out.align,
                out.reg
            ),
        });
    }
    Ok((out, grads))
}

fn collect_rows(g: &Gradients, touched: &mut BTreeSet<(Table, usize)>) {
    for t in Table::ALL {
        touched.extend(g.rows(t).keys().map(|r| (t, *r)));
    }
}

/// Collaborative embeddings from review means (dummy vector when an entity has
/// no reviews, Xavier-uniform under `no_text_init`); view tables from the
/// pooled views. Single-review entities keep their one review in view slot 0.
pub fn initialize_params(
    table: &InteractionTable,
    sets: &ReviewSets,
    views: &ViewAssignment,
    store: &ReviewEmbeddingStore,
    cfg: &TrainConfig,
) -> Result<ParameterSet> {
    if store.dim() != cfg.dim {
        return Err(Error::StoreDim {
            store: store.dim(),
            model: cfg.dim,
        });
    }
    let d = cfg.dim;
    let mut rng = stream_rng(cfg.seed, STREAM_INIT);
    let mut params = ParameterSet::zeros(table.num_users, table.num_items, d);
    let layout = ViewLayout::new(sets, views);

    for side in Side::BOTH {
        let lists = sets.side(side);
        let emb = params.table_mut(Table::emb(side));
        if cfg.ablations.no_text_init {
            let bound = (6.0 / (emb.rows() + d) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            for v in emb.as_mut_slice() {
                *v = dist.sample(&mut rng);
            }
        } else {
            for (x, reviews) in lists.iter().enumerate() {
                let dummy = if reviews.is_empty() {
                    dummy_vector(d, &mut rng)
                } else {
                    vec![0.0; d]
                };
                let init = init_entity_embedding(reviews, store, &dummy)?;
                emb.row_mut(x).copy_from_slice(&init);
            }
        }

        for (x, kind) in layout.side(side).iter().enumerate() {
            match kind {
                ViewKind::Pair => {
                    let pair = views.side(side)[x].as_ref().expect("pair kind has views");
                    for k in 0..2 {
                        let pooled = pool_view(pair.view(k), store)?;
                        params.table_mut(Table::view(side, k)).row_mut(x).copy_from_slice(&pooled);
                    }
                }
                ViewKind::Single => {
                    let pooled = pool_view(&lists[x], store)?;
                    params.table_mut(Table::view(side, 0)).row_mut(x).copy_from_slice(&pooled);
                }
                ViewKind::None => {}
            }
        }
        params.has_views[side_index(side)] = layout.any_views(side);
    }
    Ok(params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over batches of the joint objective.
    pub train_loss: f64,
    /// Mean over batches of the per-triple pairwise loss.
    #[serde(rename = "L_cf")]
    pub l_cf: f64,
    /// Unnormalized pairwise loss summed over the epoch.
    #[serde(rename = "L_cf_sum")]
    pub l_cf_sum: f64,
    /// Mean over batches of user + item view-agreement loss.
    #[serde(rename = "L_rev")]
    pub l_rev: f64,
    /// Mean over batches of user + item alignment loss.
    #[serde(rename = "L_align")]
    pub l_align: f64,
    pub valid_ndcg5: Option<f64>,
}

/// Training state for one run. [`train`] drives it to completion; the
/// per-epoch entry point is public so timing and inspection can use it.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub params: ParameterSet,
    pub ctx: ModelContext,
    table: &'a InteractionTable,
    train_pairs: Vec<(usize, usize)>,
    index: UserItemIndex,
    adam: AdamState,
    sampling_rng: ChaCha8Rng,
    contrastive_rng: ChaCha8Rng,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        table: &'a InteractionTable,
        sets: &ReviewSets,
        views: &ViewAssignment,
        store: &ReviewEmbeddingStore,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let params = initialize_params(table, sets, views, store, cfg)?;
        Self::with_params(table, sets, views, params, cfg)
    }

    pub fn with_params(
        table: &'a InteractionTable,
        sets: &ReviewSets,
        views: &ViewAssignment,
        params: ParameterSet,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let train_pairs: Vec<_> = table.triples_in(Split::Train).map(|t| (t.user, t.item)).collect();
        if train_pairs.is_empty() {
            return Err(Error::invalid("no training interactions"));
        }
        let ctx = ModelContext {
            backbone: Backbone::new(cfg.backbone, table)?,
            layout: ViewLayout::new(sets, views),
        };
        Ok(Trainer {
            adam: AdamState::new(&params),
            params,
            ctx,
            table,
            index: UserItemIndex::from_table(table, Split::Train),
            train_pairs,
            sampling_rng: stream_rng(cfg.seed, STREAM_SAMPLING),
            contrastive_rng: stream_rng(cfg.seed, STREAM_CONTRASTIVE),
            cfg: cfg.clone(),
            epoch: 0,
        })
    }

    /// Shuffles the training interactions, draws a fresh negative per
    /// interaction and takes one Adam step per batch.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        self.epoch += 1;
        let epoch = self.epoch;
        let snapshot = self.params.clone();
        let diverged = |reason: String, last_good: ParameterSet| Error::Diverged {
            epoch,
            reason,
            last_good: Box::new(last_good),
        };

        self.train_pairs.shuffle(&mut self.sampling_rng);
        let mut rec = EpochRecord {
            epoch,
            train_loss: 0.0,
            l_cf: 0.0,
            l_cf_sum: 0.0,
            l_rev: 0.0,
            l_align: 0.0,
            valid_ndcg5: None,
        };
        let mut batches = 0usize;
        for chunk in self.train_pairs.chunks(self.cfg.batch_size) {
            let mut samples = Vec::with_capacity(chunk.len());
            for &(user, pos) in chunk {
                let neg = sample_negative(user, &self.index, &mut self.sampling_rng)?;
                samples.push(PairwiseSample { user, pos, neg });
            }
            let batch = Batch::from_samples(samples);
            let (loss, grads) = match total_loss(&batch, &self.params, &self.ctx, &self.cfg, &mut self.contrastive_rng) {
                Ok(v) => v,
                Err(Error::NonFiniteValue { what }) => return Err(diverged(what, snapshot)),
                Err(e) => return Err(e),
            };
            adam_step(&mut self.params, &grads, &mut self.adam, self.cfg.lr, &self.cfg.adam);
            if !self.params.all_finite() {
                return Err(diverged("non-finite parameters after update".into(), snapshot));
            }
            rec.train_loss += loss.total;
            rec.l_cf += loss.cf.mean();
            rec.l_cf_sum += loss.cf.sum;
            rec.l_rev += loss.rev[0].mean() + loss.rev[1].mean();
            rec.l_align += loss.align[0].mean() + loss.align[1].mean();
            batches += 1;
        }
        let b = batches as f64;
        rec.train_loss /= b;
        rec.l_cf /= b;
        rec.l_rev /= b;
        rec.l_align /= b;
        Ok(rec)
    }

    /// Validation NDCG@5, or `None` when no user has validation items.
    pub fn validate(&self) -> Result<Option<f64>> {
        let (users, items) = self.ctx.backbone.scoring_tables(&self.params);
        match evaluate_split(&users, &items, self.table, Split::Valid, &[NDCG_CUTOFF], &[Split::Train]) {
            Ok(report) => Ok(Some(report.cutoff(NDCG_CUTOFF).expect("cutoff requested").ndcg.mean)),
            Err(Error::NoEvaluableUsers) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Parameters of the best validation epoch (the last epoch without validation data).
    pub params: ParameterSet,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub context: ModelContext,
}

/// Runs epochs until `cfg.epochs` or until validation NDCG@5 has not improved
/// for `cfg.patience` epochs.
pub fn train(
    table: &InteractionTable,
    sets: &ReviewSets,
    views: &ViewAssignment,
    store: &ReviewEmbeddingStore,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    let trainer = Trainer::new(table, sets, views, store, cfg)?;
    run_training(trainer)
}

pub fn run_training(mut trainer: Trainer<'_>) -> Result<TrainOutput> {
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParameterSet)> = None;
    let mut since_best = 0usize;
    let mut last_epoch = 0;
    for _ in 0..trainer.cfg.epochs {
        let mut rec = trainer.run_epoch()?;
        rec.valid_ndcg5 = trainer.validate()?;
        last_epoch = rec.epoch;
        if let Some(ndcg) = rec.valid_ndcg5 {
            if best.as_ref().is_none_or(|(b, _, _)| ndcg > *b) {
                best = Some((ndcg, rec.epoch, trainer.params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
            }
        }
        let valid = rec.valid_ndcg5.map_or_else(|| "none".to_string(), |v| format!("{v:.6}"));
        log::info!("epoch={} loss={:.6} l_cf={:.6} valid_ndcg5={valid}", rec.epoch, rec.train_loss, rec.l_cf);
        history.push(rec);
        if best.is_some() && since_best >= trainer.cfg.patience {
            break;
        }
    }
    let (params, best_epoch) = match best {
        Some((_, epoch, params)) => (params, epoch),
        None => (trainer.params.clone(), last_epoch),
    };
    Ok(TrainOutput {
        params,
        history,
        best_epoch,
        context: trainer.ctx,
    })
}
