//! Per-entity review sets, the two disjoint review views, mean pooling and
//! review masking for the missing-review experiments.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{InteractionTable, ReviewEmbeddingStore, Split};
use crate::error::{Error, Result};

/// Which entity table a quantity belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    User,
    Item,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::User, Side::Item];

    pub fn name(self) -> &'static str {
        match self {
            Side::User => "user",
            Side::Item => "item",
        }
    }
}

/// Review ids written by each user and written for each item.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ReviewSets {
    pub users: Vec<Vec<usize>>,
    pub items: Vec<Vec<usize>>,
}

impl ReviewSets {
    pub fn side(&self, side: Side) -> &[Vec<usize>] {
        match side {
            Side::User => &self.users,
            Side::Item => &self.items,
        }
    }

    /// Number of distinct reviews (each review sits in one user list and one item list).
    pub fn total_reviews(&self) -> usize {
        self.users.iter().map(Vec::len).sum()
    }
}

/// Groups the reviews attached to training interactions by user and by item.
///
/// Reviews of validation and test interactions are left out so that held-out
/// interactions do not leak into initialization or contrastive views.
pub fn build_review_sets(table: &InteractionTable) -> ReviewSets {
    let mut sets = ReviewSets {
        users: vec![Vec::new(); table.num_users],
        items: vec![Vec::new(); table.num_items],
    };
    let mut seen = HashSet::new();
    for t in table.triples_in(Split::Train) {
        if let Some(r) = t.review {
            assert!(seen.insert(r), "review {r} attached to more than one interaction");
            sets.users[t.user].push(r);
            sets.items[t.item].push(r);
        }
    }
    sets
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewPair {
    pub first: Vec<usize>,
    pub second: Vec<usize>,
}

impl ViewPair {
    pub fn view(&self, k: usize) -> &[usize] {
        if k == 0 {
            &self.first
        } else {
            &self.second
        }
    }
}

/// The disjoint, equal-size view pair of every entity with at least two reviews.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ViewAssignment {
    pub users: Vec<Option<ViewPair>>,
    pub items: Vec<Option<ViewPair>>,
}

impl ViewAssignment {
    pub fn side(&self, side: Side) -> &[Option<ViewPair>] {
        match side {
            Side::User => &self.users,
            Side::Item => &self.items,
        }
    }

    /// Tab-separated dump: `entity_kind, entity_id, view_index, review_ids(csv)`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for side in Side::BOTH {
            for (id, pair) in self.side(side).iter().enumerate() {
                let Some(pair) = pair else { continue };
                for k in 0..2 {
                    let ids: Vec<String> = pair.view(k).iter().map(usize::to_string).collect();
                    let _ = writeln!(out, "{}\t{}\t{}\t{}", side.name(), id, k + 1, ids.join(","));
                }
            }
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Shuffles each entity's reviews and cuts them into two halves of size
/// `floor(n / 2)`. With odd `n` the last shuffled review is left out.
pub fn sample_views(sets: &ReviewSets, seed: u64) -> ViewAssignment {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split_side = |lists: &[Vec<usize>]| -> Vec<Option<ViewPair>> {
        lists
            .iter()
            .map(|reviews| {
                let half = reviews.len() / 2;
                if half == 0 {
                    return None;
                }
                let mut shuffled = reviews.clone();
                shuffled.shuffle(&mut rng);
                Some(ViewPair {
                    first: shuffled[..half].to_vec(),
                    second: shuffled[half..2 * half].to_vec(),
                })
            })
            .collect()
    };
    let users = split_side(&sets.users);
    let items = split_side(&sets.items);
    ViewAssignment { users, items }
}

/// Component-wise mean of the stored vectors of `view`.
pub fn pool_view(view: &[usize], store: &ReviewEmbeddingStore) -> Result<Vec<f64>> {
    if view.is_empty() {
        return Err(Error::invalid("cannot pool an empty view"));
    }
    let mut acc = vec![0.0; store.dim()];
    for &r in view {
        let v = store.get(r as u64).ok_or(Error::MissingReview(r as u64))?;
        for (a, x) in acc.iter_mut().zip(v) {
            *a += f64::from(*x);
        }
    }
    let n = view.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Mean of the entity's review vectors, or `dummy` when it has none.
pub fn init_entity_embedding(
    reviews: &[usize],
    store: &ReviewEmbeddingStore,
    dummy: &[f64],
) -> Result<Vec<f64>> {
    if dummy.len() != store.dim() {
        return Err(Error::DimMismatch {
            expected: store.dim(),
            found: dummy.len(),
        });
    }
    if reviews.is_empty() {
        Ok(dummy.to_vec())
    } else {
        pool_view(reviews, store)
    }
}

pub const DUMMY_JITTER_STD: f64 = 0.01;

/// Zero vector plus N(0, 0.01²) jitter.
pub fn dummy_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, DUMMY_JITTER_STD).expect("valid std");
    (0..dim).map(|_| normal.sample(rng)).collect()
}

/// Removes `floor(fraction * total)` reviews chosen uniformly, from both the
/// owning user's and the owning item's list.
pub fn mask_reviews(sets: &ReviewSets, fraction: f64, seed: u64) -> Result<ReviewSets> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(format!("mask fraction {fraction} outside [0, 1]")));
    }
    let mut all: Vec<usize> = sets.users.iter().flatten().copied().collect();
    all.sort_unstable();
    let remove = (fraction * all.len() as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    let removed: HashSet<usize> = all[..remove].iter().copied().collect();
    let keep = |lists: &[Vec<usize>]| -> Vec<Vec<usize>> {
        lists
            .iter()
            .map(|l| l.iter().copied().filter(|r| !removed.contains(r)).collect())
            .collect()
    };
    Ok(ReviewSets {
        users: keep(&sets.users),
        items: keep(&sets.items),
    })
}

/// How much review signal an entity carries into the contrastive losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewKind {
    /// No reviews: excluded from both contrastive losses.
    None,
    /// One review: pooled into view slot 0, used by the alignment loss only.
    Single,
    /// A disjoint view pair: used by both losses.
    Pair,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewLayout {
    pub users: Vec<ViewKind>,
    pub items: Vec<ViewKind>,
}

impl ViewLayout {
    pub fn new(sets: &ReviewSets, views: &ViewAssignment) -> Self {
        let kinds = |lists: &[Vec<usize>], pairs: &[Option<ViewPair>]| {
            lists
                .iter()
                .zip(pairs)
                .map(|(l, p)| match (l.len(), p) {
                    (_, Some(_)) => ViewKind::Pair,
                    (1, None) => ViewKind::Single,
                    _ => ViewKind::None,
                })
                .collect()
        };
        ViewLayout {
            users: kinds(&sets.users, &views.users),
            items: kinds(&sets.items, &views.items),
        }
    }

    pub fn side(&self, side: Side) -> &[ViewKind] {
        match side {
            Side::User => &self.users,
            Side::Item => &self.items,
        }
    }

    pub fn kind(&self, side: Side, id: usize) -> ViewKind {
        self.side(side)[id]
    }

    pub fn any_views(&self, side: Side) -> bool {
        self.side(side).iter().any(|k| *k != ViewKind::None)
    }
}
