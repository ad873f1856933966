//! Collaborative backbone: parameter tables, inner-product scoring, LightGCN
//! propagation and the pairwise BPR loss with analytic gradients.

use std::borrow::Cow;
use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{InteractionTable, Split};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, sigmoid, softplus, Matrix};
use crate::views::Side;

/// Identifies one trainable table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Table {
    UserEmb,
    ItemEmb,
    UserView1,
    UserView2,
    ItemView1,
    ItemView2,
}

impl Table {
    pub const ALL: [Table; 6] = [
        Table::UserEmb,
        Table::ItemEmb,
        Table::UserView1,
        Table::UserView2,
        Table::ItemView1,
        Table::ItemView2,
    ];

    pub fn emb(side: Side) -> Table {
        match side {
            Side::User => Table::UserEmb,
            Side::Item => Table::ItemEmb,
        }
    }

    /// View table `k` (0 or 1) of `side`.
    pub fn view(side: Side, k: usize) -> Table {
        match (side, k) {
            (Side::User, 0) => Table::UserView1,
            (Side::User, _) => Table::UserView2,
            (Side::Item, 0) => Table::ItemView1,
            (Side::Item, _) => Table::ItemView2,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Every trainable tensor: collaborative embeddings and the two view-level
/// representation tables per side.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    dim: usize,
    tables: [Matrix; 6],
    /// Whether the view tables of each side carry data (user, item).
    pub has_views: [bool; 2],
}

impl ParameterSet {
    pub fn zeros(num_users: usize, num_items: usize, dim: usize) -> Self {
        let u = || Matrix::zeros(num_users, dim);
        let i = || Matrix::zeros(num_items, dim);
        ParameterSet {
            dim,
            tables: [u(), i(), u(), u(), i(), i()],
            has_views: [false, false],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_users(&self) -> usize {
        self.tables[0].rows()
    }

    pub fn num_items(&self) -> usize {
        self.tables[1].rows()
    }

    pub fn table(&self, t: Table) -> &Matrix {
        &self.tables[t.index()]
    }

    pub fn table_mut(&mut self, t: Table) -> &mut Matrix {
        &mut self.tables[t.index()]
    }

    pub fn row(&self, t: Table, r: usize) -> &[f64] {
        self.tables[t.index()].row(r)
    }

    pub fn all_finite(&self) -> bool {
        self.tables.iter().all(Matrix::all_finite)
    }
}

pub type SparseRows = BTreeMap<usize, Vec<f64>>;

/// Row-sparse gradients for every table. Rows are kept in id order so
/// reductions and updates happen in a fixed order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    tables: [SparseRows; 6],
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    /// `grad[t][row] += scale * v`, creating the row when absent.
    pub fn add(&mut self, t: Table, row: usize, scale: f64, v: &[f64]) {
        let entry = self.tables[t.index()]
            .entry(row)
            .or_insert_with(|| vec![0.0; v.len()]);
        axpy(entry, scale, v);
    }

    /// Marks a row as touched without changing its value.
    pub fn touch(&mut self, t: Table, row: usize, dim: usize) {
        self.tables[t.index()].entry(row).or_insert_with(|| vec![0.0; dim]);
    }

    pub fn merge_scaled(&mut self, other: &Gradients, scale: f64) {
        for t in Table::ALL {
            for (row, v) in other.rows(t) {
                self.add(t, *row, scale, v);
            }
        }
    }

    pub fn rows(&self, t: Table) -> &SparseRows {
        &self.tables[t.index()]
    }

    pub fn get(&self, t: Table, row: usize) -> Option<&[f64]> {
        self.tables[t.index()].get(&row).map(Vec::as_slice)
    }

    pub fn is_empty(&self) -> bool {
        self.tables.iter().all(BTreeMap::is_empty)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum BackboneKind {
    Mf,
    LightGcn { layers: usize },
}

/// Inner-product ranking score.
pub fn score(user: &[f64], item: &[f64]) -> f64 {
    assert_eq!(user.len(), item.len(), "score: dimension mismatch");
    dot(user, item)
}

/// Symmetric-normalized user-item adjacency built from training interactions.
#[derive(Debug, Clone)]
pub struct BipartiteGraph {
    user_adj: Vec<Vec<(usize, f64)>>,
    item_adj: Vec<Vec<(usize, f64)>>,
}

impl BipartiteGraph {
    pub fn from_edges(num_users: usize, num_items: usize, edges: &[(usize, usize)]) -> Self {
        let mut user_deg = vec![0usize; num_users];
        let mut item_deg = vec![0usize; num_items];
        for &(u, i) in edges {
            user_deg[u] += 1;
            item_deg[i] += 1;
        }
        let mut user_adj = vec![Vec::new(); num_users];
        let mut item_adj = vec![Vec::new(); num_items];
        for &(u, i) in edges {
            let w = 1.0 / ((user_deg[u] * item_deg[i]) as f64).sqrt();
            user_adj[u].push((i, w));
            item_adj[i].push((u, w));
        }
        BipartiteGraph { user_adj, item_adj }
    }

    pub fn from_train(table: &InteractionTable) -> Self {
        let edges: Vec<_> = table.triples_in(Split::Train).map(|t| (t.user, t.item)).collect();
        Self::from_edges(table.num_users, table.num_items, &edges)
    }

    fn hop(adj: &[Vec<(usize, f64)>], own: &Matrix, other: &Matrix) -> Matrix {
        let mut next = Matrix::zeros(own.rows(), own.cols());
        for (x, nbrs) in adj.iter().enumerate() {
            let out = next.row_mut(x);
            if nbrs.is_empty() {
                out.copy_from_slice(own.row(x));
            } else {
                for &(y, w) in nbrs {
                    axpy(out, w, other.row(y));
                }
            }
        }
        next
    }

    /// Layer-mean of repeated normalized neighbor averaging. Degree-zero nodes
    /// carry their own embedding through every layer.
    ///
    /// The operator is linear and self-adjoint, so the same call also maps
    /// output gradients back onto the layer-0 tables.
    pub fn propagate(&self, users: &Matrix, items: &Matrix, layers: usize) -> (Matrix, Matrix) {
        let mut acc_u = users.clone();
        let mut acc_i = items.clone();
        let mut cur_u = Cow::Borrowed(users);
        let mut cur_i = Cow::Borrowed(items);
        for _ in 0..layers {
            let next_u = Self::hop(&self.user_adj, &cur_u, &cur_i);
            let next_i = Self::hop(&self.item_adj, &cur_i, &cur_u);
            axpy(acc_u.as_mut_slice(), 1.0, next_u.as_slice());
            axpy(acc_i.as_mut_slice(), 1.0, next_i.as_slice());
            cur_u = Cow::Owned(next_u);
            cur_i = Cow::Owned(next_i);
        }
        let scale = 1.0 / (layers + 1) as f64;
        acc_u.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
        acc_i.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
        (acc_u, acc_i)
    }
}

pub fn lightgcn_propagate(
    params: &ParameterSet,
    graph: &BipartiteGraph,
    layers: usize,
) -> Result<(Matrix, Matrix)> {
    if layers == 0 {
        return Err(Error::invalid("LightGCN needs at least one layer"));
    }
    Ok(graph.propagate(params.table(Table::UserEmb), params.table(Table::ItemEmb), layers))
}

/// Backbone variant plus whatever structure it needs.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub kind: BackboneKind,
    graph: Option<BipartiteGraph>,
}

impl Backbone {
    pub fn new(kind: BackboneKind, table: &InteractionTable) -> Result<Self> {
        let graph = match kind {
            BackboneKind::Mf => None,
            BackboneKind::LightGcn { layers: 0 } => {
                return Err(Error::invalid("LightGCN needs at least one layer"))
            }
            BackboneKind::LightGcn { .. } => Some(BipartiteGraph::from_train(table)),
        };
        Ok(Backbone { kind, graph })
    }

    pub fn mf() -> Self {
        Backbone {
            kind: BackboneKind::Mf,
            graph: None,
        }
    }

    pub fn with_graph(layers: usize, graph: BipartiteGraph) -> Self {
        Backbone {
            kind: BackboneKind::LightGcn { layers },
            graph: Some(graph),
        }
    }

    /// User and item tables used for scoring.
    pub fn scoring_tables<'a>(&self, params: &'a ParameterSet) -> (Cow<'a, Matrix>, Cow<'a, Matrix>) {
        match (self.kind, &self.graph) {
            (BackboneKind::LightGcn { layers }, Some(g)) => {
                let (u, i) = g.propagate(params.table(Table::UserEmb), params.table(Table::ItemEmb), layers);
                (Cow::Owned(u), Cow::Owned(i))
            }
            _ => (
                Cow::Borrowed(params.table(Table::UserEmb)),
                Cow::Borrowed(params.table(Table::ItemEmb)),
            ),
        }
    }
}

/// A training triple: `user` interacted with `pos` but not with `neg`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairwiseSample {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BprOutput {
    /// Unnormalized sum over the batch.
    pub sum: f64,
    pub count: usize,
    /// Gradients of `sum` with respect to the layer-0 embedding tables.
    pub grads: Gradients,
}

impl BprOutput {
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }
}

/// `sum -ln sigmoid(s(u,i) - s(u,j))` over the batch, with gradients composed
/// through propagation when the backbone is LightGCN.
pub fn bpr_loss(batch: &[PairwiseSample], params: &ParameterSet, backbone: &Backbone) -> Result<BprOutput> {
    let (users, items) = backbone.scoring_tables(params);
    let dim = params.dim();
    let mut sum = 0.0;
    let mut out_grads = Gradients::new();
    let mut diff = vec![0.0; dim];
    for s in batch {
        let eu = users.row(s.user);
        let ei = items.row(s.pos);
        let ej = items.row(s.neg);
        let delta = dot(eu, ei) - dot(eu, ej);
        if !delta.is_finite() {
            return Err(Error::NonFiniteValue {
                what: format!("score for user {} (items {}, {})", s.user, s.pos, s.neg),
            });
        }
        sum += softplus(-delta);
        // d/d(delta) of -ln sigmoid(delta)
        let g = -sigmoid(-delta);
        for ((d, a), b) in diff.iter_mut().zip(ei).zip(ej) {
            *d = a - b;
        }
        out_grads.add(Table::UserEmb, s.user, g, &diff);
        out_grads.add(Table::ItemEmb, s.pos, g, eu);
        out_grads.add(Table::ItemEmb, s.neg, -g, eu);
    }
    let grads = match (backbone.kind, &backbone.graph) {
        (BackboneKind::LightGcn { layers }, Some(graph)) => {
            backprop_propagation(&out_grads, graph, layers, params.num_users(), params.num_items(), dim)
        }
        _ => out_grads,
    };
    Ok(BprOutput {
        sum,
        count: batch.len(),
        grads,
    })
}

fn backprop_propagation(
    out: &Gradients,
    graph: &BipartiteGraph,
    layers: usize,
    num_users: usize,
    num_items: usize,
    dim: usize,
) -> Gradients {
    let dense = |t: Table, rows: usize| {
        let mut m = Matrix::zeros(rows, dim);
        for (r, v) in out.rows(t) {
            m.row_mut(*r).copy_from_slice(v);
        }
        m
    };
    let (gu, gi) = graph.propagate(&dense(Table::UserEmb, num_users), &dense(Table::ItemEmb, num_items), layers);
    let mut grads = Gradients::new();
    for (t, m) in [(Table::UserEmb, &gu), (Table::ItemEmb, &gi)] {
        for r in 0..m.rows() {
            let row = m.row(r);
            if row.iter().any(|v| *v != 0.0) || out.get(t, r).is_some() {
                grads.add(t, r, 1.0, row);
            }
        }
    }
    grads
}

/// Sorted training items per user, for negative sampling and exclusions.
#[derive(Debug, Clone)]
pub struct UserItemIndex {
    pub num_items: usize,
    pub items: Vec<Vec<usize>>,
}

impl UserItemIndex {
    pub fn from_table(table: &InteractionTable, split: Split) -> Self {
        UserItemIndex {
            num_items: table.num_items,
            items: table.items_by_user(split),
        }
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.items[user].binary_search(&item).is_ok()
    }
}

/// Uniform draw over the items `user` has not interacted with in training.
pub fn sample_negative<R: Rng + ?Sized>(user: usize, index: &UserItemIndex, rng: &mut R) -> Result<usize> {
    if index.items[user].len() >= index.num_items {
        return Err(Error::NoNegative(user));
    }
    loop {
        let j = rng.random_range(0..index.num_items);
        if !index.contains(user, j) {
            return Ok(j);
        }
    }
}
