#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use recafr_core::backbone::{Gradients, ParameterSet, Table};
use recafr_core::corpus::{split, InteractionTable, RawInteraction, ReviewEmbeddingStore, Split, SplitRatios, Triple};
use recafr_core::linalg::Matrix;
use recafr_core::views::{ViewKind, ViewLayout};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = Normal::new(0.0, 1.0).unwrap();
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| n.sample(rng)).collect())
}

/// Every table filled with standard normal entries.
pub fn random_params(users: usize, items: usize, dim: usize, seed: u64) -> ParameterSet {
    let mut r = rng(seed);
    let mut p = ParameterSet::zeros(users, items, dim);
    for t in Table::ALL {
        let rows = p.table(t).rows();
        *p.table_mut(t) = gaussian_matrix(rows, dim, &mut r);
    }
    p.has_views = [true, true];
    p
}

pub fn uniform_layout(users: usize, items: usize, kind: ViewKind) -> ViewLayout {
    ViewLayout {
        users: vec![kind; users],
        items: vec![kind; items],
    }
}

/// Central finite differences over every coordinate of every table; returns
/// the worst relative error against `analytic` (missing rows count as zero).
/// Coordinates where both values are below `floor` in magnitude are skipped.
pub fn max_gradient_error(
    params: &ParameterSet,
    analytic: &Gradients,
    h: f64,
    floor: f64,
    f: impl Fn(&ParameterSet) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    let mut p = params.clone();
    for t in Table::ALL {
        let (rows, cols) = (params.table(t).rows(), params.table(t).cols());
        for r in 0..rows {
            for c in 0..cols {
                let orig = params.table(t).row(r)[c];
                p.table_mut(t).row_mut(r)[c] = orig + h;
                let plus = f(&p);
                p.table_mut(t).row_mut(r)[c] = orig - h;
                let minus = f(&p);
                p.table_mut(t).row_mut(r)[c] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let exact = analytic.get(t, r).map_or(0.0, |g| g[c]);
                let scale = numeric.abs().max(exact.abs());
                if scale < floor {
                    continue;
                }
                let err = (numeric - exact).abs() / scale;
                if err > worst {
                    worst = err;
                }
            }
        }
    }
    worst
}

/// Cosine similarity computed directly, without the crate's kernels.
pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    ab / (aa.sqrt() * bb.sqrt())
}

/// Term-by-term InfoNCE sum: for each anchor `x`,
/// `-log(exp(sim(a_x, t_x)/tau) / sum_{y in universe} exp(sim(a_x, t_y)/tau))`.
pub fn brute_force_contrastive(
    universe: &[usize],
    anchor: impl Fn(usize) -> Vec<f64>,
    target: impl Fn(usize) -> Vec<f64>,
    tau: f64,
) -> f64 {
    let mut total = 0.0;
    for &x in universe {
        let a = anchor(x);
        let num = (cos(&a, &target(x)) / tau).exp();
        let den: f64 = universe.iter().map(|&y| (cos(&a, &target(y)) / tau).exp()).sum();
        total += -(num / den).ln();
    }
    total
}

/// Planted two-cluster data: users and items are split into two halves;
/// each user interacts mostly with items of its own half, preferring items
/// whose signature aligns with its own. Every interaction
/// carries a unit-norm review vector mixing the user's cluster signature with
/// per-user and per-item signatures plus Gaussian noise.
pub struct Planted {
    pub table: InteractionTable,
    pub store: ReviewEmbeddingStore,
}

pub struct PlantedSpec {
    pub users: usize,
    pub items: usize,
    pub per_user: usize,
    /// Probability that an interaction goes to the other cluster.
    pub cross: f64,
    /// Weight of the planted user-item affinity in in-cluster choices.
    pub affinity: f64,
    pub dim: usize,
    pub noise: f64,
    pub ratios: SplitRatios,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        PlantedSpec {
            users: 40,
            items: 40,
            per_user: 8,
            cross: 0.1,
            affinity: 3.0,
            dim: 16,
            noise: 0.5,
            ratios: SplitRatios {
                train: 0.8,
                valid: 0.1,
                test: 0.1,
            },
        }
    }
}

pub fn planted(spec: &PlantedSpec, seed: u64) -> Planted {
    let mut r = rng(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let sig = |r: &mut ChaCha8Rng| -> Vec<f64> { (0..spec.dim).map(|_| normal.sample(r)).collect() };
    let cluster_sig: Vec<Vec<f64>> = (0..2).map(|_| sig(&mut r)).collect();
    let user_sig: Vec<Vec<f64>> = (0..spec.users).map(|_| sig(&mut r)).collect();
    let item_sig: Vec<Vec<f64>> = (0..spec.items).map(|_| sig(&mut r)).collect();
    let cluster = |x: usize, n: usize| usize::from(x >= n / 2);

    let mut rows = Vec::new();
    let mut vectors = Vec::new();
    for (u, own_sig) in user_sig.iter().enumerate() {
        let cu = cluster(u, spec.users);
        // in-cluster picks follow planted affinity (Gumbel top-k), so reviews
        // carry preference signal beyond the cluster label
        let half = spec.items / 2;
        let mut keyed: Vec<(f64, usize)> = (0..half)
            .map(|k| {
                let i = cu * half + k;
                let aff: f64 = own_sig.iter().zip(&item_sig[i]).map(|(a, b)| a * b).sum::<f64>()
                    / (spec.dim as f64).sqrt();
                let gumbel = -(-(r.random::<f64>().max(1e-300)).ln()).ln();
                (spec.affinity * aff + gumbel, i)
            })
            .collect();
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut own = keyed.into_iter().map(|(_, i)| i);
        let mut chosen = std::collections::BTreeSet::new();
        while chosen.len() < spec.per_user {
            if r.random::<f64>() < spec.cross {
                chosen.insert((1 - cu) * half + r.random_range(0..half));
            } else if let Some(i) = own.next() {
                chosen.insert(i);
            }
        }
        for i in chosen {
            let raw: Vec<f64> = (0..spec.dim)
                .map(|c| cluster_sig[cu][c] + 0.8 * own_sig[c] + 0.8 * item_sig[i][c] + spec.noise * normal.sample(&mut r))
                .collect();
            // unit norm, like sentence-encoder output
            let len = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
            let v: Vec<f32> = raw.iter().map(|x| (x / len) as f32).collect();
            rows.push(RawInteraction {
                user_key: format!("u{u}"),
                item_key: format!("i{i}"),
                review_text: Some(format!("review {} {}", u, i)),
            });
            vectors.push(v);
        }
    }
    let table = split(&rows, spec.ratios, seed ^ 0x5eed).unwrap();
    let mut store = ReviewEmbeddingStore::new(spec.dim);
    for t in &table.triples {
        let rid = t.review.unwrap();
        // rows are in the same order as triples; review ids follow first appearance
        store.insert(rid as u64, vectors[rid].clone()).unwrap();
    }
    Planted { table, store }
}

/// Table from explicit `(user, item, split)` rows; every row gets a review
/// whose id is its position.
pub fn table_from(num_users: usize, num_items: usize, rows: &[(usize, usize, Split)]) -> InteractionTable {
    InteractionTable {
        num_users,
        num_items,
        num_reviews: rows.len(),
        triples: rows
            .iter()
            .enumerate()
            .map(|(r, &(user, item, split))| Triple {
                user,
                item,
                review: Some(r),
                split,
            })
            .collect(),
        user_keys: (0..num_users).map(|u| format!("u{u}")).collect(),
        item_keys: (0..num_items).map(|i| format!("i{i}")).collect(),
        review_keys: (0..rows.len()).map(|r| format!("review {r}")).collect(),
    }
}

/// All orderings of `items`.
pub fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for (k, &head) in items.iter().enumerate() {
        let mut rest = items.to_vec();
        rest.remove(k);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

/// Recall, precision and NDCG from a 0/1 relevance vector of the top `k`.
pub fn oracle_metrics(ranked: &[usize], relevant: &std::collections::HashSet<usize>, k: usize) -> (f64, f64, f64) {
    let rel: Vec<f64> = ranked[..k].iter().map(|i| f64::from(u8::from(relevant.contains(i)))).collect();
    let hits: f64 = rel.iter().sum();
    let dcg_of = |r: &[f64]| -> f64 {
        r.iter()
            .enumerate()
            .filter(|(_, &x)| x > 0.0)
            .map(|(p, _)| 1.0 / ((p + 2) as f64).log2())
            .sum()
    };
    let mut ideal = vec![0.0; k];
    for v in ideal.iter_mut().take(relevant.len()) {
        *v = 1.0;
    }
    (hits / relevant.len() as f64, hits / k as f64, dcg_of(&rel) / dcg_of(&ideal))
}
