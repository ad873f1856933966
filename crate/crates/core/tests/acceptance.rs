//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Tolerances are pinned below.

mod common;

use std::collections::HashSet;
use std::time::{Duration, Instant};

use common::{brute_force_contrastive, max_gradient_error, oracle_metrics, permutations, planted, random_params, Planted, PlantedSpec};
use rand::Rng;
use recafr_core::backbone::{bpr_loss, Backbone, BipartiteGraph, PairwiseSample, ParameterSet, Table};
use recafr_core::checkpoint;
use recafr_core::contrastive::{
    alignment_loss, alignment_loss_with_views, choose_alignment_views, review_contrastive_loss, ContrastiveBatch,
};
use recafr_core::eval::{evaluate, metrics_at_k, pilot_distributions, robustness_sweep};
use recafr_core::trainer::{stream_rng, total_loss, train, Batch, ModelContext, TrainConfig, Trainer, STREAM_CONTRASTIVE};
use recafr_core::views::{build_review_sets, sample_views, Side, ViewKind, ViewLayout};

const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(10);
const CONTRASTIVE_ORACLE_TOL: f64 = 1e-10;
const BPR_ORACLE_TOL: f64 = 1e-12;
const RECOVERY_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const RECOVERY_BUDGET: Duration = Duration::from_secs(120);
const LINEARITY_RATIO: f64 = 2.5;
const LINEARITY_RUNS: usize = 3;
const PILOT_GAP: f64 = 0.1;

type Criterion = (&'static str, fn() -> Verdict);

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn random_layout(users: usize, items: usize, rng: &mut impl Rng) -> ViewLayout {
    let mut kind = || match rng.random_range(0..4) {
        0 => ViewKind::None,
        1 => ViewKind::Single,
        _ => ViewKind::Pair,
    };
    let users = (0..users).map(|_| kind()).collect();
    let items = (0..items).map(|_| kind()).collect();
    ViewLayout { users, items }
}

fn random_samples(users: usize, items: usize, n: usize, rng: &mut impl Rng) -> Vec<PairwiseSample> {
    (0..n)
        .map(|_| PairwiseSample {
            user: rng.random_range(0..users),
            pos: rng.random_range(0..items),
            neg: rng.random_range(0..items),
        })
        .collect()
}

fn random_graph(users: usize, items: usize, rng: &mut impl Rng) -> BipartiteGraph {
    let edges: Vec<(usize, usize)> = (0..users)
        .flat_map(|u| (0..items).map(move |i| (u, i)))
        .filter(|_| rng.random::<f64>() < 0.4)
        .collect();
    BipartiteGraph::from_edges(users, items, &edges)
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for seed in 0..12u64 {
        let mut r = common::rng(1000 + seed);
        let (nu, ni) = (r.random_range(3..=8), r.random_range(3..=8));
        let p = random_params(nu, ni, 4, seed);
        let layout = random_layout(nu, ni, &mut r);
        let samples = random_samples(nu, ni, 4, &mut r);
        let graph = random_graph(nu, ni, &mut r);
        let mut record = |e: f64| {
            worst = worst.max(e);
            checks += 1;
        };

        for bb in [Backbone::mf(), Backbone::with_graph(2, graph.clone())] {
            let g = bpr_loss(&samples, &p, &bb).unwrap().grads;
            record(max_gradient_error(&p, &g, 1e-5, 1e-7, |q| bpr_loss(&samples, q, &bb).unwrap().sum));
        }
        for side in Side::BOTH {
            let n = if side == Side::User { nu } else { ni };
            let cb = ContrastiveBatch::full(n, 0.2);
            let g = review_contrastive_loss(side, &cb, &p, &layout).unwrap().grads;
            record(max_gradient_error(&p, &g, 1e-5, 1e-7, |q| {
                review_contrastive_loss(side, &cb, q, &layout).unwrap().sum
            }));
            let choice = choose_alignment_views(side, &cb, &layout, &mut common::rng(seed));
            let g = alignment_loss_with_views(side, &cb, &p, &layout, &choice).unwrap().grads;
            record(max_gradient_error(&p, &g, 1e-5, 1e-7, |q| {
                alignment_loss_with_views(side, &cb, q, &layout, &choice).unwrap().sum
            }));
        }
        let cfg = TrainConfig {
            dim: 4,
            lambda1: 1.5,
            lambda2: 0.4,
            lambda3: 0.1,
            ..TrainConfig::default()
        };
        for bb in [Backbone::mf(), Backbone::with_graph(2, graph)] {
            let ctx = ModelContext {
                backbone: bb,
                layout: layout.clone(),
            };
            let batch = Batch::from_samples(samples.clone());
            let run = |q: &ParameterSet| total_loss(&batch, q, &ctx, &cfg, &mut stream_rng(seed, STREAM_CONTRASTIVE)).unwrap();
            let g = run(&p).1;
            record(max_gradient_error(&p, &g, 1e-5, 1e-7, |q| run(q).0.total));
        }
    }
    let elapsed = start.elapsed();
    verdict(
        worst <= GRAD_TOL && elapsed < GRAD_BUDGET,
        format!("{checks} checks, max rel err {worst:.2e} (tol {GRAD_TOL:.0e}), {elapsed:.2?} (budget {GRAD_BUDGET:?})"),
    )
}

fn oracle_equivalence() -> Verdict {
    let mut worst_cl: f64 = 0.0;
    let mut worst_bpr: f64 = 0.0;
    for seed in 0..10u64 {
        let mut r = common::rng(2000 + seed);
        let (nu, ni) = (r.random_range(2..=16), r.random_range(2..=16));
        let p = random_params(nu, ni, 6, seed);
        let layout = random_layout(nu, ni, &mut r);
        for side in Side::BOTH {
            let n = if side == Side::User { nu } else { ni };
            let cb = ContrastiveBatch::full(n, 0.2);
            let kinds = layout.side(side);
            let paired: Vec<usize> = (0..n).filter(|&x| kinds[x] == ViewKind::Pair).collect();
            let reviewed: Vec<usize> = (0..n).filter(|&x| kinds[x] != ViewKind::None).collect();
            let rev = review_contrastive_loss(side, &cb, &p, &layout).unwrap().sum;
            let want = brute_force_contrastive(
                &paired,
                |x| p.row(Table::view(side, 0), x).to_vec(),
                |y| p.row(Table::view(side, 1), y).to_vec(),
                0.2,
            );
            worst_cl = worst_cl.max((rev - want).abs());
            let choice = choose_alignment_views(side, &cb, &layout, &mut common::rng(seed));
            let align = alignment_loss_with_views(side, &cb, &p, &layout, &choice).unwrap().sum;
            let want = brute_force_contrastive(
                &reviewed,
                |x| p.row(Table::emb(side), x).to_vec(),
                |y| p.row(Table::view(side, choice[&y]), y).to_vec(),
                0.2,
            );
            worst_cl = worst_cl.max((align - want).abs());
        }
        let samples = random_samples(nu, ni, 12, &mut r);
        let got = bpr_loss(&samples, &p, &Backbone::mf()).unwrap().sum;
        let want: f64 = samples
            .iter()
            .map(|s| {
                let u = p.row(Table::UserEmb, s.user);
                let (i, j) = (p.row(Table::ItemEmb, s.pos), p.row(Table::ItemEmb, s.neg));
                let x: f64 = (0..6).map(|c| u[c] * i[c] - u[c] * j[c]).sum();
                -(1.0 / (1.0 + (-x).exp())).ln()
            })
            .sum();
        worst_bpr = worst_bpr.max((got - want).abs());
    }
    verdict(
        worst_cl <= CONTRASTIVE_ORACLE_TOL && worst_bpr <= BPR_ORACLE_TOL,
        format!("contrastive max |diff| {worst_cl:.1e} (tol 1e-10), bpr max |diff| {worst_bpr:.1e} (tol 1e-12)"),
    )
}

fn metric_oracles() -> Verdict {
    let mut cases = 0usize;
    let mut mismatches = 0usize;
    for n in 1..=6 {
        let items: Vec<usize> = (0..n).collect();
        let perms = permutations(&items);
        for mask in 1u32..(1 << n) {
            let relevant: HashSet<usize> = items.iter().copied().filter(|i| mask & (1 << i) != 0).collect();
            for ranked in &perms {
                for k in 1..=n {
                    let m = metrics_at_k(ranked, &relevant, k).unwrap().unwrap();
                    cases += 1;
                    if (m.recall, m.precision, m.ndcg) != oracle_metrics(ranked, &relevant, k) {
                        mismatches += 1;
                    }
                }
            }
        }
    }
    let rank2 = metrics_at_k(&[0, 1], &[1].into(), 2).unwrap().unwrap().ndcg;
    let zero_margin = bpr_loss(&[PairwiseSample { user: 0, pos: 0, neg: 1 }], &ParameterSet::zeros(1, 2, 2), &Backbone::mf())
        .unwrap()
        .sum;
    let worked = format!("{rank2:.6}") == "0.630930" && format!("{zero_margin:.6}") == "0.693147";
    verdict(
        mismatches == 0 && worked,
        format!("{cases} enumerated cases, {mismatches} mismatches; rank-2 ndcg {rank2:.6}, zero-margin bpr {zero_margin:.6}"),
    )
}

fn recovery_config(seed: u64) -> TrainConfig {
    TrainConfig {
        dim: 16,
        batch_size: 64,
        seed,
        ..TrainConfig::default()
    }
}

fn recall5(data: &Planted, cfg: &TrainConfig) -> f64 {
    let sets = build_review_sets(&data.table);
    let views = sample_views(&sets, cfg.seed);
    let out = train(&data.table, &sets, &views, &data.store, cfg).unwrap();
    let report = evaluate(&out.params, &out.context.backbone, &data.table, &[5], false).unwrap();
    report.cutoff(5).unwrap().recall.mean
}

fn directional_recovery() -> Verdict {
    let start = Instant::now();
    let mut sums = [0.0; 3];
    for seed in RECOVERY_SEEDS {
        let data = planted(&PlantedSpec::default(), seed);
        let full = recovery_config(seed);
        let text_only = TrainConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            ..full.clone()
        };
        let mut plain = text_only.clone();
        plain.ablations.no_text_init = true;
        sums[0] += recall5(&data, &full);
        sums[1] += recall5(&data, &plain);
        sums[2] += recall5(&data, &text_only);
    }
    let n = RECOVERY_SEEDS.len() as f64;
    let [full, plain, text_only] = sums.map(|s| s / n);
    let elapsed = start.elapsed();
    verdict(
        full >= plain && elapsed < RECOVERY_BUDGET,
        format!(
            "mean Recall@5 full {full:.4} vs plain BPR {plain:.4} (info: zero contrastive weights with text init {text_only:.4}), {elapsed:.2?}"
        ),
    )
}

fn missing_review_robustness() -> Verdict {
    let data = planted(&PlantedSpec::default(), 0);
    let runs = robustness_sweep(&data.table, &data.store, &recovery_config(0), &[0.0, 1.0], &RECOVERY_SEEDS, false).unwrap();
    let mean = |f: f64| {
        let rs: Vec<f64> = runs
            .iter()
            .filter(|r| r.fraction == f)
            .map(|r| r.report.cutoff(5).unwrap().recall.mean)
            .collect();
        rs.iter().sum::<f64>() / rs.len() as f64
    };
    let (kept, removed) = (mean(0.0), mean(1.0));

    // a user with no reviews and no interactions joins the batch pool
    let p = random_params(6, 6, 4, 77);
    let layout = ViewLayout {
        users: vec![ViewKind::Pair, ViewKind::Single, ViewKind::Pair, ViewKind::Pair, ViewKind::None, ViewKind::Pair],
        items: vec![ViewKind::Pair; 6],
    };
    let eval = |users: &[usize]| {
        let cb = ContrastiveBatch::in_batch(users, 0.2);
        let rev = review_contrastive_loss(Side::User, &cb, &p, &layout).unwrap();
        let align = alignment_loss(Side::User, &cb, &p, &layout, &mut stream_rng(3, STREAM_CONTRASTIVE)).unwrap();
        (rev.sum.to_bits(), align.sum.to_bits(), rev.grads, align.grads)
    };
    let exact = eval(&[0, 1, 2, 5]) == eval(&[0, 1, 4, 2, 5]);
    verdict(
        removed <= kept && exact,
        format!("Recall@5 at 0% removal {kept:.4}, at 100% removal {removed:.4}; exclusion bit-identical: {exact}"),
    )
}

fn epoch_seconds(data: &Planted) -> f64 {
    let sets = build_review_sets(&data.table);
    let views = sample_views(&sets, 0);
    let cfg = TrainConfig {
        dim: 16,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(&data.table, &sets, &views, &data.store, &cfg).unwrap();
    let start = Instant::now();
    t.run_epoch().unwrap();
    start.elapsed().as_secs_f64()
}

fn complexity_linearity() -> Verdict {
    let spec = |per_user| PlantedSpec {
        users: 400,
        items: 400,
        per_user,
        ..PlantedSpec::default()
    };
    let base = planted(&spec(15), 9);
    let double = planted(&spec(30), 9);
    let (nb, nd) = (base.table.triples.len(), double.table.triples.len());
    let same_entities = base.table.num_users == double.table.num_users && base.table.num_items == double.table.num_items;
    epoch_seconds(&base);
    let mut tb = 0.0;
    let mut td = 0.0;
    for _ in 0..LINEARITY_RUNS {
        tb += epoch_seconds(&base);
        td += epoch_seconds(&double);
    }
    let ratio = td / tb;
    verdict(
        ratio <= LINEARITY_RATIO && same_entities,
        format!(
            "{nb} -> {nd} interactions, mean epoch {:.1} ms -> {:.1} ms, ratio {ratio:.2} (limit {LINEARITY_RATIO})",
            tb * 1e3 / LINEARITY_RUNS as f64,
            td * 1e3 / LINEARITY_RUNS as f64
        ),
    )
}

fn pilot_separation() -> Verdict {
    let data = planted(&PlantedSpec::default(), 0);
    let sets = build_review_sets(&data.table);
    let views = sample_views(&sets, 0);
    let mut gaps = Vec::new();
    for side in Side::BOTH {
        let d = pilot_distributions(&views, side, &data.store, 50, 0).unwrap();
        gaps.push((side.name(), d.positive.mean, d.negative.mean));
    }
    let pass = gaps.iter().all(|(_, pos, neg)| pos - neg >= PILOT_GAP);
    let detail = gaps
        .iter()
        .map(|(s, pos, neg)| format!("{s}: pos {pos:.3} neg {neg:.3} gap {:.3}", pos - neg))
        .collect::<Vec<_>>()
        .join("; ");
    verdict(pass, format!("{detail} (min gap {PILOT_GAP})"))
}

fn determinism() -> Verdict {
    let data = planted(&PlantedSpec::default(), 1);
    let sets = build_review_sets(&data.table);
    let views = sample_views(&sets, 1);
    let cfg = TrainConfig {
        epochs: 10,
        ..recovery_config(1)
    };
    let run = || {
        let out = train(&data.table, &sets, &views, &data.store, &cfg).unwrap();
        let report = evaluate(&out.params, &out.context.backbone, &data.table, &[5, 20], false).unwrap();
        (checkpoint::to_bytes(&out.params), report.to_json().to_string())
    };
    let (a, b) = (run(), run());
    verdict(
        a == b,
        format!("checkpoint {} bytes identical: {}, metrics identical: {}", a.0.len(), a.0 == b.0, a.1 == b.1),
    )
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("gradient correctness", gradient_correctness),
        ("oracle equivalence", oracle_equivalence),
        ("metric oracles", metric_oracles),
        ("directional synthetic recovery", directional_recovery),
        ("missing-review robustness", missing_review_robustness),
        ("complexity linearity", complexity_linearity),
        ("pilot separation", pilot_separation),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let v = check();
        println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        if !v.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
