use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Parser;
use recafr_core::backbone::Backbone;
use recafr_core::checkpoint;
use recafr_core::corpus::{
    clean_reviews, dedup_interactions, kcore_filter, load_embedding_file, load_interactions, sample_users, split,
    InteractionTable, ReviewEmbeddingStore, SplitRatios,
};
use recafr_core::eval::{
    evaluate, pilot_distributions, pilot_tsv, robustness_sweep, robustness_tsv, MetricsReport, DEFAULT_CUTOFFS,
};
use recafr_core::trainer::{train, TrainConfig, TrainOutput};
use recafr_core::views::{build_review_sets, sample_views, Side};
use recafr_core::Error;

use crate::manifest::Manifest;
use crate::{Cli, Command, ConfigArgs, EvaluateArgs, ModelArgs, PilotArgs, PrepareArgs, ReplayArgs, RobustnessArgs, TrainArgs};

pub fn run(command: Command, argv: &[String]) -> Result<()> {
    match command {
        Command::Prepare(a) => prepare(&a, argv),
        Command::Train(a) => train_cmd(&a, argv),
        Command::Evaluate(a) => evaluate_cmd(&a, argv),
        Command::Ablate(a) => ablate(&a, argv),
        Command::Robustness(a) => robustness(&a, argv),
        Command::Pilot(a) => pilot(&a, argv),
        Command::Replay(a) => replay(&a),
    }
}

/// Defaults, then the config file, then `--set` overrides in order. The file
/// is digested into the manifest.
fn resolve_config(args: &ConfigArgs, manifest: &mut Manifest) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            manifest.add_input(path)?;
            TrainConfig::load(path)?
        }
        None => TrainConfig::default(),
    };
    for o in &args.overrides {
        let Some((key, value)) = o.split_once('=') else {
            bail!("--set expects KEY=VALUE, got {o:?}");
        };
        cfg.set(key.trim(), value.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn write_file(dir: &Path, name: &str, contents: &str, manifest: &mut Manifest) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    manifest.outputs.push(name.to_string());
    Ok(())
}

struct Inputs {
    table: InteractionTable,
    store: ReviewEmbeddingStore,
}

fn load_inputs(data: &Path, emb: &Path, manifest: &mut Manifest) -> Result<Inputs> {
    manifest.add_input(data)?;
    manifest.add_input(emb)?;
    let table = InteractionTable::load_dir(data)?;
    let store = load_embedding_file(emb)?;
    log::info!(
        "loaded users={} items={} interactions={} review_vectors={} dim={}",
        table.num_users,
        table.num_items,
        table.triples.len(),
        store.len(),
        store.dim()
    );
    Ok(Inputs { table, store })
}

fn prepare(a: &PrepareArgs, argv: &[String]) -> Result<()> {
    let mut manifest = Manifest::new("prepare", argv);
    manifest.add_input(&a.input)?;
    manifest.seeds.insert("split".into(), a.seed);

    let raw = load_interactions(&a.input)?;
    let read = raw.len();
    let mut rows = dedup_interactions(clean_reviews(raw));
    log::info!("prepare read={read} after_dedup={}", rows.len());
    if let Some(k) = a.kcore {
        rows = kcore_filter(rows, k)?;
        log::info!("prepare kcore={k} kept={}", rows.len());
    }
    if let Some(n) = a.sample_users {
        rows = sample_users(rows, n, a.seed);
        manifest.seeds.insert("sample_users".into(), a.seed);
        log::info!("prepare sample_users={n} kept={}", rows.len());
    }
    let table = split(&rows, SplitRatios::default(), a.seed)?;
    create_out(&a.out)?;
    table.write_dir(&a.out)?;
    manifest.outputs.extend(
        ["users.map.tsv", "items.map.tsv", "reviews.map.tsv", "train.tsv", "valid.tsv", "test.tsv"].map(String::from),
    );
    log::info!(
        "prepare users={} items={} reviews={} interactions={}",
        table.num_users,
        table.num_items,
        table.num_reviews,
        table.triples.len()
    );
    manifest.write(&a.out)
}

fn history_jsonl(out: &TrainOutput) -> Result<String> {
    let mut text = String::new();
    for rec in &out.history {
        text.push_str(&serde_json::to_string(rec)?);
        text.push('\n');
    }
    Ok(text)
}

fn metrics_json(report: &MetricsReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(&report.to_json())? + "\n")
}

/// Trains, saving the last good parameters before surfacing a divergence.
fn train_or_salvage(inputs: &Inputs, cfg: &TrainConfig, out_dir: &Path, dump_views: bool) -> Result<TrainOutput> {
    let sets = build_review_sets(&inputs.table);
    let views = sample_views(&sets, cfg.seed);
    if dump_views {
        views.write_tsv(&out_dir.join("views.tsv"))?;
    }
    match train(&inputs.table, &sets, &views, &inputs.store, cfg) {
        Ok(out) => Ok(out),
        Err(Error::Diverged { epoch, reason, last_good }) => {
            let path = out_dir.join("checkpoint.last_good.rckp");
            checkpoint::save(&last_good, &path)?;
            bail!("training diverged in epoch {epoch}: {reason}; parameters from before that epoch saved to {}", path.display())
        }
        Err(e) => Err(e.into()),
    }
}

fn train_cmd(a: &TrainArgs, argv: &[String]) -> Result<()> {
    let m = &a.model;
    let mut manifest = Manifest::new("train", argv);
    let cfg = resolve_config(&m.config, &mut manifest)?;
    manifest.config = Some(cfg.to_text());
    manifest.seeds.insert("train".into(), cfg.seed);
    manifest.seeds.insert("views".into(), cfg.seed);
    let inputs = load_inputs(&m.data, &m.emb, &mut manifest)?;
    create_out(&m.out)?;

    let out = train_or_salvage(&inputs, &cfg, &m.out, a.dump_views)?;
    if a.dump_views {
        manifest.outputs.push("views.tsv".into());
    }
    checkpoint::save(&out.params, &m.out.join("checkpoint.rckp"))?;
    manifest.outputs.push("checkpoint.rckp".into());
    write_file(&m.out, "history.jsonl", &history_jsonl(&out)?, &mut manifest)?;
    let report = evaluate(&out.params, &out.context.backbone, &inputs.table, &DEFAULT_CUTOFFS, m.exclude_valid)?;
    write_file(&m.out, "metrics.json", &metrics_json(&report)?, &mut manifest)?;
    log::info!(
        "train best_epoch={} epochs_run={} test_recall@5={:.6}",
        out.best_epoch,
        out.history.len(),
        report.cutoff(5).map_or(f64::NAN, |c| c.recall.mean)
    );
    manifest.write(&m.out)
}

fn evaluate_cmd(a: &EvaluateArgs, argv: &[String]) -> Result<()> {
    let mut manifest = Manifest::new("evaluate", argv);
    let cfg = resolve_config(&a.config, &mut manifest)?;
    manifest.config = Some(cfg.to_text());
    manifest.add_input(&a.data)?;
    manifest.add_input(&a.checkpoint)?;
    let table = InteractionTable::load_dir(&a.data)?;
    let params = checkpoint::load(&a.checkpoint)?;
    if params.num_users() != table.num_users || params.num_items() != table.num_items {
        bail!(
            "checkpoint holds {} users and {} items but the data has {} and {}",
            params.num_users(),
            params.num_items(),
            table.num_users,
            table.num_items
        );
    }
    let backbone = Backbone::new(cfg.backbone, &table)?;
    let report = evaluate(&params, &backbone, &table, &DEFAULT_CUTOFFS, a.exclude_valid)?;
    create_out(&a.out)?;
    write_file(&a.out, "metrics.json", &metrics_json(&report)?, &mut manifest)?;
    log::info!("evaluate users={}", report.num_users_evaluated());
    manifest.write(&a.out)
}

fn ablate(a: &ModelArgs, argv: &[String]) -> Result<()> {
    let mut manifest = Manifest::new("ablate", argv);
    let cfg = resolve_config(&a.config, &mut manifest)?;
    manifest.config = Some(cfg.to_text());
    manifest.seeds.insert("train".into(), cfg.seed);
    let inputs = load_inputs(&a.data, &a.emb, &mut manifest)?;
    create_out(&a.out)?;

    let variant = |f: fn(&mut TrainConfig)| {
        let mut c = cfg.clone();
        f(&mut c);
        c
    };
    let variants = [
        ("full", cfg.clone()),
        ("w/o text init", variant(|c| c.ablations.no_text_init = true)),
        ("w/o user CL", variant(|c| c.ablations.no_user_cl = true)),
        ("w/o item CL", variant(|c| c.ablations.no_item_cl = true)),
    ];
    let mut table = String::from("variant");
    for k in DEFAULT_CUTOFFS {
        let _ = write!(table, "\trecall@{k}\tprecision@{k}\tndcg@{k}");
    }
    table.push_str("\tbest_epoch\n");
    for (name, c) in &variants {
        log::info!("ablate variant={name:?}");
        let out = train_or_salvage(&inputs, c, &a.out, false)?;
        let report = evaluate(&out.params, &out.context.backbone, &inputs.table, &DEFAULT_CUTOFFS, a.exclude_valid)?;
        table.push_str(name);
        for k in DEFAULT_CUTOFFS {
            let m = report.cutoff(k).expect("default cutoffs evaluated");
            let _ = write!(table, "\t{:.6}\t{:.6}\t{:.6}", m.recall.mean, m.precision.mean, m.ndcg.mean);
        }
        let _ = writeln!(table, "\t{}", out.best_epoch);
    }
    write_file(&a.out, "ablation.tsv", &table, &mut manifest)?;
    manifest.write(&a.out)
}

fn robustness(a: &RobustnessArgs, argv: &[String]) -> Result<()> {
    let m = &a.model;
    let mut manifest = Manifest::new("robustness", argv);
    let cfg = resolve_config(&m.config, &mut manifest)?;
    if a.seeds.is_empty() || a.fractions.is_empty() {
        bail!("--fractions and --seeds must be non-empty");
    }
    manifest.config = Some(cfg.to_text());
    for s in &a.seeds {
        manifest.seeds.insert(format!("run_{s}"), *s);
    }
    let inputs = load_inputs(&m.data, &m.emb, &mut manifest)?;
    create_out(&m.out)?;
    let runs = robustness_sweep(&inputs.table, &inputs.store, &cfg, &a.fractions, &a.seeds, m.exclude_valid)?;
    write_file(&m.out, "robustness.tsv", &robustness_tsv(&runs), &mut manifest)?;
    manifest.write(&m.out)
}

fn pilot(a: &PilotArgs, argv: &[String]) -> Result<()> {
    let mut manifest = Manifest::new("pilot", argv);
    manifest.seeds.insert("pilot".into(), a.seed);
    let inputs = load_inputs(&a.data, &a.emb, &mut manifest)?;
    let views = sample_views(&build_review_sets(&inputs.table), a.seed);
    let mut dists = Vec::new();
    for side in Side::BOTH {
        match pilot_distributions(&views, side, &inputs.store, a.sample_size, a.seed) {
            Ok(d) => {
                log::info!(
                    "pilot side={} pos_mean={:.4} neg_mean={:.4} pos_n={} neg_n={}",
                    side.name(),
                    d.positive.mean,
                    d.negative.mean,
                    d.positive.count,
                    d.negative.count
                );
                dists.push(d);
            }
            Err(Error::Invalid(msg)) => log::warn!("pilot side={} skipped: {msg}", side.name()),
            Err(e) => return Err(e.into()),
        }
    }
    if dists.is_empty() {
        bail!("no side has at least two entities with review views");
    }
    create_out(&a.out)?;
    write_file(&a.out, "pilot.tsv", &pilot_tsv(&dists), &mut manifest)?;
    manifest.write(&a.out)
}

fn replay(a: &ReplayArgs) -> Result<()> {
    let recorded = Manifest::load(&a.manifest)?;
    if recorded.verb == "replay" {
        bail!("manifest records a replay; point at the original run's manifest");
    }
    recorded.verify_inputs()?;
    let argv = recorded.argv_with_out(&a.out)?;
    log::info!("replay verb={} args={:?}", recorded.verb, argv);
    let cli = Cli::try_parse_from(std::iter::once("recafr".to_string()).chain(argv.iter().cloned()))
        .context("recorded arguments no longer parse")?;
    run(cli.command, &argv)?;
    let replayed = Manifest::load(&a.out.join(crate::manifest::FILE_NAME))?;
    if replayed.config != recorded.config {
        bail!("resolved configuration differs from the recorded run");
    }
    Ok(())
}
