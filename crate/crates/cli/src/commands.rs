//! One function per subcommand. Each reads its inputs from disk, writes its
//! artifacts under the output directory and returns the report that becomes
//! `<command>_report.json`.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context as _, Result};
use hill_core::data::{load_split, InteractionDataset};
use hill_core::em::em_build;
use hill_core::hill::build_hierarchy;
use hill_core::metrics::{evaluate_users, EvalReport};
use hill_core::model::{load_checkpoint, save_checkpoint, train, train_with_teacher, SoftLabels};
use hill_core::progress::JsonLines;
use hill_core::synthetic::surrogate_interactions;
use hill_core::tree::{
    self, assemble, beam_search, beam_search_excluding, cost_estimate, BeamRetriever, FlatRetriever,
};
use hill_core::ttt::{extract_pairs, extract_pairs_from, run_ttt_with_pairs, EvalMode, TttConfig, TttPairSet};
use hill_core::{Index, Model};
use log::info;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Builder, DataSource, InterestSource, RunConfig};
use crate::manifest::{write_json, Artifacts};

pub struct Context<'a> {
    pub cfg: &'a RunConfig,
    pub artifacts: Artifacts,
}

impl Context<'_> {
    fn out(&self, name: &str) -> std::path::PathBuf {
        self.cfg.paths.out.join(name)
    }

    fn write_text(&mut self, path: &Path, text: &str) -> Result<()> {
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        self.artifacts.add(path);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, path: &Path, value: &T) -> Result<()> {
        write_json(path, value)?;
        self.artifacts.add(path);
        Ok(())
    }
}

fn load_data(cfg: &RunConfig) -> Result<InteractionDataset> {
    let ds = match &cfg.data {
        DataSource::Files { train, test, format } => {
            let loaded = load_split(train, test.as_ref(), *format)?;
            if loaded.user_remap.is_some() || loaded.item_remap.is_some() {
                info!("ids were densified on load; reported ids are dense 0-based ids");
            }
            loaded.dataset
        }
        DataSource::Surrogate(spec) => {
            info!("generating synthetic surrogate data ({} users, {} items)", spec.num_users, spec.num_items);
            surrogate_interactions(spec)?
        }
    };
    info!(
        "{} users, {} items, {} train / {} test interactions",
        ds.num_users(),
        ds.num_items(),
        ds.num_train_interactions(),
        ds.num_test_interactions()
    );
    Ok(ds)
}

fn load_model(path: &Path) -> Result<Model> {
    load_checkpoint(path).with_context(|| format!("loading model checkpoint {}", path.display()))
}

fn load_index(path: &Path) -> Result<Index> {
    tree::load(path).with_context(|| format!("loading index {}", path.display()))
}

fn check_shapes(model: &Model, ds: &InteractionDataset) -> Result<()> {
    if model.num_users() != ds.num_users() || model.num_items() != ds.num_items() {
        bail!(
            "model has {} users / {} items but the data has {} / {}",
            model.num_users(),
            model.num_items(),
            ds.num_users(),
            ds.num_items()
        );
    }
    Ok(())
}

fn eval_users(cfg: &RunConfig, ds: &InteractionDataset) -> Vec<u32> {
    match cfg.eval.users {
        0 => ds.test_users(),
        n => ds.sample_test_users(n, cfg.seed),
    }
}

fn read_soft_labels(path: &Path) -> Result<SoftLabels<f32>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut labels = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parsed = match fields.as_slice() {
            [u, i, p] => u.parse::<u32>().ok().zip(i.parse::<u32>().ok()).zip(p.parse::<f32>().ok()),
            _ => None,
        };
        match parsed {
            Some(((u, i), p)) if (0.0..=1.0).contains(&p) => {
                labels.insert((u, i), p);
            }
            _ => bail!("{}:{}: expected `user item probability`", path.display(), n + 1),
        }
    }
    Ok(labels)
}

pub fn train_cmd(ctx: &mut Context) -> Result<Value> {
    let cfg = ctx.cfg;
    let ds = load_data(cfg)?;
    let mut model = Model::new(ds.num_users(), ds.num_items(), cfg.model.clone())?;
    let report = match &cfg.soft_labels {
        Some(path) => train_with_teacher(&mut model, &ds, &cfg.train, &read_soft_labels(path)?)?,
        None => train(&mut model, &ds, &cfg.train)?,
    };
    if let Some(parent) = cfg.paths.model.parent() {
        fs::create_dir_all(parent)?;
    }
    save_checkpoint(&model, &cfg.paths.model)?;
    ctx.artifacts.add(&cfg.paths.model);
    let users = model.user_embeddings();
    let items = model.item_embeddings();
    let flat =
        evaluate_users(&FlatRetriever { users: &users, items: &items }, &ds, &eval_users(cfg, &ds), cfg.eval.k, false)?;
    info!("flat Recall@{} {:.4}", cfg.eval.k, flat.recall_at_k);
    Ok(json!({ "training": report, "flat": flat }))
}

pub fn build_index_cmd(ctx: &mut Context) -> Result<Value> {
    let cfg = ctx.cfg;
    let ds = load_data(cfg)?;
    let mut model = load_model(&cfg.paths.model)?;
    check_shapes(&model, &ds)?;
    let progress_path = ctx.out("index_progress.jsonl");
    let mut sink = JsonLines(BufWriter::new(File::create(&progress_path)?));
    let (hierarchy, recon_trace) = match cfg.builder {
        Builder::Joint => (build_hierarchy(&mut model, &ds, &cfg.index, &mut sink)?, None),
        Builder::Em => {
            let r = em_build(&mut model, &ds, &cfg.em, &mut sink)?;
            (r.hierarchy, Some(r.recon_trace))
        }
    };
    sink.0.flush()?;
    drop(sink);
    ctx.artifacts.add(&progress_path);
    let index = assemble(&hierarchy.codebooks, &model.item_embeddings())?;
    for p in [&cfg.paths.index, &cfg.paths.index_model] {
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
    }
    tree::save(&index, &cfg.paths.index)?;
    save_checkpoint(&model, &cfg.paths.index_model)?;
    ctx.artifacts.add(&cfg.paths.index);
    ctx.artifacts.add(&cfg.paths.index_model);
    let levels: Vec<Value> = index
        .levels
        .iter()
        .map(|l| json!({ "level": l.level, "width": l.width(), "searchable": l.searchable().count(), "max_fanout": l.max_fanout() }))
        .collect();
    Ok(json!({
        "builder": match cfg.builder { Builder::Joint => "joint", Builder::Em => "em" },
        "items": index.num_items(),
        "levels": levels,
        "level_recon": hierarchy.level_recon,
        "recon_loss": hierarchy.recon_loss,
        "recon_trace": recon_trace,
    }))
}

#[derive(Serialize)]
struct ScoredItem {
    id: u32,
    score: f32,
}

#[derive(Serialize)]
struct RetrievalLine {
    user_id: u32,
    items: Vec<ScoredItem>,
    scoring_calls: u64,
}

pub fn retrieve_cmd(ctx: &mut Context, users: &[u32], stdout: &mut dyn Write) -> Result<Value> {
    let cfg = ctx.cfg;
    let model = load_model(&cfg.paths.index_model)?;
    let index = load_index(&cfg.paths.index)?;
    let users: Vec<u32> = if users.is_empty() { (0..model.num_users() as u32).collect() } else { users.to_vec() };
    let embeddings = model.user_embeddings();
    let lines = users
        .par_iter()
        .map(|&u| {
            if u as usize >= embeddings.rows() {
                bail!("user {u} out of range (model has {} users)", embeddings.rows());
            }
            let r = beam_search(&index, embeddings.row(u as usize), cfg.eval.beam, cfg.eval.k)?;
            let items = r.items.iter().map(|s| ScoredItem { id: s.id, score: s.score }).collect();
            Ok(RetrievalLine { user_id: u, items, scoring_calls: r.scoring_calls })
        })
        .collect::<Result<Vec<_>>>()?;
    let path = ctx.out("retrievals.jsonl");
    let mut file = BufWriter::new(File::create(&path)?);
    for line in &lines {
        let text = serde_json::to_string(line)?;
        writeln!(file, "{text}")?;
        writeln!(stdout, "{text}")?;
    }
    file.flush()?;
    ctx.artifacts.add(&path);
    let calls: u64 = lines.iter().map(|l| l.scoring_calls).sum();
    Ok(json!({
        "users": lines.len(),
        "beam": cfg.eval.beam,
        "k": cfg.eval.k,
        "mean_scoring_calls": if lines.is_empty() { 0.0 } else { calls as f64 / lines.len() as f64 },
    }))
}

pub fn eval_cmd(ctx: &mut Context) -> Result<Value> {
    let cfg = ctx.cfg;
    let ds = load_data(cfg)?;
    let model = load_model(&cfg.paths.index_model)?;
    check_shapes(&model, &ds)?;
    let index = load_index(&cfg.paths.index)?;
    let users = eval_users(cfg, &ds);
    let user_emb = model.user_embeddings();
    let items = model.item_embeddings();
    let flat = evaluate_users(&FlatRetriever { users: &user_emb, items: &items }, &ds, &users, cfg.eval.k, true)?;
    let beam = evaluate_users(
        &BeamRetriever { users: &user_emb, index: &index, beam: cfg.eval.beam },
        &ds,
        &users,
        cfg.eval.k,
        true,
    )?;
    let cost = cost_estimate(&index, cfg.eval.beam, &cfg.eval.unit_costs);
    let (flat_path, beam_path) = (ctx.out("eval_flat_per_user.csv"), ctx.out("eval_beam_per_user.csv"));
    ctx.write_text(&flat_path, &flat.per_user_csv())?;
    ctx.write_text(&beam_path, &beam.per_user_csv())?;
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
    let scoring_fraction = ratio(beam.mean_scoring_calls, ds.num_items() as f64);
    let recall_retention = ratio(beam.recall_at_k, flat.recall_at_k);
    info!(
        "flat Recall@{k} {:.4}, beam(B={}) Recall@{k} {:.4}, {:.2}% of items scored",
        flat.recall_at_k,
        cfg.eval.beam,
        beam.recall_at_k,
        100.0 * scoring_fraction,
        k = cfg.eval.k
    );
    let summary = |r: &EvalReport| EvalReport { per_user: None, ..r.clone() };
    Ok(json!({
        "flat": summary(&flat),
        "beam": summary(&beam),
        "beam_width": cfg.eval.beam,
        "cost": cost,
        "scoring_fraction": scoring_fraction,
        "recall_retention": recall_retention,
    }))
}

/// Beam-retrieved top-k items per user, used as interest seeds when no
/// interaction history is trusted.
fn retrieved_seeds(cfg: &RunConfig, model: &Model, index: &Index, ds: &InteractionDataset) -> Result<Vec<Vec<u32>>> {
    let users = model.user_embeddings();
    (0..ds.num_users() as u32)
        .into_par_iter()
        .map(|u| {
            let r = beam_search_excluding(index, users.row(u as usize), cfg.eval.beam, cfg.eval.k, ds.train(u))?;
            let mut items: Vec<u32> = r.items.iter().map(|s| s.id).collect();
            items.sort_unstable();
            Ok(items)
        })
        .collect()
}

fn pairs_for(
    cfg: &RunConfig,
    ttt: &TttConfig,
    model: &Model,
    index: &Index,
    ds: &InteractionDataset,
) -> Result<TttPairSet> {
    Ok(match cfg.interest {
        InterestSource::Train => extract_pairs(ds, index, ttt)?,
        InterestSource::Retrieved => extract_pairs_from(index, &retrieved_seeds(cfg, model, index, ds)?, ttt)?,
    })
}

fn ttt_mode(cfg: &RunConfig) -> EvalMode {
    if cfg.ttt_beam {
        EvalMode::Beam(cfg.eval.beam)
    } else {
        EvalMode::Flat
    }
}

pub fn ttt_cmd(ctx: &mut Context) -> Result<Value> {
    let cfg = ctx.cfg;
    let ds = load_data(cfg)?;
    let mut model = load_model(&cfg.paths.index_model)?;
    check_shapes(&model, &ds)?;
    let index = load_index(&cfg.paths.index)?;
    let pairs = pairs_for(cfg, &cfg.ttt, &model, &index, &ds)?;
    info!("{} test-time training pairs", pairs.len());
    let report = run_ttt_with_pairs(&mut model, &ds, &index, &pairs, &cfg.finetune, cfg.eval.k, ttt_mode(cfg))?;
    let pairs_path = ctx.out("ttt_pairs.tsv");
    pairs.write_tsv(&pairs_path)?;
    ctx.artifacts.add(&pairs_path);
    let model_path = ctx.out("ttt_model.ckpt");
    save_checkpoint(&model, &model_path)?;
    ctx.artifacts.add(&model_path);
    let relative = if report.recall_before > 0.0 { report.recall_after / report.recall_before - 1.0 } else { 0.0 };
    info!("Recall@{} {:.4} -> {:.4}", report.k, report.recall_before, report.recall_after);
    Ok(
        json!({ "ttt": report, "recall_relative_change": relative, "depth": cfg.ttt.depth, "thresholds": cfg.ttt.thresholds }),
    )
}

#[derive(Debug, Serialize)]
struct SweepRow {
    depth: usize,
    threshold: f64,
    pairs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ndcg: Option<f64>,
}

/// Pair counts (and optionally fine-tuned metrics) over a grid of depths and
/// thresholds. A swept threshold applies to every traversed level.
pub fn sweep_cmd(ctx: &mut Context) -> Result<Value> {
    let cfg = ctx.cfg;
    let ds = load_data(cfg)?;
    let model = load_model(&cfg.paths.index_model)?;
    check_shapes(&model, &ds)?;
    let index = load_index(&cfg.paths.index)?;
    let mut rows = Vec::new();
    for &depth in &cfg.sweep.depths {
        for &threshold in &cfg.sweep.thresholds {
            let ttt = TttConfig { depth, thresholds: vec![threshold; depth] };
            let pairs = pairs_for(cfg, &ttt, &model, &index, &ds)?;
            let (recall, ndcg) = if cfg.sweep.finetune {
                let mut tuned = model.clone();
                let r = run_ttt_with_pairs(&mut tuned, &ds, &index, &pairs, &cfg.finetune, cfg.eval.k, ttt_mode(cfg))?;
                (Some(r.recall_after), Some(r.ndcg_after))
            } else {
                (None, None)
            };
            info!("depth {depth}, threshold {threshold}: {} pairs", pairs.len());
            rows.push(SweepRow { depth, threshold, pairs: pairs.len(), recall, ndcg });
        }
    }
    let mut tsv = String::from("depth\tthreshold\tpairs\trecall\tndcg\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &rows {
        tsv.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", r.depth, r.threshold, r.pairs, opt(r.recall), opt(r.ndcg)));
    }
    let (tsv_path, json_path) = (ctx.out("sweep.tsv"), ctx.out("sweep.json"));
    ctx.write_text(&tsv_path, &tsv)?;
    ctx.write_json(&json_path, &rows)?;
    Ok(json!({ "rows": rows }))
}
