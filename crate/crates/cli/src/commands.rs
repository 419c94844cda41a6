use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use nas_rec::baselines::train_bpr_mf_from;
use nas_rec::data::{
    friend_context, load_interactions, load_interactions_with_maps, load_social_graph,
    relevance_for, split, write_interactions, write_social_graph, DatasetSplit, FileFormat, IdMap,
    SocialGraph,
};
use nas_rec::eval::{candidates, evaluate, rank_items, EvalReport, Recommender};
use nas_rec::model::AttentionMode;
use nas_rec::snapshot::{ModelSnapshot, ModelTag};
use nas_rec::synth::{generate, SyntheticSpec};
use nas_rec::train::{epoch_log_csv, mf_pretrain, pretrain_shallow_then_deepen, EpochLog};
use nas_rec::{NasError, Result};
use serde::{Deserialize, Serialize};

use crate::config::{output_path, Partition, RunConfig, RESOLVED_NAME};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> NasError + '_ {
    move |source| NasError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("value serializes")
}

/// File names inside a prepared data directory.
pub mod layout {
    pub const TRAIN: &str = "train.tsv";
    pub const VALIDATION: &str = "validation.tsv";
    pub const TEST: &str = "test.tsv";
    pub const GRAPH: &str = "graph.tsv";
    pub const USERS: &str = "users.tsv";
    pub const ITEMS: &str = "items.tsv";
    pub const META: &str = "split.json";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub ratings: usize,
    pub edges: usize,
    pub density_percent: f64,
    pub dropped_edges: usize,
}

impl DatasetStats {
    pub fn render(&self) -> String {
        format!(
            "users\t{}\nitems\t{}\nratings\t{}\nedges\t{}\ndensity\t{:.4}%\n",
            self.users, self.items, self.ratings, self.edges, self.density_percent
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMeta {
    pub train_frac: f64,
    pub val_frac: f64,
    pub seed: u64,
    pub stats: DatasetStats,
}

pub struct PrepareArgs {
    pub ratings: PathBuf,
    pub graph: PathBuf,
    pub out: PathBuf,
    pub train_frac: f64,
    pub val_frac: f64,
    pub seed: u64,
}

pub fn prepare(args: &PrepareArgs) -> Result<DatasetStats> {
    let loaded = load_interactions(&args.ratings, FileFormat::from_path(&args.ratings))?;
    let graph = load_social_graph(
        &args.graph,
        FileFormat::from_path(&args.graph),
        &loaded.users,
    )?;
    if graph.dropped > 0 {
        warn!(
            "{} friendship rows name users without ratings; dropped",
            graph.dropped
        );
    }
    let parts = split(&loaded.set, args.train_frac, args.val_frac, args.seed)?;
    let out = output_path(&args.out);
    create_dir(&out)?;
    let (users, items) = (&loaded.users, &loaded.items);
    for (name, set) in [
        (layout::TRAIN, &parts.train),
        (layout::VALIDATION, &parts.validation),
        (layout::TEST, &parts.test),
    ] {
        write_interactions(&out.join(name), set, users, items, FileFormat::Tsv)?;
    }
    write_social_graph(
        &out.join(layout::GRAPH),
        &graph.graph,
        users,
        FileFormat::Tsv,
    )?;
    users.write(&out.join(layout::USERS))?;
    items.write(&out.join(layout::ITEMS))?;
    let stats = DatasetStats {
        users: loaded.set.n_users(),
        items: loaded.set.n_items(),
        ratings: loaded.set.len(),
        edges: graph.graph.num_edges(),
        density_percent: loaded.set.density_percent(),
        dropped_edges: graph.dropped,
    };
    let meta = SplitMeta {
        train_frac: args.train_frac,
        val_frac: args.val_frac,
        seed: args.seed,
        stats: stats.clone(),
    };
    write_file(&out.join(layout::META), to_json(&meta))?;
    Ok(stats)
}

/// A prepared data directory loaded back into memory.
pub struct Prepared {
    pub split: DatasetSplit,
    pub graph: SocialGraph,
    pub users: IdMap,
    pub items: IdMap,
    pub meta: SplitMeta,
}

pub fn load_prepared(dir: &Path) -> Result<Prepared> {
    let users = IdMap::read(&dir.join(layout::USERS))?;
    let items = IdMap::read(&dir.join(layout::ITEMS))?;
    let part =
        |name: &str| load_interactions_with_maps(&dir.join(name), FileFormat::Tsv, &users, &items);
    let (train, validation, test) = (
        part(layout::TRAIN)?,
        part(layout::VALIDATION)?,
        part(layout::TEST)?,
    );
    let graph = load_social_graph(&dir.join(layout::GRAPH), FileFormat::Tsv, &users)?.graph;
    let meta_path = dir.join(layout::META);
    let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: SplitMeta = serde_json::from_str(&text)
        .map_err(|e| NasError::Data(format!("{}: {e}", meta_path.display())))?;
    Ok(Prepared {
        split: DatasetSplit {
            train,
            validation,
            test,
            seed: meta.seed,
        },
        graph,
        users,
        items,
        meta,
    })
}

pub struct TrainedModel {
    pub snapshot: ModelSnapshot,
    /// Epoch logs per phase: `shallow` (when deepening) and `main`.
    pub logs: Vec<(&'static str, Vec<EpochLog>)>,
    pub best_epoch: usize,
}

/// Matrix-factorization pretraining followed by the configured model.
pub fn fit_model(config: &RunConfig, data: &Prepared) -> Result<TrainedModel> {
    config.validate()?;
    let t = &config.train;
    let mf = mf_pretrain(
        &data.split.train,
        t.d,
        t.mf_epochs,
        t.mf_lr,
        t.mf_reg,
        t.seed,
    )?;
    match config.model {
        ModelTag::BprMf => {
            let out = train_bpr_mf_from(t, &data.split, mf.factors)?;
            Ok(TrainedModel {
                snapshot: out.best.into(),
                logs: vec![("main", out.log)],
                best_epoch: out.best_epoch,
            })
        }
        tag => {
            let mode = match (tag, config.nas_star_mean) {
                (ModelTag::Nas, _) => AttentionMode::Softmax,
                (_, true) => AttentionMode::Mean,
                (_, false) => AttentionMode::Unit,
            };
            let out = pretrain_shallow_then_deepen(t, &data.split, &data.graph, mf.factors, mode)?;
            let mut logs = Vec::new();
            if let Some(shallow) = out.shallow {
                logs.push(("shallow", shallow.log));
            }
            logs.push(("main", out.deep.log));
            Ok(TrainedModel {
                snapshot: out.deep.best.into(),
                logs,
                best_epoch: out.deep.best_epoch,
            })
        }
    }
}

pub fn train(config: &RunConfig) -> Result<PathBuf> {
    config.validate()?;
    let data = load_prepared(&config.data_dir)?;
    let out = output_path(&config.output_dir);
    create_dir(&out)?;
    write_file(&out.join(RESOLVED_NAME), config.to_toml())?;
    let trained = fit_model(config, &data)?;
    for (phase, log) in &trained.logs {
        let name = if *phase == "main" {
            "epoch_log.csv".to_string()
        } else {
            format!("epoch_log_{phase}.csv")
        };
        write_file(&out.join(name), epoch_log_csv(log, config.train.eval_n))?;
    }
    let path = out.join("model.bin");
    trained.snapshot.save(&path)?;
    info!(
        "best epoch {}; snapshot written to {}",
        trained.best_epoch,
        path.display()
    );
    Ok(path)
}

fn check_shapes(snapshot: &ModelSnapshot, data: &Prepared) -> Result<()> {
    let (n, m) = (data.split.train.n_users(), data.split.train.n_items());
    if snapshot.n_users() != n || snapshot.n_items() != m {
        return Err(NasError::Data(format!(
            "snapshot covers {} users x {} items but the dataset has {n} users x {m} items",
            snapshot.n_users(),
            snapshot.n_items()
        )));
    }
    Ok(())
}

pub fn evaluate_snapshot(
    snapshot: &ModelSnapshot,
    data: &Prepared,
    config: &RunConfig,
) -> Result<EvalReport> {
    check_shapes(snapshot, data)?;
    let labeled = match config.eval.partition {
        Partition::Test => &data.split.test,
        Partition::Validation => &data.split.validation,
    };
    let labels = relevance_for(&data.split, labeled, config.eval.mean_source);
    let mut report = evaluate(
        snapshot,
        snapshot.tag().as_str(),
        &data.split.train,
        &labels,
        &data.graph,
        config.eval.n,
        &config.eval_seeds(),
    )?;
    report.train_frac = Some(data.meta.train_frac);
    Ok(report)
}

pub fn eval(snapshot_path: &Path, config: &RunConfig, out: &Path) -> Result<EvalReport> {
    config.validate()?;
    let snapshot = ModelSnapshot::load(snapshot_path)?;
    let data = load_prepared(&config.data_dir)?;
    let report = evaluate_snapshot(&snapshot, &data, config)?;
    let out = output_path(out);
    create_dir(&out)?;
    report.write(&out, "report")?;
    Ok(report)
}

/// Top-`n` unseen items for `user` (an original id) with their scores.
pub fn recommend(
    snapshot_path: &Path,
    data_dir: &Path,
    user: &str,
    n: usize,
    seed: u64,
) -> Result<Vec<(String, f64)>> {
    let snapshot = ModelSnapshot::load(snapshot_path)?;
    let data = load_prepared(data_dir)?;
    check_shapes(&snapshot, &data)?;
    let u = data
        .users
        .get(user)
        .ok_or_else(|| NasError::Data(format!("unknown user `{user}`")))?;
    let friends = match snapshot.k_max() {
        0 => Vec::new(),
        k => friend_context(&data.graph, u, k, seed).friend_ids,
    };
    let train_items = data.split.train.item_sets();
    let cands = candidates(snapshot.n_items(), &train_items[u]);
    let scores = snapshot.score_all(u, &friends);
    let ranked = rank_items(&snapshot, u, &friends, &cands);
    Ok(ranked
        .into_iter()
        .take(n)
        .map(|i| (data.items.original(i).to_string(), scores[i]))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub d: usize,
    pub h: usize,
    pub neg_per_pos: usize,
    pub recall: Option<f64>,
    pub ndcg: Option<f64>,
    pub best_epoch: Option<usize>,
    pub error: Option<String>,
}

/// Trains and scores every `(d, h, neg)` cell on the validation partition.
/// Failed cells are recorded and the sweep continues.
pub fn sweep(
    config: &RunConfig,
    ds: &[usize],
    hs: &[usize],
    negs: &[usize],
    out: &Path,
) -> Result<Vec<SweepRow>> {
    if ds.is_empty() || hs.is_empty() || negs.is_empty() {
        return Err(NasError::Config(
            "every sweep axis needs at least one value".into(),
        ));
    }
    config.validate()?;
    let data = load_prepared(&config.data_dir)?;
    let mut rows = Vec::new();
    for &d in ds {
        for &h in hs {
            for &neg in negs {
                let mut cell = config.clone();
                cell.train.d = d;
                cell.train.h = h;
                cell.train.neg_per_pos = neg;
                cell.eval.partition = Partition::Validation;
                let result = fit_model(&cell, &data).and_then(|t| {
                    Ok((evaluate_snapshot(&t.snapshot, &data, &cell)?, t.best_epoch))
                });
                let row = match result {
                    Ok((report, best_epoch)) => SweepRow {
                        d,
                        h,
                        neg_per_pos: neg,
                        recall: Some(report.recall_mean),
                        ndcg: Some(report.ndcg_mean),
                        best_epoch: Some(best_epoch),
                        error: None,
                    },
                    Err(e) => {
                        warn!("sweep cell d={d} h={h} neg={neg} failed: {e}");
                        SweepRow {
                            d,
                            h,
                            neg_per_pos: neg,
                            recall: None,
                            ndcg: None,
                            best_epoch: None,
                            error: Some(e.to_string()),
                        }
                    }
                };
                info!("sweep cell d={d} h={h} neg={neg}: ndcg {:?}", row.ndcg);
                rows.push(row);
            }
        }
    }
    let out = output_path(out);
    create_dir(&out)?;
    write_file(&out.join(RESOLVED_NAME), config.to_toml())?;
    write_file(&out.join("sweep.csv"), sweep_csv(&rows, config.eval.n))?;
    write_file(&out.join("sweep.json"), to_json(&rows))?;
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow], n: usize) -> String {
    let mut s = format!("d,h,neg_per_pos,recall@{n},ndcg@{n},best_epoch,error\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let err = r.error.as_deref().unwrap_or("").replace(['"', '\n'], " ");
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},\"{err}\"",
            r.d,
            r.h,
            r.neg_per_pos,
            opt(r.recall),
            opt(r.ndcg),
            r.best_epoch.map(|e| e.to_string()).unwrap_or_default()
        );
    }
    s
}

pub fn synth(spec: &SyntheticSpec, out: &Path) -> Result<PathBuf> {
    let data = generate(spec)?;
    let out = output_path(out);
    data.write(&out)?;
    Ok(out)
}
