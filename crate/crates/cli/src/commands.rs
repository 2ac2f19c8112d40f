//! One function per subcommand. Each returns a JSON summary for stdout.

use std::cell::RefCell;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use magnet::data::{
    generate_synthetic, hex_digest, interactions_to_tsv, load_features, load_interactions, pairs_from_tsv, pairs_to_tsv,
    split_interactions, FeatureMatrix, InteractionSet, Modality, SyntheticSpec,
};
use magnet::diagnostics::{aggregate_routing, model_profile, RoutingProfile, CSV_HEADER};
use magnet::eval::{evaluate_model, popularity_baseline, MetricReport, DEFAULT_CUTOFFS};
use magnet::fixtures::{micro_instance, micro_model_config};
use magnet::graph::{build_neighbor_index, expand_candidates, GraphCacheMeta, InducedEdges, NeighborIndex};
use magnet::model::{Model, ModelInputs};
use magnet::schedule::stage_weights;
use magnet::train::{gradient_check, run_rng, GradCheckOptions, LossConfig, TrainData, Trainer, TrainerConfig};
use magnet::{MagnetError, Scalar};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{Precision, RunConfig};
use crate::error::CliError;
use crate::io::{read_json, read_text, write_json, write_text};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const STEPS_FILE: &str = "steps.jsonl";
pub const ROUTING_FILE: &str = "routing.csv";
pub const REPORT_FILE: &str = "report.json";
/// The run configuration stored next to a checkpoint.
const RUN_FILE: &str = "run.json";

pub fn synth(spec: &SyntheticSpec, out: &Path) -> Result<Value, CliError> {
    let data = generate_synthetic(spec)?;
    write_text(&out.join("interactions.tsv"), &interactions_to_tsv(&data.interactions))?;
    data.features_a.save(&out.join("features_a.mgf"))?;
    data.features_s.save(&out.join("features_s.mgf"))?;
    write_json(&out.join("synth.json"), spec)?;
    Ok(json!({
        "users": data.interactions.num_users(),
        "items": data.interactions.num_items(),
        "interactions": data.interactions.num_edges(),
    }))
}

/// Sidecar of a prepared data directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedMeta {
    pub num_users: usize,
    pub num_items: usize,
    pub raw_item_count: usize,
    pub graph: GraphCacheMeta,
}

fn train_fingerprint(train: &InteractionSet) -> String {
    hex_digest(interactions_to_tsv(train).as_bytes())
}

fn input_path(path: &Option<PathBuf>, key: &str) -> Result<PathBuf, CliError> {
    path.clone().ok_or_else(|| CliError::Config(format!("{key} is not set")))
}

pub fn prepare(cfg: &RunConfig, out: &Path) -> Result<Value, CliError> {
    let loaded = load_interactions(&input_path(&cfg.interactions, "interactions")?, cfg.min_interactions)?;
    let raw = loaded.raw_item_count;
    let fa = load_features(&input_path(&cfg.features_a, "features_a")?, Modality::A, raw)?.select_rows(&loaded.feature_rows)?;
    let fs_ = load_features(&input_path(&cfg.features_s, "features_s")?, Modality::S, raw)?.select_rows(&loaded.feature_rows)?;
    let split = split_interactions(&loaded.interactions, cfg.split_ratios(), cfg.split_seed)?;
    let idx_a = build_neighbor_index(&fa, cfg.knn_k)?;
    let idx_s = build_neighbor_index(&fs_, cfg.knn_k)?;
    let induced = expand_candidates(&split.train, &idx_a, &idx_s, cfg.expand_r)?;

    fs::create_dir_all(out).map_err(|e| CliError::Other(format!("{}: {e}", out.display())))?;
    write_text(&out.join("train.tsv"), &pairs_to_tsv(split.train.edges()))?;
    write_text(&out.join("valid.tsv"), &pairs_to_tsv(&split.valid))?;
    write_text(&out.join("test.tsv"), &pairs_to_tsv(&split.test))?;
    write_text(&out.join("users.tsv"), &loaded.users.to_tsv())?;
    write_text(&out.join("items.tsv"), &loaded.items.to_tsv())?;
    fa.save(&out.join("features_a.mgf"))?;
    fs_.save(&out.join("features_s.mgf"))?;
    idx_a.save(&out.join("neighbors_a.mgi"))?;
    idx_s.save(&out.join("neighbors_s.mgi"))?;
    induced.save(&out.join("induced.mgi"))?;
    let meta = PreparedMeta {
        num_users: split.num_users(),
        num_items: split.num_items(),
        raw_item_count: raw,
        graph: GraphCacheMeta {
            k: cfg.knn_k,
            r: cfg.expand_r,
            features_a: fa.fingerprint(),
            features_s: fs_.fingerprint(),
            train: train_fingerprint(&split.train),
        },
    };
    write_json(&out.join("prepared.json"), &meta)?;
    cfg.write_resolved(out)?;
    Ok(json!({
        "users": meta.num_users,
        "items": meta.num_items,
        "train": split.train.num_edges(),
        "valid": split.valid.len(),
        "test": split.test.len(),
        "induced": induced.edges.len(),
    }))
}

/// A prepared data directory loaded into memory.
pub struct Prepared {
    pub dir: PathBuf,
    pub meta: PreparedMeta,
    pub train: InteractionSet,
    pub valid: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
    pub features_a: FeatureMatrix,
    pub features_s: FeatureMatrix,
}

impl Prepared {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let meta: PreparedMeta = read_json(&dir.join("prepared.json"))?;
        let pairs = |name: &str| -> Result<Vec<(usize, usize)>, CliError> {
            let p = dir.join(name);
            let pairs = pairs_from_tsv(&p, &read_text(&p)?)?;
            if let Some(&(u, i)) = pairs.iter().find(|&&(u, i)| u >= meta.num_users || i >= meta.num_items) {
                return Err(CliError::Data(format!("{}: pair ({u}, {i}) is out of range", p.display())));
            }
            Ok(pairs)
        };
        let train = InteractionSet::new(meta.num_users, meta.num_items, pairs("train.tsv")?)?;
        if train_fingerprint(&train) != meta.graph.train {
            return Err(CliError::Data(format!("{}: train.tsv does not match prepared.json", dir.display())));
        }
        Ok(Self {
            valid: pairs("valid.tsv")?,
            test: pairs("test.tsv")?,
            features_a: load_features(&dir.join("features_a.mgf"), Modality::A, meta.num_items)?,
            features_s: load_features(&dir.join("features_s.mgf"), Modality::S, meta.num_items)?,
            train,
            meta,
            dir: dir.to_path_buf(),
        })
    }

    /// Induced edges for `cfg`, from the cache when its settings and inputs
    /// match and rebuilt otherwise.
    pub fn induced(&self, cfg: &RunConfig) -> Result<Option<InducedEdges>, CliError> {
        if !cfg.dual_view() {
            return Ok(None);
        }
        let g = &self.meta.graph;
        let fresh = g.k == cfg.knn_k
            && g.r == cfg.expand_r
            && g.features_a == self.features_a.fingerprint()
            && g.features_s == self.features_s.fingerprint();
        if fresh {
            return Ok(Some(InducedEdges::load(&self.dir.join("induced.mgi"))?));
        }
        info!("graph cache was built with k={} r={}; rebuilding for k={} r={}", g.k, g.r, cfg.knn_k, cfg.expand_r);
        let (a, s) = if g.k == cfg.knn_k {
            (
                NeighborIndex::load(&self.dir.join("neighbors_a.mgi"), Modality::A)?,
                NeighborIndex::load(&self.dir.join("neighbors_s.mgi"), Modality::S)?,
            )
        } else {
            (build_neighbor_index(&self.features_a, cfg.knn_k)?, build_neighbor_index(&self.features_s, cfg.knn_k)?)
        };
        Ok(Some(expand_candidates(&self.train, &a, &s, cfg.expand_r)?))
    }

    pub fn inputs<T: Scalar>(&self, cfg: &RunConfig) -> Result<ModelInputs<T>, CliError> {
        let induced = self.induced(cfg)?;
        Ok(ModelInputs::new(&self.train, induced.as_ref(), cfg.dual_view(), &self.features_a, &self.features_s)?)
    }

    pub fn split(&self, name: &str) -> Result<&[(usize, usize)], CliError> {
        match name {
            "valid" => Ok(&self.valid),
            "test" => Ok(&self.test),
            "train" => Ok(self.train.edges()),
            _ => Err(CliError::Usage(format!("unknown split {name:?}; expected train, valid or test"))),
        }
    }
}

pub fn metrics_json(r: &MetricReport) -> Value {
    let mut m = serde_json::Map::new();
    for &n in &r.cutoffs {
        m.insert(format!("recall@{n}"), json!(r.recall_at(n)));
        m.insert(format!("ndcg@{n}"), json!(r.ndcg_at(n)));
    }
    m.insert("users".into(), json!(r.users.len()));
    m.insert("skipped".into(), json!(r.skipped));
    Value::Object(m)
}

/// Keeps the first `keep` lines of a log and reopens it for appending.
fn reopen_log(path: &Path, keep: usize) -> Result<BufWriter<File>, CliError> {
    let kept: String = match fs::read_to_string(path) {
        Ok(text) => text.lines().take(keep).map(|l| format!("{l}\n")).collect(),
        Err(_) => String::new(),
    };
    if kept.lines().count() < keep {
        return Err(CliError::Checkpoint(format!("{} is shorter than the checkpoint history", path.display())));
    }
    write_text(path, &kept)?;
    let f = OpenOptions::new().append(true).open(path).map_err(|e| CliError::missing(path, e))?;
    Ok(BufWriter::new(f))
}

fn routing_rows<T: Scalar>(model: &Model<T>, history: &[magnet::train::EpochRecord]) -> Result<Vec<String>, CliError> {
    let mut rows = Vec::new();
    for rec in history {
        if let Some(mean) = &rec.routing_mean {
            rows.push(model_profile(model, mean)?.csv_row(&format!("epoch_{}", rec.epoch)));
        }
    }
    Ok(rows)
}

fn write_routing_csv(path: &Path, rows: &[String]) -> Result<(), CliError> {
    let mut text = format!("{CSV_HEADER}\n");
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    write_text(path, &text)
}

fn split_profile<T: Scalar>(model: &Model<T>, inputs: &ModelInputs<T>, pairs: &[(usize, usize)]) -> Result<Option<RoutingProfile>, CliError> {
    if !model.routed() || pairs.is_empty() {
        return Ok(None);
    }
    let frozen = model.freeze(inputs);
    let mean = aggregate_routing(model, &frozen, pairs)?;
    Ok(Some(model_profile(model, &mean)?))
}

pub fn train(cfg: &RunConfig, data_dir: &Path, out: &Path, resume: bool) -> Result<Value, CliError> {
    match cfg.precision {
        Precision::F32 => train_as::<f32>(cfg, data_dir, out, resume),
        Precision::F64 => train_as::<f64>(cfg, data_dir, out, resume),
    }
}

/// A resumed run may extend its epoch, step and patience budget but must
/// otherwise match.
fn same_but_budget(a: &TrainerConfig, b: &TrainerConfig) -> bool {
    let budgetless = |c: &TrainerConfig| TrainerConfig {
        max_epochs: 0,
        max_steps: None,
        patience: 0,
        ..c.clone()
    };
    budgetless(a) == budgetless(b)
}

fn train_as<T: Scalar>(cfg: &RunConfig, data_dir: &Path, out: &Path, resume: bool) -> Result<Value, CliError> {
    let prep = Prepared::load(data_dir)?;
    let data = TrainData {
        inputs: prep.inputs::<T>(cfg)?,
        train: prep.train.clone(),
        valid: prep.valid.clone(),
    };
    let tcfg = cfg.trainer();
    let ckpt = out.join(CHECKPOINT_DIR);
    let mut trainer = if resume {
        let mut t = Trainer::<T>::load(&ckpt)?;
        if !same_but_budget(&t.config, &tcfg) {
            return Err(CliError::Checkpoint("checkpoint was trained with a different configuration".into()));
        }
        t.config = tcfg;
        t
    } else {
        if ckpt.exists() {
            fs::remove_dir_all(&ckpt).map_err(|e| CliError::Other(format!("{}: {e}", ckpt.display())))?;
        }
        Trainer::<T>::new(tcfg, prep.meta.num_users, prep.meta.num_items, prep.features_a.dim, prep.features_s.dim)?
    };
    cfg.write_resolved(out)?;
    write_json(&ckpt.join(RUN_FILE), cfg)?;

    let metrics_path = out.join(METRICS_FILE);
    let steps_path = out.join(STEPS_FILE);
    let mut metrics = reopen_log(&metrics_path, trainer.epoch)?;
    let steps = RefCell::new(reopen_log(&steps_path, trainer.step)?);
    let step_error: RefCell<Option<std::io::Error>> = RefCell::new(None);
    let start = Instant::now();
    let log_seconds = cfg.log_seconds;
    trainer.fit(
        &data,
        &mut |rec| {
            if let Err(e) = writeln!(steps.borrow_mut(), "{}", rec.to_json()) {
                step_error.borrow_mut().get_or_insert(e);
            }
        },
        &mut |t, rec| {
            if let Some(e) = step_error.borrow_mut().take() {
                return Err(MagnetError::io(&steps_path, e));
            }
            let secs = log_seconds.then(|| start.elapsed().as_secs_f64());
            writeln!(metrics, "{}", rec.to_json(secs))
                .and_then(|_| metrics.flush())
                .map_err(|e| MagnetError::io(&metrics_path, e))?;
            steps.borrow_mut().flush().map_err(|e| MagnetError::io(&steps_path, e))?;
            t.save(&ckpt)
        },
    )?;
    steps.borrow_mut().flush().map_err(|e| CliError::Other(e.to_string()))?;
    trainer.save(&ckpt)?;

    let summary = trainer.summary();
    let best = trainer.best_model();
    let frozen = best.freeze(&data.inputs);
    let test = evaluate_model(&best, &frozen, &prep.train, &prep.test, &DEFAULT_CUTOFFS)?;
    let popularity = popularity_baseline(&prep.train, &prep.test, &DEFAULT_CUTOFFS)?;
    let mut rows = routing_rows(&trainer.model, &trainer.history)?;
    let profile = split_profile(&best, &data.inputs, &prep.test)?;
    if let Some(p) = &profile {
        rows.push(p.csv_row("test"));
    }
    write_routing_csv(&out.join(ROUTING_FILE), &rows)?;
    let report = json!({
        "precision": T::NAME,
        "summary": summary,
        "switched_at": trainer.schedule.switched_at,
        "test": metrics_json(&test),
        "popularity": metrics_json(&popularity),
        "routing": profile,
    });
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(report)
}

/// Which weights of a checkpoint to score with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Weights {
    Best,
    Last,
}

fn checkpoint_precision(ckpt: &Path) -> Result<Precision, CliError> {
    let manifest: Value = read_json(&ckpt.join("manifest.json"))?;
    match manifest.get("scalar").and_then(Value::as_str) {
        Some("f32") => Ok(Precision::F32),
        Some("f64") => Ok(Precision::F64),
        other => Err(CliError::Checkpoint(format!("unknown scalar {other:?} in manifest"))),
    }
}

fn checkpoint_run_config(ckpt: &Path) -> Result<RunConfig, CliError> {
    let path = ckpt.join(RUN_FILE);
    if path.exists() {
        RunConfig::load(&path)
    } else {
        Err(CliError::Checkpoint(format!("{} is missing", path.display())))
    }
}

fn load_model<T: Scalar>(ckpt: &Path, weights: Weights) -> Result<Trainer<T>, CliError> {
    let mut t = Trainer::<T>::load(ckpt)?;
    if weights == Weights::Best {
        t.model = t.best_model();
    }
    Ok(t)
}

pub struct ScoreRequest<'a> {
    pub data_dir: &'a Path,
    pub checkpoint: &'a Path,
    pub split: &'a str,
    pub weights: Weights,
}

pub fn evaluate(req: &ScoreRequest, per_user: Option<&Path>) -> Result<Value, CliError> {
    match checkpoint_precision(req.checkpoint)? {
        Precision::F32 => evaluate_as::<f32>(req, per_user),
        Precision::F64 => evaluate_as::<f64>(req, per_user),
    }
}

fn evaluate_as<T: Scalar>(req: &ScoreRequest, per_user: Option<&Path>) -> Result<Value, CliError> {
    let cfg = checkpoint_run_config(req.checkpoint)?;
    let prep = Prepared::load(req.data_dir)?;
    let heldout = prep.split(req.split)?;
    let t = load_model::<T>(req.checkpoint, req.weights)?;
    let inputs = prep.inputs::<T>(&cfg)?;
    let frozen = t.model.freeze(&inputs);
    let report = evaluate_model(&t.model, &frozen, &prep.train, heldout, &DEFAULT_CUTOFFS)?;
    if let Some(p) = per_user {
        write_text(p, &report.per_user_csv())?;
    }
    Ok(json!({ "split": req.split, "metrics": metrics_json(&report) }))
}

pub fn diagnose(req: &ScoreRequest, out: &Path) -> Result<Value, CliError> {
    match checkpoint_precision(req.checkpoint)? {
        Precision::F32 => diagnose_as::<f32>(req, out),
        Precision::F64 => diagnose_as::<f64>(req, out),
    }
}

fn diagnose_as<T: Scalar>(req: &ScoreRequest, out: &Path) -> Result<Value, CliError> {
    let cfg = checkpoint_run_config(req.checkpoint)?;
    let prep = Prepared::load(req.data_dir)?;
    let pairs = prep.split(req.split)?;
    let t = load_model::<T>(req.checkpoint, req.weights)?;
    if !t.model.routed() {
        return Err(CliError::Usage("the checkpoint has no router to diagnose".into()));
    }
    let inputs = prep.inputs::<T>(&cfg)?;
    let profile = split_profile(&t.model, &inputs, pairs)?
        .ok_or_else(|| CliError::Data(format!("split {:?} has no pairs", req.split)))?;
    let mut rows = routing_rows(&t.model, &t.history)?;
    rows.push(profile.csv_row(req.split));
    write_routing_csv(&out.join(ROUTING_FILE), &rows)?;
    let report = json!({
        "split": req.split,
        "pairs": pairs.len(),
        "profile": profile,
        "switched_at": t.schedule.switched_at,
    });
    write_json(&out.join("diagnostics.json"), &report)?;
    Ok(report)
}

/// Objective scopes checked by the gradient oracle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Scope {
    All,
    Bpr,
    Stage1,
    Stage2,
}

/// Stage weights are constants during the check; these entropies give
/// representative values under the configured strategy.
const STAGE1_ENTROPY: f64 = 0.2;
const STAGE2_ENTROPY: f64 = 0.9;

/// The report carries `passed` and the failing scopes; the caller decides the
/// exit code.
pub fn gradcheck(cfg: &RunConfig, scope: Scope, opts: &GradCheckOptions) -> Result<Value, CliError> {
    let micro = micro_instance()?;
    let inputs = micro.inputs(cfg.dual_view())?;
    let model_cfg = magnet::model::ModelConfig {
        fusion: cfg.fusion,
        dual_view: cfg.dual_view(),
        dropout: cfg.dropout,
        ..micro_model_config()
    };
    let mut rng = run_rng(cfg.seed, 0);
    let f = &micro.features_a;
    let model = Model::<f64>::init(model_cfg, inputs.num_users, inputs.num_items, f.dim, micro.features_s.dim, &mut rng)?;
    let plan = micro.plan(&inputs, cfg.dropout, cfg.seed)?;
    let full = LossConfig {
        lambda_ctr: cfg.lambda_ctr,
        tau: cfg.tau,
        weight_decay: cfg.weight_decay,
        mean_bpr: cfg.mean_bpr,
    };
    let bpr_only = LossConfig {
        lambda_ctr: 0.0,
        weight_decay: 0.0,
        ..full
    };
    let scopes: Vec<(&str, LossConfig, (f64, f64))> = [
        (Scope::Bpr, "bpr", bpr_only, (0.0, 0.0)),
        (Scope::Stage1, "stage1", full, stage_weights(1, cfg.lambda_r, cfg.strategy, STAGE1_ENTROPY)),
        (Scope::Stage2, "stage2", full, stage_weights(2, cfg.lambda_r, cfg.strategy, STAGE2_ENTROPY)),
    ]
    .into_iter()
    .filter(|(s, ..)| scope == Scope::All || scope == *s)
    .map(|(_, name, loss, w)| (name, loss, w))
    .collect();
    let mut reports = serde_json::Map::new();
    let mut failing = Vec::new();
    for (name, loss, weights) in scopes {
        let r = gradient_check(&model, &inputs, &plan, &loss, weights, opts)?;
        info!("gradcheck {name}: max relative error {:.3e}", r.max_rel);
        if !r.passed {
            failing.push(format!("{name} ({})", r.failing.join(", ")));
        }
        reports.insert(name.into(), serde_json::to_value(&r).expect("report serializes"));
    }
    let coords = model.num_coordinates();
    Ok(json!({ "coordinates": coords, "scopes": reports, "passed": failing.is_empty(), "failing": failing }))
}
