//! The six pipeline commands. Output layout under `out_dir`:
//!
//! ```text
//! data/clean/                        synthesized dataset (absent with data.external)
//! data/<kind>/                       degraded copy per degradation kind
//! source/model.ck, train_log.jsonl   source model
//! adapt/<kind>/<method>/seed_<s>/    model.ck, log.jsonl, trace.json, outcome.json, snapshots/
//! eval/                              MetricsRecord JSON per model, summary.json
//! report/                            table.csv, table.txt, selection.json, curves/
//! ```
//!
//! Every command directory carries a `run.json` record.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use starmt::dataset::{build_dataset, DatasetManifest, LabelAccess};
use starmt::degrade::{degrade_dataset, DegradationKind};
use starmt::detector::{load_checkpoint, save_checkpoint, train_source_sequences, ModelParams};
use starmt::eval::{evaluate_model, MetricsRecord};
use starmt::report::{build_table, curve_csv, curve_rows, render_curve_png, TableEntry};
use starmt::seed::derive_stream;
use starmt::sfda::{
    adapt, baseline_basic_mt, baseline_pseudo_label, oracle_finetune, AdaptOutcome, EntropyTrace,
    IterRecord, Method,
};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::provenance::{check_existing, hash_path, write_record, Freshness, RunRecord};

pub const CHECKPOINT_FILE: &str = "model.ck";

#[derive(Clone, Debug, Default)]
pub struct Options {
    pub force: bool,
    /// Restricts `adapt` to one method.
    pub method: Option<Method>,
}

/// Whether a command did work or found its outputs current.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ran,
    UpToDate,
}

/// Paths of every artifact, relative to the output directory.
pub struct Layout<'a> {
    pub cfg: &'a ExperimentConfig,
}

impl<'a> Layout<'a> {
    pub fn new(cfg: &'a ExperimentConfig) -> Self {
        Self { cfg }
    }

    fn root(&self) -> &Path {
        &self.cfg.out_dir
    }

    pub fn generated_data(&self) -> PathBuf {
        self.root().join("data").join("clean")
    }

    pub fn clean_data(&self) -> PathBuf {
        self.cfg
            .data
            .external
            .clone()
            .unwrap_or_else(|| self.generated_data())
    }

    pub fn degraded(&self, kind: DegradationKind) -> PathBuf {
        self.root().join("data").join(kind.as_str())
    }

    pub fn source_dir(&self) -> PathBuf {
        self.root().join("source")
    }

    pub fn source_checkpoint(&self) -> PathBuf {
        self.source_dir().join(CHECKPOINT_FILE)
    }

    pub fn adapt_dir(&self, kind: DegradationKind, method: Method, seed: u64) -> PathBuf {
        self.root()
            .join("adapt")
            .join(kind.as_str())
            .join(method.as_str())
            .join(format!("seed_{seed}"))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root().join("eval")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root().join("report")
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(self.root())
            .unwrap_or(p)
            .to_string_lossy()
            .replace('\\', "/")
    }

    fn hashed(&self, paths: &[PathBuf]) -> Result<BTreeMap<String, String>, CliError> {
        paths
            .iter()
            .map(|p| Ok((self.rel(p), hash_path(p)?)))
            .collect()
    }
}

pub fn data_seed(cfg: &ExperimentConfig) -> u64 {
    derive_stream(cfg.seed, "data", 0)
}

pub fn degrade_seed(cfg: &ExperimentConfig, kind: DegradationKind) -> u64 {
    derive_stream(cfg.seed, &format!("degrade/{kind}"), 0)
}

pub fn source_seed(cfg: &ExperimentConfig) -> u64 {
    derive_stream(cfg.seed, "source", 0)
}

/// Stream seed of adaptation run `s`, shared by every method of that run.
pub fn adapt_seed(cfg: &ExperimentConfig, s: u64) -> u64 {
    derive_stream(cfg.seed, "adapt", s)
}

fn record(
    cfg: &ExperimentConfig,
    command: &str,
    stage_hash: String,
    seeds: BTreeMap<String, u64>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
) -> RunRecord {
    RunRecord {
        command: command.into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: cfg.hash(),
        stage_hash,
        master_seed: cfg.seed,
        seeds,
        inputs,
        outputs,
        config: cfg.clone(),
    }
}

fn load_manifest(root: &Path) -> Result<DatasetManifest, CliError> {
    Ok(DatasetManifest::load(root)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Missing {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Runtime(starmt::Error::Corrupt(format!("{}: {e}", path.display()))))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r).expect("serializable");
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn reset_dir(dir: &Path) -> Result<(), CliError> {
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn cmd_gen_data(cfg: &ExperimentConfig, opts: &Options) -> Result<Status, CliError> {
    cfg.validate()?;
    let lay = Layout::new(cfg);
    let dir = lay.generated_data();
    let stage = cfg.blocks_hash(&["data"]);
    let seed = data_seed(cfg);
    let seeds = BTreeMap::from([("data".to_string(), seed)]);
    if let Some(ext) = &cfg.data.external {
        let m = load_manifest(ext)?;
        info!(
            "using external dataset {} ({} splits)",
            ext.display(),
            m.splits.len()
        );
        let inputs = BTreeMap::from([(ext.to_string_lossy().into_owned(), hash_path(ext)?)]);
        if check_existing(&dir, &stage, &inputs, opts.force)? == Freshness::UpToDate {
            return Ok(Status::UpToDate);
        }
        reset_dir(&dir)?;
        write_record(
            &dir,
            &record(cfg, "gen-data", stage, seeds, inputs, BTreeMap::new()),
        )?;
        return Ok(Status::Ran);
    }
    let inputs = BTreeMap::new();
    if check_existing(&dir, &stage, &inputs, opts.force)? == Freshness::UpToDate {
        info!("{} is up to date", dir.display());
        return Ok(Status::UpToDate);
    }
    reset_dir(&dir)?;
    let d = &cfg.data;
    let m = build_dataset(&dir, &d.generator, d.n_sequences, d.split, seed, true)?;
    info!(
        "generated {} sequences under {}",
        m.splits.values().map(Vec::len).sum::<usize>(),
        dir.display()
    );
    let outputs = lay.hashed(&[dir.clone()])?;
    write_record(
        &dir,
        &record(cfg, "gen-data", stage, seeds, inputs, outputs),
    )?;
    Ok(Status::Ran)
}

pub fn cmd_degrade(cfg: &ExperimentConfig, opts: &Options) -> Result<Status, CliError> {
    cfg.validate()?;
    let lay = Layout::new(cfg);
    let clean = load_manifest(&lay.clean_data())?;
    let inputs = lay.hashed(&[lay.clean_data()])?;
    let stage = cfg.blocks_hash(&["data", "degrade"]);
    let mut status = Status::UpToDate;
    for &kind in &cfg.degrade.kinds {
        let dir = lay.degraded(kind);
        let seed = degrade_seed(cfg, kind);
        let stage_k = format!("{stage}/{kind}");
        if check_existing(&dir, &stage_k, &inputs, opts.force)? == Freshness::UpToDate {
            info!("{} is up to date", dir.display());
            continue;
        }
        degrade_dataset(&clean, kind, &dir, seed, &cfg.degrade.ranges, true)?;
        info!("wrote {kind} copy to {}", dir.display());
        let seeds = BTreeMap::from([(format!("degrade/{kind}"), seed)]);
        let outputs = lay.hashed(&[dir.clone()])?;
        write_record(
            &dir,
            &record(cfg, "degrade", stage_k, seeds, inputs.clone(), outputs),
        )?;
        status = Status::Ran;
    }
    Ok(status)
}

pub fn cmd_train_source(cfg: &ExperimentConfig, opts: &Options) -> Result<Status, CliError> {
    cfg.validate()?;
    let lay = Layout::new(cfg);
    let clean = load_manifest(&lay.clean_data())?;
    let inputs = lay.hashed(&[lay.clean_data()])?;
    let dir = lay.source_dir();
    let stage = cfg.blocks_hash(&["data", "source"]);
    if check_existing(&dir, &stage, &inputs, opts.force)? == Freshness::UpToDate {
        info!("{} is up to date", dir.display());
        return Ok(Status::UpToDate);
    }
    let seqs = clean.load_split("train", LabelAccess::Allowed)?;
    reset_dir(&dir)?;
    let seed = source_seed(cfg);
    let mut log = Vec::new();
    let params = train_source_sequences(&seqs, &cfg.source.arch, &cfg.source.train, seed, |r| {
        if r.iter % 500 == 0 {
            info!("source {} iter {} loss {:.4}", r.phase, r.iter, r.loss);
        }
        log.push(r.clone());
    })?;
    write_jsonl(&dir.join("train_log.jsonl"), &log)?;
    let meta = BTreeMap::from([
        ("role".to_string(), serde_json::json!("source")),
        ("seed".to_string(), serde_json::json!(seed)),
    ]);
    save_checkpoint(&params, &lay.source_checkpoint(), &meta)?;
    let seeds = BTreeMap::from([("source".to_string(), seed)]);
    let outputs = lay.hashed(&[lay.source_checkpoint()])?;
    write_record(
        &dir,
        &record(cfg, "train-source", stage, seeds, inputs, outputs),
    )?;
    Ok(Status::Ran)
}

pub fn load_source(cfg: &ExperimentConfig) -> Result<ModelParams, CliError> {
    let lay = Layout::new(cfg);
    Ok(load_checkpoint(&lay.source_checkpoint(), Some(&cfg.source.arch))?.0)
}

/// Selection bookkeeping of one adaptation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeFile {
    pub method: Method,
    pub degradation: String,
    pub seed_index: u64,
    pub seed: u64,
    pub selected_iter: Option<usize>,
    pub snapshot_iters: Vec<usize>,
}

pub fn snapshot_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join("snapshots")
        .join(format!("iter_{iteration:06}.ck"))
}

fn run_method(
    method: Method,
    source: &ModelParams,
    target: &DatasetManifest,
    params: &starmt::sfda::AdaptationConfig,
    on_iter: impl FnMut(&IterRecord),
) -> Result<AdaptOutcome, CliError> {
    Ok(match method {
        Method::StarMt => adapt(source, target, params, on_iter)?,
        Method::BasicMt => baseline_basic_mt(source, target, params, on_iter)?,
        Method::PseudoLabel => baseline_pseudo_label(source, target, params, on_iter)?,
        Method::Oracle => oracle_finetune(source, target, params, on_iter)?,
        Method::SourceOnly => {
            return Err(CliError::Validation {
                key: "method".into(),
                message: "source_only is not an adaptation method".into(),
            })
        }
    })
}

fn methods_to_run(cfg: &ExperimentConfig, opts: &Options) -> Result<Vec<Method>, CliError> {
    match opts.method {
        Some(Method::SourceOnly) => Err(CliError::Validation {
            key: "method".into(),
            message: "source_only is not an adaptation method".into(),
        }),
        Some(m) => Ok(vec![m]),
        None => Ok(cfg.adapt.methods.clone()),
    }
}

pub fn cmd_adapt(cfg: &ExperimentConfig, opts: &Options) -> Result<Status, CliError> {
    cfg.validate()?;
    let methods = methods_to_run(cfg, opts)?;
    let lay = Layout::new(cfg);
    let source = load_source(cfg)?;
    let stage = cfg.blocks_hash(&["data", "degrade", "source", "adapt"]);
    let mut status = Status::UpToDate;
    for &kind in &cfg.degrade.kinds {
        let target_root = lay.degraded(kind);
        let target = load_manifest(&target_root)?;
        let inputs = lay.hashed(&[target_root.clone(), lay.source_checkpoint()])?;
        for &method in &methods {
            for &s in &cfg.adapt.seeds {
                let dir = lay.adapt_dir(kind, method, s);
                let stage_run = format!("{stage}/{kind}/{}/{s}", method.as_str());
                if check_existing(&dir, &stage_run, &inputs, opts.force)? == Freshness::UpToDate {
                    info!("{} is up to date", dir.display());
                    continue;
                }
                let seed = adapt_seed(cfg, s);
                let mut params = cfg.adapt.params.clone();
                params.seed = seed;
                info!("adapting: {kind} {} seed {s}", method.as_str());
                let out = run_method(method, &source, &target, &params, |r| {
                    if r.iter % 100 == 0 {
                        info!(
                            "  {} iter {} {} loss {:.4} H {:?}",
                            method.as_str(),
                            r.iter,
                            r.stage,
                            r.loss_total,
                            r.h_smoothed
                        );
                    }
                })?;
                reset_dir(&dir)?;
                write_adapt_outputs(&dir, method, kind, s, seed, &out)?;
                let seeds = BTreeMap::from([(format!("adapt/{s}"), seed)]);
                let outputs = lay.hashed(&[dir.join(CHECKPOINT_FILE), dir.join("log.jsonl")])?;
                write_record(
                    &dir,
                    &record(cfg, "adapt", stage_run, seeds, inputs.clone(), outputs),
                )?;
                status = Status::Ran;
            }
        }
    }
    Ok(status)
}

fn write_adapt_outputs(
    dir: &Path,
    method: Method,
    kind: DegradationKind,
    seed_index: u64,
    seed: u64,
    out: &AdaptOutcome,
) -> Result<(), CliError> {
    let meta = BTreeMap::from([
        ("method".to_string(), serde_json::json!(method.as_str())),
        ("degradation".to_string(), serde_json::json!(kind.as_str())),
        ("seed".to_string(), serde_json::json!(seed)),
        (
            "selected_iter".to_string(),
            serde_json::json!(out.selected_iter),
        ),
    ]);
    save_checkpoint(&out.params, &dir.join(CHECKPOINT_FILE), &meta)?;
    for snap in &out.snapshots {
        let m = BTreeMap::from([("iteration".to_string(), serde_json::json!(snap.iteration))]);
        save_checkpoint(&snap.params, &snapshot_path(dir, snap.iteration), &m)?;
    }
    write_jsonl(&dir.join("log.jsonl"), &out.log)?;
    write_json(&dir.join("trace.json"), &out.trace)?;
    write_json(
        &dir.join("outcome.json"),
        &OutcomeFile {
            method,
            degradation: kind.as_str().into(),
            seed_index,
            seed,
            selected_iter: out.selected_iter,
            snapshot_iters: out.snapshots.iter().map(|s| s.iteration).collect(),
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEval {
    pub iteration: usize,
    pub ap50: f64,
    pub mean_self_entropy: f64,
}

/// One adaptation run as evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEval {
    pub method: Method,
    pub degradation: String,
    pub seed_index: u64,
    pub selected_iter: Option<usize>,
    pub ap50: f64,
    /// Per snapshot, for methods that select by entropy.
    pub snapshots: Vec<SnapshotEval>,
}

impl RunEval {
    pub fn best_snapshot(&self) -> Option<&SnapshotEval> {
        self.snapshots
            .iter()
            .max_by(|a, b| a.ap50.total_cmp(&b.ap50))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Source model AP50 on the clean test split.
    pub source_clean_ap50: f64,
    pub entries: Vec<TableEntry>,
    pub runs: Vec<RunEval>,
}

fn selects_by_entropy(m: Method) -> bool {
    matches!(m, Method::StarMt | Method::BasicMt | Method::PseudoLabel)
}

pub fn cmd_eval(cfg: &ExperimentConfig, opts: &Options) -> Result<Status, CliError> {
    cfg.validate()?;
    let lay = Layout::new(cfg);
    let methods = methods_to_run(cfg, opts)?;
    let mut inputs_paths = vec![lay.clean_data(), lay.source_checkpoint()];
    for &kind in &cfg.degrade.kinds {
        inputs_paths.push(lay.degraded(kind));
        for &m in &methods {
            for &s in &cfg.adapt.seeds {
                inputs_paths.push(lay.adapt_dir(kind, m, s).join(CHECKPOINT_FILE));
            }
        }
    }
    let inputs = lay.hashed(&inputs_paths)?;
    let dir = lay.eval_dir();
    let stage = format!(
        "{}/{:?}",
        cfg.blocks_hash(&["data", "degrade", "source", "adapt", "eval"]),
        methods
    );
    if check_existing(&dir, &stage, &inputs, opts.force)? == Freshness::UpToDate {
        info!("{} is up to date", dir.display());
        return Ok(Status::UpToDate);
    }
    reset_dir(&dir)?;
    let source = load_source(cfg)?;
    let clean = load_manifest(&lay.clean_data())?;
    let rec = evaluate_model(&source, "source", &clean, &cfg.eval)?;
    info!("source on clean: AP50 {:.4}", rec.mean_ap50);
    write_json(&dir.join("source_only").join("clean.json"), &rec)?;
    let source_clean_ap50 = rec.mean_ap50;
    let mut entries = Vec::new();
    let mut runs = Vec::new();
    for &kind in &cfg.degrade.kinds {
        let target = load_manifest(&lay.degraded(kind))?;
        let rec = evaluate_model(&source, "source", &target, &cfg.eval)?;
        info!("source on {kind}: AP50 {:.4}", rec.mean_ap50);
        write_json(&dir.join("source_only").join(format!("{kind}.json")), &rec)?;
        entries.push(TableEntry {
            method: Method::SourceOnly,
            degradation: kind.as_str().into(),
            ap50: vec![rec.mean_ap50],
        });
        for &m in &methods {
            let mut aps = Vec::new();
            for &s in &cfg.adapt.seeds {
                let adir = lay.adapt_dir(kind, m, s);
                let run = evaluate_run(cfg, &target, &adir, kind, m, s, &dir)?;
                info!(
                    "{kind} {} seed {s}: AP50 {:.4} (iter {:?})",
                    m.as_str(),
                    run.ap50,
                    run.selected_iter
                );
                aps.push(run.ap50);
                runs.push(run);
            }
            entries.push(TableEntry {
                method: m,
                degradation: kind.as_str().into(),
                ap50: aps,
            });
        }
    }
    let summary = EvalSummary {
        source_clean_ap50,
        entries,
        runs,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    let outputs = lay.hashed(&[dir.join("summary.json")])?;
    write_record(
        &dir,
        &record(cfg, "eval", stage, BTreeMap::new(), inputs, outputs),
    )?;
    Ok(Status::Ran)
}

fn evaluate_run(
    cfg: &ExperimentConfig,
    target: &DatasetManifest,
    adir: &Path,
    kind: DegradationKind,
    method: Method,
    s: u64,
    eval_dir: &Path,
) -> Result<RunEval, CliError> {
    let outcome: OutcomeFile = read_json(&adir.join("outcome.json"))?;
    let params = load_checkpoint(&adir.join(CHECKPOINT_FILE), Some(&cfg.source.arch))?.0;
    let id = format!("{kind}/{}/seed_{s}", method.as_str());
    let rec: MetricsRecord = evaluate_model(&params, &id, target, &cfg.eval)?;
    let base = eval_dir.join(kind.as_str()).join(method.as_str());
    write_json(&base.join(format!("seed_{s}.json")), &rec)?;
    let mut snapshots = Vec::new();
    if selects_by_entropy(method) {
        for &it in &outcome.snapshot_iters {
            let p = load_checkpoint(&snapshot_path(adir, it), Some(&cfg.source.arch))?.0;
            let r = evaluate_model(&p, &format!("{id}/iter_{it}"), target, &cfg.eval)?;
            snapshots.push(SnapshotEval {
                iteration: it,
                ap50: r.mean_ap50,
                mean_self_entropy: r.mean_self_entropy,
            });
        }
        write_json(&base.join(format!("seed_{s}.snapshots.json")), &snapshots)?;
    }
    Ok(RunEval {
        method,
        degradation: kind.as_str().into(),
        seed_index: s,
        selected_iter: outcome.selected_iter,
        ap50: rec.mean_ap50,
        snapshots,
    })
}

/// Selected versus best snapshot of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionCheck {
    pub method: Method,
    pub degradation: String,
    pub seed_index: u64,
    pub selected_iter: Option<usize>,
    pub selected_ap50: f64,
    pub best_iter: usize,
    pub best_ap50: f64,
}

pub fn selection_checks(summary: &EvalSummary) -> Vec<SelectionCheck> {
    summary
        .runs
        .iter()
        .filter_map(|r| {
            let best = r.best_snapshot()?;
            Some(SelectionCheck {
                method: r.method,
                degradation: r.degradation.clone(),
                seed_index: r.seed_index,
                selected_iter: r.selected_iter,
                selected_ap50: r.ap50,
                best_iter: best.iteration,
                best_ap50: best.ap50,
            })
        })
        .collect()
}

pub fn cmd_report(cfg: &ExperimentConfig, opts: &Options) -> Result<Status, CliError> {
    cfg.validate()?;
    let lay = Layout::new(cfg);
    let summary_path = lay.eval_dir().join("summary.json");
    let summary: EvalSummary = read_json(&summary_path)?;
    let inputs = lay.hashed(&[summary_path])?;
    let dir = lay.report_dir();
    let stage = cfg.hash();
    if check_existing(&dir, &stage, &inputs, opts.force)? == Freshness::UpToDate {
        info!("{} is up to date", dir.display());
        return Ok(Status::UpToDate);
    }
    reset_dir(&dir)?;
    let mut entries = vec![TableEntry {
        method: Method::SourceOnly,
        degradation: "clean".into(),
        ap50: vec![summary.source_clean_ap50],
    }];
    entries.extend(summary.entries.iter().cloned());
    let table = build_table(&entries);
    fs::write(dir.join("table.csv"), table.to_csv())?;
    fs::write(dir.join("table.txt"), table.to_text())?;
    println!("{}", table.to_text());
    write_json(&dir.join("selection.json"), &selection_checks(&summary))?;
    for run in &summary.runs {
        if run.snapshots.is_empty() {
            continue;
        }
        let kind: DegradationKind = run.degradation.parse()?;
        let adir = lay.adapt_dir(kind, run.method, run.seed_index);
        let trace: EntropyTrace = read_json(&adir.join("trace.json"))?;
        let aps: BTreeMap<usize, f64> = run
            .snapshots
            .iter()
            .map(|s| (s.iteration, s.ap50))
            .collect();
        let rows = curve_rows(&trace, &aps);
        let stem = format!(
            "{}_{}_seed{}",
            run.degradation,
            run.method.as_str(),
            run.seed_index
        );
        let curves = dir.join("curves");
        fs::create_dir_all(&curves)?;
        fs::write(
            curves.join(format!("{stem}.csv")),
            curve_csv(&rows, run.selected_iter),
        )?;
        render_curve_png(
            &rows,
            run.selected_iter,
            &curves.join(format!("{stem}.png")),
        )?;
    }
    let outputs = lay.hashed(&[dir.join("table.csv")])?;
    write_record(
        &dir,
        &record(cfg, "report", stage, BTreeMap::new(), inputs, outputs),
    )?;
    Ok(Status::Ran)
}

/// gen-data through report.
pub fn run_all(cfg: &ExperimentConfig, opts: &Options) -> Result<(), CliError> {
    cmd_gen_data(cfg, opts)?;
    cmd_degrade(cfg, opts)?;
    cmd_train_source(cfg, opts)?;
    cmd_adapt(cfg, opts)?;
    cmd_eval(cfg, opts)?;
    cmd_report(cfg, opts)?;
    Ok(())
}
