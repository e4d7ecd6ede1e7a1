//! Acceptance run: every criterion at its stated tolerance, one line each.
//!
//! Criteria 7 to 9 run the bundled desk experiment twice from scratch, so this
//! target takes as long as two full pipeline runs.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use starmt::detector::checkpoint::encode_checkpoint;
use starmt::detector::load_checkpoint;
use starmt::report::median;
use starmt::sfda::Method;
use starmt_cli::pipeline::{selection_checks, EvalSummary};
use starmt_cli::{run_all, ExperimentConfig, Options, DESK_CONFIG};

use support::Check;

const BUDGET: Duration = Duration::from_secs(30 * 60);

struct Desk {
    dir: PathBuf,
    elapsed: Duration,
    summary: EvalSummary,
}

fn read_summary(dir: &Path) -> Result<EvalSummary, String> {
    let bytes = fs::read(dir.join("eval/summary.json")).map_err(|e| e.to_string())?;
    serde_json::from_slice(&bytes).map_err(|e| e.to_string())
}

fn fresh_run(cfg: &ExperimentConfig) -> Result<Desk, String> {
    if cfg.out_dir.exists() {
        fs::remove_dir_all(&cfg.out_dir).map_err(|e| e.to_string())?;
    }
    let t = Instant::now();
    run_all(cfg, &Options::default()).map_err(|e| e.to_string())?;
    Ok(Desk {
        dir: cfg.out_dir.clone(),
        elapsed: t.elapsed(),
        summary: read_summary(&cfg.out_dir)?,
    })
}

fn median_of(summary: &EvalSummary, method: Method, kind: &str) -> Result<f64, String> {
    summary
        .entries
        .iter()
        .find(|e| e.method == method && e.degradation == kind)
        .and_then(|e| median(&e.ap50))
        .ok_or_else(|| format!("no {} result on {kind}", method.as_str()))
}

fn end_to_end(desk: &Desk) -> Check {
    let s = &desk.summary;
    let clean = s.source_clean_ap50;
    let source = median_of(s, Method::SourceOnly, "noise")?;
    let basic = median_of(s, Method::BasicMt, "noise")?;
    let star = median_of(s, Method::StarMt, "noise")?;
    let oracle = median_of(s, Method::Oracle, "noise")?;
    let pts = |x: f64| 100.0 * x;
    let line = format!(
        "clean {:.1}, source {:.1}, basic MT {:.1}, STAR-MT {:.1}, oracle {:.1} in {:.1} min",
        pts(clean),
        pts(source),
        pts(basic),
        pts(star),
        pts(oracle),
        desk.elapsed.as_secs_f64() / 60.0
    );
    let mut failures = Vec::new();
    if clean - source < 0.10 {
        failures.push(format!("degradation drop {:.1} < 10", pts(clean - source)));
    }
    if star - source < 0.05 {
        failures.push(format!("STAR-MT gain {:.1} < 5", pts(star - source)));
    }
    for (hi, lo, a, b) in [
        ("oracle", "STAR-MT", oracle, star),
        ("STAR-MT", "basic MT", star, basic),
        ("basic MT", "source", basic, source),
    ] {
        if a < b - 0.01 {
            failures.push(format!("{hi} below {lo} by {:.1}", pts(b - a)));
        }
    }
    if desk.elapsed > BUDGET {
        failures.push("over the 30 min budget".into());
    }
    if failures.is_empty() {
        Ok(line)
    } else {
        Err(format!("{line}: {}", failures.join("; ")))
    }
}

fn entropy_selection(desk: &Desk) -> Check {
    let checks: Vec<_> = selection_checks(&desk.summary)
        .into_iter()
        .filter(|c| c.method == Method::StarMt)
        .collect();
    if checks.is_empty() {
        return Err("no STAR-MT snapshots evaluated".into());
    }
    let parts: Vec<String> = checks
        .iter()
        .map(|c| {
            format!(
                "seed {}: iter {:?} {:.1} vs best {} {:.1}",
                c.seed_index,
                c.selected_iter,
                100.0 * c.selected_ap50,
                c.best_iter,
                100.0 * c.best_ap50
            )
        })
        .collect();
    let line = parts.join("; ");
    if checks.iter().all(|c| c.selected_ap50 >= c.best_ap50 - 0.02) {
        Ok(line)
    } else {
        Err(line)
    }
}

fn files_with_ext(root: &Path, exts: &[&str]) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        let Ok(entries) = fs::read_dir(&d) else {
            continue;
        };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if p
                .extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| exts.contains(&x))
            {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// Metric json files carry a wall-clock field; everything else must match.
fn strip_wall_clock(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(m) => {
            m.remove("wall_clock_s");
            m.values_mut().for_each(strip_wall_clock);
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(strip_wall_clock),
        _ => {}
    }
}

fn reproducibility(first: &Desk, root: &Path) -> Check {
    let mut cfg =
        ExperimentConfig::load(&first.dir.join("eval/run.json")).map_err(|e| e.to_string())?;
    cfg.out_dir = root.join("replay");
    let second = fresh_run(&cfg)?;
    if first.summary != second.summary {
        return Err("summary.json differs after replay".into());
    }
    let bins = files_with_ext(&first.dir, &["ck", "npy", "csv"]);
    for p in &bins {
        if fs::read(first.dir.join(p)).ok() != fs::read(second.dir.join(p)).ok() {
            return Err(format!("{} differs after replay", p.display()));
        }
    }
    let metrics = files_with_ext(&first.dir.join("eval"), &["json"]);
    for p in metrics.iter().filter(|p| !p.ends_with("run.json")) {
        let load = |d: &Path| -> Result<serde_json::Value, String> {
            let bytes = fs::read(d.join("eval").join(p)).map_err(|e| e.to_string())?;
            let mut v = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
            strip_wall_clock(&mut v);
            Ok(v)
        };
        if load(&first.dir)? != load(&second.dir)? {
            return Err(format!("eval/{} differs after replay", p.display()));
        }
    }
    let ck = first.dir.join("source/model.ck");
    let bytes = fs::read(&ck).map_err(|e| e.to_string())?;
    let (params, manifest) = load_checkpoint(&ck, None).map_err(|e| e.to_string())?;
    let again = encode_checkpoint(&params, &manifest.metadata).map_err(|e| e.to_string())?;
    if again != bytes {
        return Err("checkpoint save/load/save changed bytes".into());
    }
    Ok(format!(
        "{} binary artifacts and {} metric files identical; checkpoint round trip exact",
        bins.len(),
        metrics.len()
    ))
}

fn main() {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let scratch = root.join("scratch");
    let _ = fs::remove_dir_all(&scratch);
    fs::create_dir_all(&scratch).expect("scratch directory");

    let mut results: Vec<(&str, Check)> = vec![
        ("1 algebraic identities", support::algebra()),
        ("2 gradient checks", support::gradients()),
        ("3 degradation statistics", support::degradation()),
        ("4 schedule and EMA scope", support::schedule_scope()),
        ("5 oracle equivalence", support::oracle_equivalence()),
        ("6 label blindness", support::label_blindness(&scratch)),
    ];

    let mut cfg = ExperimentConfig::from_toml(DESK_CONFIG).expect("bundled config parses");
    cfg.out_dir = root.join("desk");
    match fresh_run(&cfg) {
        Ok(desk) => {
            results.push(("7 desk-scale experiment", end_to_end(&desk)));
            results.push(("8 entropy selection", entropy_selection(&desk)));
            results.push(("9 reproducibility", reproducibility(&desk, &root)));
        }
        Err(e) => {
            for name in [
                "7 desk-scale experiment",
                "8 entropy selection",
                "9 reproducibility",
            ] {
                results.push((name, Err(format!("pipeline failed: {e}"))));
            }
        }
    }

    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(msg) => println!("PASS {name}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL {name}: {msg}")
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", results.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", results.len());
}
