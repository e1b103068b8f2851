//! Command implementations. All exit-code policy lives in `main`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use rayon::prelude::*;

use stmd_core::data::{
    read_sequence_dir, write_sequence_dir, SequenceSample, Split,
};
use stmd_core::eval::{run_ope, StaticBaseline, TrackResult};
use stmd_core::model::{StmdModel, StmdTracker};
use stmd_core::train::{load_checkpoint, save_checkpoint, train_loop, TrainOutcome};

use crate::config::AppConfig;
use crate::plotting;

/// A user/config problem (exit 2) as opposed to an internal failure (exit 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn ensure_empty_or_force(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let nonempty = fs::read_dir(dir)
            .map(|mut d| d.next().is_some())
            .unwrap_or(false);
        if nonempty && !force {
            return Err(usage(format!(
                "output directory {} is not empty (pass --force to overwrite)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir)
        .map_err(|e| usage(format!("cannot create output directory {}: {e}", dir.display())))
}

/// Generate the benchmark: train/eval sequence directories plus a manifest
/// of per-sequence seeds.
pub fn cmd_gen_data(cfg: &AppConfig, out: &Path, force: bool) -> Result<()> {
    ensure_empty_or_force(out, force)?;
    let mut manifest = String::from("split,name,seed\n");
    for (split, name) in [(Split::Train, "train"), (Split::Eval, "eval")] {
        let scenarios = cfg.benchmark.scenarios(split);
        let split_dir = out.join(name);
        fs::create_dir_all(&split_dir)
            .map_err(|e| usage(format!("cannot create {}: {e}", split_dir.display())))?;
        for (i, scen) in scenarios.iter().enumerate() {
            let sample = stmd_core::data::generate_synthetic_sequence(scen)?;
            let seq_name = format!("seq_{i:04}");
            write_sequence_dir(&sample, &split_dir.join(&seq_name))?;
            manifest.push_str(&format!("{name},{seq_name},{}\n", scen.seed));
        }
    }
    fs::write(out.join("manifest.csv"), manifest)
        .with_context(|| format!("writing manifest under {}", out.display()))?;
    println!(
        "wrote {} train + {} eval sequences to {}",
        cfg.benchmark.train_sequences,
        cfg.benchmark.eval_sequences,
        out.display()
    );
    Ok(())
}

fn load_split(data_dir: &Path, split: &str) -> Result<Vec<SequenceSample>> {
    let dir = data_dir.join(split);
    let mut names: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| usage(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(usage(format!("no sequence directories under {}", dir.display())));
    }
    names.iter().map(|p| Ok(read_sequence_dir(p)?)).collect()
}

fn data_dir_of(cfg: &AppConfig) -> Result<PathBuf> {
    cfg.data_dir
        .clone()
        .ok_or_else(|| usage("config key data_dir must point at a gen-data output directory"))
}

/// Train on the generated benchmark and write a checkpoint plus a JSONL
/// metric log.
pub fn cmd_train(cfg: &AppConfig, out: &Path, force: bool) -> Result<()> {
    ensure_empty_or_force(out, force)?;
    let data_dir = data_dir_of(cfg)?;
    let train_set = load_split(&data_dir, "train")?;
    let eval_set = load_split(&data_dir, "eval")?;

    let mut model: StmdModel<f32> = StmdModel::new(cfg.tracker.clone())?;
    let outcome = train_loop(&mut model, &cfg.train, &train_set, &eval_set)?;
    write_metrics(&outcome, &out.join("metrics.jsonl"))?;
    save_checkpoint(&model, outcome.steps as u64, &out.join("checkpoint.stmd"))?;
    println!(
        "trained {} steps; best eval Success {:.4}; checkpoint at {}",
        outcome.steps,
        outcome.best_success,
        out.join("checkpoint.stmd").display()
    );
    Ok(())
}

fn write_metrics(outcome: &TrainOutcome, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    for h in &outcome.history {
        let mut v = serde_json::to_value(h).expect("step record serializes");
        v["kind"] = "step".into();
        writeln!(f, "{v}")?;
    }
    for e in &outcome.evals {
        let mut v = serde_json::to_value(e).expect("eval record serializes");
        v["kind"] = "eval".into();
        writeln!(f, "{v}")?;
    }
    Ok(())
}

/// Evaluate a checkpoint over the eval split, in parallel across sequences.
pub fn cmd_eval(cfg: &AppConfig, checkpoint: &Path, out: &Path, force: bool, workers: usize) -> Result<()> {
    ensure_empty_or_force(out, force)?;
    let data_dir = data_dir_of(cfg)?;
    let eval_set = load_split(&data_dir, "eval")?;
    let (model, _) = load_checkpoint::<f32>(checkpoint)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .context("building worker pool")?;
    let results: Vec<stmd_core::Result<TrackResult>> = pool.install(|| {
        eval_set
            .par_iter()
            .map(|sample| {
                let mut tracker = StmdTracker::new(&model);
                run_ope(&mut tracker, sample)
            })
            .collect()
    });

    let results_dir = out.join("results");
    fs::create_dir_all(&results_dir)?;
    let mut mean_s = 0.0;
    let mut mean_p = 0.0;
    let n = results.len();
    println!("{:<10} {:>9} {:>10}", "sequence", "Success", "Precision");
    for (i, r) in results.into_iter().enumerate() {
        let r = r?;
        let name = format!("seq_{i:04}");
        fs::write(results_dir.join(format!("{name}.json")), r.to_json())?;
        println!("{:<10} {:>9.4} {:>10.4}", name, r.success, r.precision);
        mean_s += r.success;
        mean_p += r.precision;
    }
    println!(
        "{:<10} {:>9.4} {:>10.4}",
        "mean",
        mean_s / n as f64,
        mean_p / n as f64
    );
    let (bs, bp) = static_baseline(&eval_set)?;
    println!("{:<10} {:>9.4} {:>10.4}", "baseline", bs, bp);
    Ok(())
}

/// Mean Success/Precision of the static previous-box baseline, printed as a
/// reference row in eval summaries.
fn static_baseline(eval_set: &[SequenceSample]) -> Result<(f64, f64)> {
    let mut s = 0.0;
    let mut p = 0.0;
    for sample in eval_set {
        let mut b = StaticBaseline::default();
        let r = run_ope(&mut b, sample)?;
        s += r.success;
        p += r.precision;
    }
    Ok((s / eval_set.len() as f64, p / eval_set.len() as f64))
}

/// One ablation axis: train and evaluate each variant under shared seeds and
/// write `ablation.csv`.
pub fn cmd_ablate(cfg: &AppConfig, axis: &str, out: &Path, force: bool) -> Result<()> {
    let variants: Vec<(String, AppConfig)> = match axis {
        "padding" => ["none", "zero", "replicate"]
            .iter()
            .map(|m| {
                let mut c = cfg.clone();
                c.tracker.padding = match *m {
                    "none" => stmd_core::data::PaddingMode::None,
                    "zero" => stmd_core::data::PaddingMode::Zero,
                    _ => stmd_core::data::PaddingMode::Replicate,
                };
                (m.to_string(), c)
            })
            .collect(),
        "sigma" => [0.5, 1.0, 1.5, 2.0]
            .iter()
            .map(|&s| {
                let mut c = cfg.clone();
                c.tracker.sigma = s;
                (format!("{s}"), c)
            })
            .collect(),
        "memory" => [("bidirectional", true), ("forward-only", false)]
            .iter()
            .map(|&(name, on)| {
                let mut c = cfg.clone();
                c.tracker.bidirectional = on;
                (name.to_string(), c)
            })
            .collect(),
        "temporal" => [("on", true), ("off", false)]
            .iter()
            .map(|&(name, on)| {
                let mut c = cfg.clone();
                c.tracker.temporal_enabled = on;
                (name.to_string(), c)
            })
            .collect(),
        other => return Err(usage(format!(
            "unknown ablation axis {other:?} (expected padding, sigma, memory, or temporal)"
        ))),
    };

    ensure_empty_or_force(out, force)?;
    let scale = cfg.ablation_scale;
    let mut bench = cfg.benchmark.clone();
    bench.train_sequences = ((bench.train_sequences as f64 * scale).round() as usize).max(2);
    bench.eval_sequences = ((bench.eval_sequences as f64 * scale).round() as usize).max(1);
    let train_set = bench.generate(Split::Train)?;
    let eval_set = bench.generate(Split::Eval)?;

    let mut rows = vec!["variant,success,precision".to_string()];
    for (name, vcfg) in &variants {
        let mut model: StmdModel<f32> = StmdModel::new(vcfg.tracker.clone())?;
        let outcome = train_loop(&mut model, &vcfg.train, &train_set, &eval_set)?;
        let (s, p) = stmd_core::train::evaluate_model(&model, &eval_set)?;
        rows.push(format!("{name},{s:.6},{p:.6}"));
        println!(
            "{axis}={name}: Success {s:.4} Precision {p:.4} ({} steps)",
            outcome.steps
        );
    }
    fs::write(out.join("ablation.csv"), rows.join("\n") + "\n")?;
    Ok(())
}

/// Render Success/Precision curves and the per-frame IoU trace for every
/// TrackResult JSON in a results directory.
pub fn cmd_plot(results_dir: &Path, out: &Path, force: bool) -> Result<()> {
    let mut files: Vec<PathBuf> = fs::read_dir(results_dir)
        .map_err(|e| usage(format!("cannot read {}: {e}", results_dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(usage(format!(
            "no TrackResult JSON files in {}",
            results_dir.display()
        )));
    }
    ensure_empty_or_force(out, force)?;
    let figures = out.join("figures");
    fs::create_dir_all(&figures)?;
    for f in &files {
        let text = fs::read_to_string(f)?;
        let result = TrackResult::from_json(&text)
            .map_err(|e| usage(format!("corrupt result {}: {e}", f.display())))?;
        let stem = f
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| anyhow!("bad file name {}", f.display()))?;

        let s = plotting::success_curve(&result.ious);
        plotting::line_chart(
            &figures.join(format!("{stem}_success.png")),
            &s,
            (0.0, 1.0),
            (0.0, 1.0),
            [204, 51, 51],
        )?;
        let p = plotting::precision_curve(&result.dists);
        plotting::line_chart(
            &figures.join(format!("{stem}_precision.png")),
            &p,
            (0.0, 2.0),
            (0.0, 1.0),
            [51, 102, 204],
        )?;
        let trace = plotting::frame_trace(&result.ious);
        plotting::line_chart(
            &figures.join(format!("{stem}_iou_trace.png")),
            &trace,
            (0.0, (result.ious.len() - 1).max(1) as f64),
            (0.0, 1.0),
            [34, 139, 34],
        )?;
    }
    println!("wrote figures for {} results to {}", files.len(), figures.display());
    Ok(())
}
