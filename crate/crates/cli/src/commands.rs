//! Subcommand implementations. Each command resolves its configuration,
//! performs the work through the core library, and writes its artifacts plus
//! an `effective_config.json` into the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use baa_core::data::{
    build_synthetic_dataset, compute_stats, load_manifest, make_splits, DatasetManifest,
    SplitSpec, DEFAULT_BIN_WIDTH,
};
use baa_core::engine::{
    evaluate, train, write_history_json, write_predictions_csv, EvalResult,
};
use baa_core::models::{
    build_model_for, load_checkpoint, save_checkpoint, BackboneId, CheckpointMeta, Regime,
};
use baa_core::reporting::{
    bias_report, emit_plot, render_comparison_table, PlotKind, PlotPayload, RunResult,
    DEFAULT_BAND_WIDTH,
};

use crate::config::{write_effective_config, ResolvedRun, RunConfig};

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating directory {}", dir.display()))
}

fn config_value(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serialization")
}

pub fn cmd_stats(
    csv: &Path,
    images: &Path,
    out: &Path,
    strict: bool,
    bin_width: u32,
) -> Result<()> {
    let manifest = load_manifest(csv, images, strict)?;
    let stats = compute_stats(&manifest, bin_width);
    ensure_dir(out)?;

    fs::write(
        out.join("stats.json"),
        serde_json::to_vec_pretty(&stats.to_json())?,
    )?;
    emit_plot(
        PlotKind::AgeDistribution,
        &PlotPayload::Stats(&stats),
        &out.join("age_distribution.png"),
    )?;
    emit_plot(
        PlotKind::GenderDistribution,
        &PlotPayload::Stats(&stats),
        &out.join("gender_distribution.png"),
    )?;
    let report = bias_report(&stats, &[], DEFAULT_BAND_WIDTH);
    fs::write(
        out.join("bias_report.json"),
        serde_json::to_vec_pretty(&report.to_json())?,
    )?;
    fs::write(out.join("bias_report.txt"), report.to_text())?;

    let echo = RunConfig {
        csv: Some(csv.to_path_buf()),
        images: Some(images.to_path_buf()),
        out: Some(out.to_path_buf()),
        strict: Some(strict),
        ..RunConfig::default()
    };
    write_effective_config(&echo, out)?;

    println!(
        "{} records ({} male, {} female) -> {}",
        stats.total,
        stats.male_count,
        stats.female_count,
        out.display()
    );
    Ok(())
}

pub fn cmd_synth(out: &Path, n: usize, seed: u64) -> Result<()> {
    if n == 0 {
        bail!("--n must be at least 1");
    }
    let manifest = build_synthetic_dataset(out, n, seed)?;
    let echo = RunConfig {
        out: Some(out.to_path_buf()),
        seed: Some(seed),
        ..RunConfig::default()
    };
    write_effective_config(&echo, out)?;
    println!("{}", out.join("manifest.csv").display());
    let _ = manifest;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_split(
    csv: &Path,
    images: &Path,
    spec: SplitSpec,
    seed: u64,
    out: &Path,
    strict: bool,
) -> Result<()> {
    let manifest = load_manifest(csv, images, strict)?;
    let assignment = make_splits(&manifest, spec, seed)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    assignment.save_json(out)?;
    println!(
        "split {}/{}/{} (seed {}) -> {}",
        spec.train,
        spec.val,
        spec.test,
        seed,
        out.display()
    );
    Ok(())
}

/// Artifact directory for one run: `<out>/<backbone>_<regime>/`.
pub fn run_dir(out: &Path, backbone: BackboneId, regime: Regime) -> PathBuf {
    out.join(format!("{backbone}_{regime}"))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let run = ResolvedRun::from_config(cfg)?;
    let manifest = load_manifest(&run.csv, &run.images, run.strict)?;
    let assignment = make_splits(&manifest, run.split, run.train.seed)?;
    let train_set = manifest.select(&assignment.train_ids);
    let val_set = manifest.select(&assignment.val_ids);

    let mut model = build_model_for(
        run.backbone,
        run.regime,
        run.head,
        run.train.seed,
        run.weights_dir.as_deref(),
    )?;

    let dir = run_dir(&run.out, run.backbone, run.regime);
    ensure_dir(&dir)?;
    let effective = run.effective_config();
    write_effective_config(&effective, &dir)?;
    assignment.save_json(&dir.join("split.json"))?;

    let outcome = train(&mut model, &train_set, &val_set, &run.transforms, &run.train);
    let history = match outcome {
        Ok(history) => history,
        Err(baa_core::engine::TrainError::NonFiniteLoss { epoch, history }) => {
            // Keep whatever completed before the divergence, then surface it.
            write_history_json(&history, &config_value(&effective), &dir.join("history.json"))?;
            return Err(baa_core::engine::TrainError::NonFiniteLoss { epoch, history }.into());
        }
        Err(e) => return Err(e.into()),
    };

    write_history_json(&history, &config_value(&effective), &dir.join("history.json"))?;
    emit_plot(
        PlotKind::HistoryCurve,
        &PlotPayload::History(&history),
        &dir.join("learning_curve.png"),
    )?;

    let best = &history.records[history.best_epoch];
    let meta = CheckpointMeta {
        backbone_id: run.backbone,
        regime: run.regime,
        head_config: run.head,
        epoch: history.best_epoch,
        val_mae: best.val_mae,
        seed: run.train.seed,
    };
    save_checkpoint(&model, &meta, &dir.join("checkpoint.baaw"))?;

    println!(
        "trained {} {} for {} epochs (stopped_early: {}); best epoch {} val MAE {:.2} months",
        run.backbone,
        run.regime,
        history.records.len(),
        history.stopped_early,
        history.best_epoch,
        best.val_mae,
    );
    println!("{}", dir.display());
    Ok(())
}

pub fn cmd_evaluate(checkpoint: &Path, cfg: &RunConfig, out_override: Option<&Path>) -> Result<()> {
    let (model, meta) = load_checkpoint(checkpoint)?;

    // The checkpoint fixes backbone and regime; the config supplies data
    // paths, split sizes, and transform overrides.
    let mut cfg = cfg.clone();
    cfg.backbone = Some(meta.backbone_id.to_string());
    cfg.regime = Some(meta.regime.to_string());
    if cfg.seed.is_none() {
        cfg.seed = Some(meta.seed);
    }
    let run = ResolvedRun::from_config(&cfg)?;

    let manifest = load_manifest(&run.csv, &run.images, run.strict)?;
    let assignment = make_splits(&manifest, run.split, run.train.seed)?;
    let test_set = manifest.select(&assignment.test_ids);

    let result = evaluate(&model, &test_set, &run.transforms, run.train.batch_size)?;

    let dir = out_override
        .map(Path::to_path_buf)
        .or_else(|| checkpoint.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    ensure_dir(&dir)?;

    write_predictions_csv(&result, &dir.join("predictions.csv"))?;
    emit_plot(
        PlotKind::Scatter,
        &PlotPayload::Eval(&result),
        &dir.join("scatter.png"),
    )?;

    let metrics = serde_json::json!({
        "backbone_id": meta.backbone_id,
        "regime": meta.regime,
        "mae_months": result.mae,
        "n_test": result.predictions.len(),
        "checkpoint": checkpoint.display().to_string(),
        "seed": run.train.seed,
    });
    fs::write(dir.join("metrics.json"), serde_json::to_vec_pretty(&metrics)?)?;

    let test_manifest = DatasetManifest {
        records: test_set,
        source: manifest.source.clone(),
    };
    let stats = compute_stats(&test_manifest, DEFAULT_BIN_WIDTH);
    let run_result = RunResult {
        backbone_id: meta.backbone_id,
        regime: meta.regime,
        history: None,
        eval: result.clone(),
        config: config_value(&run.effective_config()),
    };
    let report = bias_report(&stats, &[run_result], DEFAULT_BAND_WIDTH);
    fs::write(
        dir.join("bias_report.json"),
        serde_json::to_vec_pretty(&report.to_json())?,
    )?;
    fs::write(dir.join("bias_report.txt"), report.to_text())?;
    write_effective_config(&run.effective_config(), &dir)?;

    println!(
        "{} {} test MAE {:.2} months over {} samples",
        meta.backbone_id,
        meta.regime,
        result.mae,
        result.predictions.len()
    );
    println!("{}", dir.display());
    Ok(())
}

pub fn cmd_compare(run_dirs: &[PathBuf], out: &Path) -> Result<()> {
    let mut results = Vec::new();
    for dir in run_dirs {
        let metrics_path = dir.join("metrics.json");
        let raw = fs::read(&metrics_path)
            .with_context(|| format!("reading {}", metrics_path.display()))?;
        let doc: serde_json::Value = serde_json::from_slice(&raw)
            .with_context(|| format!("parsing {}", metrics_path.display()))?;
        let backbone_id: BackboneId = serde_json::from_value(doc["backbone_id"].clone())
            .with_context(|| format!("{}: bad backbone_id", metrics_path.display()))?;
        let regime: Regime = serde_json::from_value(doc["regime"].clone())
            .with_context(|| format!("{}: bad regime", metrics_path.display()))?;
        let mae = doc["mae_months"]
            .as_f64()
            .with_context(|| format!("{}: missing mae_months", metrics_path.display()))?;
        results.push(RunResult {
            backbone_id,
            regime,
            history: None,
            eval: EvalResult {
                mae,
                predictions: Vec::new(),
            },
            config: doc,
        });
    }

    let table = render_comparison_table(&results)?;
    ensure_dir(out)?;
    let markdown = table.to_markdown();
    fs::write(out.join("comparison.md"), &markdown)?;
    fs::write(
        out.join("comparison.json"),
        serde_json::to_vec_pretty(&table.to_json())?,
    )?;
    print!("{markdown}");
    if let Some((backbone, regime)) = table.best_cell {
        println!("best: {backbone} ({regime})");
    }
    Ok(())
}
