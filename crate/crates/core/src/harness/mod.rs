//! Experiment configuration, multi-cycle runs, the ablation grid, the
//! regulariser curves, the gradient-check suite, and their artifacts.
//!
//! Artifacts in the output directory:
//!
//! | file | content |
//! |------|---------|
//! | `config.txt` | the effective configuration as `key = value` lines |
//! | `report.json` | label, config, per-cycle epochs and test metrics, aggregate, timing |
//! | `report.txt` | the aggregate as flat `key = value` lines |
//! | `table.txt` | micro / macro / weighted / samples means |
//! | `cycle{c}.jsonl` | one epoch log per line |
//! | `cycle{c}.ckpt` | the cycle's best weights, optimizer and rng state |
//! | `curve_{ablation}.csv` | `epoch,train_loss,val_weighted_f1` |
//!
//! Everything except the `timing` object of `report.json` is byte-stable
//! for a fixed configuration.

mod config;
pub mod gradcheck;
mod run;

pub use config::{ExperimentConfig, Preset, KEYS};
pub use run::{
    ablation_config, canonical_variant, curve_csv, format_table, load_dataset, run_ablation, run_curve,
    run_cycle, run_cycles, AblationRow, CurveAblation, CurveRow, CycleResult, RunReport, Timing,
    ABLATION_GRID, TRAINVAL_FRACTION, VALIDATION_FRACTION,
};

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{write_container, SyntheticConfig};
use crate::error::Result;
use crate::metrics::MetricsReport;
use crate::models::save_checkpoint;

pub const OUT_ENV: &str = "VARFUSE_OUT";
pub const DEFAULT_OUT: &str = "runs";

/// `--out`, then the config's `out`, then `$VARFUSE_OUT`, then `runs`.
pub fn resolve_out(flag: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.out.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Flat `key = value` rendering of a report.
pub fn report_text(r: &MetricsReport) -> String {
    let mut s = format!(
        "cycles = {}\nmicro_f1 = {}\nmacro_f1 = {}\nweighted_f1 = {}\nsamples_f1 = {}\n",
        r.cycles, r.micro, r.macro_, r.weighted, r.samples
    );
    s += &format!(
        "micro_f1_std = {}\nmacro_f1_std = {}\nweighted_f1_std = {}\nsamples_f1_std = {}\n",
        r.std.micro, r.std.macro_, r.std.weighted, r.std.samples
    );
    for (c, score) in r.per_class.iter().enumerate() {
        s += &format!("class{c}_f1 = {}\nclass{c}_support = {}\n", score.f1, score.support);
    }
    s
}

fn write_run(dir: &Path, report: &RunReport) -> Result<()> {
    fs::write(dir.join("config.txt"), report.config.to_text())?;
    write_json(&dir.join("report.json"), report)?;
    fs::write(dir.join("report.txt"), report_text(&report.aggregate))?;
    fs::write(
        dir.join("table.txt"),
        format_table(&[(report.label.clone(), report.aggregate.clone())]),
    )?;
    Ok(())
}

/// Train and test `cfg.cycles` times and write every artifact to `out`.
pub fn cmd_train(cfg: &ExperimentConfig, label: &str, out: &Path) -> Result<RunReport> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let ds = load_dataset(cfg)?;
    ds.warn_unlabelled();
    let report = run_cycles(&ds, cfg, label, |ck, result| {
        let mut log = String::new();
        for e in &result.epochs {
            log += &serde_json::to_string(e)?;
            log.push('\n');
        }
        fs::write(out.join(format!("cycle{}.jsonl", result.cycle)), log)?;
        save_checkpoint(out.join(format!("cycle{}.ckpt", result.cycle)), ck)
    })?;
    write_run(out, &report)?;
    Ok(report)
}

/// The grid, one [`RunReport`] per row, written as `ablation.json` and a
/// table.
pub fn cmd_ablate(cfg: &ExperimentConfig, grid: &[String], out: &Path) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let ds = load_dataset(cfg)?;
    let rows = run_ablation(&ds, cfg, grid)?;
    write_json(&out.join("ablation.json"), &rows)?;
    let table: Vec<(String, MetricsReport)> = rows
        .iter()
        .map(|r| (r.variant.clone(), r.report.aggregate.clone()))
        .collect();
    fs::write(out.join("table.txt"), format_table(&table))?;
    Ok(rows)
}

pub fn cmd_curves(cfg: &ExperimentConfig, ablation: CurveAblation, out: &Path) -> Result<Vec<CurveRow>> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let ds = load_dataset(cfg)?;
    let rows = run_curve(&ds, cfg, ablation)?;
    fs::write(out.join(format!("curve_{}.csv", ablation.name())), curve_csv(&rows))?;
    Ok(rows)
}

/// Writes a synthetic MMT1 container.
pub fn cmd_synth(cfg: &SyntheticConfig, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let ds = crate::data::generate_synthetic_with(cfg)?;
    write_container(path, &ds)
}
