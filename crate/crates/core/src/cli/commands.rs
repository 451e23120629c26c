//! The work behind each subcommand, callable without going through argv.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{GenerateConfig, RunConfig, SCHEMA_VERSION};
use super::manifest::{self, RunManifest};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{self, FairnessReport};
use crate::synthdata::{self, Dataset};
use crate::trainer;

pub const DATASET_BASE: &str = "dataset";
pub const CHECKPOINT_BASE: &str = "checkpoint";
pub const TELEMETRY_FILE: &str = "telemetry.ndjson";
pub const EPOCHS_FILE: &str = "epochs.ndjson";
pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Which part of a dataset `evaluate` scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SplitChoice {
    /// Held-out identities (everything when the config holds none out).
    Eval,
    Train,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    #[value(name = "gamma_u")]
    GammaU,
    P,
    Alpha,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::GammaU => "gamma_u",
            SweepAxis::P => "p",
            SweepAxis::Alpha => "alpha",
        }
    }

    pub fn apply(self, cfg: &mut RunConfig, value: f64) {
        let loss = &mut cfg.train.loss;
        match self {
            SweepAxis::GammaU => loss.gamma_u = value,
            SweepAxis::P => loss.p = value,
            SweepAxis::Alpha => loss.alpha = value,
        }
    }
}

/// Accepts a dataset base path, its header or features file, or a directory
/// holding `dataset.*`.
pub fn resolve_dataset(path: &Path) -> PathBuf {
    resolve_base(path, DATASET_BASE, &[".header.json", ".features.csv"])
}

/// Accepts a checkpoint base path, either of its files, or a run directory.
pub fn resolve_checkpoint(path: &Path) -> PathBuf {
    resolve_base(path, CHECKPOINT_BASE, &[".json", ".csv"])
}

fn resolve_base(path: &Path, default_name: &str, suffixes: &[&str]) -> PathBuf {
    if path.is_dir() {
        return path.join(default_name);
    }
    let s = path.to_string_lossy();
    for suf in suffixes {
        if let Some(stripped) = s.strip_suffix(suf) {
            return PathBuf::from(stripped);
        }
    }
    path.to_path_buf()
}

fn dataset_hashes(base: &Path) -> Result<BTreeMap<String, String>> {
    let mut h = BTreeMap::new();
    for p in [synthdata::header_path(base), synthdata::features_path(base)] {
        h.insert(p.to_string_lossy().into_owned(), manifest::sha256_file(&p)?);
    }
    Ok(h)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config types serialize")
}

struct Timer {
    started_at: String,
    start: Instant,
}

impl Timer {
    fn start() -> Self {
        Self {
            started_at: chrono::Local::now().to_rfc3339(),
            start: Instant::now(),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    dir: &Path,
    command: &str,
    config: serde_json::Value,
    seed: u64,
    inputs: BTreeMap<String, PathBuf>,
    arguments: BTreeMap<String, serde_json::Value>,
    input_hashes: BTreeMap<String, String>,
    timer: Timer,
    failures: Vec<String>,
) -> Result<RunManifest> {
    let m = RunManifest {
        schema_version: SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        config,
        seed,
        inputs,
        arguments,
        input_hashes,
        outputs: manifest::hash_outputs(dir)?,
        started_at: timer.started_at,
        duration_seconds: timer.start.elapsed().as_secs_f64(),
        failures,
    };
    manifest::write(&m, dir)?;
    Ok(m)
}

pub fn generate(cfg: &GenerateConfig, out: &Path) -> Result<RunManifest> {
    let timer = Timer::start();
    let dataset = synthdata::generate(&cfg.groups, cfg.raw_dim, cfg.seed)?;
    create_dir(out)?;
    synthdata::save(&dataset, &out.join(DATASET_BASE))?;
    finish(out, "generate", to_value(cfg), cfg.seed, BTreeMap::new(), BTreeMap::new(), BTreeMap::new(), timer, Vec::new())
}

/// Train and eval parts of `d`; the split is keyed by the dataset's own seed
/// so `train` and `evaluate` agree without sharing state.
pub fn split_dataset(d: &Dataset, holdout: usize) -> Result<(Dataset, Dataset)> {
    if holdout == 0 {
        return Ok((d.clone(), d.clone()));
    }
    synthdata::split(d, holdout, d.seed)
}

pub fn train(dataset_path: &Path, cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    let timer = Timer::start();
    cfg.validate()?;
    let base = resolve_dataset(dataset_path);
    let dataset = synthdata::load(&base)?;
    let (train_set, _) = split_dataset(&dataset, cfg.holdout_identities_per_group)?;
    create_dir(out)?;

    let tpath = out.join(TELEMETRY_FILE);
    let mut tfile = std::io::BufWriter::new(fs::File::create(&tpath).map_err(|e| Error::io(&tpath, e))?);
    let mut write_err = None;
    let result = trainer::train_observed(&train_set, &cfg.train, |rec| {
        if write_err.is_none() {
            let line = serde_json::to_string(rec).expect("telemetry serializes");
            if let Err(e) = writeln!(tfile, "{line}") {
                write_err = Some(e);
            }
        }
    });
    tfile.flush().map_err(|e| Error::io(&tpath, e))?;
    if let Some(e) = write_err {
        return Err(Error::io(&tpath, e));
    }
    let outcome = result?;

    let epath = out.join(EPOCHS_FILE);
    let mut text = String::new();
    for e in &outcome.epochs {
        text.push_str(&serde_json::to_string(e).expect("epoch summary serializes"));
        text.push('\n');
    }
    fs::write(&epath, text).map_err(|e| Error::io(&epath, e))?;
    checkpoint::save(&outcome.state.checkpoint(), &out.join(CHECKPOINT_BASE))?;

    let inputs = BTreeMap::from([("dataset".to_string(), base.clone())]);
    finish(out, "train", to_value(cfg), cfg.train.seed, inputs, BTreeMap::new(), dataset_hashes(&base)?, timer, Vec::new())
}

/// Reads the last line of a run's telemetry stream, if any.
pub fn last_telemetry_line(run_dir: &Path) -> Option<String> {
    let text = fs::read_to_string(run_dir.join(TELEMETRY_FILE)).ok()?;
    text.lines().last().map(str::to_string)
}

pub fn evaluate(checkpoint_path: &Path, dataset_path: &Path, cfg: &RunConfig, split: SplitChoice, out: &Path) -> Result<(RunManifest, FairnessReport)> {
    let timer = Timer::start();
    cfg.validate()?;
    let ckpt_base = resolve_checkpoint(checkpoint_path);
    let ckpt = checkpoint::load(&ckpt_base)?;
    let base = resolve_dataset(dataset_path);
    let dataset = synthdata::load(&base)?;
    if dataset.raw_dim() != ckpt.encoder.raw_dim() {
        return Err(Error::Incompatible(format!(
            "checkpoint expects {}-dimensional inputs but the dataset has {}",
            ckpt.encoder.raw_dim(),
            dataset.raw_dim()
        )));
    }
    let groups = dataset.group_ids();
    if groups.len() < 2 {
        return Err(Error::Incompatible(format!(
            "bias degree compares demographic groups; dataset has only {:?}",
            groups
        )));
    }
    let (train_set, eval_set) = split_dataset(&dataset, cfg.holdout_identities_per_group)?;
    let target = match split {
        SplitChoice::Eval => eval_set,
        SplitChoice::Train => train_set,
        SplitChoice::All => dataset,
    };
    let report = trainer::evaluate(&ckpt.encoder, &target, &cfg.gammas, &cfg.eval)?;

    create_dir(out)?;
    write_report(&report, out)?;
    let inputs = BTreeMap::from([("checkpoint".to_string(), ckpt_base.clone()), ("dataset".to_string(), base.clone())]);
    let arguments = BTreeMap::from([("split".to_string(), to_value(&split))]);
    let mut hashes = dataset_hashes(&base)?;
    for p in [checkpoint::manifest_path(&ckpt_base), checkpoint::weights_path(&ckpt_base)] {
        hashes.insert(p.to_string_lossy().into_owned(), manifest::sha256_file(&p)?);
    }
    let m = finish(out, "evaluate", to_value(cfg), ckpt.manifest.seed, inputs, arguments, hashes, timer, Vec::new())?;
    Ok((m, report))
}

/// `report.json` plus one `roc-<group>.csv` per group.
pub fn write_report(report: &FairnessReport, dir: &Path) -> Result<()> {
    let path = dir.join(REPORT_FILE);
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    for (g, points) in &report.roc {
        metrics::write_roc_csv(points, &dir.join(format!("roc-{g}.csv")))?;
    }
    Ok(())
}

/// Header of `summary.csv`: the value, per-group accuracy (%), their mean and
/// sample std (%), then δ at each requested overall FPR.
pub fn summary_header(groups: &[String], gammas: &[f64]) -> Vec<String> {
    let mut h = vec!["value".to_string()];
    h.extend(groups.iter().map(|g| format!("acc_{g}")));
    h.push("avg".into());
    h.push("std".into());
    h.extend(gammas.iter().map(|g| format!("delta@{g:e}")));
    h
}

pub fn summary_row(value: f64, report: &FairnessReport, gammas: &[f64]) -> Vec<String> {
    let mut row = vec![value.to_string()];
    row.extend(report.per_group.values().map(|g| (100.0 * g.accuracy).to_string()));
    row.push((100.0 * report.mean_accuracy).to_string());
    row.push((100.0 * report.accuracy_std).to_string());
    row.extend(gammas.iter().map(|g| report.bias_degree_at(*g).map_or_else(String::new, |d| d.to_string())));
    row
}

pub fn child_dir_name(axis: SweepAxis, value: f64) -> String {
    format!("{}={value:e}", axis.name())
}

/// Threads for sweep children: `FAIRFPR_THREADS` if set and positive,
/// otherwise the rayon default.
pub fn sweep_threads() -> usize {
    std::env::var("FAIRFPR_THREADS").ok().and_then(|v| v.trim().parse().ok()).unwrap_or(0)
}

pub struct SweepOutcome {
    pub manifest: RunManifest,
    pub failures: Vec<String>,
}

/// One train + evaluate child per value, each in `<out>/<axis>=<value>/`
/// with `train/` and `evaluate/` subdirectories, then `summary.csv`.
pub fn sweep(dataset_path: &Path, base: &RunConfig, axis: SweepAxis, values: &[f64], out: &Path) -> Result<SweepOutcome> {
    let timer = Timer::start();
    if values.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one value".into()));
    }
    base.validate()?;
    let dataset_base = resolve_dataset(dataset_path);
    create_dir(out)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(sweep_threads())
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let results: Vec<Result<FairnessReport>> = pool.install(|| {
        values
            .par_iter()
            .map(|&v| {
                let mut cfg = base.clone();
                axis.apply(&mut cfg, v);
                let dir = out.join(child_dir_name(axis, v));
                train(&dataset_base, &cfg, &dir.join("train"))?;
                let (_, report) = evaluate(&dir.join("train"), &dataset_base, &cfg, SplitChoice::Eval, &dir.join("evaluate"))?;
                Ok(report)
            })
            .collect()
    });

    let mut failures = Vec::new();
    let mut rows = Vec::new();
    let mut groups: Option<Vec<String>> = None;
    for (&v, r) in values.iter().zip(results) {
        match r {
            Ok(report) => {
                groups.get_or_insert_with(|| report.per_group.keys().cloned().collect());
                rows.push(summary_row(v, &report, &base.gammas));
            }
            Err(e) => failures.push(format!("{}={v}: {e}", axis.name())),
        }
    }
    let spath = out.join(SUMMARY_FILE);
    let mut w = csv::Writer::from_path(&spath).map_err(|e| Error::InvalidArgument(format!("{}: {e}", spath.display())))?;
    let csv_err = |e: csv::Error| Error::InvalidArgument(format!("{}: {e}", spath.display()));
    w.write_record(summary_header(groups.as_deref().unwrap_or(&[]), &base.gammas)).map_err(csv_err)?;
    for row in &rows {
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&spath, e))?;

    let inputs = BTreeMap::from([("dataset".to_string(), dataset_base.clone())]);
    let arguments = BTreeMap::from([
        ("axis".to_string(), to_value(&axis)),
        ("values".to_string(), to_value(&values)),
    ]);
    let manifest = finish(
        out,
        "sweep",
        to_value(base),
        base.train.seed,
        inputs,
        arguments,
        dataset_hashes(&dataset_base)?,
        timer,
        failures.clone(),
    )?;
    Ok(SweepOutcome { manifest, failures })
}

/// Re-executes the command recorded in `m` into `out`; returns the output
/// files whose hashes differ from the recorded ones.
pub fn replay(m: &RunManifest, out: &Path) -> Result<Vec<String>> {
    let cfg_err = |e: serde_json::Error| Error::InvalidArgument(format!("manifest config: {e}"));
    let input = |name: &str| {
        m.inputs
            .get(name)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("manifest lacks input {name:?}")))
    };
    let arg = |name: &str| {
        m.arguments
            .get(name)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("manifest lacks argument {name:?}")))
    };
    let fresh = match m.command.as_str() {
        "generate" => generate(&serde_json::from_value(m.config.clone()).map_err(cfg_err)?, out)?,
        "train" => train(&input("dataset")?, &serde_json::from_value(m.config.clone()).map_err(cfg_err)?, out)?,
        "evaluate" => {
            let split: SplitChoice = serde_json::from_value(arg("split")?).map_err(cfg_err)?;
            let cfg = serde_json::from_value(m.config.clone()).map_err(cfg_err)?;
            evaluate(&input("checkpoint")?, &input("dataset")?, &cfg, split, out)?.0
        }
        "sweep" => {
            let axis: SweepAxis = serde_json::from_value(arg("axis")?).map_err(cfg_err)?;
            let values: Vec<f64> = serde_json::from_value(arg("values")?).map_err(cfg_err)?;
            let cfg = serde_json::from_value(m.config.clone()).map_err(cfg_err)?;
            sweep(&input("dataset")?, &cfg, axis, &values, out)?.manifest
        }
        other => return Err(Error::InvalidArgument(format!("unknown command {other:?} in manifest"))),
    };
    let mut mismatched: Vec<String> = m
        .outputs
        .iter()
        .filter(|(name, hash)| fresh.outputs.get(*name) != Some(*hash))
        .map(|(name, _)| name.clone())
        .collect();
    mismatched.extend(fresh.outputs.keys().filter(|k| !m.outputs.contains_key(*k)).cloned());
    Ok(mismatched)
}
