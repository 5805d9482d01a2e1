//! File-based stage orchestration.
//!
//! Every stage reads its inputs from earlier stages' directories under the
//! output root and writes its artifacts plus a `manifest.json` into its own
//! directory. The trend stages run twice: a *selection* run fitted on the
//! training months and extrapolated through validation (used for feature
//! selection), and a *final* run fitted on training plus validation and
//! extrapolated `horizon` months into the test range.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, Stage, ThresholdRule};
use crate::data::{
    build_timelines, ingest_events, select_training_timelines, write_events, write_file, EventData, GridCell,
    MonthRange, Timeline, TimelineValue,
};
use crate::features::{assemble_features, forward_select, FeatureMatrix, ForestScorer, SelectionTrace, FEATURE_NAMES};
use crate::forest::{predict, train_ensemble_with_keys, Ensemble, ForestConfig};
use crate::gp::{FittedModel, OptimizerOptions};
use crate::metrics::{calibrate_threshold, evaluate, ScoredRow};
use crate::spatial::{
    estimate_sce_surfaces, extrapolate_tsce_all, fit_sce, fit_tsce, read_sce_csv, sce_timelines, write_sce_csv,
    write_sce_rasters,
};
use crate::synth::{generate, write_synth};
use crate::temporal::{extrapolate_all, fit_tce, read_trend_csv, write_trend_csv, TrendSurface};
use crate::{Error, Result};

/// The two fits every trend stage performs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Run {
    Selection,
    Final,
}

impl Run {
    pub const BOTH: [Run; 2] = [Run::Selection, Run::Final];

    pub fn name(self) -> &'static str {
        match self {
            Run::Selection => "selection",
            Run::Final => "final",
        }
    }

    /// Months the run is fitted on.
    pub fn fit_months(self, cfg: &RunConfig) -> MonthRange {
        match self {
            Run::Selection => cfg.split.train,
            Run::Final => cfg.split.fit_range(),
        }
    }

    /// Months extrapolated past the last fit month.
    pub fn horizon(self, cfg: &RunConfig) -> usize {
        match self {
            Run::Selection => (cfg.split.validation.end - cfg.split.train.end) as usize,
            Run::Final => cfg.horizon,
        }
    }
}

/// What a stage wrote.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub outputs: Vec<String>,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_sha256: String,
    pub seeds: BTreeMap<String, u64>,
    /// Upstream files (relative to the output root) with their SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    /// Full configuration the stage ran with.
    pub config: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Configuration text that determines results: everything except the output
/// directory and the worker count.
pub fn config_fingerprint(cfg: &RunConfig) -> String {
    cfg.to_text()
        .lines()
        .filter(|l| !l.starts_with("out =") && !l.starts_with("jobs ="))
        .map(|l| format!("{l}\n"))
        .collect()
}

fn stage_dir(cfg: &RunConfig, stage: Stage) -> PathBuf {
    cfg.out.join(stage.name())
}

/// Path of an upstream artifact; errors name the stage that produces it.
fn artifact(cfg: &RunConfig, stage: Stage, file: &str) -> Result<PathBuf> {
    let p = stage_dir(cfg, stage).join(file);
    if p.is_file() {
        Ok(p)
    } else {
        Err(Error::MissingArtifact {
            stage: stage.name().to_string(),
            path: p,
        })
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn relative(cfg: &RunConfig, p: &Path) -> String {
    p.strip_prefix(&cfg.out)
        .unwrap_or(p)
        .to_string_lossy()
        .replace('\\', "/")
}

fn hash_file(p: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(p).map_err(|e| Error::io(p, e))?))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(&p, out)?;
        } else if p.file_name().is_some_and(|n| n != "manifest.json") {
            out.push(p);
        }
    }
    Ok(())
}

fn write_manifest(cfg: &RunConfig, stage: Stage, inputs: &[PathBuf], seeds: &[(&str, u64)]) -> Result<StageReport> {
    let dir = stage_dir(cfg, stage);
    let mut files = Vec::new();
    collect_files(&dir, &mut files)?;
    let mut outputs = BTreeMap::new();
    for f in &files {
        outputs.insert(relative(cfg, f), hash_file(f)?);
    }
    let mut ins = BTreeMap::new();
    for f in inputs {
        ins.insert(relative(cfg, f), hash_file(f)?);
    }
    let fingerprint = config_fingerprint(cfg);
    let manifest = Manifest {
        stage: stage.name().to_string(),
        config_sha256: sha256_hex(fingerprint.as_bytes()),
        seeds: seeds.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        inputs: ins,
        outputs: outputs.clone(),
        config: fingerprint,
    };
    write_file(
        &dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(StageReport {
        stage: stage.name().to_string(),
        outputs: outputs.into_keys().collect(),
        notes: Vec::new(),
    })
}

/// Derived seed for one consumer of the master seed.
fn sub_seed(master: u64, purpose: &str) -> u64 {
    let h = Sha256::digest(format!("{master}:{purpose}").as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

fn optimizer(cfg: &RunConfig, purpose: &str) -> OptimizerOptions {
    OptimizerOptions {
        seed: sub_seed(cfg.seed, purpose),
        ..cfg.optimizer.clone()
    }
}

/// Runs one stage.
pub fn run_stage(cfg: &RunConfig, stage: Stage) -> Result<StageReport> {
    cfg.validate()?;
    match stage {
        Stage::Synth => stage_synth(cfg),
        Stage::Ingest => stage_ingest(cfg),
        Stage::FitTce => stage_fit_tce(cfg),
        Stage::FitSce => stage_fit_sce(cfg),
        Stage::FitTsce => stage_fit_tsce(cfg),
        Stage::Features => stage_features(cfg),
        Stage::Select => stage_select(cfg),
        Stage::Train => stage_train(cfg),
        Stage::Forecast => stage_forecast(cfg),
        Stage::Evaluate => stage_evaluate(cfg),
    }
}

/// Runs the configured stages in order, calling `progress` after each.
pub fn run_pipeline<F: FnMut(&StageReport)>(cfg: &RunConfig, mut progress: F) -> Result<Vec<StageReport>> {
    let mut reports = Vec::new();
    for &stage in &cfg.stages {
        let r = run_stage(cfg, stage)?;
        progress(&r);
        reports.push(r);
    }
    Ok(reports)
}

fn stage_synth(cfg: &RunConfig) -> Result<StageReport> {
    let out = generate(&cfg.synth)?;
    write_synth(&stage_dir(cfg, Stage::Synth), &cfg.synth, &out)?;
    write_manifest(cfg, Stage::Synth, &[], &[("synth", cfg.synth.seed)])
}

fn events_source(cfg: &RunConfig) -> Result<PathBuf> {
    match &cfg.events {
        Some(p) if p.is_file() => Ok(p.clone()),
        Some(p) => Err(Error::io(p, std::io::Error::from(std::io::ErrorKind::NotFound))),
        None => artifact(cfg, Stage::Synth, "events.csv"),
    }
}

fn stage_ingest(cfg: &RunConfig) -> Result<StageReport> {
    let src = events_source(cfg)?;
    let data = ingest_events(&src, Some(cfg.split.window()))?;
    let dir = stage_dir(cfg, Stage::Ingest);
    write_events(&dir.join("events.csv"), &data)?;
    write_file(&dir.join("split.txt"), cfg.split.to_text().as_bytes())?;
    let mut r = write_manifest(cfg, Stage::Ingest, &[], &[])?;
    let positives = data.records.iter().filter(|r| r.target > 0).count();
    r.notes.push(format!(
        "{} records, {} cells, {} conflict cell-months from {}",
        data.records.len(),
        data.cells.len(),
        positives,
        src.display()
    ));
    Ok(r)
}

/// Ingested events plus dense timelines over the split window.
struct Inputs {
    path: PathBuf,
    data: EventData,
    magnitude: Vec<Timeline>,
    fatalities: Vec<Timeline>,
}

fn load_inputs(cfg: &RunConfig) -> Result<Inputs> {
    let path = artifact(cfg, Stage::Ingest, "events.csv")?;
    let data = ingest_events(&path, Some(cfg.split.window()))?;
    let w = cfg.split.window();
    let magnitude = build_timelines(&data.records, &data.cells, w, TimelineValue::Magnitude)?;
    let fatalities = build_timelines(&data.records, &data.cells, w, TimelineValue::Fatalities)?;
    Ok(Inputs {
        path,
        data,
        magnitude,
        fatalities,
    })
}

/// Cells whose fatality timeline has a conflict run inside `months`.
fn selected_cells(cfg: &RunConfig, fatalities: &[Timeline], months: MonthRange) -> Vec<i64> {
    select_training_timelines(fatalities, months, cfg.min_conflict_months, cfg.window_months)
        .iter()
        .map(|t| t.cell_id)
        .collect()
}

fn restrict_all(timelines: &[Timeline], months: MonthRange) -> Vec<Timeline> {
    timelines.iter().map(|t| t.restrict(months)).collect()
}

fn fit_note(prefix: &str, run: Run, fitted: &FittedModel, n: usize) -> String {
    let params: Vec<String> = fitted
        .model
        .components
        .iter()
        .map(|c| format!("{}(ℓ={:.3}, η={:.3})", c.kind.name(), c.lengthscale, c.amplitude))
        .collect();
    format!(
        "{prefix} {} run on {n} timelines: {} ε={:.3}",
        run.name(),
        params.join(" + "),
        fitted.model.noise
    )
}

fn stage_fit_tce(cfg: &RunConfig) -> Result<StageReport> {
    let inp = load_inputs(cfg)?;
    let dir = stage_dir(cfg, Stage::FitTce);
    let mut notes = Vec::new();
    let mut seeds = Vec::new();
    for run in Run::BOTH {
        let months = run.fit_months(cfg);
        let keep = selected_cells(cfg, &inp.fatalities, months);
        let series = restrict_all(&inp.magnitude, months);
        let chosen: Vec<&Timeline> = series.iter().filter(|t| keep.contains(&t.cell_id)).collect();
        let purpose = format!("tce-{}", run.name());
        let opts = optimizer(cfg, &purpose);
        let fitted = fit_tce(&chosen, &cfg.tce_prior, &opts)?;
        notes.push(fit_note("TCE", run, &fitted, chosen.len()));
        let surfaces = extrapolate_all(&series, &fitted.model, run.horizon(cfg))?;
        write_file(
            &dir.join(format!("tce_model_{}.json", run.name())),
            fitted.to_json()?.as_bytes(),
        )?;
        write_trend_csv(&dir.join(format!("tce_{}.csv", run.name())), &surfaces)?;
        seeds.push((
            if run == Run::Final {
                "optimizer_final"
            } else {
                "optimizer_selection"
            },
            opts.seed,
        ));
    }
    let mut r = write_manifest(cfg, Stage::FitTce, &[inp.path], &seeds)?;
    r.notes = notes;
    Ok(r)
}

fn stage_fit_sce(cfg: &RunConfig) -> Result<StageReport> {
    let inp = load_inputs(cfg)?;
    let dir = stage_dir(cfg, Stage::FitSce);
    let mut notes = Vec::new();
    let mut seeds = Vec::new();
    for run in Run::BOTH {
        let months = run.fit_months(cfg);
        let opts = optimizer(cfg, &format!("sce-{}", run.name()));
        let fitted = fit_sce(
            &inp.fatalities,
            &inp.data.cells,
            months,
            cfg.sce_subset_size,
            &cfg.sce_prior,
            &opts,
        )?;
        notes.push(fit_note("SCE", run, &fitted, months.len()));
        let surfaces = estimate_sce_surfaces(
            &inp.fatalities,
            &inp.data.cells,
            months,
            &fitted.model,
            cfg.sce_subset_size,
        )?;
        write_file(
            &dir.join(format!("sce_model_{}.json", run.name())),
            fitted.to_json()?.as_bytes(),
        )?;
        write_sce_csv(&dir.join(format!("sce_{}.csv", run.name())), &surfaces)?;
        if run == Run::Final {
            write_sce_rasters(&dir.join("rasters"), &surfaces, &inp.data.cells)?;
        }
        seeds.push((
            if run == Run::Final {
                "optimizer_final"
            } else {
                "optimizer_selection"
            },
            opts.seed,
        ));
    }
    let mut r = write_manifest(cfg, Stage::FitSce, &[inp.path], &seeds)?;
    r.notes = notes;
    Ok(r)
}

fn stage_fit_tsce(cfg: &RunConfig) -> Result<StageReport> {
    let inp = load_inputs(cfg)?;
    let dir = stage_dir(cfg, Stage::FitTsce);
    let mut notes = Vec::new();
    let mut seeds = Vec::new();
    let mut inputs = vec![inp.path.clone()];
    for run in Run::BOTH {
        let months = run.fit_months(cfg);
        let sce_path = artifact(cfg, Stage::FitSce, &format!("sce_{}.csv", run.name()))?;
        let surfaces = read_sce_csv(&sce_path)?;
        inputs.push(sce_path);
        let series = sce_timelines(&surfaces, &inp.data.cells)?;
        let keep = selected_cells(cfg, &inp.fatalities, months);
        let chosen: Vec<&Timeline> = series.iter().filter(|t| keep.contains(&t.cell_id)).collect();
        let opts = optimizer(cfg, &format!("tsce-{}", run.name()));
        let fitted = fit_tsce(&chosen, &cfg.tsce_prior, &opts)?;
        notes.push(fit_note("TSCE", run, &fitted, chosen.len()));
        let out = extrapolate_tsce_all(&series, &fitted.model, run.horizon(cfg))?;
        write_file(
            &dir.join(format!("tsce_model_{}.json", run.name())),
            fitted.to_json()?.as_bytes(),
        )?;
        write_trend_csv(&dir.join(format!("tsce_{}.csv", run.name())), &out)?;
        seeds.push((
            if run == Run::Final {
                "optimizer_final"
            } else {
                "optimizer_selection"
            },
            opts.seed,
        ));
    }
    let mut r = write_manifest(cfg, Stage::FitTsce, &inputs, &seeds)?;
    r.notes = notes;
    Ok(r)
}

fn load_trends(cfg: &RunConfig, stage: Stage, prefix: &str, run: Run) -> Result<(PathBuf, Vec<TrendSurface>)> {
    let model_path = artifact(cfg, stage, &format!("{prefix}_model_{}.json", run.name()))?;
    let fitted = FittedModel::from_json(&read_text(&model_path)?)?;
    let ls = match fitted.model.components.as_slice() {
        [a, b] => (a.lengthscale, b.lengthscale),
        _ => {
            return Err(Error::InvalidData(format!(
                "{} is not a two-trend model",
                model_path.display()
            )))
        }
    };
    let path = artifact(cfg, stage, &format!("{prefix}_{}.csv", run.name()))?;
    let s = read_trend_csv(&path, ls)?;
    Ok((path, s))
}

fn stage_features(cfg: &RunConfig) -> Result<StageReport> {
    let dir = stage_dir(cfg, Stage::Features);
    let mut inputs = Vec::new();
    let mut notes = Vec::new();
    for run in Run::BOTH {
        let (p1, tce) = load_trends(cfg, Stage::FitTce, "tce", run)?;
        let (p2, tsce) = load_trends(cfg, Stage::FitTsce, "tsce", run)?;
        inputs.extend([p1, p2]);
        let f = assemble_features(&tce, &tsce)?;
        notes.push(format!(
            "{} features: {} rows × {} columns",
            run.name(),
            f.n_rows(),
            f.columns.len()
        ));
        f.write_csv(&dir.join(format!("features_{}.csv", run.name())))?;
    }
    let mut r = write_manifest(cfg, Stage::Features, &inputs, &[])?;
    r.notes = notes;
    Ok(r)
}

/// Conflict label of every cell-month in the split window.
fn labels(inp: &Inputs) -> HashMap<(i64, i64), u8> {
    let mut out = HashMap::new();
    for t in &inp.fatalities {
        for (m, v) in t.months.iter().zip(&t.values) {
            out.insert((t.cell_id, *m), u8::from(*v > 0.0));
        }
    }
    out
}

/// Feature rows restricted to months in `range`, with their labels.
fn labelled_rows(f: &FeatureMatrix, lab: &HashMap<(i64, i64), u8>, range: MonthRange) -> Result<(Vec<usize>, Vec<u8>)> {
    let rows = f.rows_where(|m| range.contains(m));
    let y = rows
        .iter()
        .map(|&i| {
            lab.get(&f.keys[i])
                .copied()
                .ok_or_else(|| Error::InvalidData(format!("no label for cell-month {:?}", f.keys[i])))
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok((rows, y))
}

fn stage_select(cfg: &RunConfig) -> Result<StageReport> {
    let inp = load_inputs(cfg)?;
    let path = artifact(cfg, Stage::Features, "features_selection.csv")?;
    let features = FeatureMatrix::read_csv(&path)?;
    let lab = labels(&inp);
    let span = MonthRange {
        start: cfg.split.train.start,
        end: cfg.split.validation.end,
    };
    let (rows, y) = labelled_rows(&features, &lab, span)?;
    let sub = FeatureMatrix {
        keys: rows.iter().map(|&i| features.keys[i]).collect(),
        columns: features
            .columns
            .iter()
            .map(|c| rows.iter().map(|&i| c[i]).collect())
            .collect(),
    };
    let seed = sub_seed(cfg.seed, "selection");
    let forest = ForestConfig {
        tree_count: cfg.selection_trees,
        max_depth: cfg.selection_max_depth,
        min_leaf: cfg.selection_min_leaf,
        feature_subsample: 1,
        bootstrap_fraction: cfg.selection_bootstrap_fraction,
        seed,
    };
    let scorer = ForestScorer::new(&sub, &y, &cfg.split, forest)?;
    let trace = forward_select(&scorer)?;
    let dir = stage_dir(cfg, Stage::Select);
    write_file(&dir.join("selection_trace.json"), trace.to_json()?.as_bytes())?;
    let mut r = write_manifest(cfg, Stage::Select, &[inp.path, path], &[("selection_forest", seed)])?;
    r.notes.push(format!(
        "selected [{}]; trace {}",
        trace.chosen_subset.join(", "),
        trace
            .steps
            .iter()
            .map(|s| format!("{}={:.4}", s.feature, s.score))
            .collect::<Vec<_>>()
            .join(" → ")
    ));
    Ok(r)
}

fn load_trace(cfg: &RunConfig) -> Result<(PathBuf, SelectionTrace)> {
    let p = artifact(cfg, Stage::Select, "selection_trace.json")?;
    let t = SelectionTrace::from_json(&read_text(&p)?)?;
    if t.chosen_subset.is_empty() {
        return Err(Error::InvalidData("selection chose no features".into()));
    }
    for name in &t.chosen_subset {
        if !FEATURE_NAMES.contains(&name.as_str()) {
            return Err(Error::InvalidData(format!(
                "unknown feature {name:?} in selection trace"
            )));
        }
    }
    Ok((p, t))
}

fn stage_train(cfg: &RunConfig) -> Result<StageReport> {
    let inp = load_inputs(cfg)?;
    let (trace_path, trace) = load_trace(cfg)?;
    let fpath = artifact(cfg, Stage::Features, "features_final.csv")?;
    let features = FeatureMatrix::read_csv(&fpath)?;
    let (rows, y) = labelled_rows(&features, &labels(&inp), cfg.split.fit_range())?;
    let x = features.table(&trace.chosen_subset, &rows)?;
    let all_keys = features.row_keys();
    let keys: Vec<u64> = rows.iter().map(|&i| all_keys[i]).collect();
    let base = ForestConfig {
        seed: cfg.seed,
        ..ForestConfig::default()
    };
    let ensemble = train_ensemble_with_keys(&x, &y, &keys, cfg.ensemble_size, cfg.seed, &base, &cfg.jitter)?;
    let dir = stage_dir(cfg, Stage::Train);
    ensemble.save(&dir.join("ensemble.bin"))?;
    let members: Vec<&ForestConfig> = ensemble.models.iter().map(|(c, _)| c).collect();
    write_file(
        &dir.join("members.json"),
        serde_json::to_string_pretty(&members)?.as_bytes(),
    )?;
    let mut r = write_manifest(
        cfg,
        Stage::Train,
        &[inp.path, trace_path, fpath],
        &[("ensemble_master", cfg.seed)],
    )?;
    r.notes.push(format!(
        "{} forests on {} rows ({} positive) with features [{}]",
        ensemble.size(),
        y.len(),
        y.iter().filter(|&&v| v > 0).count(),
        trace.chosen_subset.join(", ")
    ));
    Ok(r)
}

pub const PREDICTION_HEADER: &str = "cell_id,month_index,probability,spread_p05,spread_p95";

fn stage_forecast(cfg: &RunConfig) -> Result<StageReport> {
    let epath = artifact(cfg, Stage::Train, "ensemble.bin")?;
    let ensemble = Ensemble::load(&epath)?;
    let fpath = artifact(cfg, Stage::Features, "features_final.csv")?;
    let features = FeatureMatrix::read_csv(&fpath)?;
    let months = cfg.forecast_months();
    let rows = features.rows_where(|m| months.contains(m));
    if rows.is_empty() {
        return Err(Error::InvalidData(format!(
            "no feature rows in forecast months {months}"
        )));
    }
    let x = features.table(&ensemble.feature_names, &rows)?;
    let pred = predict(&ensemble, &x)?;
    let mut s = format!("{PREDICTION_HEADER}\n");
    for (k, &i) in rows.iter().enumerate() {
        let (c, m) = features.keys[i];
        s.push_str(&format!(
            "{c},{m},{},{},{}\n",
            pred.mean[k],
            pred.quantile(k, 0.05),
            pred.quantile(k, 0.95)
        ));
    }
    let dir = stage_dir(cfg, Stage::Forecast);
    write_file(&dir.join("predictions.csv"), s.as_bytes())?;
    let mut r = write_manifest(cfg, Stage::Forecast, &[epath, fpath], &[])?;
    r.notes
        .push(format!("{} cell-month predictions for months {months}", rows.len()));
    Ok(r)
}

/// Reads `cell_id,month_index,probability,...` rows.
pub fn read_predictions(path: &Path) -> Result<Vec<(i64, i64, f64)>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    reader
        .deserialize::<(i64, i64, f64, f64, f64)>()
        .enumerate()
        .map(|(i, r)| {
            r.map(|(c, m, p, _, _)| (c, m, p)).map_err(|e| Error::MalformedRow {
                path: path.to_path_buf(),
                row: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

fn stage_evaluate(cfg: &RunConfig) -> Result<StageReport> {
    let inp = load_inputs(cfg)?;
    let ppath = artifact(cfg, Stage::Forecast, "predictions.csv")?;
    let preds = read_predictions(&ppath)?;
    let lab = labels(&inp);
    let rows = preds
        .iter()
        .map(|&(c, m, p)| {
            lab.get(&(c, m))
                .map(|&label| ScoredRow {
                    cell_id: c,
                    month_index: m,
                    score: p,
                    label,
                })
                .ok_or_else(|| Error::InvalidData(format!("no label for cell {c} month {m}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let threshold = match cfg.threshold {
        ThresholdRule::Fixed(t) => t,
        ThresholdRule::Calibrate => {
            let first = rows.iter().map(|r| r.month_index).min().unwrap_or(0);
            let last_fit = cfg.split.fit_range().end;
            let target = lab.iter().filter(|(k, &v)| k.1 == last_fit && v > 0).count();
            let first_scores: Vec<f64> = rows
                .iter()
                .filter(|r| r.month_index == first)
                .map(|r| r.score)
                .collect();
            calibrate_threshold(&first_scores, target)?
        }
    };
    let cells: Vec<GridCell> = inp.data.cells.clone();
    let (report, map) = evaluate(&rows, threshold, &cells)?;
    let dir = stage_dir(cfg, Stage::Evaluate);
    report.write(&dir)?;
    map.write_rasters(&dir.join("confusion"), &cells)?;
    let mut s = String::from("cell_id,month_index,label\n");
    for (m, labels) in &map.months {
        for (c, l) in labels {
            s.push_str(&format!("{c},{m},{}\n", l.as_str()));
        }
    }
    write_file(&dir.join("confusion.csv"), s.as_bytes())?;
    let mut r = write_manifest(cfg, Stage::Evaluate, &[inp.path, ppath], &[])?;
    r.notes.push(format!(
        "AP {:.4} (base rate {:.4}), AUC {:.4}, threshold {:.4}",
        report.ap, report.base_rate, report.auc, threshold
    ));
    Ok(r)
}
