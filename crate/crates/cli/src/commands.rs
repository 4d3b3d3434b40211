use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use genhmm::checkpoint::write_atomic;
use genhmm::data::{load_dataset, save_dataset};
use genhmm::Dataset;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::metrics::MetricsReport;
use crate::pipeline::{evaluate, load_models, preset_datasets, train_models, ClassModels};

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    p.as_deref()
        .ok_or_else(|| CliError::Config(format!("--{flag} is required")))
}

fn load(path: &Path) -> Result<Dataset, CliError> {
    load_dataset(path).map_err(|e| match e {
        genhmm::Error::Io(io) => genhmm::Error::Data(format!("{}: {io}", path.display())).into(),
        other => other.into(),
    })
}

/// `train`: one model per class of `--data`, written to `--out`.
pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<ClassModels, CliError> {
    cfg.validate()?;
    let out = required(&cfg.out, "out")?;
    let train = load(required(&cfg.data, "data")?)?;
    let started = Instant::now();
    let models = train_models(cfg, &train, Some(out), resume)?;
    log::info!(
        "trained {} {} models in {:.1}s (config hash {})",
        models.models.len(),
        cfg.model.name(),
        started.elapsed().as_secs_f64(),
        cfg.hash()
    );
    Ok(models)
}

/// `eval`: classifies `--test` (or `--data`) with the checkpoints in
/// `--models`, prints the table and writes the report to `--out` if given.
pub fn cmd_eval(cfg: &RunConfig) -> Result<MetricsReport, CliError> {
    cfg.validate()?;
    let dir = required(&cfg.models, "models")?;
    let test_path = cfg
        .test
        .as_deref()
        .or(cfg.data.as_deref())
        .ok_or_else(|| CliError::Config("--test or --data is required".into()))?;
    let models = load_models(dir)?;
    let test = load(test_path)?;
    let report = evaluate(&models, &test, cfg)?;
    if let Some(out) = &cfg.out {
        report.write(out)?;
    }
    Ok(report)
}

/// `synth`: writes the train and test splits of `--preset` into `--out` as
/// `train.tsv` and `test.tsv`. Returns the two paths.
pub fn cmd_synth(cfg: &RunConfig) -> Result<(PathBuf, PathBuf), CliError> {
    cfg.validate()?;
    let out = required(&cfg.out, "out")?;
    let (train, test) = preset_datasets(cfg)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out.display().to_string(), e))?;
    let paths = (out.join("train.tsv"), out.join("test.tsv"));
    save_dataset(&train, &paths.0)?;
    save_dataset(&test, &paths.1)?;
    Ok(paths)
}

/// One axis of a benchmark grid: a configuration key and its values.
pub type GridAxis = (String, Vec<String>);

/// Parses `key=v1,v2;key2=v3`.
pub fn parse_grid(text: &str) -> Result<Vec<GridAxis>, CliError> {
    let mut axes = Vec::new();
    for part in text.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, values) = part
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("grid axis {part:?}: expected key=v1,v2")))?;
        let values: Vec<String> = values
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        if values.is_empty() {
            return Err(CliError::Config(format!("grid axis {key:?} has no values")));
        }
        RunConfig::default().set(key, &values[0])?;
        axes.push((key.trim().replace('_', "-"), values));
    }
    Ok(axes)
}

/// Cartesian product of the axes, first axis varying slowest.
pub fn grid_cells(axes: &[GridAxis]) -> Vec<Vec<(String, String)>> {
    let mut cells = vec![Vec::new()];
    for (key, values) in axes {
        cells = cells
            .into_iter()
            .flat_map(|cell| {
                values.iter().map(move |v| {
                    let mut c = cell.clone();
                    c.push((key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    cells
}

#[derive(Debug)]
pub struct CellResult {
    pub settings: Vec<(String, String)>,
    pub outcome: Result<MetricsReport, CliError>,
}

#[derive(Debug)]
pub struct BenchReport {
    pub cells: Vec<CellResult>,
}

impl BenchReport {
    /// First failing cell's error, if any.
    pub fn first_error(&self) -> Option<&CliError> {
        self.cells.iter().find_map(|c| c.outcome.as_ref().err())
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "cells={}", self.cells.len()).unwrap();
        for (i, cell) in self.cells.iter().enumerate() {
            let settings: Vec<String> = cell.settings.iter().map(|(k, v)| format!("{k}:{v}")).collect();
            writeln!(out, "cell.{i}.settings={}", settings.join(" ")).unwrap();
            match &cell.outcome {
                Ok(r) => {
                    writeln!(out, "cell.{i}.status=ok").unwrap();
                    writeln!(out, "cell.{i}.accuracy={:.6}", r.accuracy()).unwrap();
                    writeln!(out, "cell.{i}.macro_precision={:.6}", r.macro_precision()).unwrap();
                    writeln!(out, "cell.{i}.macro_f1={:.6}", r.macro_f1()).unwrap();
                }
                Err(e) => {
                    writeln!(out, "cell.{i}.status=failed").unwrap();
                    writeln!(out, "cell.{i}.error={}", e.to_string().replace('\n', " ")).unwrap();
                }
            }
        }
        out
    }

    /// Accuracy per cell, with GenHMM and GMM-HMM side by side when the grid
    /// has a `model` axis.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let others = |c: &CellResult| -> String {
            let s: Vec<String> = c
                .settings
                .iter()
                .filter(|(k, _)| k != "model")
                .map(|(k, v)| format!("{k}={v}"))
                .collect();
            if s.is_empty() {
                "(base)".into()
            } else {
                s.join(" ")
            }
        };
        let model_of = |c: &CellResult| {
            c.settings
                .iter()
                .find(|(k, _)| k == "model")
                .map(|(_, v)| v.clone())
        };
        let acc = |c: &CellResult| match &c.outcome {
            Ok(r) => format!("{:.4}", r.accuracy()),
            Err(_) => "failed".into(),
        };
        if self.cells.iter().any(|c| model_of(c).is_some()) {
            let mut rows: Vec<String> = Vec::new();
            let mut table: HashMap<String, (String, String)> = HashMap::new();
            for c in &self.cells {
                let key = others(c);
                if !rows.contains(&key) {
                    rows.push(key.clone());
                }
                let entry = table.entry(key).or_insert_with(|| ("-".into(), "-".into()));
                match model_of(c).as_deref() {
                    Some("genhmm") => entry.0 = acc(c),
                    Some("gmmhmm") => entry.1 = acc(c),
                    _ => {}
                }
            }
            let width = rows.iter().map(|r| r.len()).max().unwrap_or(8).max(8);
            writeln!(out, "{:<width$}  {:>8}  {:>8}", "settings", "genhmm", "gmmhmm").unwrap();
            for r in rows {
                let (g, m) = &table[&r];
                writeln!(out, "{r:<width$}  {g:>8}  {m:>8}").unwrap();
            }
        } else {
            let width = self.cells.iter().map(|c| others(c).len()).max().unwrap_or(8).max(8);
            writeln!(out, "{:<width$}  {:>8}", "settings", "accuracy").unwrap();
            for c in &self.cells {
                writeln!(out, "{:<width$}  {:>8}", others(c), acc(c)).unwrap();
            }
        }
        out
    }
}

/// `bench`: trains and evaluates every cell of the grid on a preset or on
/// `--data`/`--test`. Models are shared between cells that differ only in
/// evaluation settings (noise, SNR). A failing cell is recorded and the sweep
/// continues. With `--out`, each cell's report and the summary are written
/// into that directory.
pub fn cmd_bench(base: &RunConfig, axes: &[GridAxis]) -> Result<BenchReport, CliError> {
    base.validate()?;
    let (train, test) = match (&base.preset, &base.data, &base.test) {
        (Some(_), _, _) => preset_datasets(base)?,
        (None, Some(tr), Some(te)) => (load(tr)?, load(te)?),
        _ => return Err(CliError::Config("bench needs --preset or both --data and --test".into())),
    };
    let cells = grid_cells(axes);
    if let Some(out) = &base.out {
        std::fs::create_dir_all(out).map_err(|e| CliError::io(out.display().to_string(), e))?;
    }
    let mut trained: HashMap<String, Result<ClassModels, CliError>> = HashMap::new();
    let mut results = Vec::with_capacity(cells.len());
    for (i, settings) in cells.into_iter().enumerate() {
        let started = Instant::now();
        let mut run = || -> Result<MetricsReport, CliError> {
            let mut cfg = base.clone();
            for (k, v) in &settings {
                cfg.set(k, v)?;
            }
            cfg.validate()?;
            let key = cfg.training_hash();
            if !trained.contains_key(&key) {
                let models = train_models(&cfg, &train, None, false);
                trained.insert(key.clone(), models);
            }
            let models = trained[&key].as_ref().map_err(CliError::reported)?;
            let mut report = evaluate(models, &test, &cfg)?;
            report.push_meta("cell", i);
            report.push_meta("cell_wall_time_s", format!("{:.3}", started.elapsed().as_secs_f64()));
            if let Some(out) = &base.out {
                report.write(&out.join(format!("cell-{i}.report")))?;
            }
            Ok(report)
        };
        let outcome = run();
        match &outcome {
            Ok(r) => log::info!("cell {i} {settings:?}: accuracy {:.4}", r.accuracy()),
            Err(e) => log::error!("cell {i} {settings:?} failed: {e}"),
        }
        results.push(CellResult { settings, outcome });
    }
    let report = BenchReport { cells: results };
    if let Some(out) = &base.out {
        write_atomic(&out.join("bench.summary"), &report.to_kv())?;
    }
    Ok(report)
}
