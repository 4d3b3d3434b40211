//! Per-class training, checkpoint directories and evaluation.
//!
//! A model directory holds:
//!
//! * `<label>.ckpt.json`: one checkpoint per class, rewritten after every EM
//!   iteration together with the training state
//! * `standardizer.txt`: feature statistics of the training split
//! * `run.conf`: the configuration that produced it
//! * `train.log`: one `key=value` line per class and EM iteration

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use genhmm::checkpoint::{load_checkpoint, save_checkpoint};
use genhmm::data::add_noise;
use genhmm::flow_hmm::train_from;
use genhmm::gmm::train_gmm_from;
use genhmm::model::state_count_for_mean_length;
use genhmm::presets::{correlated_classes, multimodal_classes, separated_classes, train_test, warp_frame};
use genhmm::{
    classify, AnyModel, AnyTrainState, Checkpoint, Classification, Dataset, Error, GenHmm, GmmHmm,
    GmmTrainState, SequenceModel, Standardizer, TrainState,
};
use ndarray::ArrayView2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{derive_seed, ModelType, RunConfig};
use crate::error::CliError;
use crate::metrics::MetricsReport;

pub const PRESETS: &[&str] = &["separated", "warped", "multimodal"];

/// Train and test splits of a named synthetic benchmark.
///
/// * `separated`: 3 classes, flow-emission ground truth, 3 states, 2
///   components, 4 dimensions
/// * `warped`: 3 classes sharing state means and differing only in
///   cross-coordinate correlation, 4 dimensions, passed through a fixed
///   nonlinear bijection
/// * `multimodal`: 3 classes, 3 narrow Gaussian modes per state, 2 dimensions
pub fn preset_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset), CliError> {
    let name = cfg
        .preset
        .as_deref()
        .ok_or_else(|| CliError::Config("no preset selected".into()))?;
    let model_seed = derive_seed(cfg.seed, &format!("preset-models/{name}"));
    let data_seed = derive_seed(cfg.seed, &format!("preset-data/{name}"));
    let split = |models: &[_]| {
        train_test::<f64, _>(models, cfg.train_per_class, cfg.test_per_class, cfg.min_len, cfg.max_len, data_seed)
    };
    let (train, test) = match name {
        "separated" => split(&separated_classes(3, 3, 2, 4, 3.0, model_seed))?,
        "warped" => {
            let (tr, te) = split(&correlated_classes(3, 3, 4, model_seed))?;
            (tr.map_frames(warp_frame)?, te.map_frames(warp_frame)?)
        }
        "multimodal" => {
            let models = multimodal_classes(3, 3, 3, 2, 2.0, model_seed);
            train_test::<f64, _>(&models, cfg.train_per_class, cfg.test_per_class, cfg.min_len, cfg.max_len, data_seed)?
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESETS.join(", ")
            )))
        }
    };
    Ok((train, test))
}

/// Trained per-class models, sorted by label, and the feature statistics the
/// inputs must be standardised with.
#[derive(Clone, Debug)]
pub struct ClassModels {
    pub models: Vec<AnyModel<f64>>,
    pub standardizer: Option<Standardizer<f64>>,
}

impl ClassModels {
    pub fn labels(&self) -> Vec<String> {
        self.models.iter().map(|m| m.label().to_string()).collect()
    }
}

pub fn checkpoint_file_name(label: &str) -> String {
    let safe: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect();
    format!("{safe}.ckpt.json")
}

/// State count for a class: fixed by the configuration or derived from the
/// mean sequence length.
pub fn state_count(cfg: &RunConfig, seqs: &[ArrayView2<f64>]) -> usize {
    cfg.states.unwrap_or_else(|| {
        let mean = seqs.iter().map(|x| x.nrows()).sum::<usize>() as f64 / seqs.len().max(1) as f64;
        state_count_for_mean_length(mean, cfg.frames_per_state)
    })
}

struct Sink {
    dir: Option<PathBuf>,
    log: Option<Mutex<File>>,
}

impl Sink {
    fn open(dir: Option<&Path>) -> Result<Self, CliError> {
        let Some(dir) = dir else {
            return Ok(Sink { dir: None, log: None });
        };
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display().to_string(), e))?;
        let path = dir.join("train.log");
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| CliError::io(path.display().to_string(), e))?;
        Ok(Sink {
            dir: Some(dir.to_path_buf()),
            log: Some(Mutex::new(log)),
        })
    }

    fn line(&self, text: String) -> genhmm::Result<()> {
        if let Some(log) = &self.log {
            writeln!(log.lock().unwrap(), "{text}")?;
        }
        Ok(())
    }

    fn checkpoint(&self, ck: &Checkpoint<f64>) -> genhmm::Result<()> {
        match &self.dir {
            Some(dir) => save_checkpoint(ck, dir.join(checkpoint_file_name(ck.model.label()))),
            None => Ok(()),
        }
    }
}

fn resume_point(sink: &Sink, label: &str, kind: ModelType) -> Result<Option<Checkpoint<f64>>, CliError> {
    let Some(dir) = &sink.dir else { return Ok(None) };
    let path = dir.join(checkpoint_file_name(label));
    if !path.exists() {
        return Ok(None);
    }
    let ck: Checkpoint<f64> = load_checkpoint(&path)?;
    if ck.model.label() != label || ck.model.kind() != kind.name() {
        return Err(CliError::Config(format!(
            "{} holds a {} model for {:?}, cannot resume {} training of {label:?}",
            path.display(),
            ck.model.kind(),
            ck.model.label(),
            kind.name()
        )));
    }
    if ck.training.is_none() {
        return Err(CliError::Config(format!("{} has no training state", path.display())));
    }
    Ok(Some(ck))
}

fn train_class(
    cfg: &RunConfig,
    label: &str,
    data: &[ArrayView2<f64>],
    sink: &Sink,
    resume: bool,
) -> Result<AnyModel<f64>, CliError> {
    let seed = derive_seed(cfg.seed, label);
    let states = state_count(cfg, data);
    let start = if resume { resume_point(sink, label, cfg.model)? } else { None };
    if let Some(ck) = &start {
        sink.line(format!("class={label} resumed_at={}", checkpoint_iteration(ck)))?;
    }
    let log_iteration = |iteration: usize, avg: f64, extra: String| {
        sink.line(format!("class={label} iteration={iteration} avg_loglik={avg:.12}{extra}"))
    };
    match cfg.model {
        ModelType::GenHmm => {
            let (mut model, mut state) = match start {
                Some(Checkpoint {
                    model: AnyModel::GenHmm(m),
                    training: Some(AnyTrainState::GenHmm(st)),
                }) => (m, st),
                Some(_) => unreachable!("family checked in resume_point"),
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let m = GenHmm::random(label, &mut rng, states, cfg.k, data[0].ncols(), &cfg.flow());
                    let st = TrainState::new(&m, cfg.train_config(seed));
                    (m, st)
                }
            };
            state.config.max_iterations = cfg.max_em;
            train_from(&mut model, data, &mut state, |m, st, rep| {
                let extra = format!(
                    " objective_before={:.12} objective_after={:.12} reverted={}",
                    rep.objective_before, rep.objective_after, rep.reverted
                );
                log_iteration(st.iteration, rep.avg_loglik, extra)?;
                sink.checkpoint(&Checkpoint {
                    model: AnyModel::GenHmm(m.clone()),
                    training: Some(AnyTrainState::GenHmm(st.clone())),
                })
            })?;
            Ok(AnyModel::GenHmm(model))
        }
        ModelType::GmmHmm => {
            let (mut model, mut state) = match start {
                Some(Checkpoint {
                    model: AnyModel::GmmHmm(m),
                    training: Some(AnyTrainState::GmmHmm(st)),
                }) => (m, st),
                Some(_) => unreachable!("family checked in resume_point"),
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let m = GmmHmm::initialize(label, &mut rng, states, cfg.k, data)?;
                    (m, GmmTrainState::new(cfg.gmm_config(seed)))
                }
            };
            state.config.max_iterations = cfg.max_em;
            train_gmm_from(&mut model, data, &mut state, |m, st, rep| {
                log_iteration(st.iteration, rep.avg_loglik, format!(" reseeded={}", rep.reseeded))?;
                sink.checkpoint(&Checkpoint {
                    model: AnyModel::GmmHmm(m.clone()),
                    training: Some(AnyTrainState::GmmHmm(st.clone())),
                })
            })?;
            Ok(AnyModel::GmmHmm(model))
        }
    }
}

fn checkpoint_iteration(ck: &Checkpoint<f64>) -> usize {
    match &ck.training {
        Some(AnyTrainState::GenHmm(s)) => s.iteration,
        Some(AnyTrainState::GmmHmm(s)) => s.iteration,
        None => 0,
    }
}

/// Trains one model per class of `train`. With `out`, checkpoints, the
/// standardizer, the configuration and the training log are written there;
/// with `resume`, classes continue from existing checkpoints in `out`.
pub fn train_models(
    cfg: &RunConfig,
    train: &Dataset,
    out: Option<&Path>,
    resume: bool,
) -> Result<ClassModels, CliError> {
    cfg.validate()?;
    let standardizer = cfg.standardize.then(|| Standardizer::fit(train));
    let train = match &standardizer {
        Some(s) => s.apply(train)?,
        None => train.clone(),
    };
    let sink = Sink::open(out)?;
    if let Some(dir) = out {
        let write = |name: &str, text: String| {
            genhmm::checkpoint::write_atomic(&dir.join(name), &text).map_err(CliError::from)
        };
        write("run.conf", cfg.to_text())?;
        match &standardizer {
            Some(s) => write("standardizer.txt", s.to_text())?,
            None => {
                let _ = fs::remove_file(dir.join("standardizer.txt"));
            }
        }
    }
    let by_class = train.by_class();
    let labels: Vec<&String> = by_class.keys().collect();
    let mut names: Vec<String> = labels.iter().map(|l| checkpoint_file_name(l)).collect();
    names.sort();
    names.dedup();
    if names.len() != labels.len() {
        return Err(CliError::Core(Error::Data(
            "two class labels map to the same checkpoint file name".into(),
        )));
    }
    let results: Vec<Result<AnyModel<f64>, CliError>> = labels
        .par_iter()
        .map(|label| train_class(cfg, label, &by_class[*label], &sink, resume))
        .collect();
    let models = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(ClassModels { models, standardizer })
}

/// Loads every `*.ckpt.json` in `dir` (sorted by label) and the standardizer
/// if one is present.
pub fn load_models(dir: &Path) -> Result<ClassModels, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Core(Error::Data(format!("{}: {e}", dir.display()))))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".ckpt.json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Core(Error::Data(format!("no checkpoints in {}", dir.display()))));
    }
    let mut models = paths
        .iter()
        .map(|p| load_checkpoint::<f64>(p).map(|ck| ck.model))
        .collect::<genhmm::Result<Vec<_>>>()?;
    models.sort_by(|a, b| a.label().cmp(b.label()));
    let std_path = dir.join("standardizer.txt");
    let standardizer = if std_path.exists() {
        let text = fs::read_to_string(&std_path).map_err(|e| CliError::io(std_path.display().to_string(), e))?;
        Some(Standardizer::from_text(&text)?)
    } else {
        None
    };
    Ok(ClassModels { models, standardizer })
}

/// Classifies every sequence of `test` (after optional noise and the models'
/// standardisation) and tallies the results.
pub fn evaluate(models: &ClassModels, test: &Dataset, cfg: &RunConfig) -> Result<MetricsReport, CliError> {
    let started = Instant::now();
    let labels = models.labels();
    let Some(first) = models.models.first() else {
        return Err(CliError::Core(Error::Data("no models to evaluate".into())));
    };
    let dim = first.dim();
    if models.models.iter().any(|m| m.dim() != dim) {
        return Err(CliError::Core(Error::Shape("models disagree on frame dimension".into())));
    }
    if test.dim() != dim {
        return Err(CliError::Core(Error::Shape(format!(
            "test frames have {} dimensions, models expect {dim}",
            test.dim()
        ))));
    }
    let mut truth = Vec::with_capacity(test.len());
    for item in test.items() {
        match labels.iter().position(|l| *l == item.label) {
            Some(i) => truth.push(i),
            None => {
                return Err(CliError::Core(Error::Data(format!(
                    "test label {:?} has no trained model",
                    item.label
                ))))
            }
        }
    }
    let mut zero_power = 0;
    let noisy = match cfg.noise {
        Some(kind) if cfg.snr_db.is_finite() => {
            let (ds, report) = add_noise(test, kind, cfg.snr_db, derive_seed(cfg.seed, "noise"))?;
            zero_power = report.zero_power.len();
            ds
        }
        _ => test.clone(),
    };
    let input = match &models.standardizer {
        Some(s) => s.apply(&noisy)?,
        None => noisy,
    };
    let predictions: Vec<genhmm::Result<Classification>> = input
        .items()
        .par_iter()
        .map(|item| classify(&models.models, item.frames.view(), cfg.per_frame).map(|(c, _)| c))
        .collect();
    let mut report = MetricsReport::new(labels);
    for (t, p) in truth.into_iter().zip(predictions) {
        match p? {
            Classification::Class(c) => report.record(t, Some(c)),
            Classification::Unclassifiable => report.record(t, None),
        }
    }
    report.push_meta("model", first.kind());
    report.push_meta("config_hash", cfg.hash());
    report.push_meta("seed", cfg.seed);
    report.push_meta("noise_zero_power_sequences", zero_power);
    report.push_meta("eval_wall_time_s", format!("{:.3}", started.elapsed().as_secs_f64()));
    for line in cfg.to_text().lines() {
        if let Some((k, v)) = line.split_once(" = ") {
            report.push_meta(format!("config.{k}"), v);
        }
    }
    Ok(report)
}
