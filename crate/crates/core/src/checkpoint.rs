//! Versioned JSON checkpoints for both model families, optionally carrying the
//! training state needed to resume.
//!
//! Every real is written as a decimal with 17 significant digits, so a
//! save/load cycle reproduces `f64` (and `f32`) values bit for bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView2};
use rand::RngCore;
use serde::de::Deserializer;
use serde::ser::{Error as _, Serializer};
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::error::{Error, Result};
use crate::flow::{CouplingLayer, FlowGenerator, FlowOptimizer, Orientation};
use crate::flow_hmm::{GenHmmModel, TrainConfig, TrainState};
use crate::gmm::{GmmEmission, GmmHmmModel, GmmTrainConfig, GmmTrainState};
use crate::hmm::{HmmCore, MixtureWeights};
use crate::model::SequenceModel;
use crate::nn::{Activation, AdamConfig, AdamState, Dense, DenseNet};
use crate::scalar::Real;

pub const FORMAT: &str = "genhmm-checkpoint";
pub const VERSION: u32 = 1;

/// A real written with 17 significant digits.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Num(f64);

impl Serialize for Num {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return Err(S::Error::custom(format!("non-finite value {}", self.0)));
        }
        let raw = RawValue::from_string(format!("{:.16e}", self.0)).map_err(S::Error::custom)?;
        raw.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Num {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        f64::deserialize(d).map(Num)
    }
}

fn nums<'a, T: Real>(it: impl IntoIterator<Item = &'a T>) -> Vec<Num> {
    it.into_iter().map(|v| Num(v.as_f64())).collect()
}

fn reals<T: Real>(v: &[Num]) -> Vec<T> {
    v.iter().map(|n| T::lit(n.0)).collect()
}

fn rows<T: Real>(a: &Array2<T>) -> Vec<Vec<Num>> {
    a.rows().into_iter().map(|r| nums(r.iter())).collect()
}

fn matrix<T: Real>(v: &[Vec<Num>], shape: (usize, usize), what: &str) -> Result<Array2<T>> {
    if v.len() != shape.0 || v.iter().any(|r| r.len() != shape.1) {
        return Err(bad(format!("{what} does not match shape {shape:?}")));
    }
    let flat: Vec<T> = v.iter().flat_map(|r| reals::<T>(r)).collect();
    Ok(Array2::from_shape_vec(shape, flat).expect("checked shape"))
}

fn cube<T: Real>(v: &[Vec<Vec<Num>>], shape: (usize, usize, usize), what: &str) -> Result<Array3<T>> {
    if v.len() != shape.0 {
        return Err(bad(format!("{what} does not match shape {shape:?}")));
    }
    let mut flat = Vec::with_capacity(shape.0 * shape.1 * shape.2);
    for plane in v {
        flat.extend(matrix::<T>(plane, (shape.1, shape.2), what)?);
    }
    Ok(Array3::from_shape_vec(shape, flat).expect("checked shape"))
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

#[derive(Serialize, Deserialize)]
struct Document {
    format: String,
    version: u32,
    scalar: String,
    model: ModelDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    training: Option<TrainingDoc>,
}

#[derive(Serialize, Deserialize)]
struct Shape {
    states: usize,
    components: usize,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum ModelDoc {
    Genhmm {
        label: String,
        shape: Shape,
        initial: Vec<Num>,
        transition: Vec<Vec<Num>>,
        mixture: Vec<Vec<Num>>,
        /// `[state][component]`.
        generators: Vec<Vec<GeneratorDoc>>,
    },
    Gmmhmm {
        label: String,
        shape: Shape,
        initial: Vec<Num>,
        transition: Vec<Vec<Num>>,
        mixture: Vec<Vec<Num>>,
        /// `[state][component][dim]`.
        means: Vec<Vec<Vec<Num>>>,
        variances: Vec<Vec<Vec<Num>>>,
    },
}

#[derive(Serialize, Deserialize)]
struct GeneratorDoc {
    scale_clamp: Num,
    layers: Vec<CouplingDoc>,
}

#[derive(Serialize, Deserialize)]
struct CouplingDoc {
    /// `"lower"` or `"upper"`: the half that conditions the layer.
    conditions: String,
    scale_net: Vec<DenseDoc>,
    shift_net: Vec<DenseDoc>,
}

#[derive(Serialize, Deserialize)]
struct DenseDoc {
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
    /// Row-major `out_dim x in_dim`.
    weight: Vec<Num>,
    bias: Vec<Num>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum TrainingDoc {
    Genhmm {
        config: TrainConfigDoc,
        iteration: usize,
        history: Vec<Num>,
        converged: bool,
        reverted_steps: usize,
        /// `[state][component][layer]` = (scale net, shift net).
        optimizers: Vec<Vec<Vec<(AdamDoc, AdamDoc)>>>,
    },
    Gmmhmm {
        max_iterations: usize,
        tolerance: Num,
        seed: u64,
        iteration: usize,
        history: Vec<Num>,
        converged: bool,
    },
}

#[derive(Serialize, Deserialize)]
struct TrainConfigDoc {
    learning_rate: Num,
    beta1: Num,
    beta2: Num,
    epsilon: Num,
    batch_size: usize,
    inner_batches: usize,
    max_iterations: usize,
    tolerance: Num,
    seed: u64,
    guard_generator_step: bool,
    min_weight: Num,
}

#[derive(Serialize, Deserialize)]
struct AdamDoc {
    step: u64,
    first: Vec<Num>,
    second: Vec<Num>,
}

/// A model of either family.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyModel<T> {
    GenHmm(GenHmmModel<T>),
    GmmHmm(GmmHmmModel<T>),
}

impl<T: Real> AnyModel<T> {
    fn inner(&self) -> &dyn SequenceModel<T> {
        match self {
            AnyModel::GenHmm(m) => m,
            AnyModel::GmmHmm(m) => m,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            AnyModel::GenHmm(_) => "genhmm",
            AnyModel::GmmHmm(_) => "gmmhmm",
        }
    }
}

impl<T: Real> SequenceModel<T> for AnyModel<T> {
    fn label(&self) -> &str {
        self.inner().label()
    }

    fn hmm(&self) -> &HmmCore<T> {
        self.inner().hmm()
    }

    fn mixture(&self) -> &MixtureWeights<T> {
        self.inner().mixture()
    }

    fn dim(&self) -> usize {
        self.inner().dim()
    }

    fn component_table(&self, frames: ArrayView2<T>) -> Result<Array3<T>> {
        self.inner().component_table(frames)
    }

    fn sample_component(&self, state: usize, component: usize, rng: &mut dyn RngCore) -> Result<Vec<T>> {
        self.inner().sample_component(state, component, rng)
    }
}

#[derive(Clone, Debug)]
pub enum AnyTrainState<T> {
    GenHmm(TrainState<T>),
    GmmHmm(GmmTrainState),
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: AnyModel<T>,
    pub training: Option<AnyTrainState<T>>,
}

fn dense_doc<T: Real>(net: &DenseNet<T>) -> Vec<DenseDoc> {
    net.layers()
        .iter()
        .map(|l| DenseDoc {
            in_dim: l.in_dim,
            out_dim: l.out_dim,
            activation: l.activation,
            weight: nums(&l.weight),
            bias: nums(&l.bias),
        })
        .collect()
}

fn dense_net<T: Real>(doc: &[DenseDoc]) -> Result<DenseNet<T>> {
    let layers = doc
        .iter()
        .map(|l| {
            if l.weight.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(bad(format!(
                    "dense layer {}x{} has {} weights and {} biases",
                    l.out_dim,
                    l.in_dim,
                    l.weight.len(),
                    l.bias.len()
                )));
            }
            Ok(Dense {
                in_dim: l.in_dim,
                out_dim: l.out_dim,
                weight: reals(&l.weight),
                bias: reals(&l.bias),
                activation: l.activation,
            })
        })
        .collect::<Result<_>>()?;
    DenseNet::new(layers)
}

fn generator_doc<T: Real>(g: &FlowGenerator<T>) -> GeneratorDoc {
    GeneratorDoc {
        scale_clamp: Num(g.scale_clamp().as_f64()),
        layers: g
            .layers()
            .iter()
            .map(|l| CouplingDoc {
                conditions: match l.orientation {
                    Orientation::LowerConditions => "lower".into(),
                    Orientation::UpperConditions => "upper".into(),
                },
                scale_net: dense_doc(&l.scale_net),
                shift_net: dense_doc(&l.shift_net),
            })
            .collect(),
    }
}

fn generator<T: Real>(doc: &GeneratorDoc, dim: usize) -> Result<FlowGenerator<T>> {
    let layers = doc
        .layers
        .iter()
        .map(|l| {
            let orientation = match l.conditions.as_str() {
                "lower" => Orientation::LowerConditions,
                "upper" => Orientation::UpperConditions,
                other => return Err(bad(format!("unknown coupling orientation {other:?}"))),
            };
            CouplingLayer::new(dim, orientation, dense_net(&l.scale_net)?, dense_net(&l.shift_net)?)
        })
        .collect::<Result<_>>()?;
    FlowGenerator::new(dim, T::lit(doc.scale_clamp.0), layers)
}

fn hmm_parts<T: Real>(
    shape: &Shape,
    initial: &[Num],
    transition: &[Vec<Num>],
    mixture: &[Vec<Num>],
) -> Result<(HmmCore<T>, MixtureWeights<T>)> {
    if initial.len() != shape.states {
        return Err(bad("initial distribution does not match the state count"));
    }
    let hmm = HmmCore::new(
        Array1::from(reals::<T>(initial)),
        matrix(transition, (shape.states, shape.states), "transition matrix")?,
    )?;
    let mix = MixtureWeights::new(matrix(mixture, (shape.states, shape.components), "mixture weights")?)?;
    Ok((hmm, mix))
}

fn model_doc<T: Real>(model: &AnyModel<T>) -> ModelDoc {
    let shape = Shape {
        states: model.n_states(),
        components: model.n_components(),
        dim: model.dim(),
    };
    let label = model.label().to_string();
    let initial = nums(model.hmm().initial());
    let transition = rows(model.hmm().transition());
    let mixture = rows(model.mixture().weights());
    match model {
        AnyModel::GenHmm(m) => ModelDoc::Genhmm {
            label,
            shape,
            initial,
            transition,
            mixture,
            generators: m
                .generators()
                .iter()
                .map(|row| row.iter().map(generator_doc).collect())
                .collect(),
        },
        AnyModel::GmmHmm(m) => {
            let e = m.emission();
            let planes = |a: &Array3<T>| a.outer_iter().map(|p| rows(&p.to_owned())).collect();
            ModelDoc::Gmmhmm {
                label,
                shape,
                initial,
                transition,
                mixture,
                means: planes(&e.means),
                variances: planes(&e.variances),
            }
        }
    }
}

fn model_from_doc<T: Real>(doc: &ModelDoc) -> Result<AnyModel<T>> {
    match doc {
        ModelDoc::Genhmm {
            label,
            shape,
            initial,
            transition,
            mixture,
            generators,
        } => {
            let (hmm, mix) = hmm_parts(shape, initial, transition, mixture)?;
            if generators.len() != shape.states
                || generators.iter().any(|r| r.len() != shape.components)
            {
                return Err(bad("generator grid does not match the shape header"));
            }
            let gens = generators
                .iter()
                .map(|row| row.iter().map(|g| generator(g, shape.dim)).collect::<Result<Vec<_>>>())
                .collect::<Result<_>>()?;
            Ok(AnyModel::GenHmm(GenHmmModel::new(label.clone(), hmm, mix, gens)?))
        }
        ModelDoc::Gmmhmm {
            label,
            shape,
            initial,
            transition,
            mixture,
            means,
            variances,
        } => {
            let (hmm, mix) = hmm_parts(shape, initial, transition, mixture)?;
            let s = (shape.states, shape.components, shape.dim);
            let emission = GmmEmission::new(mix, cube(means, s, "means")?, cube(variances, s, "variances")?)?;
            Ok(AnyModel::GmmHmm(GmmHmmModel::new(label.clone(), hmm, emission)?))
        }
    }
}

fn training_doc<T: Real>(state: &AnyTrainState<T>) -> TrainingDoc {
    match state {
        AnyTrainState::GenHmm(st) => {
            let c = &st.config;
            let adam = |a: &AdamState<T>| {
                let (m, v) = a.moments();
                AdamDoc {
                    step: a.step,
                    first: nums(m),
                    second: nums(v),
                }
            };
            TrainingDoc::Genhmm {
                config: TrainConfigDoc {
                    learning_rate: Num(c.adam.learning_rate),
                    beta1: Num(c.adam.beta1),
                    beta2: Num(c.adam.beta2),
                    epsilon: Num(c.adam.epsilon),
                    batch_size: c.batch_size,
                    inner_batches: c.inner_batches,
                    max_iterations: c.max_iterations,
                    tolerance: Num(c.tolerance),
                    seed: c.seed,
                    guard_generator_step: c.guard_generator_step,
                    min_weight: Num(c.min_weight),
                },
                iteration: st.iteration,
                history: nums(&st.history),
                converged: st.converged,
                reverted_steps: st.reverted_steps,
                optimizers: st
                    .optimizers
                    .iter()
                    .map(|row| {
                        row.iter()
                            .map(|opt| opt.layers.iter().map(|(a, b)| (adam(a), adam(b))).collect())
                            .collect()
                    })
                    .collect(),
            }
        }
        AnyTrainState::GmmHmm(st) => TrainingDoc::Gmmhmm {
            max_iterations: st.config.max_iterations,
            tolerance: Num(st.config.tolerance),
            seed: st.config.seed,
            iteration: st.iteration,
            history: nums(&st.history),
            converged: st.converged,
        },
    }
}

fn training_from_doc<T: Real>(doc: &TrainingDoc, model: &AnyModel<T>) -> Result<AnyTrainState<T>> {
    let history = |h: &[Num]| h.iter().map(|n| n.0).collect::<Vec<f64>>();
    match (doc, model) {
        (
            TrainingDoc::Genhmm {
                config,
                iteration,
                history: hist,
                converged,
                reverted_steps,
                optimizers,
            },
            AnyModel::GenHmm(m),
        ) => {
            let config = TrainConfig {
                adam: AdamConfig {
                    learning_rate: config.learning_rate.0,
                    beta1: config.beta1.0,
                    beta2: config.beta2.0,
                    epsilon: config.epsilon.0,
                },
                batch_size: config.batch_size,
                inner_batches: config.inner_batches,
                max_iterations: config.max_iterations,
                tolerance: config.tolerance.0,
                seed: config.seed,
                guard_generator_step: config.guard_generator_step,
                min_weight: config.min_weight.0,
            };
            config.validate()?;
            let gens = m.generators();
            if optimizers.len() != gens.len() {
                return Err(bad("optimizer grid does not match the generators"));
            }
            let mut opts = Vec::with_capacity(gens.len());
            for (orow, grow) in optimizers.iter().zip(gens) {
                if orow.len() != grow.len() {
                    return Err(bad("optimizer grid does not match the generators"));
                }
                let mut out_row = Vec::with_capacity(grow.len());
                for (layers, g) in orow.iter().zip(grow) {
                    if layers.len() != g.layers().len() {
                        return Err(bad("optimizer layer count does not match the generator"));
                    }
                    let mut pairs = Vec::with_capacity(layers.len());
                    for ((a, b), l) in layers.iter().zip(g.layers()) {
                        let make = |d: &AdamDoc, net: &DenseNet<T>| {
                            if d.first.len() != net.param_count() {
                                return Err(bad("adam moments do not match the network size"));
                            }
                            AdamState::from_parts(config.adam, d.step, reals(&d.first), reals(&d.second))
                        };
                        pairs.push((make(a, &l.scale_net)?, make(b, &l.shift_net)?));
                    }
                    out_row.push(FlowOptimizer { layers: pairs });
                }
                opts.push(out_row);
            }
            let mut st = TrainState::restore(config, *iteration, history(hist), opts, *reverted_steps);
            st.converged = *converged;
            Ok(AnyTrainState::GenHmm(st))
        }
        (
            TrainingDoc::Gmmhmm {
                max_iterations,
                tolerance,
                seed,
                iteration,
                history: hist,
                converged,
            },
            AnyModel::GmmHmm(_),
        ) => Ok(AnyTrainState::GmmHmm(GmmTrainState {
            config: GmmTrainConfig {
                max_iterations: *max_iterations,
                tolerance: tolerance.0,
                seed: *seed,
            },
            iteration: *iteration,
            history: history(hist),
            converged: *converged,
        })),
        _ => Err(bad("training state and model are of different families")),
    }
}

pub fn to_json<T: Real>(checkpoint: &Checkpoint<T>) -> Result<String> {
    let doc = Document {
        format: FORMAT.into(),
        version: VERSION,
        scalar: T::NAME.into(),
        model: model_doc(&checkpoint.model),
        training: checkpoint.training.as_ref().map(training_doc),
    };
    serde_json::to_string_pretty(&doc).map_err(|e| bad(e.to_string()))
}

pub fn from_json<T: Real>(text: &str) -> Result<Checkpoint<T>> {
    let doc: Document = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    if doc.format != FORMAT {
        return Err(bad(format!("not a checkpoint (format {:?})", doc.format)));
    }
    if doc.version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {}", doc.version)));
    }
    if doc.scalar != T::NAME {
        return Err(bad(format!("checkpoint holds {} values, expected {}", doc.scalar, T::NAME)));
    }
    let model = model_from_doc(&doc.model)?;
    let training = doc
        .training
        .as_ref()
        .map(|t| training_from_doc(t, &model))
        .transpose()?;
    Ok(Checkpoint { model, training })
}

/// Writes `text` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Invalid(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(text.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint<T: Real>(checkpoint: &Checkpoint<T>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &to_json(checkpoint)?)
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    from_json(&text).map_err(|e| match e {
        Error::Checkpoint(msg) => bad(format!("{}: {msg}", path.display())),
        other => other,
    })
}
