mod support;

use genhmm::checkpoint::{from_json, load_checkpoint, save_checkpoint, to_json};
use genhmm::flow_hmm::{train, train_from, views};
use genhmm::gmm::{train_gmm, train_gmm_from};
use genhmm::presets::multimodal_classes;
use genhmm::{
    AnyModel, AnyTrainState, Checkpoint, FlowConfig, GenHmmModel, GmmHmmModel, GmmTrainConfig,
    SequenceModel, TrainConfig,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn flow() -> FlowConfig {
    FlowConfig {
        blocks: 1,
        hidden: 8,
        net_layers: 3,
        scale_clamp: 5.0,
    }
}

fn data(seed: u64) -> Vec<Array2<f64>> {
    let truth = &multimodal_classes::<f64>(1, 3, 2, 2, 2.0, seed)[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    (0..20)
        .map(|_| {
            let len = rng.random_range(6..12);
            truth.sample_sequence(len, &mut rng).unwrap().1
        })
        .collect()
}

fn bits(values: &[f64]) -> Vec<u64> {
    values.iter().map(|v| v.to_bits()).collect()
}

#[test]
fn genhmm_resume_is_bit_identical() {
    let data = data(1);
    let config = TrainConfig {
        batch_size: 6,
        inner_batches: 3,
        max_iterations: 4,
        tolerance: 1e-12,
        seed: 7,
        ..TrainConfig::default()
    };
    let fresh = GenHmmModel::random("c", &mut ChaCha8Rng::seed_from_u64(2), 3, 2, 2, &flow());

    let mut straight = fresh.clone();
    let full = train(&mut straight, &views(&data), config).unwrap();

    // Stop after two iterations, then reload from disk.
    let mut half = fresh;
    let half_state = train(&mut half, &views(&data), TrainConfig { max_iterations: 2, ..config }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt.json");
    save_checkpoint(
        &Checkpoint {
            model: AnyModel::GenHmm(half),
            training: Some(AnyTrainState::GenHmm(half_state)),
        },
        &path,
    )
    .unwrap();
    let loaded = load_checkpoint::<f64>(&path).unwrap();
    let (AnyModel::GenHmm(mut resumed), Some(AnyTrainState::GenHmm(mut state))) = (loaded.model, loaded.training)
    else {
        panic!("wrong checkpoint kind");
    };
    state.config.max_iterations = 4;
    train_from(&mut resumed, &views(&data), &mut state, |_, _, _| Ok(())).unwrap();

    assert_eq!(resumed, straight);
    assert_eq!(bits(&state.history), bits(&full.history));
}

#[test]
fn gmm_resume_is_bit_identical() {
    let data = data(3);
    let config = GmmTrainConfig {
        max_iterations: 6,
        tolerance: 1e-14,
        seed: 4,
    };
    let fresh = GmmHmmModel::initialize("g", &mut ChaCha8Rng::seed_from_u64(5), 3, 3, &views(&data)).unwrap();
    let mut straight = fresh.clone();
    let full = train_gmm(&mut straight, &views(&data), config).unwrap();

    let mut half = fresh;
    let half_state = train_gmm(&mut half, &views(&data), GmmTrainConfig { max_iterations: 3, ..config }).unwrap();
    let text = to_json(&Checkpoint {
        model: AnyModel::GmmHmm(half),
        training: Some(AnyTrainState::<f64>::GmmHmm(half_state)),
    })
    .unwrap();
    let loaded = from_json::<f64>(&text).unwrap();
    let (AnyModel::GmmHmm(mut resumed), Some(AnyTrainState::GmmHmm(mut state))) = (loaded.model, loaded.training)
    else {
        panic!("wrong checkpoint kind");
    };
    state.config.max_iterations = 6;
    train_gmm_from(&mut resumed, &views(&data), &mut state, |_, _, _| Ok(())).unwrap();
    assert_eq!(resumed, straight);
    assert_eq!(bits(&state.history), bits(&full.history));
}

#[test]
fn serialised_model_scores_identically() {
    let data = data(6);
    let model = support::random_genhmm(&mut ChaCha8Rng::seed_from_u64(8), 3, 2, 2, &flow());
    let text = to_json(&Checkpoint {
        model: AnyModel::GenHmm(model.clone()),
        training: None,
    })
    .unwrap();
    assert_eq!(to_json(&from_json::<f64>(&text).unwrap()).unwrap(), text);
    let back = from_json::<f64>(&text).unwrap().model;
    for x in &data {
        let a = model.sequence_loglik(x.view()).unwrap().value;
        let b = back.sequence_loglik(x.view()).unwrap().value;
        assert_eq!(a.to_bits(), b.to_bits());
    }
    assert!(from_json::<f32>(&text).is_err(), "scalar tag must be checked");
}
