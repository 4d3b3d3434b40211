mod support;

use genhmm::flow_hmm::{em_step, train, views};
use genhmm::gmm::train_gmm;
use genhmm::hmm::forward_backward;
use genhmm::presets::{chain_hmm, multimodal_classes};
use genhmm::{FlowConfig, GenHmmModel, GmmHmmModel, SequenceModel, TrainConfig, TrainState};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use support::*;

fn tiny_flow() -> FlowConfig {
    FlowConfig {
        blocks: 1,
        hidden: 8,
        net_layers: 3,
        scale_clamp: 5.0,
    }
}

fn sample_data(model: &impl SequenceModel<f64>, count: usize, seed: u64) -> Vec<Array2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let len = rng.random_range(6..12);
            model.sample_sequence(len, &mut rng).unwrap().1
        })
        .collect()
}

fn truth_model(seed: u64) -> GenHmmModel<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = random_genhmm(&mut rng, 3, 2, 2, &tiny_flow());
    m.set_hmm(chain_hmm(3, 0.7)).unwrap();
    m
}

#[test]
fn genhmm_loglik_never_decreases_with_full_batches() {
    let data = sample_data(&truth_model(31), 24, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut model = GenHmmModel::random("c", &mut rng, 3, 2, 2, &tiny_flow());
    let config = TrainConfig {
        batch_size: 0,
        inner_batches: 4,
        max_iterations: 12,
        tolerance: 1e-12,
        ..TrainConfig::default()
    };
    let state = train(&mut model, &views(&data), config).unwrap();
    assert_eq!(state.history.len(), 12);
    for w in state.history.windows(2) {
        assert!(w[1] >= w[0] - 1e-9, "loglik fell from {} to {}", w[0], w[1]);
    }
    assert!(state.history[11] > state.history[0]);
}

#[test]
fn gmm_loglik_never_decreases() {
    let truth = &multimodal_classes::<f64>(1, 3, 2, 2, 2.0, 34)[0];
    let data = sample_data(truth, 40, 35);
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    let mut model = GmmHmmModel::initialize("c", &mut rng, 3, 2, &views(&data)).unwrap();
    let config = genhmm::GmmTrainConfig {
        max_iterations: 25,
        tolerance: 1e-14,
        seed: 36,
    };
    let state = train_gmm(&mut model, &views(&data), config).unwrap();
    for w in state.history.windows(2) {
        assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "loglik fell from {} to {}", w[0], w[1]);
    }
}

/// Closed-form updates recomputed from posteriors of the pre-step model.
#[test]
fn hmm_updates_match_posterior_counts() {
    let data = sample_data(&truth_model(41), 10, 42);
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let mut model = random_genhmm(&mut rng, 3, 2, 2, &tiny_flow());
    let before = model.clone();
    let mut state = TrainState::new(&model, TrainConfig::default());
    em_step(&mut model, &views(&data), &mut state).unwrap();

    let posts: Vec<_> = data
        .iter()
        .map(|x| {
            let table = before.frame_loglik_table(x.view()).unwrap();
            forward_backward(before.hmm(), before.mixture(), &table).unwrap()
        })
        .collect();
    let (n, k) = (3, 2);
    let mut q = Array1::<f64>::zeros(n);
    let mut trans = Array2::<f64>::zeros((n, n));
    let mut mix = Array2::<f64>::zeros((n, k));
    for p in &posts {
        for i in 0..n {
            q[i] += p.gamma[[0, i]] / posts.len() as f64;
        }
        for t in 0..p.xi.shape()[0] {
            for i in 0..n {
                for j in 0..n {
                    trans[[i, j]] += p.xi[[t, i, j]];
                }
            }
        }
        for t in 0..p.gamma.nrows() {
            for s in 0..n {
                for c in 0..k {
                    mix[[s, c]] += p.gamma[[t, s]] * p.kappa[[t, s, c]];
                }
            }
        }
    }
    for i in 0..n {
        let row: f64 = trans.row(i).sum();
        trans.row_mut(i).mapv_inplace(|v| v / row);
        let row: f64 = mix.row(i).sum();
        mix.row_mut(i).mapv_inplace(|v| v / row);
    }
    assert!(max_abs_diff(model.hmm().initial(), &q) < 1e-12);
    assert!(max_abs_diff(model.hmm().transition(), &trans) < 1e-12);
    assert!(max_abs_diff(model.mixture().weights(), &mix) < 1e-12);
}

#[test]
fn left_to_right_structure_survives_training() {
    let data = sample_data(&truth_model(51), 16, 52);
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let mut model = GenHmmModel::random("c", &mut rng, 3, 1, 2, &tiny_flow());
    let mut state = TrainState::new(&model, TrainConfig::default());
    for _ in 0..5 {
        em_step(&mut model, &views(&data), &mut state).unwrap();
        let a = model.hmm().transition();
        for i in 0..3 {
            assert!((a.row(i).sum() - 1.0).abs() < 1e-12);
            for j in 0..i {
                assert_eq!(a[[i, j]], 0.0);
            }
        }
    }
}

/// `E_q[p(x) / q(x)] = ∫ p` under a broad Gaussian proposal `q`.
#[test]
fn flow_density_integrates_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let gen = jittered_generator(&mut rng, 2, &tiny_flow(), 0.3);
    let sigma = 3.0f64;
    let draws = 200_000;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..draws {
        let x: Vec<f64> = (0..2).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect();
        let log_q = -x.iter().map(|v| v * v).sum::<f64>() / (2.0 * sigma * sigma)
            - (2.0 * std::f64::consts::PI * sigma * sigma).ln();
        let w = (gen.log_prob(&x).unwrap() - log_q).exp();
        sum += w;
        sum_sq += w * w;
    }
    let mean = sum / draws as f64;
    let stderr = ((sum_sq / draws as f64 - mean * mean) / draws as f64).sqrt();
    assert!((mean - 1.0).abs() < 4.0 * stderr + 1e-3, "integral {mean} ± {stderr}");
}
