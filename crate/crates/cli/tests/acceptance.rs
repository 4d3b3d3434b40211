//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Run with `cargo test -p genhmm-cli --test acceptance`.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use genhmm::checkpoint::load_checkpoint;
use genhmm::flow_hmm::{train_from, views};
use genhmm::gmm::train_gmm_from;
use genhmm::hmm::{forward_backward, update_initial, update_mixture, update_transition, PosteriorTables};
use genhmm::presets::separated_classes;
use genhmm::{
    FlowConfig, GenHmmModel, GmmHmmModel, GmmTrainConfig, GmmTrainState, HmmCore, MixtureWeights, NoiseKind,
    SequenceModel, TrainConfig, TrainState,
};
use genhmm_cli::pipeline::{checkpoint_file_name, evaluate, preset_datasets, train_models, ClassModels};
use genhmm_cli::{ModelType, RunConfig};
use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use support::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Trained models shared between the classification criteria.
#[derive(Default)]
struct Shared {
    separated: Option<(RunConfig, ClassModels, ClassModels)>,
}

fn base_config(preset: &str) -> RunConfig {
    RunConfig {
        preset: Some(preset.into()),
        k: 2,
        states: Some(3),
        max_em: 10,
        seed: 2024,
        ..RunConfig::default()
    }
}

fn trained(cfg: &RunConfig, model: ModelType, k: usize) -> (RunConfig, ClassModels, genhmm::Dataset) {
    let mut cfg = cfg.clone();
    cfg.model = model;
    cfg.k = k;
    let (train, test) = preset_datasets(&cfg).expect("preset");
    let models = train_models(&cfg, &train, None, false).expect("training");
    (cfg, models, test)
}

fn accuracy(models: &ClassModels, test: &genhmm::Dataset, cfg: &RunConfig) -> f64 {
    evaluate(models, test, cfg).expect("evaluation").accuracy()
}

fn c1_forward_backward() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let flow = FlowConfig {
        blocks: 1,
        hidden: 6,
        ..FlowConfig::default()
    };
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let states = rng.random_range(1..=3);
        let comps = rng.random_range(1..=2);
        let frames = rng.random_range(1..=5);
        let model = random_genhmm(&mut rng, states, comps, 2, &flow);
        let x = Array2::from_shape_fn((frames, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let component = model.component_table(x.view()).unwrap();
        let exact = enumerate_paths(model.hmm(), model.mixture(), &component);
        let post = forward_backward(model.hmm(), model.mixture(), &frame_table(component, model.mixture())).unwrap();
        worst = worst
            .max((post.loglik - exact.loglik).abs())
            .max(max_abs_diff(&post.gamma, &exact.gamma))
            .max(max_abs_diff(&post.xi, &exact.xi));
    }
    outcome(worst <= 1e-9, format!("200 models, max |diff| over loglik, gamma, xi = {worst:.2e} (tol 1e-9)"))
}

fn c2_flow() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut round_trip, mut log_det): (f64, f64) = (0.0, 0.0);
    for i in 0..100 {
        let dim = [2, 4, 6][i % 3];
        let gen = jittered_generator(&mut rng, dim, &FlowConfig::default(), 0.1);
        let x = standard_normal_vec(&mut rng, dim);
        let (z, ld) = gen.inverse_eval(&x).unwrap();
        round_trip = round_trip.max(max_abs_diff(&gen.forward(&z).unwrap(), &x));
        log_det = log_det.max((ld - log_abs_det(numeric_jacobian(&gen, &x, 1e-5))).abs());
    }
    outcome(
        round_trip <= 1e-6 && log_det <= 1e-5,
        format!("100 generators, max round trip {round_trip:.2e} (tol 1e-6), max log-det error {log_det:.2e} (tol 1e-5)"),
    )
}

fn c3_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let flow = FlowConfig {
        blocks: 1,
        ..FlowConfig::default()
    };
    let model = random_genhmm(&mut rng, 2, 2, 2, &flow);
    let x = Array2::from_shape_fn((4, 2), |_| rng.sample::<f64, _>(StandardNormal));
    let post = forward_backward(model.hmm(), model.mixture(), &model.frame_loglik_table(x.view()).unwrap()).unwrap();
    let mut tapes = model.new_tapes();
    model.accumulate_generator_gradient(x.view(), &post, 0.0, &mut tapes).unwrap();
    // Relative error against max(|analytic|, |numeric|, 1e-3): below 1e-3 in
    // magnitude the central-difference rounding noise dominates.
    let (mut worst, mut count, mut failures) = (0.0f64, 0, 0);
    for s in 0..2 {
        for k in 0..2 {
            let gen = &model.generators()[s][k];
            for i in 0..gen.param_count() {
                let mut probe = model.clone();
                let numeric = central_difference(
                    |v| {
                        probe.generators_mut()[s][k].set_param(i, v);
                        probe.generator_objective(x.view(), &post).unwrap()
                    },
                    gen.param(i),
                    1e-5,
                );
                let analytic = tapes[s][k].get(i);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
                worst = worst.max(rel);
                count += 1;
                if !close_relative(analytic, numeric, 1e-4, 1e-3) {
                    failures += 1;
                }
            }
        }
    }
    outcome(
        failures == 0,
        format!("{count} parameters, max relative error {worst:.2e} (tol 1e-4), {failures} outside tolerance"),
    )
}

fn invariants_hold(hmm: &HmmCore<f64>, mix: &MixtureWeights<f64>) -> bool {
    let stochastic = |v: &[f64]| v.iter().all(|&p| p >= 0.0) && (v.iter().sum::<f64>() - 1.0).abs() < 1e-12;
    let a = hmm.transition();
    stochastic(hmm.initial().as_slice().unwrap())
        && a.rows().into_iter().all(|r| stochastic(&r.to_vec()))
        && mix.weights().rows().into_iter().all(|r| stochastic(&r.to_vec()))
        && (0..a.nrows()).all(|i| (0..i).all(|j| a[[i, j]] == 0.0))
}

/// Returns (outcome of 4, whether every iteration kept the invariants of 5).
fn c4_monotonicity() -> (Outcome, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let truth = &separated_classes::<f64>(1, 3, 2, 4, 3.0, 405)[0];
    let data: Vec<Array2<f64>> = (0..50)
        .map(|_| {
            let len = rng.random_range(8..=16);
            truth.sample_sequence(len, &mut rng).unwrap().1
        })
        .collect();
    let data = views(&data);
    let mut invariants = true;

    let mut model = GenHmmModel::random("m", &mut rng, 3, 2, 4, &FlowConfig::default());
    let config = TrainConfig {
        batch_size: 0,
        max_iterations: 30,
        tolerance: 1e-15,
        seed: 406,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&model, config);
    train_from(&mut model, &data, &mut state, |m, _, _| {
        invariants &= invariants_hold(m.hmm(), m.mixture());
        Ok(())
    })
    .unwrap();
    let gen_drop = largest_drop(&state.history);

    let mut gmm = GmmHmmModel::initialize("g", &mut rng, 3, 2, &data).unwrap();
    let mut gstate = GmmTrainState::new(GmmTrainConfig {
        max_iterations: 30,
        tolerance: 1e-15,
        seed: 407,
    });
    train_gmm_from(&mut gmm, &data, &mut gstate, |m, _, _| {
        invariants &= invariants_hold(m.hmm(), m.mixture());
        Ok(())
    })
    .unwrap();
    let gmm_drop = largest_drop(&gstate.history);
    let pass = state.history.len() == 30 && gstate.history.len() == 30 && gen_drop <= 1e-3 && gmm_drop <= 1e-9;
    (
        outcome(
            pass,
            format!(
                "GenHMM {} iterations, {:.4} -> {:.4} nats/frame, largest drop {gen_drop:.2e} (slack 1e-3); \
                 GMM-HMM {} iterations, largest drop {gmm_drop:.2e} (slack 1e-9)",
                state.history.len(),
                state.history[0],
                state.history.last().unwrap(),
                gstate.history.len()
            ),
        ),
        invariants,
    )
}

fn largest_drop(history: &[f64]) -> f64 {
    history.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max)
}

fn random_posteriors(rng: &mut ChaCha8Rng, frames: usize, n: usize, k: usize) -> PosteriorTables<f64> {
    let gamma = random_stochastic(rng, frames, n, false);
    let xi = Array3::from_shape_fn((frames - 1, n, n), |_| rng.random::<f64>());
    let kappa_rows = random_stochastic(rng, frames * n, k, false);
    let kappa = Array3::from_shape_fn((frames, n, k), |(t, s, c)| kappa_rows[[t * n + s, c]]);
    PosteriorTables {
        gamma,
        xi,
        kappa,
        loglik: 0.0,
    }
}

fn c5_updates(invariants: bool) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let (n, k) = (3, 2);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let tables: Vec<_> = (0..6)
            .map(|_| {
                let frames = rng.random_range(2..8);
                random_posteriors(&mut rng, frames, n, k)
            })
            .collect();
        let refs: Vec<&PosteriorTables<f64>> = tables.iter().collect();
        let previous = random_stochastic(&mut rng, n, n, false);

        let mut q = Array1::<f64>::zeros(n);
        let mut xi_bar = Array2::<f64>::zeros((n, n));
        let mut counts = Array2::<f64>::zeros((n, k));
        for p in &tables {
            for i in 0..n {
                q[i] += p.gamma[[0, i]];
            }
            for t in 0..p.xi.shape()[0] {
                for i in 0..n {
                    for j in 0..n {
                        xi_bar[[i, j]] += p.xi[[t, i, j]];
                    }
                }
            }
            for t in 0..p.gamma.nrows() {
                for s in 0..n {
                    for c in 0..k {
                        counts[[s, c]] += p.gamma[[t, s]] * p.kappa[[t, s, c]];
                    }
                }
            }
        }
        q /= tables.len() as f64;
        let a = Array2::from_shape_fn((n, n), |(i, j)| xi_bar[[i, j]] / xi_bar.row(i).sum());
        let pi = Array2::from_shape_fn((n, k), |(s, c)| counts[[s, c]] / counts.row(s).sum());

        worst = worst
            .max(max_abs_diff(&update_initial(&refs).unwrap(), &q))
            .max(max_abs_diff(&update_transition(&refs, &previous).unwrap(), &a))
            .max(max_abs_diff(&update_mixture(&refs, &Array2::zeros((n, k))).unwrap(), &pi));
    }
    outcome(
        worst <= 1e-12 && invariants,
        format!(
            "max |diff| vs independent arithmetic {worst:.2e} (tol 1e-12); invariants after every iteration of 4: {}",
            if invariants { "held" } else { "VIOLATED" }
        ),
    )
}

fn c6_classification(shared: &mut Shared) -> Outcome {
    let (cfg, gen, test) = trained(&base_config("separated"), ModelType::GenHmm, 2);
    let separated = accuracy(&gen, &test, &cfg);
    let (_, gmm, _) = trained(&cfg, ModelType::GmmHmm, 2);
    shared.separated = Some((cfg, gen, gmm));

    let (wcfg, wgen, wtest) = trained(&base_config("warped"), ModelType::GenHmm, 2);
    let warped_gen = accuracy(&wgen, &wtest, &wcfg);
    let (wcfg, wgmm, _) = trained(&wcfg, ModelType::GmmHmm, 2);
    let warped_gmm = accuracy(&wgmm, &wtest, &wcfg);
    let gap = 100.0 * (warped_gen - warped_gmm);
    outcome(
        separated >= 0.95 && gap >= 5.0,
        format!(
            "separated GenHMM {:.1}% (need >= 95%); warped GenHMM {:.1}% vs GMM-HMM {:.1}%, gap {gap:.1} points (need >= 5)",
            100.0 * separated,
            100.0 * warped_gen,
            100.0 * warped_gmm
        ),
    )
}

fn c7_mixture() -> Outcome {
    let cfg = base_config("multimodal");
    let run = |model, k| {
        let (cfg, models, test) = trained(&cfg, model, k);
        accuracy(&models, &test, &cfg)
    };
    let (g1, g3) = (run(ModelType::GenHmm, 1), run(ModelType::GenHmm, 3));
    let (m1, m3) = (run(ModelType::GmmHmm, 1), run(ModelType::GmmHmm, 3));
    outcome(
        g3 >= g1 - 0.01,
        format!(
            "GenHMM K=1 {:.1}%, K=3 {:.1}% (need K=3 >= K=1 - 1%); GMM-HMM K=1 {:.1}%, K=3 {:.1}%",
            100.0 * g1,
            100.0 * g3,
            100.0 * m1,
            100.0 * m3
        ),
    )
}

fn c8_noise(shared: &Shared) -> Outcome {
    let (cfg, gen, gmm) = shared.separated.as_ref().expect("criterion 6 trains the separated models");
    let (_, test) = preset_datasets(cfg).unwrap();
    let sweep = |models: &ClassModels| -> Vec<f64> {
        [f64::INFINITY, 30.0, 20.0, 10.0]
            .iter()
            .map(|&snr| {
                let mut c = cfg.clone();
                c.noise = Some(NoiseKind::White);
                c.snr_db = snr;
                accuracy(models, &test, &c)
            })
            .collect()
    };
    let (g, m) = (sweep(gen), sweep(gmm));
    // [clean, 30, 20, 10]: accuracy must not rise as SNR falls, beyond 2%.
    let ordered = |a: &[f64]| a[2] <= a[1] + 0.02 && a[3] <= a[2] + 0.02;
    let fmt = |a: &[f64]| format!("clean {:.1}%, 30 dB {:.1}%, 20 dB {:.1}%, 10 dB {:.1}%", 100.0 * a[0], 100.0 * a[1], 100.0 * a[2], 100.0 * a[3]);
    outcome(
        ordered(&g) && ordered(&m),
        format!(
            "GenHMM {} (drop clean->30 dB {:.1} pts); GMM-HMM {} (drop clean->30 dB {:.1} pts)",
            fmt(&g),
            100.0 * (g[0] - g[1]),
            fmt(&m),
            100.0 * (m[0] - m[1])
        ),
    )
}

fn c9_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        preset: Some("separated".into()),
        train_per_class: 10,
        test_per_class: 5,
        blocks: 2,
        hidden: 8,
        max_em: 2,
        seed: 909,
        ..RunConfig::default()
    };
    let (train, test) = preset_datasets(&cfg).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let runs: Vec<Vec<Vec<u8>>> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let models = pool.install(|| train_models(&cfg, &train, Some(&out), false)).unwrap();
            models
                .labels()
                .iter()
                .map(|l| std::fs::read(out.join(checkpoint_file_name(l))).unwrap())
                .collect()
        })
        .collect();
    let identical_checkpoints = runs[0] == runs[1];

    let models = train_models(&cfg, &train, None, false).unwrap();
    let mut identical_scores = true;
    let mut scored = 0;
    for m in &models.models {
        let path = dir.path().join("a").join(checkpoint_file_name(m.label()));
        let loaded = load_checkpoint::<f64>(&path).unwrap().model;
        for seq in test.items() {
            let a = m.sequence_loglik(seq.frames.view()).unwrap().value;
            let b = loaded.sequence_loglik(seq.frames.view()).unwrap().value;
            identical_scores &= a.to_bits() == b.to_bits();
            scored += 1;
        }
    }
    outcome(
        identical_checkpoints && identical_scores,
        format!(
            "repeat single-thread run checkpoints {}; {scored} sequence_loglik values after load {}",
            if identical_checkpoints { "bit-identical" } else { "DIFFER" },
            if identical_scores { "bit-identical" } else { "DIFFER" }
        ),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        outcome(false, format!("panicked: {msg}"))
    })
}

fn main() {
    let mut shared = Shared::default();
    let mut invariants = false;
    let criteria: Vec<(&str, Box<dyn FnOnce(&mut Shared, &mut bool) -> Outcome>)> = vec![
        ("forward-backward vs enumeration", Box::new(|_, _| c1_forward_backward())),
        ("flow round trip and log-det", Box::new(|_, _| c2_flow())),
        ("Q gradient vs finite differences", Box::new(|_, _| c3_gradient())),
        (
            "EM monotonicity",
            Box::new(|_, inv| {
                let (o, held) = c4_monotonicity();
                *inv = held;
                o
            }),
        ),
        ("closed-form update identities", Box::new(|_, inv| c5_updates(*inv))),
        ("classification on synthetic sets", Box::new(|sh, _| c6_classification(sh))),
        ("mixture benefit direction", Box::new(|_, _| c7_mixture())),
        ("noise robustness direction", Box::new(|sh, _| c8_noise(sh))),
        ("determinism and checkpoint round trip", Box::new(|_, _| c9_determinism())),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.into_iter().enumerate() {
        let started = Instant::now();
        let result = guarded(|| run(&mut shared, &mut invariants));
        failed += usize::from(!result.pass);
        println!(
            "[{}] criterion {} {name}: {} ({:.1}s)",
            if result.pass { "PASS" } else { "FAIL" },
            i + 1,
            result.detail,
            started.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of 9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
