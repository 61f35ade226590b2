//! Predictor and agent behaviour on small synthetic problems and on an
//! untrained toy model.

use ppf_core::agent::{
    actor_forward, add_noise, critic_forward, decode_action, train_agent, Agent, AgentConfig, EnvOutcome,
    GroundTruthEnv, PolicyEnv, PredictorEnv, RawAction, ReplayBuffer, Transition,
};
use ppf_core::allocation::{ActionDecoded, WindowSpec};
use ppf_core::corpus::CorpusSplit;
use ppf_core::evaluation::Evaluator;
use ppf_core::importance::{ImportanceMethod, ImportanceParams};
use ppf_core::model::{build_model, ModelConfig};
use ppf_core::predictor::{
    collect_dataset, compress_mask, dataset_from_str, dataset_to_string, metrics, train_on, CollectGrid,
    PredictorConfig, PredictorNet, TrainSettings,
};
use ppf_core::pruning::actual_ratio;
use ppf_core::Result;
use ppf_nn::{grad_check, grad_check_report, Adam, GradCheckOptions, Graph, Sgd, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_grid(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(0.0..1.0)).collect())
}

fn untrained_evaluator() -> Evaluator {
    let cfg = ModelConfig::default();
    let split = CorpusSplit::new(3, cfg.vocab, 256, 64, 96);
    Evaluator::new(build_model(cfg, 7).unwrap(), split.calib, &ImportanceParams::default()).unwrap()
}

fn small_settings(epochs: usize) -> TrainSettings {
    TrainSettings {
        epochs,
        ..TrainSettings::default()
    }
}

#[test]
fn predictor_gradients_match_finite_differences() {
    let net = PredictorNet::new(PredictorConfig::for_input([1, 8, 8]), 11).unwrap();
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
    for trial in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let x = random_grid(&mut rng, &[1, 8, 8]);
        let target = rng.random_range(0.0..1.0);
        let r = grad_check_report(
            net.params(),
            |g, p| {
                let xv = g.constant(x.clone());
                let y = net.forward(g, p, xv).map_err(|e| ppf_nn::NnError::State(e.to_string()))?;
                g.mse(y, &Tensor::scalar(target))
            },
            &GradCheckOptions {
                h: 1e-6,
                max_coords_per_param: Some(4),
                seed: trial,
                kink_tol: Some(1e-4),
                ..Default::default()
            },
        )
        .unwrap();
        worst = worst.max(r.worst);
        checked += r.checked;
        skipped += r.skipped;
    }
    assert!(worst < 1e-4, "worst relative error {worst:e}");
    assert!(skipped * 100 <= checked, "{skipped} of {} coordinates sat on kinks", checked + skipped);
}

#[test]
fn actor_and_critic_gradients_match_finite_differences() {
    let agent = Agent::new(16, WindowSpec::new(0.2, 0.4, 5).unwrap(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let states = Tensor::from_vec(&[6, 1], (0..6).map(|_| rng.random_range(0.0..1.0)).collect());
    let probe = random_grid(&mut rng, &[6, 4]);
    let rows = random_grid(&mut rng, &[6, 5]);
    let opts = GradCheckOptions::default();
    let actor = grad_check(
        &agent.actor,
        |g, p| {
            let s = g.constant(states.clone());
            let a = actor_forward(g, p, s).map_err(|e| ppf_nn::NnError::State(e.to_string()))?;
            let c = g.constant(probe.clone());
            let m = g.mul(a, c)?;
            Ok(g.sum(m))
        },
        &opts,
    )
    .unwrap();
    let critic = grad_check(
        &agent.critic,
        |g, p| {
            let x = g.constant(rows.clone());
            let q = critic_forward(g, p, x).map_err(|e| ppf_nn::NnError::State(e.to_string()))?;
            g.mse(q, &Tensor::full(&[6, 1], 0.3))
        },
        &opts,
    )
    .unwrap();
    assert!(actor < 1e-5, "actor {actor:e}");
    assert!(critic < 1e-5, "critic {critic:e}");
}

#[test]
fn constant_targets_are_learned() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs: Vec<Tensor> = (0..40).map(|_| random_grid(&mut rng, &[1, 4, 4])).collect();
    let targets = vec![0.5; 40];
    let out = train_on(&inputs, &targets, PredictorConfig::for_input([1, 4, 4]), &small_settings(30)).unwrap();
    for p in &out.test.predictions {
        assert!((p - 0.5).abs() <= 0.01, "prediction {p}");
    }
    assert!(out.curve.last().unwrap() < &out.initial_loss);
}

#[test]
fn duplicated_sample_scores_like_its_training_twin() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut inputs: Vec<Tensor> = (0..30).map(|_| random_grid(&mut rng, &[1, 4, 4])).collect();
    let mut targets: Vec<f64> = inputs.iter().map(|x| 0.2 + 0.5 * x.mean()).collect();
    let settings = small_settings(20);
    let (train_idx, test_idx) = ppf_core::predictor::split_indices(30, settings.test_fraction, settings.seed);
    let (twin, copy) = (train_idx[0], test_idx[0]);
    inputs[copy] = inputs[twin].clone();
    targets[copy] = targets[twin];
    let out = train_on(&inputs, &targets, PredictorConfig::for_input([1, 4, 4]), &settings).unwrap();
    assert_eq!(out.test_idx, test_idx);
    let test_err = (out.test.predictions[0] - targets[copy]).abs();
    let train_err = (out.net.predict(&inputs[twin]).unwrap() - targets[twin]).abs();
    assert_eq!(test_err, train_err);
}

#[test]
fn metric_reference_points() {
    let perfect = metrics(vec![0.1, 0.4, 0.9], &[0.1, 0.4, 0.9]).unwrap();
    assert_eq!(perfect.mae, 0.0);
    let constant = metrics(vec![0.5, 0.5], &[0.0, 1.0]).unwrap();
    assert_eq!(constant.mae, 0.5);
    assert_eq!(constant.mse, 0.25);
    assert!(metrics(vec![], &[]).is_err());
}

#[test]
fn too_few_samples_is_an_input_error() {
    let inputs = vec![Tensor::zeros(&[1, 4, 4]); 5];
    assert!(train_on(&inputs, &[0.1; 5], PredictorConfig::for_input([1, 4, 4]), &small_settings(1)).is_err());
}

#[test]
fn singleton_grid_gives_the_uniform_sample() {
    let ev = untrained_evaluator();
    let grid = CollectGrid {
        ratios: vec![0.3],
        methods: vec![ImportanceMethod::Lod],
        scales: vec![0.0],
    };
    let c = collect_dataset(&ev, &grid, 1).unwrap();
    assert_eq!(c.samples.len(), 1);
    let s = &c.samples[0];
    assert_eq!(s.policy, ActionDecoded::uniform(0.3));
    let uniform = ev.mask_for(&ActionDecoded::uniform(0.3)).unwrap();
    assert_eq!(s.r_act, actual_ratio(&uniform));
}

#[test]
fn collection_contracts_and_worker_independence() {
    let ev = untrained_evaluator();
    let grid = CollectGrid {
        ratios: vec![0.1, 0.3, 0.5],
        methods: ImportanceMethod::ALL.to_vec(),
        scales: vec![0.0, 0.25, 0.5],
    };
    let serial = collect_dataset(&ev, &grid, 1).unwrap();
    let parallel = collect_dataset(&ev, &grid, 3).unwrap();
    assert_eq!(serial.samples, parallel.samples);
    // a_eta = 0 gives the same mask for every method.
    assert!(serial.duplicates >= 6);
    assert_eq!(serial.samples.len() + serial.duplicates + serial.failures.len(), 27);
    for s in &serial.samples {
        assert!((0.0..=1.0).contains(&s.js));
        assert!(s.r_act > 0.0 && s.r_act <= 1.0);
    }
    let text = dataset_to_string(&serial.samples).unwrap();
    assert_eq!(dataset_to_string(&dataset_from_str(&text).unwrap()).unwrap(), text);
}

#[test]
fn rewards_are_negative_ppr() {
    let ev = untrained_evaluator();
    let net = PredictorNet::new(PredictorConfig::for_input([1, 8, 8]), 0).unwrap();
    let policy = ActionDecoded::new(ImportanceMethod::Bi, 0.2, 0.3).unwrap();
    let mask = ev.mask_for(&policy).unwrap();
    let r_act = actual_ratio(&mask);

    let predicted = PredictorEnv::new(&ev, &net).unwrap().evaluate(&policy).unwrap();
    let js = net.predict(&compress_mask(&mask, ev.model().config()).unwrap().grid).unwrap();
    assert_eq!(predicted.reward, -js / r_act);
    assert_eq!(predicted.r_act, r_act);

    let truth = GroundTruthEnv::new(&ev).evaluate(&policy).unwrap();
    assert_eq!(truth.reward, -ev.mask_js(&mask).unwrap() / r_act);
}

#[test]
fn mismatched_predictor_is_rejected() {
    let ev = untrained_evaluator();
    let net = PredictorNet::new(PredictorConfig::for_input([1, 8, 16]), 0).unwrap();
    assert!(PredictorEnv::new(&ev, &net).is_err());
}

#[test]
fn noise_has_the_requested_spread() {
    let raw = RawAction {
        method_logits: [0.5; 3],
        eta_raw: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sigma = 0.3;
    let draws: Vec<f64> = (0..10_000)
        .map(|_| add_noise(&raw, sigma, &mut rng).unwrap().eta_raw)
        .collect();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let std = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / draws.len() as f64).sqrt();
    assert!((std - sigma).abs() <= 0.05 * sigma, "std {std}");
}

#[test]
fn decoded_actions_are_always_valid() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..2000 {
        let raw = RawAction {
            method_logits: [rng.random(), rng.random(), rng.random()],
            eta_raw: rng.random_range(-50.0..50.0),
        };
        let d = decode_action(&raw, 0.3).unwrap();
        assert!((0.0..=0.5).contains(&d.a_eta));
    }
}

/// JS falls linearly as the scaling factor grows.
struct Shaped;

impl PolicyEnv for Shaped {
    fn evaluate(&self, p: &ActionDecoded) -> Result<EnvOutcome> {
        EnvOutcome::new(0.05 + 0.2 * (0.5 - p.a_eta), p.s_tar)
    }
}

#[test]
fn agent_climbs_a_shaped_reward() {
    for seed in 0..4 {
        let cfg = AgentConfig {
            episodes: 60,
            seed,
            ..AgentConfig::default()
        };
        let t = train_agent(&Shaped, &cfg).unwrap();
        let served = ppf_core::agent::best_policy(&t.agent, 0.3).unwrap().policy;
        assert!(served.a_eta > 0.45, "seed {seed}: {served:?}");
        assert!(t.curve.last().unwrap().mean_reward > t.curve[0].mean_reward);
    }
}

#[test]
fn training_is_deterministic() {
    let cfg = AgentConfig {
        episodes: 10,
        ..AgentConfig::default()
    };
    let a = train_agent(&Shaped, &cfg).unwrap();
    let b = train_agent(&Shaped, &cfg).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.agent.to_bytes().unwrap(), b.agent.to_bytes().unwrap());
}

#[test]
fn one_update_soft_updates_targets() {
    let mut agent = Agent::new(8, WindowSpec::new(0.2, 0.4, 5).unwrap(), 1).unwrap();
    let mut buf = ReplayBuffer::new(16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..8 {
        buf.push(Transition {
            state: rng.random_range(0.2..0.4),
            raw_action: [rng.random(), rng.random(), rng.random(), rng.random_range(-1.0..1.0)],
            reward: -rng.random::<f64>(),
            next_state: 0.3,
            terminal: false,
        });
    }
    let old_ta = agent.target_actor.clone();
    let old_tc = agent.target_critic.clone();
    let tau = 0.1;
    let batch = buf.sample(8, &mut rng);
    agent
        .update(&batch, 0.5, tau, &mut Sgd::new(1e-2, 0.0), &mut Adam::new(1e-2))
        .unwrap();
    for (old, new, online) in [
        (&old_ta, &agent.target_actor, &agent.actor),
        (&old_tc, &agent.target_critic, &agent.critic),
    ] {
        for i in 0..online.len() {
            let triples = old[i].value.data().iter().zip(new[i].value.data()).zip(online[i].value.data());
            for ((o, n), w) in triples {
                assert!((n - (tau * w + (1.0 - tau) * o)).abs() < 1e-15);
            }
        }
    }
    assert_ne!(agent.actor.checksum(), old_ta.checksum());
}

#[test]
fn greedy_actions_depend_only_on_ratios() {
    let agent = Agent::new(16, WindowSpec::new(0.2, 0.4, 5).unwrap(), 8).unwrap();
    let mut g = Graph::new();
    let p = agent.actor.bind(&mut g);
    let s = g.constant(Tensor::from_vec(&[2, 1], vec![0.25, 0.25]));
    let a = actor_forward(&mut g, &p, s).unwrap();
    let d = g.value(a).data();
    assert_eq!(d[..4], d[4..]);
    for v in &d[..3] {
        assert!(*v > 0.0 && *v < 1.0);
    }
}
