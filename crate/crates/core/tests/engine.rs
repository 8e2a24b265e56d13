use fairfed::datagen::{generate, PartitionSpec, Setting, ShiftKind};
use fairfed::engine::*;
use fairfed::models::Objective;
use fairfed::rng::{keyed_stream, Purpose, SERVER};
use fairfed::*;
use proptest::prelude::*;

fn small_data(seed: u64) -> FederatedDataset {
    let mut spec = PartitionSpec::new(Setting::Strong, 3, 3, ShiftKind::Label);
    spec.cell_base = 20;
    generate(&spec, seed).unwrap()
}

fn stream(n: u32) -> rng::Stream {
    keyed_stream(7, 0, SERVER, Purpose::Truth, n)
}

fn client(features: Vec<f64>, labels: Vec<u32>, attributes: Vec<u32>) -> ClientData {
    ClientData { client_id: 0, features, labels, attributes }
}

/// Mean softmax cross-entropy gradient of a linear model, written out directly.
fn linear_gradient(theta: &[f64], features: &[f64], labels: &[u32], d: usize, c: usize) -> Vec<f64> {
    let n = labels.len();
    let mut g = vec![0.0; theta.len()];
    for s in 0..n {
        let x = &features[s * d..(s + 1) * d];
        let z: Vec<f64> =
            (0..c).map(|k| theta[c * d + k] + (0..d).map(|j| theta[k * d + j] * x[j]).sum::<f64>()).collect();
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
        let total: f64 = e.iter().sum();
        for k in 0..c {
            let r = e[k] / total - if labels[s] as usize == k { 1.0 } else { 0.0 };
            for j in 0..d {
                g[k * d + j] += r * x[j] / n as f64;
            }
            g[c * d + k] += r / n as f64;
        }
    }
    g
}

#[test]
fn concentrated_marginals_pick_one_client() {
    let picks = sample_clients(&[0.0, 1.0, 0.0], 8, &mut stream(0)).unwrap();
    assert_eq!(picks, vec![1; 8]);
}

#[test]
fn uniform_marginals_give_uniform_frequencies() {
    let picks = sample_clients(&[0.25; 4], 10_000, &mut stream(1)).unwrap();
    for i in 0..4 {
        let f = picks.iter().filter(|&&p| p == i).count() as f64 / 1e4;
        assert!((f - 0.25).abs() <= 0.02, "client {i}: {f}");
    }
}

#[test]
fn single_draw_frequency_matches_marginal() {
    let hits = (0..10_000u64)
        .filter(|&t| {
            sample_clients(&[0.9, 0.1], 1, &mut keyed_stream(3, t, SERVER, Purpose::ClientSampling, 0)).unwrap()[0] == 0
        })
        .count();
    let f = hits as f64 / 1e4;
    assert!((0.87..=0.93).contains(&f), "{f}");
}

#[test]
fn zero_marginals_are_rejected() {
    assert!(sample_clients(&[0.0, 0.0], 1, &mut stream(2)).is_err());
    assert!(sample_clients(&[0.5, 0.5], 0, &mut stream(2)).is_err());
}

#[test]
fn eval_clients_are_distinct_and_sorted() {
    let pool: Vec<usize> = (0..10).collect();
    let got = sample_eval_clients(&pool, 4, &mut stream(3));
    assert_eq!(got.len(), 4);
    assert!(got.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(sample_eval_clients(&pool, 10, &mut stream(3)), pool);
}

#[test]
fn zero_iterations_or_zero_step_leave_theta() {
    let model = ModelSpec::linear(2, 2);
    let c = client(vec![1.0, 2.0, -1.0, 0.5], vec![0, 1], vec![0, 0]);
    let theta = ModelParams::new(vec![0.1, -0.2, 0.3, 0.4, 0.0, 0.1]).unwrap();
    let r = local_sgd(&model, &theta, &c, 2, LocalSampler::Uniform, 0, 0.1, 2, None, &mut stream(4)).unwrap();
    assert_eq!(r.last, theta);
    let r = local_sgd(&model, &theta, &c, 2, LocalSampler::Uniform, 5, 0.0, 1, None, &mut stream(4)).unwrap();
    assert_eq!(r.last, theta);
}

#[test]
fn full_batch_step_matches_hand_gradient() {
    let (d, c) = (3, 3);
    let model = ModelSpec::linear(d, c);
    let features = vec![0.5, -1.0, 2.0, 1.5, 0.0, -0.5, -1.0, 1.0, 1.0, 0.2, 0.3, -0.7];
    let labels = vec![0, 2, 1, 2];
    let cl = client(features.clone(), labels.clone(), vec![0; 4]);
    let theta: Vec<f64> = (0..model.param_len()).map(|i| 0.1 * i as f64 - 0.5).collect();
    let members: Vec<usize> = (0..4).collect();
    let groups = [members.as_slice()];
    let sampler = LocalSampler::Groups { weights: &[1.0], members: &groups };
    let eta = 0.3;
    let r = local_sgd(
        &model,
        &ModelParams::new(theta.clone()).unwrap(),
        &cl,
        d,
        sampler,
        1,
        eta,
        4,
        Some(1),
        &mut stream(5),
    )
    .unwrap();
    let g = linear_gradient(&theta, &features, &labels, d, c);
    for ((got, t), gi) in r.last.as_slice().iter().zip(&theta).zip(&g) {
        assert!((got - (t - eta * gi)).abs() < 1e-14);
    }
    assert_eq!(r.snapshot.as_ref(), Some(&r.last));
}

#[test]
fn empty_client_is_an_error() {
    let model = ModelSpec::linear(1, 2);
    let c = client(vec![], vec![], vec![]);
    let theta = ModelParams::zeros(model.param_len());
    assert!(local_sgd(&model, &theta, &c, 1, LocalSampler::Uniform, 1, 0.1, 1, None, &mut stream(6)).is_err());
}

#[test]
fn aggregate_examples() {
    let a = ModelParams::new(vec![0.0, 0.0]).unwrap();
    let b = ModelParams::new(vec![2.0, 4.0]).unwrap();
    assert_eq!(aggregate(std::slice::from_ref(&b)).unwrap(), b);
    assert_eq!(aggregate(&[a, b]).unwrap().as_slice(), &[1.0, 2.0]);
    assert!(aggregate(&[]).is_err());
}

proptest! {
    #[test]
    fn aggregate_ignores_input_order(models in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 4), 1..8), seed in any::<u64>()) {
        let models: Vec<ModelParams> = models.into_iter().map(|m| ModelParams::new(m).unwrap()).collect();
        let mut shuffled = models.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut keyed_stream(seed, 0, 0, Purpose::Truth, 0));
        prop_assert_eq!(aggregate(&models).unwrap(), aggregate(&shuffled).unwrap());
        let tagged: Vec<(usize, ModelParams)> = models.iter().cloned().enumerate().map(|(i, m)| (i % 3, m)).collect();
        let mut rev = tagged.clone();
        rev.reverse();
        prop_assert_eq!(aggregate_by_client(&tagged).unwrap(), aggregate_by_client(&rev).unwrap());
    }
}

#[test]
fn zero_model_losses_are_log_class_count() {
    let data = small_data(1);
    let model = ModelSpec::linear(data.feature_dim, data.class_count);
    let index = GroupIndex::build(&data);
    let all: Vec<usize> = (0..data.client_count()).collect();
    let l = group_losses(&model, &ModelParams::zeros(model.param_len()), &index, &data, 10_000, &all, 1, 0).unwrap();
    assert!(l.mask.iter().all(|&m| m));
    for v in &l.values {
        assert!((v - (data.class_count as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn unevaluated_groups_are_masked_zero() {
    let data = small_data(2);
    let model = ModelSpec::linear(data.feature_dim, data.class_count);
    let index = GroupIndex::build(&data);
    let l = group_losses(&model, &ModelParams::zeros(model.param_len()), &index, &data, 5, &[1], 1, 0).unwrap();
    for (j, e) in index.entries.iter().enumerate() {
        assert_eq!(l.mask[j], e.client == 1);
        if e.client != 1 {
            assert_eq!(l.values[j], 0.0);
        }
    }
}

#[test]
fn two_sample_group_loss_is_hand_average() {
    // θ = 0 except b = (ln 3, 0): p(class 0) = 3/4 for every input.
    let data = FederatedDataset {
        clients: vec![client(vec![1.0, -2.0], vec![0, 1], vec![0, 0])],
        attribute_arity: 1,
        feature_dim: 1,
        class_count: 2,
    };
    let model = ModelSpec::linear(1, 2);
    let theta = ModelParams::new(vec![0.0, 0.0, 3f64.ln(), 0.0]).unwrap();
    let l = group_losses(&model, &theta, &GroupIndex::build(&data), &data, 2, &[0], 0, 0).unwrap();
    let expected = 0.5 * (-(0.75f64).ln() - (0.25f64).ln());
    assert!((l.values[0] - expected).abs() < 1e-14);
}

#[test]
fn fedavg_single_client_full_batch_is_one_gradient_step() {
    let (d, c) = (2, 3);
    let features = vec![1.0, 0.5, -0.5, 2.0, 0.0, -1.0];
    let labels = vec![2, 0, 1];
    let data = FederatedDataset {
        clients: vec![client(features.clone(), labels.clone(), vec![0, 1, 0])],
        attribute_arity: 2,
        feature_dim: d,
        class_count: c,
    };
    let model = ModelSpec::mlp(d, c, 2);
    let linear = ModelSpec::linear(d, c);
    for m in [&linear as &dyn Objective, &model] {
        let mut cfg = RunConfig::new(Algorithm::Fedavg, 1, 1, 1);
        cfg.batch_size = 3;
        cfg.eta = 0.2;
        let t = Trainer::new(cfg, m, &data).unwrap();
        let mut state = t.init_state().unwrap();
        let theta0 = state.theta.clone();
        let batch = models::Batch::new(features.clone(), labels.clone(), d).unwrap();
        let mut g = vec![0.0; m.param_len()];
        m.loss_grad(theta0.as_slice(), &batch, &mut g).unwrap();
        if m.param_len() == linear.param_len() {
            let hand = linear_gradient(theta0.as_slice(), &features, &labels, d, c);
            assert!(g.iter().zip(&hand).all(|(a, b)| (a - b).abs() < 1e-14));
        }
        t.run_round(&mut state).unwrap();
        for ((got, t0), gi) in state.theta.as_slice().iter().zip(theta0.as_slice()).zip(&g) {
            assert!((got - (t0 - 0.2 * gi)).abs() < 1e-15);
        }
    }
}

#[test]
fn zero_gamma_freezes_lambda() {
    let data = small_data(3);
    let model = ModelSpec::linear(data.feature_dim, data.class_count);
    let mut cfg = RunConfig::new(Algorithm::FmdaM, 3, 1, 2);
    cfg.gamma = 0.0;
    let t = Trainer::new(cfg, &model, &data).unwrap();
    let mut state = t.init_state().unwrap();
    let before = state.lambda.clone();
    for _ in 0..3 {
        t.run_round(&mut state).unwrap();
        assert_eq!(state.lambda, before);
    }
}

#[test]
fn momentum_off_matches_fmda_bitwise() {
    let data = small_data(4);
    let model = ModelSpec::linear(data.feature_dim, data.class_count);
    let mut a = RunConfig::new(Algorithm::FmdaM, 3, 20, 2);
    a.beta_theta = 0.0;
    a.beta_lambda = 0.0;
    let b = RunConfig { algorithm: Algorithm::Fmda, ..a.clone() };
    let ta = Trainer::new(a, &model, &data).unwrap().train(TrainOptions::default()).unwrap();
    let tb = Trainer::new(b, &model, &data).unwrap().train(TrainOptions::default()).unwrap();
    assert_eq!(ta.final_state, tb.final_state);
    assert_eq!(ta.records, tb.records);
}

#[test]
fn weights_stay_on_the_simplex_for_every_variant() {
    let data = small_data(5);
    let model = ModelSpec::linear(data.feature_dim, data.class_count);
    for alg in [
        Algorithm::Fedavg,
        Algorithm::DrfaClient,
        Algorithm::DrfaGroup,
        Algorithm::Fmda,
        Algorithm::FmdaM,
        Algorithm::Inda,
    ] {
        let mut cfg = RunConfig::new(alg, 4, 15, 2);
        cfg.gamma = 0.5;
        let tr = Trainer::new(cfg, &model, &data).unwrap().train(TrainOptions::default()).unwrap();
        for r in &tr.records {
            assert!(SimplexWeights::new(r.lambda.clone()).is_ok(), "{alg:?} round {}", r.round);
        }
        if let Some(s) = &tr.final_state.samples {
            assert_eq!(s.weights.len(), data.total_samples());
        }
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let data = small_data(6);
    let model = ModelSpec::mlp(data.feature_dim, data.class_count, 4);
    let cfg = RunConfig::new(Algorithm::FmdaM, 3, 6, 3);
    let one = Trainer::new(cfg.clone(), &model, &data)
        .unwrap()
        .with_threads(1)
        .unwrap()
        .train(TrainOptions::default())
        .unwrap();
    let three =
        Trainer::new(cfg, &model, &data).unwrap().with_threads(3).unwrap().train(TrainOptions::default()).unwrap();
    assert_eq!(one.final_state, three.final_state);
    assert_eq!(one.records, three.records);
}

#[test]
fn frozen_weights_reduce_variants_to_the_same_sgd() {
    let data = small_data(7);
    let model = ModelSpec::linear(data.feature_dim, data.class_count);
    let base = {
        let mut c = RunConfig::new(Algorithm::FmdaM, 1, 8, data.client_count());
        c.gamma = 0.0;
        c.beta_theta = 0.0;
        c.beta_lambda = 0.0;
        c.batch_size = 10_000;
        c.loss_batch = 10_000;
        c
    };
    let run = |alg| {
        let cfg = RunConfig { algorithm: alg, ..base.clone() };
        Trainer::new(cfg, &model, &data).unwrap().train(TrainOptions { eval: None, record_theta: true }).unwrap()
    };
    let reference = run(Algorithm::FmdaM);
    for alg in [Algorithm::Fmda, Algorithm::DrfaGroup] {
        let other = run(alg);
        assert_eq!(reference.theta_steps, other.theta_steps, "{alg:?}");
    }
}

#[test]
fn duplicating_samples_keeps_the_trajectory() {
    let data = small_data(8);
    let doubled = data.duplicated();
    let model = ModelSpec::linear(data.feature_dim, data.class_count);
    let mut cfg = RunConfig::new(Algorithm::FmdaM, 2, 6, 3);
    cfg.batch_size = 10_000;
    cfg.loss_batch = 10_000;
    let a = Trainer::new(cfg.clone(), &model, &data).unwrap().train(TrainOptions::default()).unwrap();
    let b = Trainer::new(cfg, &model, &doubled).unwrap().train(TrainOptions::default()).unwrap();
    for (x, y) in a.final_state.theta.as_slice().iter().zip(b.final_state.theta.as_slice()) {
        assert!((x - y).abs() < 1e-10, "{x} vs {y}");
    }
    for (x, y) in a.final_state.lambda.as_slice().iter().zip(b.final_state.lambda.as_slice()) {
        assert!((x - y).abs() < 1e-10);
    }
    for (ra, rb) in a.records.iter().zip(&b.records) {
        assert_eq!(ra.sampled, rb.sampled);
        assert_eq!(ra.t_prime, rb.t_prime);
    }
}

#[test]
fn sampled_gradient_is_unbiased() {
    let data = small_data(9);
    let model = ModelSpec::linear(data.feature_dim, data.class_count);
    let mut cfg = RunConfig::new(Algorithm::FmdaM, 1, 1, 2);
    cfg.batch_size = 4;
    let t = Trainer::new(cfg, &model, &data).unwrap();
    let mut state = t.init_state().unwrap();
    t.run_round(&mut state).unwrap();
    let exact = t.exact_weighted_gradient(&state).unwrap();
    let draws = 2000;
    let p = exact.len();
    let (mut sum, mut sq) = (vec![0.0; p], vec![0.0; p]);
    for d in 0..draws {
        let g = t.sampled_gradient(&state, d).unwrap();
        for j in 0..p {
            sum[j] += g[j];
            sq[j] += g[j] * g[j];
        }
    }
    let n = draws as f64;
    for j in 0..p {
        let mean = sum[j] / n;
        let se = ((sq[j] / n - mean * mean).max(0.0) / (n - 1.0)).sqrt();
        assert!((mean - exact[j]).abs() <= 4.0 * se + 1e-12, "coord {j}: {mean} vs {} (se {se})", exact[j]);
    }
}

#[test]
fn zero_rounds_return_the_initialization() {
    let data = small_data(10);
    let model = ModelSpec::linear(data.feature_dim, data.class_count);
    let t = Trainer::new(RunConfig::new(Algorithm::FmdaM, 2, 0, 2), &model, &data).unwrap();
    let tr = t.train(TrainOptions::default()).unwrap();
    assert!(tr.records.is_empty());
    assert_eq!(tr.final_state, t.init_state().unwrap());
}

#[test]
fn one_round_trace_is_one_run_round() {
    let data = small_data(11);
    let model = ModelSpec::linear(data.feature_dim, data.class_count);
    let t = Trainer::new(RunConfig::new(Algorithm::DrfaGroup, 2, 1, 2), &model, &data).unwrap();
    let tr = t.train(TrainOptions::default()).unwrap();
    let mut state = t.init_state().unwrap();
    let out = t.run_round(&mut state).unwrap();
    assert_eq!(tr.final_state, state);
    assert_eq!(tr.records.len(), 1);
    assert_eq!(tr.records[0].v, out.v);
    assert_eq!(tr.records[0].sampled, out.sampled);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let data = small_data(12);
    let model = ModelSpec::linear(data.feature_dim, data.class_count);
    for alg in [Algorithm::FmdaM, Algorithm::Inda] {
        let cfg = RunConfig::new(alg, 2, 8, 2);
        let t = Trainer::new(cfg, &model, &data).unwrap();
        let straight = t.train(TrainOptions::default()).unwrap();
        let half = t.train_from(t.init_state().unwrap(), 4, TrainOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        t.checkpoint(&half.final_state).save(&path).unwrap();
        let state = t.resume(&Checkpoint::load(&path).unwrap()).unwrap();
        let rest = t.train_from(state, 4, TrainOptions::default()).unwrap();
        assert_eq!(rest.final_state, straight.final_state, "{alg:?}");
        assert_eq!(rest.records[..], straight.records[4..]);
    }
}

#[test]
fn resume_refuses_foreign_checkpoints() {
    let data = small_data(13);
    let other = small_data(14);
    let model = ModelSpec::linear(data.feature_dim, data.class_count);
    let cfg = RunConfig::new(Algorithm::FmdaM, 2, 2, 2);
    let t = Trainer::new(cfg.clone(), &model, &data).unwrap();
    let ckpt = t.checkpoint(&t.init_state().unwrap());

    let longer = Trainer::new(RunConfig { rounds: 50, ..cfg.clone() }, &model, &data).unwrap();
    assert!(longer.resume(&ckpt).is_ok());

    let eta = Trainer::new(RunConfig { eta: 0.5, ..cfg.clone() }, &model, &data).unwrap();
    assert!(matches!(eta.resume(&ckpt), Err(Error::Config(_))));

    let moved = Trainer::new(cfg, &model, &other).unwrap();
    if GroupIndex::build(&other).digest() != GroupIndex::build(&data).digest() {
        assert!(matches!(moved.resume(&ckpt), Err(Error::Data(_))));
    }

    let mut bad = ckpt.clone();
    bad.format_version = 99;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    bad.save(&path).unwrap();
    assert!(Checkpoint::load(&path).is_err());
}

#[test]
fn agnostic_reports_carry_setting_names() {
    let data = small_data(15);
    let other = small_data(16);
    let model = ModelSpec::linear(data.feature_dim, data.class_count);
    let theta = ModelParams::zeros(model.param_len());
    let reports = evaluate_agnostic(&model, &theta, &[("a".into(), &data), ("b".into(), &other)]).unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0].setting.as_deref(), Some("a"));
    assert_eq!(reports[1].setting.as_deref(), Some("b"));
    let own = metrics::evaluate_groups(&model, &theta, &data).unwrap().client_report().unwrap();
    assert_eq!(reports[0].group_accuracies, own.group_accuracies);
}
