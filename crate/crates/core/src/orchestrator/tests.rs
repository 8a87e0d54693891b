use super::*;
use crate::adapters::AdapterPair;
use crate::model::{ModelConfig, VOCAB_SIZE};
use crate::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scalar_set(v: &[f64]) -> AdapterSet<f64> {
    let mut set = AdapterSet::default();
    let pair = AdapterPair::new(
        Tensor::new([1, v.len() - 1], v[..v.len() - 1].to_vec()).unwrap(),
        Tensor::new([1, 1], vec![v[v.len() - 1]]).unwrap(),
        1.0,
    )
    .unwrap();
    set.insert("s", pair).unwrap();
    set
}

fn tiny() -> ModelConfig {
    ModelConfig {
        vocab_size: VOCAB_SIZE,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_context: 32,
        seed: 3,
    }
}

fn data(n: usize, seed: u64) -> Vec<TokenizedExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x: String = (0..rng.random_range(2..6)).map(|_| rng.random_range(b'a'..=b'z') as char).collect();
            let y: String = (0..rng.random_range(1..5)).map(|_| rng.random_range(b'a'..=b'z') as char).collect();
            TokenizedExample::new(&x, &y, 32).unwrap()
        })
        .collect()
}

fn config(mode: FedMode, rounds: u32) -> FedConfig {
    FedConfig {
        rounds,
        rank: 2,
        seed: 9,
        mode,
        hyper: TrainHyper {
            epochs: 1,
            lr: 5e-3,
            grad_accum: 2,
            probe_batch_size: 4,
            ..TrainHyper::default()
        },
        threads: 2,
        run: None,
    }
}

#[test]
fn two_client_hand_example() {
    // Only the single B coordinate is compared: [1] and [5] with sizes 1 and 3.
    let a = scalar_set(&[0.0, 1.0]);
    let b = scalar_set(&[0.0, 5.0]);
    let out = aggregate(&[(a, 1), (b, 3)]).unwrap();
    assert_eq!(out.flatten(), vec![0.0, 4.0]);
    assert_eq!(out.meta.round, 1);
    assert_eq!(out.meta.client_id, None);
}

#[test]
fn table_two_weights() {
    let w = aggregation_weights(&[47303, 13000, 6000]).unwrap();
    for (got, want) in w.iter().zip([0.71344, 0.19607, 0.09049]) {
        assert!((got - want).abs() < 1e-5, "{got} vs {want}");
    }
    assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-15);
}

#[test]
fn aggregate_errors() {
    assert!(matches!(aggregate::<f64>(&[]), Err(Error::Contract(_))));
    let r = aggregate(&[(scalar_set(&[1.0, 2.0]), 1), (scalar_set(&[1.0, 2.0, 3.0]), 1)]);
    assert!(matches!(r, Err(Error::Contract(_))));
    let r = aggregate(&[(scalar_set(&[1.0, 2.0]), 0)]);
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn identical_clients_are_a_fixed_point() {
    let set = init_adapters::<f64>(&tiny(), 2, 1).unwrap();
    let out = aggregate(&[(set.clone(), 47303), (set.clone(), 13000), (set.clone(), 6000)]).unwrap();
    assert_eq!(out.flatten(), set.flatten());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]
    #[test]
    fn aggregate_is_convex(
        values in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 4), 1..6),
        sizes in prop::collection::vec(1usize..100_000, 6),
    ) {
        let received: Vec<(AdapterSet<f64>, usize)> = values
            .iter()
            .zip(&sizes)
            .map(|(v, &n)| (scalar_set(v), n))
            .collect();
        let out = aggregate(&received).unwrap().flatten();
        for k in 0..4 {
            let lo = values.iter().map(|v| v[k]).fold(f64::INFINITY, f64::min);
            let hi = values.iter().map(|v| v[k]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out[k] >= lo - 1e-12 && out[k] <= hi + 1e-12);
        }
        let w = aggregation_weights(&sizes[..values.len()]).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-15);
    }
}

#[test]
fn single_client_round_returns_its_adapters() {
    let cfg = tiny();
    let model = BaseModel::<f64>::init(&cfg).unwrap();
    let global = init_adapters::<f64>(&cfg, 2, 0).unwrap();
    let fed = config(FedMode::Base, 1);
    let mut clients = vec![ClientState::new(1, data(8, 1), 9).unwrap()];
    let round = run_round(&global, &mut clients, &model, 1, &fed).unwrap();
    assert_eq!(round.global.flatten(), round.received[0].flatten());
    assert_ne!(round.global.flatten(), global.flatten());
    assert_eq!(round.bytes_up, round.received[0].to_bytes().unwrap().len());
}

#[test]
fn zero_lr_round_is_a_fixed_point() {
    let cfg = tiny();
    let model = BaseModel::<f64>::init(&cfg).unwrap();
    let global = init_adapters::<f64>(&cfg, 2, 0).unwrap();
    let mut fed = config(FedMode::Cl, 1);
    fed.hyper.lr = 0.0;
    let mut clients = vec![
        ClientState::new(1, data(8, 1), 9).unwrap(),
        ClientState::new(2, data(5, 2), 9).unwrap(),
    ];
    let round = run_round(&global, &mut clients, &model, 2, &fed).unwrap();
    assert_eq!(round.global.flatten(), global.flatten());
}

#[test]
fn training_is_deterministic_and_thread_count_independent() {
    let cfg = tiny();
    let model = BaseModel::<f64>::init(&cfg).unwrap();
    let run = |threads: usize| {
        let mut fed = config(FedMode::Cl, 2);
        fed.threads = threads;
        let sets = vec![data(8, 1), data(6, 2), data(4, 3)];
        run_training(&fed, &model, sets, None).unwrap()
    };
    let (a, b, c) = (run(1), run(3), run(3));
    let bytes = |o: &TrainingOutput<f64>| o.global.to_bytes().unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    assert_eq!(bytes(&b), bytes(&c));
    assert_eq!(a.global.meta.round, 2);
}

#[test]
fn round_one_cl_equals_base() {
    let cfg = tiny();
    let model = BaseModel::<f64>::init(&cfg).unwrap();
    let run = |mode| {
        let sets = vec![data(8, 1), data(6, 2)];
        run_training(&config(mode, 1), &model, sets, None).unwrap().global
    };
    assert_eq!(run(FedMode::Cl).to_bytes().unwrap(), run(FedMode::Base).to_bytes().unwrap());
}

#[test]
fn cl_differs_from_base_after_round_two() {
    let cfg = tiny();
    let model = BaseModel::<f64>::init(&cfg).unwrap();
    let run = |mode| {
        let sets = vec![data(8, 1), data(6, 2)];
        run_training(&config(mode, 2), &model, sets, None).unwrap()
    };
    let (cl, base) = (run(FedMode::Cl), run(FedMode::Base));
    assert_ne!(cl.global.flatten(), base.global.flatten());
    assert!(cl.rounds.iter().filter(|r| r.t == 2).all(|r| r.mean_penalty != 0.0));
    assert!(base.rounds.iter().all(|r| r.mean_penalty == 0.0));
}

#[test]
fn checkpoints_logs_and_byte_accounting() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let model = BaseModel::<f64>::init(&cfg).unwrap();
    let sets = vec![data(8, 1), data(6, 2), data(4, 3)];
    let out = run_training(&config(FedMode::Cl, 3), &model, sets, Some(dir.path())).unwrap();
    for t in 1..=3 {
        let g = AdapterSet::<f64>::load(dir.path().join(format!("global_round{t}.fjla"))).unwrap();
        assert_eq!(g.meta.round, t);
        assert_eq!(g, out.globals[t as usize - 1]);
    }
    for i in 1..=3 {
        let p = AdapterSet::<f64>::load(dir.path().join(format!("client{i}_final.fjla"))).unwrap();
        assert_eq!(p.meta.client_id, Some(i));
        assert_eq!(p, out.personal[i as usize - 1]);
    }
    let size = out.global.to_bytes().unwrap().len();
    assert!(out.uplink.iter().all(|&b| b == 3 * size));
    let rounds = std::fs::read_to_string(dir.path().join("rounds.jsonl")).unwrap();
    assert_eq!(rounds.lines().count(), 9);
    let first: RoundLog = serde_json::from_str(rounds.lines().next().unwrap()).unwrap();
    assert_eq!((first.t, first.client_id, first.bytes_up), (1, 1, size));
    let steps = std::fs::read_to_string(dir.path().join("steps.jsonl")).unwrap();
    assert!(steps.lines().next().unwrap().contains("\"cl_penalty\""));
}

#[test]
fn client_failure_aborts_the_round() {
    let cfg = tiny();
    let model = BaseModel::<f64>::init(&cfg).unwrap();
    let global = init_adapters::<f64>(&cfg, 2, 0).unwrap();
    let bad = TokenizedExample {
        x_tokens: vec![257],
        y_tokens: vec![],
        loss_mask: vec![0],
    };
    let mut clients = vec![
        ClientState::new(1, data(4, 1), 9).unwrap(),
        ClientState::new(2, vec![bad.clone(), bad], 9).unwrap(),
    ];
    match run_round(&global, &mut clients, &model, 1, &config(FedMode::Base, 1)) {
        Err(Error::Client { client: 2, .. }) => {}
        other => panic!("{other:?}"),
    }
}
