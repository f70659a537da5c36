use af_tensor::{clip_grad_norm, init, Adam, AdamConfig, Checkpoint, CheckpointError, Ema, Graph, LrSchedule, ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SCHEDULE: LrSchedule = LrSchedule {
    base_lr: 1e-3,
    warmup_steps: 10,
    total_steps: 100,
};

#[test]
fn schedule_endpoints() {
    assert_eq!(SCHEDULE.lr(0), 0.0);
    assert_eq!(SCHEDULE.lr(5), 5e-4);
    assert_eq!(SCHEDULE.lr(10), 1e-3);
    assert!(SCHEDULE.lr(100).abs() < 1e-15);
    assert_eq!(SCHEDULE.lr(150), 0.0);
    // Continuous at the junction.
    assert!((SCHEDULE.lr(11) - 1e-3).abs() < 1e-6);
    for s in 11..100 {
        assert!(SCHEDULE.lr(s) <= SCHEDULE.lr(s - 1));
    }
}

#[test]
fn first_step_does_not_move_parameters() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap(), true);
    store.get_mut(id).grad = Tensor::from_f64(&[2], &[0.3, 0.4]).unwrap();
    let mut adam = Adam::new(&store, AdamConfig::default(), SCHEDULE);
    let lr = adam.step(&mut store);
    assert_eq!(lr, 0.0);
    assert_eq!(store.get(id).value.data(), &[1.0, -1.0]);
    assert_eq!(adam.step_count(), 1);
}

#[test]
fn adam_matches_hand_computed_update() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::from_f64(&[1], &[2.0]).unwrap(), true);
    let bias = store.add("b", Tensor::from_f64(&[1], &[2.0]).unwrap(), false);
    let schedule = LrSchedule { base_lr: 0.1, warmup_steps: 0, total_steps: 1000 };
    let cfg = AdamConfig { weight_decay: 0.01, ..AdamConfig::default() };
    let mut adam = Adam::new(&store, cfg, schedule);
    store.get_mut(id).grad = Tensor::from_f64(&[1], &[0.5]).unwrap();
    store.get_mut(bias).grad = Tensor::from_f64(&[1], &[0.5]).unwrap();
    adam.step(&mut store);
    // m_hat = g, v_hat = g^2 on the first step, so the Adam move is lr * g / (|g| + eps).
    let adam_move = 0.1 * 0.5 / (0.5 + 1e-8);
    let decayed = 2.0 - 0.1 * 0.01 * 2.0;
    assert!((store.get(id).value.data()[0] - (decayed - adam_move)).abs() < 1e-12);
    assert!((store.get(bias).value.data()[0] - (2.0 - adam_move)).abs() < 1e-12);
}

#[test]
fn clipping_examples() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", Tensor::zeros(&[2]), true);
    store.get_mut(a).grad = Tensor::from_f64(&[2], &[0.6, 0.8]).unwrap();
    let norm = clip_grad_norm(&mut store, 1.0);
    assert!((norm - 1.0).abs() < 1e-15);
    assert_eq!(store.get(a).grad.data(), &[0.6, 0.8]);

    store.get_mut(a).grad = Tensor::from_f64(&[2], &[1.2, 1.6]).unwrap();
    let norm = clip_grad_norm(&mut store, 1.0);
    assert!((norm - 2.0).abs() < 1e-15);
    let g = store.get(a).grad.data();
    assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
}

#[test]
fn ema_decay_extremes() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", Tensor::from_f64(&[1], &[1.0]).unwrap(), true);
    let mut frozen = Ema::new(&store, 1.0);
    let mut follow = Ema::new(&store, 0.0);
    let mut half = Ema::new(&store, 0.5);
    store.get_mut(a).value = Tensor::from_f64(&[1], &[3.0]).unwrap();
    frozen.update(&store);
    follow.update(&store);
    half.update(&store);
    assert_eq!(frozen.shadow()[0].data(), &[1.0]);
    assert_eq!(follow.shadow()[0].data(), &[3.0]);
    assert_eq!(half.shadow()[0].data(), &[2.0]);
}

fn tiny_run(seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f32>::new();
    let w = store.add("w", init::uniform(&[4, 3], 0.5, &mut rng), true);
    let x = init::uniform::<f32>(&[8, 4], 1.0, &mut rng);
    let y = init::uniform::<f32>(&[8, 3], 1.0, &mut rng);
    let schedule = LrSchedule { base_lr: 0.05, warmup_steps: 3, total_steps: 30 };
    let mut adam = Adam::new(&store, AdamConfig::default(), schedule);
    let mut ema = Ema::new(&store, 0.9);
    let mut losses = Vec::new();
    for _ in 0..30 {
        store.zero_grad();
        let g = Graph::new();
        let pred = g.matmul(g.constant(x.clone()), g.param(&store, w)).unwrap();
        let diff = g.sub(pred, g.constant(y.clone())).unwrap();
        let loss = g.mean(g.square(diff));
        losses.push(g.value(loss).item());
        let grads = g.backward(loss).unwrap();
        store.accumulate(&grads, 1.0);
        clip_grad_norm(&mut store, 1.0);
        adam.step(&mut store);
        ema.update(&store);
    }
    losses
}

#[test]
fn identical_seeds_give_bitwise_identical_losses() {
    let a = tiny_run(11);
    let b = tiny_run(11);
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert!(a.last().unwrap() < a.first().unwrap());
}

#[test]
fn checkpoint_rejects_corruption() {
    let mut ck = Checkpoint::new();
    ck.push("w", Tensor::<f32>::ones(&[2, 3]));
    let bytes = ck.to_bytes().unwrap();
    assert_eq!(&bytes[..4], b"AFCK");
    assert_eq!(bytes.len(), 4 + 4 + 4 + 2 + 1 + 1 + 1 + 8 + 24);
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(CheckpointError::Truncated)));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic(_))));
    let mut bad_dtype = bytes;
    bad_dtype[4 + 4 + 4 + 2 + 1] = 9;
    assert!(matches!(Checkpoint::from_bytes(&bad_dtype), Err(CheckpointError::DType(9))));
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.afck");
    let mut ck = Checkpoint::new();
    ck.push("a", Tensor::<f32>::from_f64(&[2], &[1.5, -2.0]).unwrap());
    ck.push("ema.a", Tensor::<f64>::from_f64(&[1, 1], &[0.25]).unwrap());
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.get_as::<f64>("ema.a").unwrap().data(), &[0.25]);
    assert!(back.get_as::<f64>("a").is_err());
    let ema: Vec<_> = back.with_prefix::<f64>("ema.").collect();
    assert_eq!(ema.len(), 1);
    assert_eq!(ema[0].0, "a");
}

proptest! {
    #[test]
    fn checkpoint_bytes_round_trip(
        dims in prop::collection::vec(0usize..4, 0..4),
        name in "[a-z.]{1,12}",
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ck = Checkpoint::new();
        ck.push(name.clone(), init::uniform::<f32>(&dims, 3.0, &mut rng));
        ck.push(format!("ema.{name}"), init::uniform::<f64>(&dims, 3.0, &mut rng));
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back, ck);
    }
}
