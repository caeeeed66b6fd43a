use loopseg_model::ops;
use loopseg_model::{build_network, NetworkConfig, Tape, TrainConfig, TrainInstance, TrainSample, Trainer};
use loopseg_core::{BBox, Bitmap};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn square_sample(seed: u64) -> TrainSample {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let s = r.random_range(14..28u32);
    let x0 = r.random_range(0..64 - s);
    let y0 = r.random_range(0..64 - s);
    let mask = Bitmap::from_fn(64, 64, |x, y| x >= x0 && x < x0 + s && y >= y0 && y < y0 + s);
    let image = ArrayD::from_shape_fn(IxDyn(&[3, 64, 64]), |i| {
        let inside = mask.get(i[2] as u32, i[1] as u32);
        if inside { 1.0 } else { -0.5 }
    });
    TrainSample {
        image,
        instances: vec![TrainInstance {
            bbox: BBox::new(x0 as f64, y0 as f64, (x0 + s) as f64, (y0 + s) as f64),
            mask,
            class_id: 0,
        }],
    }
}

#[test]
fn loss_decreases_on_toy_squares() {
    let mut net = build_network(&NetworkConfig::tiny(), 3).unwrap();
    let data: Vec<TrainSample> = (0..4).map(square_sample).collect();
    let cfg = TrainConfig {
        epochs: 40,
        batch_size: 4,
        lr0: 0.1,
        warmup_epochs: 2,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(cfg);
    let before = trainer.evaluate(&net, &data).unwrap();
    let history = trainer.fit(&mut net, &data).unwrap();
    let after = trainer.evaluate(&net, &data).unwrap();
    println!("before {before:?}\nafter {after:?}\nhistory {history:?}");
    assert!(after.total < 0.8 * before.total, "{before:?} -> {after:?}");
    assert!(history.iter().all(|v| v.is_finite()));
}

#[test]
fn training_is_deterministic() {
    let data: Vec<TrainSample> = (0..2).map(square_sample).collect();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 2,
        lr0: 0.01,
        ..TrainConfig::default()
    };
    let run = || {
        let mut net = build_network(&NetworkConfig::tiny(), 5).unwrap();
        Trainer::new(cfg.clone()).fit(&mut net, &data).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn schedule_warms_up_then_decays() {
    let cfg = TrainConfig::default();
    let (lr0, m0) = cfg.schedule(0);
    let (lr3, m3) = cfg.schedule(3);
    let (last, _) = cfg.schedule(cfg.epochs - 1);
    assert!(lr0 < lr3 && m0 < m3);
    assert!((lr3 - 1e-3).abs() < 1e-12 && m3 == 0.937);
    assert!(last < lr3 && last >= 1e-5);
}

#[test]
fn dfl_loss_gradient_matches_central_differences() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let x = ArrayD::from_shape_simple_fn(IxDyn(&[1, 12, 2, 2]), || r.random_range(-1.0..1.0));
    let targets = vec![(0, 1, 0, [0.3, 1.7, 2.2, 0.0]), (0, 0, 1, [1.0, 2.5, 0.9, 1.1])];
    let f = |x: &ArrayD<f64>| {
        let mut t = Tape::inference();
        let v = t.input(x.clone());
        let l = ops::dfl_loss(&mut t, v, targets.clone());
        t.value(l)[[0]]
    };
    let mut tape = Tape::new();
    let v = tape.input(x.clone());
    let l = ops::dfl_loss(&mut tape, v, targets.clone());
    let g = tape.backward(l).of(v).unwrap().clone();
    for i in 0..x.len() {
        let mut up = x.clone();
        up.as_slice_mut().unwrap()[i] += 1e-4;
        let mut down = x.clone();
        down.as_slice_mut().unwrap()[i] -= 1e-4;
        let n = (f(&up) - f(&down)) / 2e-4;
        assert!((n - g.as_slice().unwrap()[i]).abs() < 1e-7);
    }
}
