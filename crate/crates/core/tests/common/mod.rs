#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfsim::nn::{arch, train_sgd, Dataset, Model, TrainConfig};
use rfsim::numerics::Tensor;

pub const FEATURES: usize = 32;
pub const CLASSES: usize = 10;

/// Ten noisy prototypes in 32 dimensions; one dataset per seed.
pub fn clusters(n: usize, seed: u64) -> Dataset {
    let mut proto_rng = ChaCha8Rng::seed_from_u64(1234);
    let protos: Vec<Vec<f32>> = (0..CLASSES)
        .map(|_| {
            (0..FEATURES)
                .map(|_| proto_rng.gen_range(-1.0..1.0))
                .collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n * FEATURES);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % CLASSES;
        ys.push(c as u8);
        xs.extend(protos[c].iter().map(|&p| p + rng.gen_range(-0.6..0.6)));
    }
    Dataset::new(Tensor::new(vec![n, FEATURES], xs).unwrap(), ys, CLASSES).unwrap()
}

pub fn train_set() -> Dataset {
    clusters(2000, 1)
}

pub fn test_set() -> Dataset {
    clusters(500, 2)
}

/// 32-24-10 ReLU network trained on `train_set`.
pub fn trained_model() -> Model {
    let init = arch::mlp(&[FEATURES, 24, CLASSES], 5).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        lr: 0.05,
        ..TrainConfig::default()
    };
    train_sgd(&init, &train_set(), &cfg).unwrap()
}
