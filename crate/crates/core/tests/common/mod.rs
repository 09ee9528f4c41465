#![allow(dead_code)]

pub mod gradcheck;

use std::path::PathBuf;

use tracer_core::data::synthetic::two_blobs;
use tracer_core::data::{load_idx, LabeledDataset};
use tracer_core::nn::{train_classifier, ModelBuilder, TappedModel, TrainConfig};

pub fn digits_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/digits8x8")
}

/// The 1797-sample 8×8 digits set, split 80/20 with a fixed seed.
pub fn digits_split() -> (LabeledDataset, LabeledDataset) {
    let dir = digits_dir();
    let ds = load_idx(
        &dir.join("images.idx3-ubyte"),
        &dir.join("labels.idx1-ubyte"),
    )
    .expect("digits fixture present");
    ds.split(0.8, 7)
}

pub fn digits_conv_net(seed: u64) -> TappedModel {
    ModelBuilder::new(&[1, 8, 8], seed)
        .conv(8, 3, 1, 1)
        .relu()
        .maxpool(2)
        .flatten()
        .dense(32)
        .relu()
        .dense(10)
        .softmax()
        .build()
        .unwrap()
}

/// Flatten, four dense(64)+relu blocks and a softmax head; five tap points.
pub fn digits_mlp(seed: u64) -> TappedModel {
    let mut b = ModelBuilder::new(&[1, 8, 8], seed).flatten();
    for _ in 0..4 {
        b = b.dense(64).relu();
    }
    b.dense(10).softmax().build().unwrap()
}

/// `digits_mlp` trained for 30 epochs on the training split.
pub fn trained_digits_mlp(train: &LabeledDataset) -> TappedModel {
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 16,
        learning_rate: 1e-3,
        seed: 0,
    };
    train_classifier(&digits_mlp(0), train, &cfg).unwrap().model
}

/// Two 2-D gaussian classes, split 75/25.
pub fn blobs_split() -> (LabeledDataset, LabeledDataset) {
    two_blobs(200, 3).split(0.75, 1)
}

pub fn trained_blobs_classifier(train: &LabeledDataset) -> TappedModel {
    let init = ModelBuilder::new(train.sample_shape(), 0)
        .dense(16)
        .relu()
        .dense(2)
        .softmax()
        .build()
        .unwrap();
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 16,
        learning_rate: 1e-3,
        seed: 0,
    };
    train_classifier(&init, train, &cfg).unwrap().model
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}
